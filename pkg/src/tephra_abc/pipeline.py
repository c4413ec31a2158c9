"""Pipeline stages: generate, train, evaluate, observe, infer, ppc.

Each stage reads its inputs from and writes its outputs to one run
directory. Stage seeds are hashes of (master seed, stage name), and every
stage writes a manifest holding the hash of the config sections that define
the training data. Downstream stages refuse inputs whose hash differs from
the current config.
"""

from __future__ import annotations

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import io
from .abc import (
    ABCConfig,
    Generation,
    apmcabc,
    bayes_estimate,
    credible_box,
    posterior_correlation,
    posterior_predictive_check,
)
from .config import RunConfig
from .distances import LearnedDistance, NotPSDError
from .external import ExternalSimulator, ExternalSimulatorConfig
from .kl import GibbsSpec, KLReport, ParameterOracle, loo_evaluate, quantile_sweep, select_best, write_reports
from .metric_learning import (
    DegenerateSimilarity,
    SDMLConfig,
    SDMLDivergence,
    TrainingSet,
    build_similarity,
    make_split,
    train_contrastive,
    train_sdml,
    train_summary_stats,
    train_triplet,
)
from .model import PriorBox, SimulatorConfig, SurrogateSimulator, default_locations
from .nn import NonFiniteError, SGDConfig
from .scheduler import TeamPool, TeamRunner, WorkItem, make_teams
from .seeding import derive_seed, make_rng, stage_seed

log = logging.getLogger(__name__)

MAX_FAILURE_FRACTION = 0.01

DEFAULT_SGD = {"contrastive": (400, 32), "triplet": (800, 16), "summary_stats": (400, 2)}


class StageError(RuntimeError):
    """Runtime failure of a stage (exit code 3)."""


class HashMismatch(StageError):
    pass


@dataclass
class StageResult:
    files: list[Path]
    info: dict


def build_prior(cfg: RunConfig) -> PriorBox:
    return PriorBox(tuple(cfg["prior"]["lower"]), tuple(cfg["prior"]["upper"]))


def build_simulator(cfg: RunConfig):
    s = cfg["simulator"]
    if s["kind"] == "external":
        return ExternalSimulator(ExternalSimulatorConfig(command=list(s["command"]), timeout=s["timeout"]))
    sc = SimulatorConfig(t0=s["t0"], n0=s["n0"], d_a=s["d_a"], d_p=s["d_p"], noise_scale=s["noise_scale"])
    return SurrogateSimulator(sc, default_locations())


@contextmanager
def team_runner(cfg: RunConfig, simulator):
    p = cfg["parallel"]
    runner = TeamRunner(simulator, make_teams(p["teams"], p["workers_per_team"]), timeout=p["timeout"] or None)
    try:
        yield runner
    finally:
        runner.close()


def result_sections(cfg: RunConfig) -> list[str]:
    """Config sections that can change results; execution settings are left out."""
    return sorted(k for k in cfg.data if k != "parallel")


def _manifest(out: Path, stage: str, cfg: RunConfig, seeds: dict, files: Sequence[Path]) -> Path:
    path = out / f"{stage}_manifest.json"
    io.write_manifest(path, stage, cfg.fingerprint(result_sections(cfg)), cfg.data_hash, seeds, files)
    return path


def check_data_hash(found: str | None, cfg: RunConfig, what: str) -> None:
    if found is not None and found != cfg.data_hash:
        raise HashMismatch(
            f"{what} was produced under a different config (data hash {found[:12]} vs {cfg.data_hash[:12]}); "
            "rerun the upstream stages with this config"
        )


def load_training_set(cfg: RunConfig, out: Path) -> TrainingSet:
    out = Path(out)
    man = out / "generate_manifest.json"
    if not man.exists():
        raise StageError(f"{man} not found; run 'generate' first")
    check_data_hash(io.read_manifest(man)["data_hash"], cfg, "the training set")
    thetas, xs = io.read_training_set(out / "training.jsonl")
    train, test = io.read_split(out / "split.json")
    return TrainingSet(thetas, xs, train, test)


# -- generate -----------------------------------------------------------------


def generate(cfg: RunConfig, out) -> StageResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seed = stage_seed(cfg.seed, "generate")
    n = cfg["training"]["n"]
    thetas = build_prior(cfg).sample(make_rng(seed, "prior"), n)
    items = [WorkItem(i, thetas[i], derive_seed(seed, "sim", i)) for i in range(n)]
    sim = build_simulator(cfg)
    p = cfg["parallel"]
    with TeamPool(sim, make_teams(p["teams"], p["workers_per_team"]), timeout=p["timeout"] or None) as pool:
        results = pool.run(items)
    failed = [r for r in results if not r.ok]
    if len(failed) > MAX_FAILURE_FRACTION * n:
        lines = "; ".join(f"item {r.item_id}: {r.failure['kind']} {r.failure['message']}" for r in failed[:5])
        raise StageError(f"{len(failed)} of {n} simulations failed ({lines})")
    ok = [r.item_id for r in results if r.ok]
    xs = np.array([results[i].loads for i in ok])
    train, test = make_split(len(ok), cfg["training"]["train_fraction"], seed)
    files = [out / "training.jsonl", out / "split.json"]
    io.write_training_set(files[0], thetas[ok], xs)
    io.write_split(files[1], train, test)
    man = _manifest(out, "generate", cfg, {"generate": seed}, files)
    return StageResult(files + [man], {"n": len(ok), "failed": [r.item_id for r in failed]})


# -- train --------------------------------------------------------------------


def _sgd(cfg: RunConfig, technique: str, seed: int) -> SGDConfig:
    m = cfg["metric"]
    epochs, batch = DEFAULT_SGD[technique]
    return SGDConfig(
        learning_rate=m["learning_rate"],
        momentum=m["momentum"],
        epochs=m["epochs"] or epochs,
        batch_size=m["batch_size"] or batch,
        seed=seed,
    )


def train_technique(cfg: RunConfig, ts: TrainingSet, technique: str, quantile: float, seed: int):
    """Fit one technique; returns ``(LearnedDistance, trace)``."""
    labels = None
    if technique in ("sdml", "contrastive", "triplet"):
        labels = build_similarity(ts.subset("train")[0], quantile)
    if technique == "euclidean":
        return LearnedDistance.euclidean(ts.datasets.shape[1]), []
    if technique == "sdml":
        m = cfg["metric"]
        m0 = np.eye(ts.datasets.shape[1]) if m["sdml_m0"] == "identity" else None
        sdml = SDMLConfig(m0=m0, eta=m["sdml_eta"], lam=m["sdml_lambda"], pair_scaling=m["sdml_pair_scaling"])
        res = train_sdml(ts, labels, sdml)
    elif technique == "contrastive":
        res = train_contrastive(ts, labels, sgd=_sgd(cfg, technique, seed))
    elif technique == "triplet":
        res = train_triplet(ts, labels, sgd=_sgd(cfg, technique, seed))
    elif technique == "summary_stats":
        res = train_summary_stats(ts, sgd=_sgd(cfg, technique, seed))
    else:
        raise StageError(f"unknown technique {technique!r}")
    return res.distance, res.trace


def artifact_name(technique: str, quantile: float) -> str:
    return f"distance_{technique}_q{quantile:g}.json"


def train(cfg: RunConfig, out, technique: str | None = None, quantile: float | None = None) -> StageResult:
    out = Path(out)
    technique = technique or cfg["metric"]["technique"]
    quantile = cfg["metric"]["quantile"] if quantile is None else quantile
    ts = load_training_set(cfg, out)
    seed = stage_seed(cfg.seed, "train")
    if technique == "oracle":
        path = out / artifact_name(technique, quantile)
        io.write_json(path, {"variant": "oracle", "meta": {"technique": "oracle", "quantile": quantile, "data_hash": cfg.data_hash}})
        man = _manifest(out, f"train_oracle_q{quantile:g}", cfg, {}, [path])
        return StageResult([path, man], {"technique": technique, "quantile": quantile})
    try:
        dist, trace = train_technique(cfg, ts, technique, quantile, seed)
    except DegenerateSimilarity as exc:
        raise StageError(f"{exc}; choose a lower quantile") from exc
    except SDMLDivergence as exc:
        raise StageError(f"{exc}; try a different quantile or a larger sdml_lambda") from exc
    except NonFiniteError as exc:
        raise StageError(f"{exc}; try a smaller learning rate") from exc
    meta = dict(dist.meta, technique=technique, quantile=quantile, data_hash=cfg.data_hash)
    dist = LearnedDistance(dist.variant, dist.matrix, dist.network, dist.dim, meta)
    path = out / artifact_name(technique, quantile)
    trace_path = out / f"trace_{technique}_q{quantile:g}.csv"
    io.write_json(path, dist.to_json())
    io.write_trace(trace_path, trace)
    man = _manifest(out, f"train_{technique}_q{quantile:g}", cfg, {"train": seed}, [path, trace_path])
    return StageResult([path, trace_path, man], {"technique": technique, "quantile": quantile})


# -- evaluate -----------------------------------------------------------------


def load_artifact(path):
    """Distance artifact, or :class:`ParameterOracle` for ``{"variant": "oracle"}``."""
    obj = io.read_json(path)
    if obj.get("variant") == "oracle":
        oracle = ParameterOracle()
        oracle.meta = obj.get("meta", {})
        return oracle
    try:
        return LearnedDistance.from_json(obj)
    except (ValueError, NotPSDError) as exc:
        raise io.ArtifactError(f"{path}: {exc}") from exc


def evaluate(cfg: RunConfig, out, artifacts: Sequence = ()) -> StageResult:
    """KL report for the given artifacts, or the full technique x quantile sweep without any."""
    out = Path(out)
    ts = load_training_set(cfg, out)
    spec = GibbsSpec(beta=cfg["kl"]["beta"], scaling=cfg["kl"]["scaling"])
    failures: list[dict] = []
    if artifacts:
        reports: list[KLReport] = []
        for path in artifacts:
            try:
                d = load_artifact(path)
                meta = getattr(d, "meta", {}) or {}
                check_data_hash(meta.get("data_hash"), cfg, str(path))
                technique = meta.get("technique", getattr(d, "variant", "custom"))
                reports.append(loo_evaluate(ts, d, spec, technique=technique, quantile=meta.get("quantile", math.nan)))
            except (io.ArtifactError, StageError, ValueError) as exc:
                failures.append({"artifact": str(path), "reason": str(exc)})
        best = select_best(reports)
    else:
        seed = stage_seed(cfg.seed, "train")

        def trainer(name, ts_, labels):
            return train_technique(cfg, ts_, name, labels.quantile, seed)[0]

        sweep = quantile_sweep(ts, cfg["kl"]["techniques"], cfg["kl"]["quantiles"], spec, train=trainer)
        reports, best = sweep.reports, sweep.best
        failures = [{"artifact": f"{m['technique']}@{m['quantile']}", "reason": m["reason"]} for m in sweep.missing]
    if not reports:
        raise StageError("no artifact could be evaluated: " + "; ".join(f["reason"] for f in failures))
    files = [out / "kl_report.csv", out / "kl_summary.json"]
    write_reports(reports, files[0], files[1], best)
    summary = io.read_json(files[1])
    summary["failures"] = failures
    io.write_json(files[1], summary)
    man = _manifest(out, "evaluate", cfg, {}, files)
    return StageResult(files + [man], {"best": best, "failures": failures})


# -- observe / infer / ppc ----------------------------------------------------


def observe(cfg: RunConfig, out, theta: Sequence[float] | None = None) -> StageResult:
    """Simulate a synthetic observation at ``theta`` (default ``observation.theta``)."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    theta = np.asarray(cfg["observation"]["theta"] if theta is None else theta, dtype=float)
    seed = stage_seed(cfg.seed, "observe")
    sim = build_simulator(cfg)
    loads = np.asarray(sim(theta, seed), dtype=float)
    path = out / "observation.json"
    io.write_observation(path, loads, default_locations().ids, theta)
    man = _manifest(out, "observe", cfg, {"observe": seed}, [path])
    return StageResult([path, man], {"theta": theta.tolist()})


def _observation_path(cfg: RunConfig, out: Path, observation) -> Path:
    if observation is not None:
        return Path(observation)
    configured = cfg.observation_path()
    if configured is not None:
        return configured
    return out / "observation.json"


def infer(cfg: RunConfig, out, artifact, observation=None) -> StageResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    obs_path = _observation_path(cfg, out, observation)
    if not obs_path.exists():
        raise StageError(f"observation file {obs_path} not found; run 'observe' or set observation.file")
    obs = io.read_observation(obs_path)
    d = load_artifact(artifact)
    if isinstance(d, ParameterOracle):
        raise StageError("the oracle artifact needs the true parameters and cannot drive inference")
    check_data_hash((d.meta or {}).get("data_hash"), cfg, str(artifact))
    a = cfg["abc"]
    seed = stage_seed(cfg.seed, "infer")
    abc_cfg = ABCConfig(a["n_sample"], a["n_step"], a["acc_cutoff"], a["keep_fraction"], a["kernel_scale"], seed)
    sim = build_simulator(cfg)
    with team_runner(cfg, sim) as runner:
        run = apmcabc(runner, build_prior(cfg), d, obs["loads"], abc_cfg)
    final = run.final
    est = bayes_estimate(final)
    try:
        corr = posterior_correlation(final)
    except ValueError as exc:
        corr = None
        run.diagnostics.append(f"posterior correlation: {exc}")
    lo, hi = credible_box(final)
    files = [out / "posterior_samples.csv", out / "generations.json", out / "estimate.json"]
    io.write_posterior_samples(files[0], run.generations)
    io.write_json(
        files[1],
        {
            "termination": run.termination,
            "diagnostics": run.diagnostics,
            "generations": [g.to_json() for g in run.generations],
        },
    )
    io.write_json(
        files[2],
        {
            "bayes_estimate": est.tolist(),
            "posterior_correlation": corr,
            "central_95_box": {"lower": lo.tolist(), "upper": hi.tolist()},
            "termination": run.termination,
            "n_generations": len(run.generations),
        },
    )
    man = _manifest(out, "infer", cfg, {"infer": seed}, files)
    return StageResult(files + [man], {"termination": run.termination, "estimate": est.tolist()})


def ppc(cfg: RunConfig, out, observation=None) -> StageResult:
    out = Path(out)
    man = out / "infer_manifest.json"
    if not man.exists():
        raise StageError(f"{man} not found; run 'infer' first")
    check_data_hash(io.read_manifest(man)["data_hash"], cfg, "the posterior samples")
    thetas, weights, _ = io.read_posterior_samples(out / "posterior_samples.csv")
    obs = io.read_observation(_observation_path(cfg, out, observation))
    seed = stage_seed(cfg.seed, "ppc")
    gen = Generation(-1, thetas, weights, np.zeros(len(thetas)), math.inf, math.nan)
    summary = posterior_predictive_check(gen, build_simulator(cfg), obs["loads"], cfg["ppc"]["n_draws"], seed, obs["location_ids"])
    path = out / "ppc.csv"
    io.write_ppc(path, summary)
    files = [path]
    if summary.failures:
        fpath = out / "ppc_failures.json"
        io.write_json(fpath, summary.failures)
        files.append(fpath)
    m = _manifest(out, "ppc", cfg, {"ppc": seed}, files)
    inside = float(np.mean(summary.within_whiskers()))
    return StageResult(files + [m], {"within_whiskers": inside, "n_success": summary.n_success})

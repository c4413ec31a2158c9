"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the verdicts as
they happen; a normal run lists them in the terminal summary.
"""

import json
import math
import os
import time

import numpy as np
import pytest
from gradcheck import contrastive_adjoint, max_relative_error, mse_adjoint, numeric_gradient, triplet_adjoint

from tephra_abc import pipeline
from tephra_abc.abc import ABCConfig, apmcabc, rejection_abc
from tephra_abc.cli import run as cli_run
from tephra_abc.config import default_config
from tephra_abc.distances import LearnedDistance, cholesky_factor
from tephra_abc.kl import GibbsSpec, estimate_kl, loo_evaluate
from tephra_abc.metric_learning import TrainingSet
from tephra_abc.model import THETA_STAR, NormalPrior, PriorBox, SimulatorConfig, SurrogateSimulator, default_locations
from tephra_abc.nn import Network, gradient, init_network
from tephra_abc.scheduler import WorkItem, make_teams, run_batch
from tephra_abc.seeding import derive_seed, make_rng

VERDICTS: dict[int, str] = {}

PRIOR = PriorBox((100.0, 30.0), (300.0, 100.0))
SIM = SurrogateSimulator(SimulatorConfig(noise_scale=0.1), default_locations())
MASTER_SEEDS = range(5)


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------- 1


def test_criterion_01_gradients():
    t0 = time.monotonic()
    worst = 0.0
    for seed in range(3):
        rng = make_rng(seed, "c1")
        net = init_network([5, 6, 4, 3], seed)
        net = Network.from_params([p + 0.1 * rng.normal(size=p.shape) for p in net.params()])
        cases = [
            (contrastive_adjoint(np.array([1.0, 0.0, 1.0, 0.0])), rng.normal(size=(8, 5))),
            (triplet_adjoint(4, margin=5.0), rng.normal(size=(12, 5))),
            (mse_adjoint(rng.normal(size=(6, 3))), rng.normal(size=(6, 5))),
        ]
        for adj, x in cases:
            _, analytic = gradient(net, adj, x)
            worst = max(worst, max_relative_error(analytic, numeric_gradient(net, adj, x)))
    elapsed = time.monotonic() - t0
    verdict(1, worst < 1e-4 and elapsed < 60, f"max relative error {worst:.2e}, {elapsed:.1f} s")


# ---------------------------------------------------------------- 2


def test_criterion_02_metric_axioms():
    dim = 6
    rng = make_rng(0, "c2")
    a = rng.normal(size=(dim, dim))
    variants = [
        LearnedDistance.euclidean(dim),
        LearnedDistance.mahalanobis(a.T @ a),
        LearnedDistance.embedding(init_network([dim, 5, 3], 0)),
        LearnedDistance.summary_stats(init_network([dim, 4, 2], 1)),
    ]
    bad = 0
    for d in variants:
        xs = rng.normal(size=(10_000, 3, dim)) * rng.uniform(0.1, 10, size=(10_000, 1, 1))
        for x, y, z in xs:
            xy, yx, xz, yz = d(x, y), d(y, x), d(x, z), d(y, z)
            bad += not (xy >= 0 and xy == yx and xz <= xy + yz + 1e-9)
    worst = 0.0
    for k in range(1000):
        r = make_rng(k, "c2chol")
        m = r.normal(size=(dim, dim))
        m = m.T @ m
        x1, x2 = r.normal(size=dim), r.normal(size=dim)
        ref = math.sqrt((x1 - x2) @ m @ (x1 - x2))
        via_l = np.linalg.norm(cholesky_factor(m) @ (x1 - x2))
        worst = max(worst, abs(via_l - ref) / ref, abs(LearnedDistance.mahalanobis(m)(x1, x2) - ref) / ref)
    verdict(2, bad == 0 and worst < 1e-10, f"{bad} violations in 4 x 10^4 triples, Cholesky rel. error {worst:.1e}")


# ---------------------------------------------------------------- 3


def test_criterion_03_kl_estimator():
    rng = make_rng(0, "c3")
    d = rng.uniform(size=50)
    identical = estimate_kl(d, d, np.ones(50)) == 0.0

    d5, t5, q5 = rng.uniform(size=5), rng.uniform(size=5), rng.uniform(0.5, 2, size=5)
    pt = [math.exp(-v * v) for v in d5]
    ps = [math.exp(-v * v) for v in t5]
    z = sum(p / q for p, q in zip(pt, q5)) / 5
    zs = sum(p / q for p, q in zip(ps, q5)) / 5
    r = [p / q for p, q in zip(pt, q5)]
    brute = sum(ri / sum(r) * math.log((pt[i] / z) / (ps[i] / zs)) for i, ri in enumerate(r))
    err5 = abs(estimate_kl(d5, t5, q5, GibbsSpec()) - brute)

    thetas = rng.uniform(size=(20, 2))
    xs = np.c_[thetas + 0.2 * rng.normal(size=(20, 2)), rng.normal(size=(20, 3))]
    ts = TrainingSet(thetas, xs, np.array([], dtype=int), np.arange(20))
    m = np.diag([2.0, 1.0, 0.5, 0.3, 0.1])
    base = loo_evaluate(ts, LearnedDistance.mahalanobis(m)).estimates
    # powers of two scale exactly in floating point; other factors round once per step
    exact = all(loo_evaluate(ts, LearnedDistance.mahalanobis(c * m)).estimates == base for c in (4.0, 0.25, 1024.0))
    rel = max(
        np.max(np.abs(np.array(loo_evaluate(ts, LearnedDistance.mahalanobis(c * m)).estimates) - base) / np.abs(base))
        for c in (3.7, 1e-3, 55.0)
    )
    ok = identical and err5 < 1e-12 and exact and rel < 1e-12
    verdict(3, ok, f"identical->0: {identical}, 5-point error {err5:.1e}, bitwise scale invariance: {exact}, general {rel:.1e}")


# ---------------------------------------------------------------- 4


def _toy(theta, seed):
    return np.asarray(theta)[:1] + 0.1 * make_rng(seed, "toy").standard_normal(1)


def test_criterion_04_conjugate_gaussian():
    t0 = time.monotonic()
    prior, x0 = NormalPrior((0.0,), (1.0,)), np.array([0.5])
    mean, var = 0.5 * 100 / 101, 1 / 101
    d = LearnedDistance.euclidean(1)
    rej = rejection_abc(_toy, prior, d, x0, 0.01, 60_000, 0)
    t = np.array([p.theta[0] for p in rej])
    z_rej = (t.mean() - mean) / math.sqrt(var / len(t))
    v_rej = t.var() / var
    g = apmcabc(_toy, prior, d, x0, ABCConfig(n_sample=500, n_step=12, seed=0)).final
    w = g.weights
    m_apmc = w @ g.thetas[:, 0]
    ess = 1 / np.sum(w**2)
    z_apmc = (m_apmc - mean) / math.sqrt(var / ess)
    v_apmc = (w @ (g.thetas[:, 0] - m_apmc) ** 2) / var
    elapsed = time.monotonic() - t0
    ok = abs(z_rej) < 3 and abs(z_apmc) < 3 and abs(v_rej - 1) < 0.25 and abs(v_apmc - 1) < 0.25 and elapsed < 120
    verdict(
        4,
        ok,
        f"rejection z={z_rej:+.2f} var ratio {v_rej:.2f} ({len(t)} kept); "
        f"APMC z={z_apmc:+.2f} var ratio {v_apmc:.2f}; {elapsed:.1f} s",
    )


# ---------------------------------------------------------------- 5


def test_criterion_05_apmc_structure():
    simulated = []

    def recording(theta, seed):
        simulated.append(np.array(theta))
        return SIM(theta, seed)

    problems = []
    terminations = []
    for seed in range(5):
        x0 = SIM(THETA_STAR, 10_000 + seed)
        cfg = ABCConfig(n_sample=100, n_step=40, acc_cutoff=0.03, seed=seed)
        res = apmcabc(recording, PRIOR, LearnedDistance.euclidean(72), x0, cfg)
        terminations.append(res.termination)
        gammas = [g.gamma for g in res.generations]
        if not all(b < a for a, b in zip(gammas, gammas[1:])):
            problems.append(f"seed {seed}: gamma not strictly decreasing")
        if any(abs(g.weights.sum() - 1) > 1e-12 for g in res.generations):
            problems.append(f"seed {seed}: weights not normalized")
        accs = [g.acceptance_rate for g in res.generations[1:]]
        if res.termination == "acc_cutoff":
            if not (accs[-1] < 0.03 and all(a >= 0.03 for a in accs[:-1])):
                problems.append(f"seed {seed}: stopped without crossing the cutoff")
        elif any(a < 0.03 for a in accs):
            problems.append(f"seed {seed}: ran past an acceptance rate below the cutoff")
    outside = int(np.sum(~PRIOR.contains(np.array(simulated))))
    if outside:
        problems.append(f"{outside} simulated particles outside the prior box")
    if "acc_cutoff" not in terminations:
        problems.append("cutoff never triggered")
    verdict(5, not problems, "; ".join(problems) or f"{len(simulated)} particles in box, terminations {terminations}")


# ---------------------------------------------------------------- 6


def test_criterion_06_parallel_equivalence(tmp_path):
    thetas = PRIOR.sample(make_rng(0, "c6"), 60)
    items = [WorkItem(i, t, derive_seed(0, "c6", i)) for i, t in enumerate(thetas)]
    one = run_batch(items, make_teams(1), SIM)
    four = run_batch(items, make_teams(4), SIM)
    bitwise = all(a.loads.tobytes() == b.loads.tobytes() for a, b in zip(one, four))

    def crashy(theta, seed):
        marker = tmp_path / f"{seed}.hit"
        if make_rng(seed, "kill").random() < 0.1 and not marker.exists():
            marker.touch()
            os._exit(9)
        return SIM(theta, seed)

    faulty = run_batch(items, make_teams(4), crashy)
    kills = len(list(tmp_path.glob("*.hit")))
    ids = [r.item_id for r in faulty]
    correct = all(r.ok and r.loads.tobytes() == a.loads.tobytes() for r, a in zip(faulty, one))
    unique = ids == sorted(set(ids)) == list(range(60))
    ok = bitwise and correct and unique and kills > 0
    verdict(6, ok, f"1 vs 4 teams bitwise: {bitwise}; {kills} team kills, results correct: {correct}, duplicate-free: {unique}")


# ---------------------------------------------------------------- 7, 8, 9


@pytest.fixture(scope="module")
def headline(tmp_path_factory):
    """Per master seed: generate, train at q = 0.6, evaluate, observe at theta*, infer with triplet, PPC."""
    runs = {}
    for seed in MASTER_SEEDS:
        cfg = default_config().with_overrides(seed=seed)
        out = tmp_path_factory.mktemp(f"seed{seed}")
        pipeline.generate(cfg, out)
        arts = {t: pipeline.train(cfg, out, t, 0.6).files[0] for t in ("euclidean", "contrastive", "triplet")}
        pipeline.evaluate(cfg, out, list(arts.values()))
        medians = {r["technique"]: r["median"] for r in json.loads((out / "kl_summary.json").read_text())["reports"]}
        pipeline.observe(cfg, out, THETA_STAR)
        pipeline.infer(cfg, out, arts["triplet"])
        estimate = json.loads((out / "estimate.json").read_text())
        ppc = pipeline.ppc(cfg, out)
        split = json.loads((out / "split.json").read_text())
        runs[seed] = {"medians": medians, "estimate": estimate, "ppc": ppc, "out": out, "split": split}
    return runs


def test_criterion_07_triplet_beats_contrastive_and_euclidean(headline):
    sizes = {(len(r["split"]["train"]), len(r["split"]["test"])) for r in headline.values()}
    avg = {t: float(np.mean([r["medians"][t] for r in headline.values()])) for t in ("triplet", "contrastive", "euclidean")}
    ok = sizes == {(300, 100)} and avg["triplet"] <= avg["contrastive"] and avg["triplet"] <= avg["euclidean"]
    verdict(
        7,
        ok,
        f"mean median KL over {len(headline)} seeds: triplet {avg['triplet']:.2e}, "
        f"contrastive {avg['contrastive']:.2e}, euclidean {avg['euclidean']:.2e}",
    )


def test_criterion_08_posterior_covers_truth(headline):
    truth = np.array(THETA_STAR)
    hits = []
    for seed, r in headline.items():
        est = r["estimate"]
        lo, hi = np.array(est["central_95_box"]["lower"]), np.array(est["central_95_box"]["upper"])
        err = np.linalg.norm(np.array(est["bayes_estimate"]) - truth)
        hits.append(bool(np.all((lo <= truth) & (truth <= hi)) and err < 0.15 * PRIOR.diagonal and est["n_generations"] == 12))
    verdict(8, sum(hits) >= 4, f"{sum(hits)} of {len(hits)} seeds cover theta* with error < 15% of the diagonal")


def test_criterion_09_predictive_check(headline):
    r = headline[0]
    rows = (r["out"] / "ppc.csv").read_text().splitlines()[1:]
    inside = r["ppc"].info["within_whiskers"]
    ok = len(rows) == 72 and r["ppc"].info["n_success"] == 100 and inside >= 0.9
    verdict(9, ok, f"{len(rows)} rows from {r['ppc'].info['n_success']} draws, observation inside whiskers at {inside:.0%}")


# ---------------------------------------------------------------- 10

SMALL = """
seed = 11
[training]
n = 60
[metric]
epochs = 5
[kl]
techniques = ["euclidean", "contrastive", "triplet", "summary_stats"]
quantiles = [0.3, 0.6]
[abc]
n_sample = 30
n_step = 4
[ppc]
n_draws = 20
"""


def _all_stages(cfg_path, out):
    out.mkdir()
    c, o = ["--config", str(cfg_path)], ["--out", str(out)]
    codes = [cli_run(["generate", *c, *o])]
    for tech in ("euclidean", "sdml", "contrastive", "triplet", "summary_stats", "oracle"):
        codes.append(cli_run(["train", *c, *o, "--technique", tech, "--quantile", "0.5"]))
    codes.append(cli_run(["evaluate", *c, *o, *sorted(str(p) for p in out.glob("distance_*.json"))]))
    (out / "artifact_eval").mkdir()
    for name in ("kl_report.csv", "kl_summary.json"):
        (out / name).rename(out / "artifact_eval" / name)
    codes.append(cli_run(["evaluate", *c, *o]))
    codes.append(cli_run(["observe", *c, *o]))
    codes.append(cli_run(["infer", *c, *o, "--artifact", str(out / "distance_triplet_q0.5.json")]))
    codes.append(cli_run(["ppc", *c, *o]))
    return codes


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_10_byte_identical_reruns(tmp_path, capsys):
    cfg = tmp_path / "run.toml"
    cfg.write_text(SMALL)
    a_codes = _all_stages(cfg, tmp_path / "a")
    b_codes = _all_stages(cfg, tmp_path / "b")
    capsys.readouterr()
    a, b = _snapshot(tmp_path / "a"), _snapshot(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = a_codes == b_codes and not differing and a_codes.count(0) >= len(a_codes) - 1
    verdict(10, ok, f"{len(a)} files over {len(a_codes)} stage runs, exit codes {a_codes}, differing: {differing or 'none'}")

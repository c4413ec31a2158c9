"""Comparing learned distances through an importance-sampling KL estimate.

For an observation ``(x0, theta0)`` and reference pairs ``(x_i, theta_i)``
drawn from a proposal ``q``, a distance induces the Gibbs weights
``p~(theta_i) = exp(-beta * d(x_i, x0)**2)``; the true parameter distance
induces ``p~*(theta_i) = exp(-beta * d_E(theta_i, theta0)**2)``. Both
distance families are rescaled to [0, 1] over the reference set first.
``KL(P || P*)`` is then estimated by self-normalized importance sampling.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .distances import LearnedDistance, NotPSDError
from .metric_learning import (
    DegenerateSimilarity,
    SDMLDivergence,
    TrainingSet,
    build_similarity,
    train_contrastive,
    train_sdml,
    train_summary_stats,
    train_triplet,
)
from .nn import SGDConfig

log = logging.getLogger(__name__)


class DegenerateEstimator(ValueError):
    pass


class DegenerateScaling(ValueError):
    pass


@dataclass(frozen=True)
class GibbsSpec:
    beta: float = 1.0
    scaling: str = "max"  # "max": d / max(d); "minmax": (d - min) / (max - min)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if self.scaling not in ("max", "minmax"):
            raise ValueError("scaling must be 'max' or 'minmax'")


def scale_unit(d, mode: str = "max") -> np.ndarray:
    """Rescale non-negative distances to [0, 1]."""
    d = np.asarray(d, dtype=float)
    if mode == "max":
        top = d.max()
        if not top > 0:
            raise DegenerateScaling("all distances are zero")
        return d / top
    lo, hi = d.min(), d.max()
    if not hi > lo:
        raise DegenerateScaling("all distances are equal")
    return (d - lo) / (hi - lo)


def importance_weights(scaled, q_density, beta: float) -> np.ndarray:
    """Self-normalized weights ``(p~/q) / sum(p~/q)``."""
    r = np.exp(-beta * np.asarray(scaled, dtype=float) ** 2) / np.asarray(q_density, dtype=float)
    total = r.sum()
    if not total > 0:
        raise DegenerateEstimator("all importance ratios are zero")
    return r / total


def estimate_kl(learned, true, q_density, spec: GibbsSpec = GibbsSpec()) -> float:
    """Self-normalized importance-sampling estimate of ``KL(P || P*)``.

    ``learned`` and ``true`` are distances to the observation, already
    rescaled to [0, 1]; ``q_density`` is the proposal density at each
    reference parameter.
    """
    d = np.asarray(learned, dtype=float)
    d_true = np.asarray(true, dtype=float)
    q = np.asarray(q_density, dtype=float)
    if not (d.shape == d_true.shape == q.shape) or d.ndim != 1:
        raise ValueError("learned, true and q_density must be 1-D arrays of equal length")
    if len(d) < 1:
        raise ValueError("need at least one reference point")
    if np.any(q <= 0):
        raise ValueError("proposal density must be positive")
    energy = spec.beta * d**2
    energy_true = spec.beta * d_true**2
    ratio = np.exp(-energy) / q
    ratio_true = np.exp(-energy_true) / q
    z_hat = ratio.mean()
    z_true = ratio_true.mean()
    if not (z_hat > 0 and z_true > 0):
        raise DegenerateEstimator("all importance ratios are zero")
    w = ratio / ratio.sum()
    return float(np.sum(w * (math.log(z_true / z_hat) + energy_true - energy)))


@dataclass
class KLReport:
    technique: str
    quantile: float
    observation_ids: list[int] = field(default_factory=list)
    estimates: list[float] = field(default_factory=list)
    skipped: list[int] = field(default_factory=list)

    @property
    def median(self) -> float:
        return float(np.median(self.estimates)) if self.estimates else math.nan

    @property
    def mean(self) -> float:
        return float(np.mean(self.estimates)) if self.estimates else math.nan

    @property
    def std(self) -> float:
        return float(np.std(self.estimates, ddof=1)) if len(self.estimates) > 1 else math.nan

    def summary(self) -> dict:
        return {
            "technique": self.technique,
            "quantile": self.quantile,
            "n": len(self.estimates),
            "median": self.median,
            "mean": self.mean,
            "sd": self.std,
            "skipped": list(self.skipped),
        }


class ParameterOracle:
    """Distance that reads the generating parameters instead of the data.

    Only meaningful for evaluation: it reproduces the true distance exactly
    and therefore has zero estimated KL.
    """

    variant = "oracle"

    def pairwise_from(self, datasets, thetas) -> np.ndarray:
        return cdist(thetas, thetas)


def _pairwise(d, datasets: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    if hasattr(d, "pairwise_from"):
        return np.asarray(d.pairwise_from(datasets, thetas), dtype=float)
    if hasattr(d, "pairwise"):
        return np.asarray(d.pairwise(datasets), dtype=float)
    n = len(datasets)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = d(datasets[i], datasets[j])
    return out


def loo_evaluate(
    ts: TrainingSet,
    d,
    spec: GibbsSpec = GibbsSpec(),
    technique: str = "",
    quantile: float = math.nan,
    q_density: Callable[[np.ndarray], np.ndarray] | None = None,
) -> KLReport:
    """Leave-one-out KL estimates over the test split.

    Each test sample in turn is the observation and the remaining test
    samples are the references. ``q_density`` defaults to a constant (a
    uniform proposal), under which the estimator does not depend on its value.
    """
    if len(ts.test) < 2:
        raise ValueError("test split needs at least two samples")
    thetas, xs = ts.subset("test")
    learned = _pairwise(d, xs, thetas)
    true = cdist(thetas, thetas)
    q = np.ones(len(thetas)) if q_density is None else np.asarray(q_density(thetas), dtype=float)
    report = KLReport(technique or getattr(d, "variant", "custom"), quantile)
    for j, obs_id in enumerate(ts.test.tolist()):
        ref = np.arange(len(thetas)) != j
        try:
            est = estimate_kl(
                scale_unit(learned[j, ref], spec.scaling), scale_unit(true[j, ref], spec.scaling), q[ref], spec
            )
        except (DegenerateScaling, DegenerateEstimator) as exc:
            log.warning("observation %d skipped: %s", obs_id, exc)
            report.skipped.append(obs_id)
            continue
        report.observation_ids.append(obs_id)
        report.estimates.append(est)
    return report


DEEP_TECHNIQUES = ("contrastive", "triplet")


@dataclass
class SweepResult:
    reports: list[KLReport]
    missing: list[dict]
    best: tuple[str, float] | None

    @property
    def best_report(self) -> KLReport | None:
        for r in self.reports:
            if self.best is not None and (r.technique, r.quantile) == self.best:
                return r
        return None


def select_best(reports: Sequence[KLReport]) -> tuple[str, float] | None:
    """(technique, quantile) with the smallest median estimate; ties keep the first."""
    best, best_med = None, math.inf
    for r in reports:
        if r.estimates and r.median < best_med:
            best, best_med = (r.technique, r.quantile), r.median
    return best


def quantile_sweep(
    ts: TrainingSet,
    techniques: Sequence,
    quantiles: Sequence[float],
    spec: GibbsSpec = GibbsSpec(),
    train: Callable | None = None,
) -> SweepResult:
    """Train and evaluate every (technique, quantile) combination.

    ``techniques`` holds technique names (trained through ``train(name, ts,
    labels)``, by default :func:`default_trainer`) or ready-made distance
    objects, which are evaluated as they are at every quantile. Deep
    trainers are skipped at quantiles where some sample is similar to all
    others; trainer failures are recorded as missing.
    """
    if any(not 0 < q < 1 for q in quantiles):
        raise ValueError("quantiles must lie in (0, 1)")
    train = train or default_trainer
    train_thetas, _ = ts.subset("train")
    reports, missing = [], []
    for q in quantiles:
        labels = build_similarity(train_thetas, q)
        for tech in techniques:
            if isinstance(tech, str):
                name = tech
                if name in DEEP_TECHNIQUES and len(labels.saturated):
                    missing.append({"technique": name, "quantile": q, "reason": "some sample similar to all others"})
                    continue
                try:
                    d = train(name, ts, labels)
                except (SDMLDivergence, DegenerateSimilarity, NotPSDError, FloatingPointError) as exc:
                    missing.append({"technique": name, "quantile": q, "reason": str(exc)})
                    continue
            else:
                name, d = getattr(tech, "name", None) or getattr(tech, "variant", "custom"), tech
            reports.append(loo_evaluate(ts, d, spec, technique=name, quantile=q))
    return SweepResult(reports, missing, select_best(reports))


def default_trainer(name: str, ts: TrainingSet, labels, seed: int = 0):
    if name == "euclidean":
        return LearnedDistance.euclidean(ts.datasets.shape[1])
    if name == "sdml":
        return train_sdml(ts, labels).distance
    if name == "contrastive":
        return train_contrastive(ts, labels, sgd=SGDConfig(epochs=400, batch_size=32, seed=seed)).distance
    if name == "triplet":
        return train_triplet(ts, labels, sgd=SGDConfig(epochs=800, batch_size=16, seed=seed)).distance
    if name == "summary_stats":
        return train_summary_stats(ts, sgd=SGDConfig(epochs=400, batch_size=2, seed=seed)).distance
    raise ValueError(f"unknown technique {name!r}")


def write_reports(reports: Sequence[KLReport], csv_path, summary_path=None, best=None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["technique", "quantile", "observation_id", "kl_estimate"])
        for r in reports:
            for oid, est in zip(r.observation_ids, r.estimates):
                w.writerow([r.technique, repr(float(r.quantile)), oid, repr(float(est))])
    if summary_path is not None:
        body = {"reports": [r.summary() for r in reports]}
        if best is not None:
            body["best"] = {"technique": best[0], "quantile": best[1]}
        Path(summary_path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")

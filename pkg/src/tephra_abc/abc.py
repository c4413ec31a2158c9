"""Rejection ABC and adaptive population Monte Carlo ABC (APMC).

Simulations are requested in batches through a *runner*: any callable
``runner(thetas, seeds) -> list of loads`` whose output order matches the
input order. :class:`SerialRunner` runs in-process; the scheduler provides a
runner that spreads a batch over process teams. Every simulation consumes
only its own seed, so both give identical results.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.stats import multivariate_normal

from .seeding import derive_seed, make_rng

log = logging.getLogger(__name__)

Runner = Callable[[np.ndarray, Sequence[int]], list]


class SimulationFailed(RuntimeError):
    def __init__(self, message: str, index: int | None = None, cause: Exception | None = None):
        super().__init__(message)
        self.index = index
        self.cause = cause


class SerialRunner:
    """Runs ``simulator(theta, seed)`` for each theta in order."""

    def __init__(self, simulator):
        self.simulator = simulator

    def __call__(self, thetas, seeds):
        out = []
        for i, (theta, seed) in enumerate(zip(thetas, seeds)):
            try:
                out.append(np.asarray(self.simulator(theta, seed), dtype=float))
            except Exception as exc:
                raise SimulationFailed(f"simulation {i} failed: {exc}", index=i, cause=exc) from exc
        return out


def _as_runner(simulator_or_runner) -> Runner:
    if isinstance(simulator_or_runner, SerialRunner) or getattr(simulator_or_runner, "is_runner", False):
        return simulator_or_runner
    return SerialRunner(simulator_or_runner)


def batch_distances(d, x0, xs: np.ndarray) -> np.ndarray:
    """Distances from every row of ``xs`` to ``x0`` using ``d.distances_to`` when available."""
    if hasattr(d, "distances_to"):
        return np.asarray(d.distances_to(x0, xs), dtype=float)
    return np.array([float(d(x, x0)) for x in xs])


@dataclass
class Particle:
    theta: np.ndarray
    weight: float
    distance: float
    data_hash: str = ""


def _hash_loads(x: np.ndarray) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(x, dtype=float).tobytes()).hexdigest()[:16]


@dataclass
class Generation:
    step: int
    thetas: np.ndarray
    weights: np.ndarray
    distances: np.ndarray
    gamma: float
    acceptance_rate: float
    kernel_cov: np.ndarray | None = None
    hashes: list[str] = field(default_factory=list)

    @property
    def particles(self) -> list[Particle]:
        hashes = self.hashes or [""] * len(self.thetas)
        return [Particle(t, float(w), float(d), h) for t, w, d, h in zip(self.thetas, self.weights, self.distances, hashes)]

    def __len__(self):
        return len(self.thetas)

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "gamma": self.gamma,
            "acceptance_rate": self.acceptance_rate,
            "n_particles": len(self),
            "kernel_cov": None if self.kernel_cov is None else self.kernel_cov.tolist(),
        }


@dataclass(frozen=True)
class ABCConfig:
    n_sample: int = 100
    n_step: int = 12
    acc_cutoff: float = 0.03
    keep_fraction: float = 0.5
    kernel_scale: float = 2.0
    seed: int = 0
    max_redraws: int = 1000

    def __post_init__(self):
        if self.n_sample < 2 or self.n_step < 1:
            raise ValueError("n_sample must be >= 2 and n_step >= 1")
        if not 0 < self.acc_cutoff < 1:
            raise ValueError("acc_cutoff must lie in (0, 1)")
        if not 0 < self.keep_fraction < 1:
            raise ValueError("keep_fraction must lie in (0, 1)")


@dataclass
class ABCRun:
    generations: list[Generation]
    termination: str
    diagnostics: list[str] = field(default_factory=list)

    @property
    def final(self) -> Generation:
        return self.generations[-1]


def rejection_abc(simulator, prior, d, x0, gamma: float, n_draws: int, seed: int) -> list[Particle]:
    """Plain rejection sampler: keep prior draws whose simulation is within ``gamma``."""
    if not gamma > 0:
        if gamma == 0:
            return []
        raise ValueError("gamma must be non-negative")
    runner = _as_runner(simulator)
    thetas = prior.sample(make_rng(seed, "rejection", "prior"), n_draws)
    seeds = [derive_seed(seed, "rejection", i) for i in range(n_draws)]
    xs = np.array(runner(thetas, seeds))
    dist = batch_distances(d, x0, xs)
    keep = np.flatnonzero(dist < gamma)
    if not len(keep):
        log.warning("rejection ABC accepted none of %d draws at gamma=%g", n_draws, gamma)
        return []
    w = 1.0 / len(keep)
    return [Particle(thetas[i], w, float(dist[i]), _hash_loads(xs[i])) for i in keep]


def weighted_cov(thetas: np.ndarray, weights: np.ndarray) -> np.ndarray:
    w = weights / weights.sum()
    mu = w @ thetas
    c = thetas - mu
    denom = 1.0 - np.sum(w**2)
    cov = (c * w[:, None]).T @ c
    return cov / denom if denom > 0 else cov


def _regularize(cov: np.ndarray, diagnostics: list[str]) -> np.ndarray:
    w = np.linalg.eigvalsh(cov)
    if w[0] <= 1e-12 * max(w[-1], 0.0) or w[-1] <= 0:
        bump = 1e-8 * max(np.trace(cov), 1e-300)
        if np.trace(cov) <= 0:
            bump = 1e-8
        msg = f"kernel covariance rank-deficient (min eigenvalue {w[0]:.3e}); adding {bump:.3e} * I"
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
        diagnostics.append(msg)
        cov = cov + bump * np.eye(len(cov))
    return cov


class TruncatedGaussianKernel:
    """Gaussian perturbation truncated to the prior support by redrawing."""

    def __init__(self, cov: np.ndarray, lower: np.ndarray, upper: np.ndarray, prior, max_redraws: int = 1000):
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        self.prior = prior
        self.max_redraws = max_redraws
        self.bounded = bool(np.any(np.isfinite(self.lower)) or np.any(np.isfinite(self.upper)))
        self._mass_cache: dict[bytes, float] = {}

    def inside(self, t: np.ndarray) -> np.ndarray:
        return np.all((t >= self.lower) & (t <= self.upper), axis=-1)

    def draw(self, center: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
        for _ in range(self.max_redraws):
            cand = center + self.chol @ rng.standard_normal(len(center))
            if self.inside(cand):
                return cand, True
        return self.prior.sample(rng, 1)[0], False

    def mass(self, center: np.ndarray) -> float:
        """Probability that the untruncated kernel centered at ``center`` lands inside the box."""
        if not self.bounded:
            return 1.0
        key = center.tobytes()
        if key not in self._mass_cache:
            lo = np.where(np.isfinite(self.lower), self.lower, -np.inf)
            hi = np.where(np.isfinite(self.upper), self.upper, np.inf)
            mvn = multivariate_normal(mean=center, cov=self.cov)
            p = float(mvn.cdf(hi, lower_limit=lo))
            self._mass_cache[key] = max(p, 1e-300)
        return self._mass_cache[key]

    def density(self, thetas: np.ndarray, centers: np.ndarray) -> np.ndarray:
        """``(len(thetas), len(centers))`` matrix of truncated kernel densities."""
        k = len(self.cov)
        inv = np.linalg.inv(self.cov)
        logdet = np.linalg.slogdet(self.cov)[1]
        diff = thetas[:, None, :] - centers[None, :, :]
        quad = np.einsum("ijk,kl,ijl->ij", diff, inv, diff)
        dens = np.exp(-0.5 * quad - 0.5 * logdet - 0.5 * k * math.log(2 * math.pi))
        masses = np.array([self.mass(c) for c in centers])
        inside = self.inside(thetas).astype(float)[:, None]
        return dens / masses[None, :] * inside


def _alpha_quantile(d: np.ndarray, alpha: float) -> float:
    return float(np.quantile(d, alpha))


def apmcabc(simulator, prior, d, x0, cfg: ABCConfig) -> ABCRun:
    """Adaptive population Monte Carlo ABC.

    Step 0 simulates ``n_sample`` prior draws, sets ``gamma_0`` to the
    ``keep_fraction`` quantile of their distances and retains the particles
    below it. Each later step refills the population with perturbed copies of
    retained particles, weights them by ``prior / mixture-kernel``, and lowers
    ``gamma`` to the ``keep_fraction`` quantile of the merged population. The
    run ends after ``n_step`` steps or once the fraction of new particles
    beating the previous ``gamma`` drops below ``acc_cutoff``.
    """
    runner = _as_runner(simulator)
    x0 = np.ravel(getattr(x0, "loads", x0))
    diagnostics: list[str] = []
    n = cfg.n_sample
    rng = make_rng(cfg.seed, "apmc", 0)
    thetas = prior.sample(rng, n)
    seeds = [derive_seed(cfg.seed, "apmc-sim", 0, i) for i in range(n)]
    xs = _simulate(runner, thetas, seeds)
    dist = batch_distances(d, x0, xs)
    hashes = [_hash_loads(x) for x in xs]
    gamma = _alpha_quantile(dist, cfg.keep_fraction)
    keep = np.flatnonzero(dist < gamma)
    if len(keep) < 2:
        msg = (
            f"step 0: only {len(keep)} particle(s) strictly below gamma={gamma:g}; "
            "distance cannot discriminate, returning the prior sample"
        )
        log.warning(msg)
        diagnostics.append(msg)
        gen = Generation(0, thetas, np.full(n, 1.0 / n), dist, gamma, 1.0, None, hashes)
        return ABCRun([gen], "degenerate", diagnostics)
    # raw weights are importance ratios prior/proposal; prior draws have ratio 1
    raw = np.ones(len(keep))
    current = Generation(0, thetas[keep], raw / raw.sum(), dist[keep], gamma, 1.0, None, [hashes[i] for i in keep])
    generations = [current]
    termination = "n_step"

    for step in range(1, cfg.n_step):
        prev = current
        n_new = n - len(prev)
        rng = make_rng(cfg.seed, "apmc", step)
        cov = _regularize(cfg.kernel_scale * weighted_cov(prev.thetas, prev.weights), diagnostics)
        kernel = TruncatedGaussianKernel(cov, prior.lo, prior.hi, prior, cfg.max_redraws)
        parents = rng.choice(len(prev), size=n_new, p=prev.weights)
        new_thetas = np.empty((n_new, prev.thetas.shape[1]))
        fallback = 0
        for k, j in enumerate(parents):
            new_thetas[k], ok = kernel.draw(prev.thetas[j], rng)
            fallback += not ok
        if fallback:
            diagnostics.append(f"step {step}: {fallback} kernel draw(s) fell back to the prior")
        seeds = [derive_seed(cfg.seed, "apmc-sim", step, i) for i in range(n_new)]
        new_xs = _simulate(runner, new_thetas, seeds)
        new_dist = batch_distances(d, x0, new_xs)
        new_hashes = [_hash_loads(x) for x in new_xs]
        mix = kernel.density(new_thetas, prev.thetas) @ prev.weights
        new_w = prior.pdf(new_thetas) / mix
        acc = float(np.mean(new_dist < prev.gamma))

        all_thetas = np.vstack([prev.thetas, new_thetas])
        all_dist = np.concatenate([prev.distances, new_dist])
        all_w = np.concatenate([raw, new_w])
        all_hashes = prev.hashes + new_hashes
        gamma = _alpha_quantile(all_dist, cfg.keep_fraction)
        if not gamma < prev.gamma:
            msg = f"step {step}: gamma cannot decrease ({gamma:g} >= {prev.gamma:g}); stopping"
            log.warning(msg)
            diagnostics.append(msg)
            termination = "gamma_stalled"
            break
        keep = np.flatnonzero(all_dist < gamma)
        w = all_w[keep]
        if not (len(keep) >= 2 and w.sum() > 0 and np.all(np.isfinite(w))):
            msg = f"step {step}: fewer than two weighted particles below gamma={gamma:g}; stopping"
            diagnostics.append(msg)
            termination = "degenerate"
            break
        current = Generation(
            step, all_thetas[keep], w / w.sum(), all_dist[keep], gamma, acc, cov, [all_hashes[i] for i in keep]
        )
        raw = w
        generations.append(current)
        if acc < cfg.acc_cutoff:
            termination = "acc_cutoff"
            break
    return ABCRun(generations, termination, diagnostics)


def _simulate(runner: Runner, thetas: np.ndarray, seeds) -> np.ndarray:
    return np.array([np.ravel(x) for x in runner(thetas, seeds)], dtype=float)


def _particle_arrays(particles) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(particles, Generation):
        return particles.thetas, particles.weights
    thetas = np.array([np.ravel(p.theta) for p in particles], dtype=float)
    weights = np.array([p.weight for p in particles], dtype=float)
    return thetas, weights


def bayes_estimate(particles) -> np.ndarray:
    """Posterior mean, the Bayes estimator under squared-error loss."""
    thetas, w = _particle_arrays(particles)
    if not len(thetas):
        raise ValueError("no particles")
    return (w / w.sum()) @ thetas


def posterior_correlation(particles) -> float:
    """Weighted Pearson correlation of the first two parameter coordinates."""
    thetas, w = _particle_arrays(particles)
    if len(thetas) < 2:
        raise ValueError("need at least two particles")
    cov = weighted_cov(thetas[:, :2], w)
    if cov[0, 0] <= 0 or cov[1, 1] <= 0:
        raise ValueError("correlation undefined: a coordinate has zero variance")
    return float(np.clip(cov[0, 1] / math.sqrt(cov[0, 0] * cov[1, 1]), -1.0, 1.0))


def weighted_quantile(values: np.ndarray, weights: np.ndarray, q) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    cdf = (np.cumsum(w) - 0.5 * w) / w.sum()
    return np.interp(q, cdf, v)


def credible_box(particles, mass: float = 0.95) -> tuple[np.ndarray, np.ndarray]:
    """Axis-aligned box covering the central ``mass`` of the weighted particles per coordinate."""
    thetas, w = _particle_arrays(particles)
    tail = (1 - mass) / 2
    lo = np.array([weighted_quantile(thetas[:, k], w, tail) for k in range(thetas.shape[1])])
    hi = np.array([weighted_quantile(thetas[:, k], w, 1 - tail) for k in range(thetas.shape[1])])
    return lo, hi


@dataclass
class PredictiveSummary:
    location_ids: np.ndarray
    observed: np.ndarray
    mean: np.ndarray
    q25: np.ndarray
    q50: np.ndarray
    q75: np.ndarray
    lo_whisker: np.ndarray
    hi_whisker: np.ndarray
    n_success: int
    failures: list[dict] = field(default_factory=list)

    def within_whiskers(self) -> np.ndarray:
        return (self.observed >= self.lo_whisker) & (self.observed <= self.hi_whisker)

    def rows(self):
        for k in range(len(self.location_ids)):
            yield (
                int(self.location_ids[k]),
                float(self.observed[k]),
                float(self.mean[k]),
                float(self.q25[k]),
                float(self.q50[k]),
                float(self.q75[k]),
                float(self.lo_whisker[k]),
                float(self.hi_whisker[k]),
            )


def boxplot_stats(samples: np.ndarray):
    """Per-column quartiles and 1.5-IQR whiskers clipped to the data."""
    q25, q50, q75 = np.percentile(samples, [25, 50, 75], axis=0)
    iqr = q75 - q25
    lo_fence, hi_fence = q25 - 1.5 * iqr, q75 + 1.5 * iqr
    lo = np.where(samples >= lo_fence, samples, np.inf).min(axis=0)
    hi = np.where(samples <= hi_fence, samples, -np.inf).max(axis=0)
    return samples.mean(axis=0), q25, q50, q75, lo, hi


def posterior_predictive_check(particles, simulator, x_obs, n_draws: int = 100, seed: int = 0, location_ids=None):
    """Simulate ``n_draws`` datasets from weight-resampled posterior particles.

    Failed simulations are recorded and the summary is computed over the rest.
    """
    thetas, w = _particle_arrays(particles)
    if not len(thetas):
        raise ValueError("no particles")
    rng = make_rng(seed, "ppc")
    idx = rng.choice(len(thetas), size=n_draws, p=w / w.sum())
    sims, failures = [], []
    for k, j in enumerate(idx):
        try:
            sims.append(np.ravel(simulator(thetas[j], derive_seed(seed, "ppc-sim", k))))
        except Exception as exc:
            failures.append({"draw": k, "theta": thetas[j].tolist(), "error": str(exc)})
    if not sims:
        raise SimulationFailed("every predictive simulation failed")
    samples = np.array(sims)
    x_obs = np.ravel(getattr(x_obs, "loads", x_obs))
    ids = np.arange(samples.shape[1]) if location_ids is None else np.asarray(location_ids)
    mean, q25, q50, q75, lo, hi = boxplot_stats(samples)
    return PredictiveSummary(ids, x_obs, mean, q25, q50, q75, lo, hi, len(sims), failures)

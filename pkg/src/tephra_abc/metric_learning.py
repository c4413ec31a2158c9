"""Learning distances from simulated (theta, x) pairs.

Pairs are labelled similar when their generating parameters are closer than
``epsilon`` (a quantile of all pairwise parameter distances). Four trainers
consume the labels or the raw pairs:

* :func:`train_sdml` sparse Mahalanobis metric via an l1-penalized log-det problem
* :func:`train_contrastive` / :func:`train_triplet` embedding networks
* :func:`train_summary_stats` regression network estimating E[theta | x]

All trainers standardize the data per coordinate before fitting and fold the
standardization back into the returned artifact, so the learned distance
operates on raw deposits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.spatial.distance import pdist, squareform

from .distances import LearnedDistance, check_psd
from .nn import (
    Network,
    SGDConfig,
    fold_input_affine,
    fold_output_affine,
    forward,
    gradient,
    init_network,
    sgd_step,
    zero_velocity,
)
from .seeding import make_rng

log = logging.getLogger(__name__)

EMBEDDING_HIDDEN = (100, 80, 40)
EMBEDDING_WIDTH = 15
SUMMARY_HIDDEN = (80, 40, 15)


class DegenerateSimilarity(ValueError):
    """Some sample lacks a similar or a dissimilar partner."""


class SDMLDivergence(RuntimeError):
    pass


@dataclass
class TrainingSet:
    thetas: np.ndarray
    datasets: np.ndarray
    train: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.thetas = np.atleast_2d(np.asarray(self.thetas, dtype=float))
        self.datasets = np.atleast_2d(np.asarray(self.datasets, dtype=float))
        self.train = np.asarray(self.train, dtype=int)
        self.test = np.asarray(self.test, dtype=int)
        n = len(self.thetas)
        if len(self.datasets) != n:
            raise ValueError(f"{n} thetas but {len(self.datasets)} datasets")
        both = np.concatenate([self.train, self.test])
        if len(np.intersect1d(self.train, self.test)) or sorted(both.tolist()) != list(range(n)):
            raise ValueError("train/test splits must be disjoint and cover all indices")

    @property
    def n(self) -> int:
        return len(self.thetas)

    def subset(self, which: str) -> tuple[np.ndarray, np.ndarray]:
        idx = self.train if which == "train" else self.test
        return self.thetas[idx], self.datasets[idx]


def make_split(n: int, train_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded random split; sizes are ``round(n * train_fraction)`` and the rest."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(round(n * train_fraction))
    perm = make_rng(int(seed), "split").permutation(n)
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


@dataclass
class SimilarityLabels:
    epsilon: float
    quantile: float
    similar: np.ndarray  # (n, n) bool, symmetric, False on the diagonal

    @property
    def n(self) -> int:
        return len(self.similar)

    def similar_to(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.similar[i])

    def dissimilar_to(self, i: int) -> np.ndarray:
        mask = ~self.similar[i]
        mask[i] = False
        return np.flatnonzero(mask)

    @property
    def saturated(self) -> np.ndarray:
        """Indices similar to every other sample."""
        return np.flatnonzero(self.similar.sum(axis=1) == self.n - 1)

    @property
    def isolated(self) -> np.ndarray:
        """Indices with no similar partner."""
        return np.flatnonzero(self.similar.sum(axis=1) == 0)

    def pair_signs(self) -> np.ndarray:
        """``K`` with +1 on similar pairs, -1 on dissimilar pairs and 0 on the diagonal."""
        k = np.where(self.similar, 1.0, -1.0)
        np.fill_diagonal(k, 0.0)
        return k


def build_similarity(thetas, q: float) -> SimilarityLabels:
    """Label pairs similar when ``||theta_i - theta_j|| < epsilon``.

    ``epsilon`` is the ``q``-quantile (linear interpolation) of the
    ``n(n-1)/2`` pairwise parameter distances.
    """
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    if not 0 < q < 1:
        raise ValueError("quantile must lie in (0, 1)")
    if len(thetas) < 2:
        raise ValueError("need at least two parameter vectors")
    dists = pdist(thetas)
    eps = float(np.quantile(dists, q))
    similar = squareform(dists < eps)
    labels = SimilarityLabels(eps, q, similar)
    if len(labels.saturated):
        log.warning(
            "quantile %.2f: %d sample(s) similar to all others; pair/triplet trainers cannot run",
            q,
            len(labels.saturated),
        )
    return labels


def _require_partners(labels: SimilarityLabels) -> None:
    if len(labels.saturated):
        raise DegenerateSimilarity(
            f"{len(labels.saturated)} sample(s) are similar to every other sample at quantile "
            f"{labels.quantile:.2f}; lower the quantile"
        )
    if len(labels.isolated):
        raise DegenerateSimilarity(
            f"{len(labels.isolated)} sample(s) have no similar partner at quantile "
            f"{labels.quantile:.2f}; raise the quantile"
        )


@dataclass(frozen=True)
class Standardizer:
    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        shift = x.mean(axis=0)
        scale = x.std(axis=0)
        floor = np.finfo(float).tiny / np.finfo(float).eps
        scale = np.where(scale > floor, scale, 1.0)
        return cls(shift, scale)

    @classmethod
    def identity(cls, d: int) -> "Standardizer":
        return cls(np.zeros(d), np.ones(d))

    def __call__(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale


@dataclass
class TrainedDistance:
    distance: LearnedDistance
    trace: list[float] = field(default_factory=list)
    info: dict = field(default_factory=dict)


# ----------------------------------------------------------------------------
# SDML


@dataclass(frozen=True)
class SDMLConfig:
    m0: np.ndarray | None = None  # prior matrix; None means sample covariance
    eta: float = 0.15
    lam: float = 0.01
    pair_scaling: str = "sum"  # "sum" over ordered pairs, or "mean" = sum / (n(n-1))
    max_iter: int = 5000
    tol: float = 1e-6
    standardize: bool = True
    init: np.ndarray | None = None
    divergence_bound: float = 1e10
    solver: str = "auto"  # "auto", "proximal" or "glasso"

    def __post_init__(self):
        if not self.eta >= 0:
            raise ValueError("eta must be >= 0")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0")
        if self.pair_scaling not in ("sum", "mean"):
            raise ValueError("pair_scaling must be 'sum' or 'mean'")
        if self.solver not in ("auto", "proximal", "glasso"):
            raise ValueError("solver must be 'auto', 'proximal' or 'glasso'")


def _offdiag_l1(m: np.ndarray) -> float:
    return float(np.abs(m).sum() - np.abs(np.diag(m)).sum())


def sdml_objective(m: np.ndarray, a: np.ndarray, lam: float) -> float:
    """``tr(A M) - log det M + lam * ||offdiag(M)||_1``; ``inf`` if ``M`` is not PD."""
    sign, logdet = np.linalg.slogdet(m)
    if sign <= 0:
        return np.inf
    return float(np.sum(a * m) - logdet + lam * _offdiag_l1(m))


def sdml_pair_matrix(x: np.ndarray, k: np.ndarray) -> np.ndarray:
    """``sum_ij K_ij (x_i^T M x_i - x_i^T M x_j) = tr(M S)``; returns ``S = X^T (diag(K 1) - K) X``."""
    lap = np.diag(k.sum(axis=1)) - k
    s = x.T @ lap @ x
    return 0.5 * (s + s.T)


def _soft_threshold_offdiag(m: np.ndarray, thresh: float) -> np.ndarray:
    out = np.sign(m) * np.maximum(np.abs(m) - thresh, 0.0)
    np.fill_diagonal(out, np.diag(m))
    return out


def _project_pd(m: np.ndarray, rel_floor: float = 1e-10) -> np.ndarray:
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    floor = rel_floor * max(w[-1], 1.0)
    if w[0] >= floor:
        return m
    m = (v * np.maximum(w, floor)) @ v.T
    return 0.5 * (m + m.T)


def sdml_kkt_residual(m: np.ndarray, a: np.ndarray, lam: float) -> float:
    """Dimensionless optimality residual ``||M^1/2 R M^1/2||_F / sqrt(d)``.

    ``R`` is the minimum-norm element of the subdifferential at ``M``.
    """
    g = a - np.linalg.inv(m)
    g = 0.5 * (g + g.T)
    off = ~np.eye(len(m), dtype=bool)
    r = g.copy()
    nz = off & (m != 0)
    r[nz] = g[nz] + lam * np.sign(m[nz])
    z = off & (m == 0)
    r[z] = np.sign(g[z]) * np.maximum(np.abs(g[z]) - lam, 0.0)
    w, v = np.linalg.eigh(m)
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.T
    return float(np.linalg.norm(root @ r @ root) / np.sqrt(len(m)))


def solve_sdml(a: np.ndarray, lam: float, m_init: np.ndarray, max_iter=5000, tol=1e-6, divergence_bound=1e10):
    """Proximal gradient descent for the sparse log-det problem.

    Each step takes a gradient step on ``tr(AM) - log det M``, soft-thresholds
    the off-diagonal entries and projects onto the PD cone by eigenvalue
    clipping. Trial step sizes follow Barzilai-Borwein and are halved until
    the objective does not increase. Converged means a relative objective
    change below ``tol`` together with a KKT residual below ``sqrt(tol)``.
    Returns ``(M, objective_trace, converged)``.
    """
    m = _project_pd(np.asarray(m_init, dtype=float))
    f = sdml_objective(m, a, lam)
    trace = [f]
    bound = divergence_bound * max(1.0, np.abs(m).max())
    step = float(np.linalg.eigvalsh(m)[0]) ** 2
    grad = a - np.linalg.inv(m)
    for _ in range(max_iter):
        while True:
            cand = _project_pd(_soft_threshold_offdiag(m - step * grad, step * lam))
            f_cand = sdml_objective(cand, a, lam)
            if f_cand <= f:
                break
            step *= 0.5
            if step < 1e-300:
                return m, trace, sdml_kkt_residual(m, a, lam) <= np.sqrt(tol)
        small = abs(f - f_cand) <= tol * max(1.0, abs(f))
        grad_new = a - np.linalg.inv(cand)
        dm, dg = cand - m, grad_new - grad
        m, f, grad = cand, f_cand, grad_new
        trace.append(f)
        if np.abs(m).max() > bound or not np.isfinite(f):
            raise SDMLDivergence(
                f"SDML iterates unbounded (|M|max={np.abs(m).max():.3e}); objective is not bounded below"
            )
        if small and sdml_kkt_residual(m, a, lam) <= np.sqrt(tol):
            return m, trace, True
        curv = float(np.sum(dm * dg))
        step = float(np.sum(dm * dm)) / curv if curv > 0 else 2.0 * step
    return m, trace, False


def train_sdml(ts: TrainingSet, labels: SimilarityLabels, cfg: SDMLConfig = SDMLConfig()) -> TrainedDistance:
    """Learn a Mahalanobis matrix from similarity labels over ``ts.train``."""
    _, x = ts.subset("train")
    if labels.n != len(x):
        raise ValueError(f"labels cover {labels.n} samples but the training split has {len(x)}")
    std = Standardizer.fit(x) if cfg.standardize else Standardizer.identity(x.shape[1])
    z = std(x)
    d = z.shape[1]
    if cfg.m0 is None:
        m0 = np.atleast_2d(np.cov(z, rowvar=False))
    else:
        m0 = np.asarray(cfg.m0, dtype=float)
        if cfg.standardize:
            # prior given in raw units; express it in standardized coordinates
            m0 = m0 * np.outer(std.scale, std.scale)
    m0 = check_psd(m0)
    if np.linalg.cond(m0) > 1e12:
        m0 = m0 + 1e-6 * np.eye(d) * max(1.0, np.trace(m0) / d)
    a = np.linalg.inv(m0)
    if cfg.eta:
        s = sdml_pair_matrix(z, labels.pair_signs())
        if cfg.pair_scaling == "mean":
            s = s / (labels.n * (labels.n - 1))
        a = a + cfg.eta * s
    a = 0.5 * (a + a.T)
    init = m0 if cfg.init is None else np.asarray(cfg.init, dtype=float)
    m, trace, converged, solver = _solve(a, cfg, init)
    if not converged:
        log.warning("SDML (%s) did not meet tolerance %.1e within %d iterations", solver, cfg.tol, cfg.max_iter)
    raw = m / np.outer(std.scale, std.scale)
    raw = 0.5 * (raw + raw.T)
    dist = LearnedDistance.mahalanobis(raw, technique="sdml", quantile=labels.quantile, epsilon=labels.epsilon)
    return TrainedDistance(dist, trace, {"converged": converged, "iterations": len(trace) - 1, "solver": solver})


def _solve(a: np.ndarray, cfg: SDMLConfig, init: np.ndarray):
    """Dispatch to a solver; ``auto`` uses graphical lasso whenever ``A`` is PD."""
    a_pd = np.linalg.eigvalsh(a)[0] > 0
    solver = cfg.solver
    if solver == "auto":
        solver = "glasso" if a_pd else "proximal"
    if solver == "glasso":
        if not a_pd:
            raise SDMLDivergence("graphical lasso needs a positive definite A; objective may be unbounded")
        f0 = sdml_objective(_project_pd(init), a, cfg.lam)
        if cfg.lam == 0:
            m = np.linalg.inv(a)
            m = 0.5 * (m + m.T)
            converged = True
        else:
            m, converged = _glasso(a, cfg.lam, cfg.max_iter, cfg.tol)
        f = sdml_objective(m, a, cfg.lam)
        if not f <= f0:
            # never hand back something worse than the starting point
            m, trace, converged = solve_sdml(a, cfg.lam, m if np.isfinite(f) else init, cfg.max_iter, cfg.tol, cfg.divergence_bound)
            return m, [f0] + trace, converged, "glasso+proximal"
        return m, [f0, f], converged, solver
    m, trace, converged = solve_sdml(a, cfg.lam, init, cfg.max_iter, cfg.tol, cfg.divergence_bound)
    return m, trace, converged, solver


def _glasso(a: np.ndarray, lam: float, max_iter: int, tol: float):
    import warnings

    from sklearn.covariance import graphical_lasso
    from sklearn.exceptions import ConvergenceWarning

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ConvergenceWarning)
        try:
            _, m = graphical_lasso(a, alpha=lam, max_iter=min(max_iter, 1000), tol=max(tol, 1e-8))
        except FloatingPointError as exc:
            raise SDMLDivergence(f"graphical lasso failed: {exc}") from exc
    converged = not any(issubclass(w.category, ConvergenceWarning) for w in caught)
    m = 0.5 * (m + m.T)
    if not np.all(np.isfinite(m)):
        raise SDMLDivergence("graphical lasso returned non-finite entries")
    return m, converged


# ----------------------------------------------------------------------------
# Losses. Each returns the mean loss over the batch and its gradient with
# respect to every embedding argument.


def contrastive_loss(e1: np.ndarray, e2: np.ndarray, y: np.ndarray, margin: float = 1.0):
    """``y*D^2 + (1-y)*[margin - D]_+^2`` with ``D = ||e1 - e2||``, averaged over pairs."""
    y = np.asarray(y, dtype=float)
    diff = e1 - e2
    dist = np.sqrt((diff**2).sum(axis=1))
    hinge = np.maximum(margin - dist, 0.0)
    losses = y * dist**2 + (1 - y) * hinge**2
    b = len(y)
    safe = np.where(dist > 0, dist, 1.0)
    coef = 2 * y - (1 - y) * 2 * hinge / safe * (dist > 0)
    g1 = coef[:, None] * diff / b
    return float(losses.mean()), g1, -g1


def triplet_loss(ea: np.ndarray, ep: np.ndarray, en: np.ndarray, margin: float = 1.0):
    """``[||ea - ep||^2 - ||ea - en||^2 + margin]_+`` averaged over triplets."""
    dp = ea - ep
    dn = ea - en
    z = (dp**2).sum(axis=1) - (dn**2).sum(axis=1) + margin
    active = (z > 0).astype(float)[:, None]
    b = len(ea)
    ga = active * 2 * (dp - dn) / b
    gp = -active * 2 * dp / b
    gn = active * 2 * dn / b
    return float(np.maximum(z, 0.0).mean()), ga, gp, gn


def mse_loss(pred: np.ndarray, target: np.ndarray):
    """``mean_i ||pred_i - target_i||^2``."""
    diff = pred - target
    return float((diff**2).sum(axis=1).mean()), 2 * diff / len(pred)


# ----------------------------------------------------------------------------
# Pair / triplet sampling


def draw_pairs(labels: SimilarityLabels, rng: np.random.Generator, p_similar: float):
    """One partner per sample, similar with probability ``p_similar``; samples visited in random order."""
    n = labels.n
    order = rng.permutation(n)
    coin = rng.random(n) < p_similar
    u = rng.random(n)
    partners = np.empty(n, dtype=int)
    for k, i in enumerate(order):
        pool = labels.similar_to(i) if coin[k] else labels.dissimilar_to(i)
        partners[k] = pool[int(u[k] * len(pool))]
    return order, partners, coin.astype(float)


def draw_triplets(labels: SimilarityLabels, rng: np.random.Generator):
    """Each sample as anchor once, with a random positive and a random negative."""
    n = labels.n
    order = rng.permutation(n)
    u = rng.random((n, 2))
    pos = np.empty(n, dtype=int)
    neg = np.empty(n, dtype=int)
    for k, i in enumerate(order):
        sp = labels.similar_to(i)
        dp = labels.dissimilar_to(i)
        pos[k] = sp[int(u[k, 0] * len(sp))]
        neg[k] = dp[int(u[k, 1] * len(dp))]
    return order, pos, neg


def _sgd_default(sgd: SGDConfig | None, epochs: int, batch: int) -> SGDConfig:
    return sgd if sgd is not None else SGDConfig(epochs=epochs, batch_size=batch)


def _prepare(ts: TrainingSet, labels: SimilarityLabels | None, standardize: bool):
    _, x = ts.subset("train")
    if labels is not None and labels.n != len(x):
        raise ValueError(f"labels cover {labels.n} samples but the training split has {len(x)}")
    std = Standardizer.fit(x) if standardize else Standardizer.identity(x.shape[1])
    return std, std(x)


def train_contrastive(
    ts: TrainingSet,
    labels: SimilarityLabels,
    arch: Sequence[int] = EMBEDDING_HIDDEN + (EMBEDDING_WIDTH,),
    sgd: SGDConfig | None = None,
    p_similar: float = 0.4,
    margin: float = 1.0,
    standardize: bool = True,
) -> TrainedDistance:
    """Embedding network trained with the contrastive loss on sampled pairs."""
    sgd = _sgd_default(sgd, 400, 32)
    _require_partners(labels)
    std, z = _prepare(ts, labels, standardize)
    net = init_network([z.shape[1], *arch], sgd.seed)
    vel = zero_velocity(net)
    trace = []
    for epoch in range(sgd.epochs):
        rng = make_rng(sgd.seed, "contrastive", epoch)
        order, partners, y = draw_pairs(labels, rng, p_similar)
        losses = []
        for s in range(0, len(order), sgd.batch_size):
            i, j, yb = order[s : s + sgd.batch_size], partners[s : s + sgd.batch_size], y[s : s + sgd.batch_size]
            b = len(i)

            def adjoint(out):
                loss, g1, g2 = contrastive_loss(out[:b], out[b:], yb, margin)
                return loss, np.vstack([g1, g2])

            loss, grads = gradient(net, adjoint, np.vstack([z[i], z[j]]))
            net, vel = sgd_step(net, grads, sgd, vel)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    net = fold_input_affine(net, std.shift, std.scale)
    dist = LearnedDistance.embedding(net, technique="contrastive", quantile=labels.quantile, epsilon=labels.epsilon)
    return TrainedDistance(dist, trace)


def train_triplet(
    ts: TrainingSet,
    labels: SimilarityLabels,
    arch: Sequence[int] = EMBEDDING_HIDDEN + (EMBEDDING_WIDTH,),
    sgd: SGDConfig | None = None,
    margin: float = 1.0,
    standardize: bool = True,
) -> TrainedDistance:
    """Embedding network trained with the triplet loss on sampled triplets."""
    sgd = _sgd_default(sgd, 800, 16)
    _require_partners(labels)
    std, z = _prepare(ts, labels, standardize)
    net = init_network([z.shape[1], *arch], sgd.seed)
    vel = zero_velocity(net)
    trace = []
    for epoch in range(sgd.epochs):
        rng = make_rng(sgd.seed, "triplet", epoch)
        order, pos, neg = draw_triplets(labels, rng)
        losses = []
        for s in range(0, len(order), sgd.batch_size):
            a, p, n = order[s : s + sgd.batch_size], pos[s : s + sgd.batch_size], neg[s : s + sgd.batch_size]
            b = len(a)

            def adjoint(out):
                loss, ga, gp, gn = triplet_loss(out[:b], out[b : 2 * b], out[2 * b :], margin)
                return loss, np.vstack([ga, gp, gn])

            loss, grads = gradient(net, adjoint, np.vstack([z[a], z[p], z[n]]))
            net, vel = sgd_step(net, grads, sgd, vel)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    net = fold_input_affine(net, std.shift, std.scale)
    dist = LearnedDistance.embedding(net, technique="triplet", quantile=labels.quantile, epsilon=labels.epsilon)
    return TrainedDistance(dist, trace)


def train_summary_stats(
    ts: TrainingSet,
    arch: Sequence[int] = SUMMARY_HIDDEN + (2,),
    sgd: SGDConfig | None = None,
    standardize: bool = True,
) -> TrainedDistance:
    """Regression network ``x -> theta`` fitted by squared error; its output is the summary statistic."""
    sgd = _sgd_default(sgd, 400, 2)
    thetas, _ = ts.subset("train")
    if arch[-1] != thetas.shape[1]:
        raise ValueError(f"output width {arch[-1]} must equal the number of parameters {thetas.shape[1]}")
    std, z = _prepare(ts, None, standardize)
    tstd = Standardizer.fit(thetas) if standardize else Standardizer.identity(thetas.shape[1])
    target = tstd(thetas)
    net = init_network([z.shape[1], *arch], sgd.seed)
    vel = zero_velocity(net)
    trace = []
    for epoch in range(sgd.epochs):
        order = make_rng(sgd.seed, "summary", epoch).permutation(len(z))
        losses = []
        for s in range(0, len(order), sgd.batch_size):
            idx = order[s : s + sgd.batch_size]
            loss, grads = gradient(net, lambda out: mse_loss(out, target[idx]), z[idx])
            net, vel = sgd_step(net, grads, sgd, vel)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    net = fold_output_affine(fold_input_affine(net, std.shift, std.scale), tstd.shift, tstd.scale)
    return TrainedDistance(LearnedDistance.summary_stats(net, technique="summary_stats"), trace)


def regression_mse(d: LearnedDistance, thetas, datasets) -> float:
    """Mean squared error of a summary-statistics network on (theta, x) pairs."""
    pred = forward(d.network, np.atleast_2d(datasets))
    return float(((pred - np.atleast_2d(thetas)) ** 2).sum(axis=1).mean())

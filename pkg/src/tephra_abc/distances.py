"""Distances between deposit datasets.

Every variant is a Euclidean norm after some transformation of the data:

* ``euclidean``     identity
* ``mahalanobis``   ``x -> L x`` with ``M = L^T L``
* ``embedding``     ``x -> g_w(x)`` (metric-learning network)
* ``summary_stats`` ``x -> f_beta(x)`` (regression network estimating E[theta | x])

Artifacts are stored as JSON: ``{"variant": ..., "matrix": [[...]]}`` or
``{"variant": ..., "layers": [{"w": [[...]], "b": [...]}, ...]}``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Network, forward

VARIANTS = ("euclidean", "mahalanobis", "embedding", "summary_stats")

SYMMETRY_RTOL = 1e-10
PSD_RTOL = 1e-8


class NotPSDError(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


def check_psd(m: np.ndarray) -> np.ndarray:
    """Validate symmetry and positive semi-definiteness; returns ``m`` as float array."""
    m = np.array(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NotPSDError("matrix has non-finite entries")
    scale = max(np.abs(m).max(), np.finfo(float).tiny)
    if np.abs(m - m.T).max() > SYMMETRY_RTOL * scale:
        raise NotPSDError("matrix is not symmetric")
    eig = np.linalg.eigvalsh(m)
    if eig[0] < -PSD_RTOL * max(eig[-1], 0.0):
        raise NotPSDError(f"matrix is not PSD: min eigenvalue {eig[0]:.3e}, max {eig[-1]:.3e}")
    return m


def clip_to_psd(m, warn: bool = True) -> np.ndarray:
    """Symmetrize and clip negative eigenvalues to zero."""
    m = np.asarray(m, dtype=float)
    m = 0.5 * (m + m.T)
    w, v = np.linalg.eigh(m)
    if w[0] < 0:
        if warn:
            warnings.warn(f"clipping {int((w < 0).sum())} negative eigenvalue(s), min {w[0]:.3e}", stacklevel=2)
        m = (v * np.clip(w, 0, None)) @ v.T
        m = 0.5 * (m + m.T)
    return m


def cholesky_factor(m) -> np.ndarray:
    """Square ``L`` with ``L^T L = M``; eigen-based for singular ``M``."""
    m = check_psd(m)
    try:
        return np.linalg.cholesky(m).T
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(m)
        return np.sqrt(np.clip(w, 0, None))[:, None] * v.T


@dataclass(frozen=True)
class LearnedDistance:
    variant: str
    matrix: np.ndarray | None = None
    network: Network | None = None
    dim: int | None = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distance variant {self.variant!r}")
        if self.variant == "mahalanobis":
            if self.matrix is None:
                raise ValueError("mahalanobis distance needs a matrix")
            m = check_psd(self.matrix)
            m.setflags(write=False)
            object.__setattr__(self, "matrix", m)
            object.__setattr__(self, "dim", m.shape[0])
        elif self.variant in ("embedding", "summary_stats"):
            if self.network is None:
                raise ValueError(f"{self.variant} distance needs network weights")
            object.__setattr__(self, "dim", self.network.n_in)

    @classmethod
    def euclidean(cls, dim: int | None = None) -> "LearnedDistance":
        return cls("euclidean", dim=dim)

    @classmethod
    def mahalanobis(cls, m, **meta) -> "LearnedDistance":
        return cls("mahalanobis", matrix=np.asarray(m, dtype=float), meta=meta)

    @classmethod
    def embedding(cls, net: Network, **meta) -> "LearnedDistance":
        return cls("embedding", network=net, meta=meta)

    @classmethod
    def summary_stats(cls, net: Network, **meta) -> "LearnedDistance":
        return cls("summary_stats", network=net, meta=meta)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.dim is not None and x.shape[-1] != self.dim:
            raise DimensionMismatch(f"dataset length {x.shape[-1]} does not match distance dimension {self.dim}")
        return x

    def transform(self, x) -> np.ndarray:
        """Map datasets into the space where the distance is Euclidean."""
        x = self._check(x)
        if self.variant == "euclidean":
            return x
        if self.variant == "mahalanobis":
            return x @ cholesky_factor(self.matrix).T
        return forward(self.network, x)

    def __call__(self, x1, x2) -> float:
        return distance(self, x1, x2)

    def distances_to(self, x0, xs) -> np.ndarray:
        """Distances from each row of ``xs`` to ``x0``."""
        x0 = self._check(np.ravel(_loads(x0)))
        xs = self._check(np.atleast_2d(xs))
        if self.variant == "mahalanobis":
            diff = xs - x0
            return np.sqrt(np.clip(np.einsum("ij,jk,ik->i", diff, self.matrix, diff), 0, None))
        if self.variant == "euclidean":
            return np.linalg.norm(xs - x0, axis=1)
        return np.linalg.norm(forward(self.network, xs) - forward(self.network, x0), axis=1)

    def pairwise(self, xs) -> np.ndarray:
        xs = self._check(np.atleast_2d(xs))
        if self.variant == "mahalanobis":
            return np.stack([self.distances_to(x, xs) for x in xs])
        z = self.transform(xs)
        diff = z[:, None, :] - z[None, :, :]
        return np.sqrt((diff**2).sum(axis=-1))

    def to_json(self) -> dict:
        out: dict = {"variant": self.variant}
        if self.variant == "mahalanobis":
            out["matrix"] = self.matrix.tolist()
        elif self.variant in ("embedding", "summary_stats"):
            out["layers"] = self.network.to_layers()
        elif self.dim is not None:
            out["dim"] = self.dim
        if self.meta:
            out["meta"] = self.meta
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "LearnedDistance":
        variant = obj.get("variant")
        meta = obj.get("meta", {})
        if variant == "euclidean":
            return cls("euclidean", dim=obj.get("dim"), meta=meta)
        if variant == "mahalanobis":
            if "matrix" not in obj:
                raise ValueError("mahalanobis artifact lacks 'matrix'")
            return cls("mahalanobis", matrix=clip_to_psd(np.asarray(obj["matrix"], dtype=float)), meta=meta)
        if variant in ("embedding", "summary_stats"):
            if "layers" not in obj:
                raise ValueError(f"{variant} artifact lacks 'layers'")
            return cls(variant, network=Network.from_layers(obj["layers"]), meta=meta)
        raise ValueError(f"unknown distance variant {variant!r}")


def _loads(x):
    return getattr(x, "loads", x)


def distance(d: LearnedDistance, x1, x2) -> float:
    x1 = d._check(np.ravel(_loads(x1)))
    x2 = d._check(np.ravel(_loads(x2)))
    if x1.shape != x2.shape:
        raise DimensionMismatch(f"datasets have lengths {x1.size} and {x2.size}")
    if d.variant == "euclidean":
        return float(np.linalg.norm(x1 - x2))
    if d.variant == "mahalanobis":
        diff = x1 - x2
        return float(np.sqrt(max(diff @ d.matrix @ diff, 0.0)))
    return float(np.linalg.norm(forward(d.network, x1) - forward(d.network, x2)))


def save_distance(d: LearnedDistance, path) -> None:
    Path(path).write_text(json.dumps(d.to_json(), sort_keys=True) + "\n")


def load_distance(path) -> LearnedDistance:
    return LearnedDistance.from_json(json.loads(Path(path).read_text()))

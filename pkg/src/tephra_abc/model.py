"""Parameter space, priors, deposit datasets and the surrogate simulator.

The surrogate replaces the full plume/transport model with a closed form
radially symmetric deposit::

    H      = c_H * sqrt(u0 * r0)                 plume height [m]
    sigma  = 0.2 * H                             deposit spread [m]
    M_tot  = 1e9 kg * (r0 / 50 m)**2             erupted mass [kg]
    y_i    = M_tot / (2 pi sigma**2) * exp(-r_i**2 / (2 sigma**2)) * exp(eps_i)

with ``eps_i ~ N(0, noise_scale**2)`` i.i.d. over locations. ``r_i`` is the
distance of ground location ``i`` from the vent, read from ``locations.csv``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .seeding import make_rng

C_H = 10.0  # m^(1/2) s^(1/2)
SIGMA_FRACTION = 0.2
MASS_SCALE = 1e9  # kg at r0 = 50 m
REFERENCE_RADIUS = 50.0  # m
N_LOCATIONS = 72

#: Simulated-data test point used throughout (m/s, m).
THETA_STAR = (173.87, 84.55)


@dataclass(frozen=True)
class ParameterVector:
    """Point in parameter space: initial plume velocity and vent radius."""

    u0: float
    r0: float

    def __post_init__(self):
        if not (math.isfinite(self.u0) and math.isfinite(self.r0)):
            raise ValueError(f"non-finite parameter vector ({self.u0}, {self.r0})")

    def as_array(self) -> np.ndarray:
        return np.array([self.u0, self.r0], dtype=float)

    @classmethod
    def from_array(cls, a) -> "ParameterVector":
        a = np.asarray(a, dtype=float).ravel()
        if a.size != 2:
            raise ValueError(f"expected 2 parameters, got {a.size}")
        return cls(float(a[0]), float(a[1]))


@dataclass(frozen=True)
class PriorBox:
    """Independent uniform prior on an axis-aligned box."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float)
        hi = np.asarray(self.upper, dtype=float)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("lower and upper must be vectors of equal length")
        if not np.all(np.isfinite(lo)) or not np.all(np.isfinite(hi)):
            raise ValueError("prior bounds must be finite")
        if np.any(lo >= hi):
            raise ValueError(f"invalid prior box: lower {self.lower} must be < upper {self.upper}")
        object.__setattr__(self, "lower", tuple(float(v) for v in lo))
        object.__setattr__(self, "upper", tuple(float(v) for v in hi))

    @property
    def dim(self) -> int:
        return len(self.lower)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper)

    @property
    def volume(self) -> float:
        return float(np.prod(self.hi - self.lo))

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.hi - self.lo))

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.uniform(self.lo, self.hi, size=(n, self.dim))

    def contains(self, thetas) -> np.ndarray:
        t = np.atleast_2d(thetas)
        return np.all((t >= self.lo) & (t <= self.hi), axis=1)

    def pdf(self, thetas) -> np.ndarray:
        return np.where(self.contains(thetas), 1.0 / self.volume, 0.0)


@dataclass(frozen=True)
class NormalPrior:
    """Independent Gaussian prior; unbounded, so kernel truncation is a no-op."""

    mean: tuple[float, ...]
    std: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.mean)

    @property
    def lo(self) -> np.ndarray:
        return np.full(self.dim, -np.inf)

    @property
    def hi(self) -> np.ndarray:
        return np.full(self.dim, np.inf)

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.normal(self.mean, self.std, size=(n, self.dim))

    def contains(self, thetas) -> np.ndarray:
        return np.all(np.isfinite(np.atleast_2d(thetas)), axis=1)

    def pdf(self, thetas) -> np.ndarray:
        t = np.atleast_2d(thetas)
        m, s = np.asarray(self.mean), np.asarray(self.std)
        z = (t - m) / s
        return np.prod(np.exp(-0.5 * z**2) / (s * math.sqrt(2 * math.pi)), axis=1)


def sample_prior(prior: PriorBox, rng_seed: int, n: int) -> list[ParameterVector]:
    """Draw ``n`` i.i.d. parameter vectors from ``prior``; a pure function of the seed."""
    if n < 1:
        raise ValueError("n must be >= 1")
    draws = prior.sample(make_rng(int(rng_seed), "prior"), n)
    return [ParameterVector.from_array(row) for row in draws]


@dataclass(frozen=True)
class DepositDataset:
    loads: np.ndarray
    location_ids: tuple[int, ...] = ()

    def __post_init__(self):
        loads = np.array(self.loads, dtype=float).ravel()
        if not np.all(np.isfinite(loads)):
            raise ValueError("deposit loads must be finite")
        if np.any(loads < 0):
            raise ValueError("deposit loads must be non-negative")
        loads.setflags(write=False)
        ids = tuple(int(i) for i in self.location_ids) or tuple(range(loads.size))
        if len(ids) != loads.size:
            raise ValueError(f"{len(ids)} location ids for {loads.size} loads")
        object.__setattr__(self, "loads", loads)
        object.__setattr__(self, "location_ids", ids)

    def __len__(self):
        return self.loads.size


@dataclass(frozen=True)
class Locations:
    ids: np.ndarray
    xy: np.ndarray

    @property
    def radii(self) -> np.ndarray:
        return np.hypot(self.xy[:, 0], self.xy[:, 1])

    def __len__(self):
        return len(self.ids)


def load_locations(path: str | Path | None = None) -> Locations:
    """Read a ``id,x_m,y_m`` CSV; defaults to the bundled 72-site fan."""
    if path is None:
        text = resources.files("tephra_abc").joinpath("data/locations.csv").read_text()
    else:
        text = Path(path).read_text()
    rows = list(csv.DictReader(text.splitlines()))
    if not rows:
        raise ValueError("locations file is empty")
    ids = np.array([int(r["id"]) for r in rows])
    xy = np.array([[float(r["x_m"]), float(r["y_m"])] for r in rows])
    if len(set(ids.tolist())) != len(ids):
        raise ValueError("duplicate location ids")
    return Locations(ids, xy)


@dataclass(frozen=True)
class SimulatorConfig:
    t0: float = 1256.0
    n0: float = 0.01
    d_a: float = 300.0
    d_p: float = 1500.0
    noise_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.t0 > 0:
            raise ValueError("t0 must be positive")
        if not 0 < self.n0 < 1:
            raise ValueError("n0 must lie in (0, 1)")
        if not (self.d_a > 0 and self.d_p > 0):
            raise ValueError("diffusion coefficients must be positive")
        if not self.noise_scale >= 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _check_theta(theta) -> np.ndarray:
    t = theta.as_array() if isinstance(theta, ParameterVector) else np.asarray(theta, dtype=float).ravel()
    if t.size != 2:
        raise ValueError(f"expected (u0, r0), got {t.size} values")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise ValueError(f"u0 and r0 must be positive and finite, got {tuple(t)}")
    return t


def surrogate_mean(theta, radii: np.ndarray) -> np.ndarray:
    """Noise-free surrogate deposit at the given radial distances."""
    u0, r0 = _check_theta(theta)
    height = C_H * math.sqrt(u0 * r0)
    sigma = SIGMA_FRACTION * height
    m_tot = MASS_SCALE * (r0 / REFERENCE_RADIUS) ** 2
    return m_tot / (2 * math.pi * sigma**2) * np.exp(-(radii**2) / (2 * sigma**2))


def surrogate_noise(cfg: SimulatorConfig, stream: int, n: int) -> np.ndarray:
    if cfg.noise_scale == 0:
        return np.zeros(n)
    return make_rng(int(cfg.seed), "surrogate", int(stream)).normal(0.0, cfg.noise_scale, size=n)


def simulate_surrogate(
    theta, cfg: SimulatorConfig, locations: Locations | None = None, stream: int = 0
) -> DepositDataset:
    """Simulate one deposit; identical ``(theta, cfg, stream)`` gives identical output."""
    locations = locations if locations is not None else default_locations()
    loads = surrogate_mean(theta, locations.radii) * np.exp(surrogate_noise(cfg, stream, len(locations)))
    return DepositDataset(loads, tuple(locations.ids.tolist()))


_DEFAULT_LOCATIONS: Locations | None = None


def default_locations() -> Locations:
    global _DEFAULT_LOCATIONS
    if _DEFAULT_LOCATIONS is None:
        _DEFAULT_LOCATIONS = load_locations()
    return _DEFAULT_LOCATIONS


@dataclass
class SurrogateSimulator:
    """Callable ``(theta, stream) -> loads`` wrapper around the surrogate.

    ``partial``/``reduce`` split the location set across the workers of a
    team; the noise vector is always drawn in full so the result does not
    depend on how the locations are partitioned.
    """

    cfg: SimulatorConfig = field(default_factory=SimulatorConfig)
    locations: Locations = field(default_factory=default_locations)

    @property
    def output_length(self) -> int:
        return len(self.locations)

    def __call__(self, theta, stream: int = 0) -> np.ndarray:
        radii = self.locations.radii
        return surrogate_mean(theta, radii) * np.exp(surrogate_noise(self.cfg, stream, radii.size))

    def partial(self, theta, stream: int, rank: int, size: int) -> list[float]:
        idx = np.array_split(np.arange(len(self.locations)), size)[rank]
        radii = self.locations.radii
        eps = surrogate_noise(self.cfg, stream, radii.size)[idx]
        return (surrogate_mean(theta, radii[idx]) * np.exp(eps)).tolist()

    def reduce(self, parts: Sequence[Sequence[float]]) -> np.ndarray:
        return np.concatenate([np.asarray(p, dtype=float) for p in parts])

"""Run configuration.

Configs are TOML files. Every key is optional; missing keys take the
defaults below. Unknown sections or keys are rejected so that typos do not
silently fall back to defaults::

    seed = 0

    [prior]
    lower = [100.0, 30.0]
    upper = [300.0, 100.0]

    [simulator]
    kind = "surrogate"          # or "external"
    noise_scale = 0.1
    # external only:
    # command = ["python3", "my_model.py"]
    # timeout = 60.0

    [training]
    n = 400
    train_fraction = 0.75
    test_fraction = 0.25

    [metric]
    technique = "triplet"
    quantile = 0.6
    learning_rate = 0.001
    momentum = 0.9
    # epochs / batch_size default per technique
    sdml_eta = 0.15
    sdml_lambda = 0.01
    sdml_m0 = "covariance"      # or "identity"

    [kl]
    beta = 1.0
    scaling = "max"

    [abc]
    n_sample = 100
    n_step = 12
    acc_cutoff = 0.03
    keep_fraction = 0.5
    kernel_scale = 2.0

    [observation]
    theta = [173.87, 84.55]     # used by `observe`
    file = "observation.json"   # optional, relative to the config file

    [ppc]
    n_draws = 100

    [parallel]
    teams = 1
    workers_per_team = 1
    timeout = 0.0               # per simulation, seconds; 0 disables
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import THETA_STAR

TECHNIQUES = ("euclidean", "sdml", "contrastive", "triplet", "summary_stats")


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "seed": 0,
    "prior": {"lower": [100.0, 30.0], "upper": [300.0, 100.0]},
    "simulator": {
        "kind": "surrogate",
        "noise_scale": 0.1,
        "t0": 1256.0,
        "n0": 0.01,
        "d_a": 300.0,
        "d_p": 1500.0,
        "command": [],
        "timeout": 60.0,
    },
    "training": {"n": 400, "train_fraction": 0.75, "test_fraction": 0.25},
    "metric": {
        "technique": "triplet",
        "quantile": 0.6,
        "learning_rate": 1e-3,
        "momentum": 0.9,
        "epochs": 0,
        "batch_size": 0,
        "sdml_eta": 0.15,
        "sdml_lambda": 0.01,
        "sdml_pair_scaling": "sum",
        "sdml_m0": "covariance",
    },
    "kl": {
        "beta": 1.0,
        "scaling": "max",
        "techniques": list(TECHNIQUES),
        "quantiles": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    },
    "abc": {"n_sample": 100, "n_step": 12, "acc_cutoff": 0.03, "keep_fraction": 0.5, "kernel_scale": 2.0},
    "observation": {"theta": list(THETA_STAR), "file": ""},
    "ppc": {"n_draws": 100},
    "parallel": {"teams": 1, "workers_per_team": 1, "timeout": 0.0},
}

# sections that determine the simulated training data
DATA_SECTIONS = ("seed", "prior", "simulator", "training")


def _merge(base: dict, override: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"'{path}' must be a table")
            out[key] = _merge(base[key], value, path)
        else:
            out[key] = _coerce(base[key], value, path)
    return out


def _coerce(default, value, path):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"'{path}' has the wrong type: expected {type(default).__name__}, got {type(value).__name__}")
    return value


@dataclass
class RunConfig:
    data: dict
    base_dir: Path = Path(".")

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def with_overrides(self, **kw) -> "RunConfig":
        """Copy with dotted-key overrides, e.g. ``{"metric.quantile": 0.5}``; ``None`` values are ignored."""
        tree: dict = {}
        for dotted, value in kw.items():
            if value is None:
                continue
            node = tree
            *parents, leaf = dotted.split(".")
            for p in parents:
                node = node.setdefault(p, {})
            node[leaf] = value
        return RunConfig(validate(_merge(self.data, tree)), self.base_dir)

    def fingerprint(self, sections=None) -> str:
        keys = sorted(self.data) if sections is None else list(sections)
        sub = {k: self.data[k] for k in keys}
        return hashlib.sha256(json.dumps(sub, sort_keys=True).encode()).hexdigest()

    @property
    def data_hash(self) -> str:
        return self.fingerprint(DATA_SECTIONS)

    def observation_path(self) -> Path | None:
        f = self.data["observation"]["file"]
        return (self.base_dir / f) if f else None


def validate(d: dict) -> dict:
    def need(cond, msg):
        if not cond:
            raise ConfigError(msg)

    need(isinstance(d["seed"], int) and 0 <= d["seed"] < 2**64, "seed must be an unsigned 64-bit integer")
    lo, hi = d["prior"]["lower"], d["prior"]["upper"]
    need(len(lo) == len(hi) == 2, "prior bounds must have two entries (u0, r0)")
    need(all(a < b for a, b in zip(lo, hi)), "prior lower bounds must be below upper bounds")
    sim = d["simulator"]
    need(sim["kind"] in ("surrogate", "external"), "simulator.kind must be 'surrogate' or 'external'")
    need(sim["noise_scale"] >= 0, "simulator.noise_scale must be >= 0")
    if sim["kind"] == "external":
        need(sim["command"] and all(isinstance(c, str) for c in sim["command"]), "external simulator needs a command list")
        need(sim["timeout"] > 0, "simulator.timeout must be positive")
    tr = d["training"]
    need(tr["n"] >= 4, "training.n must be >= 4")
    need(0 < tr["train_fraction"] < 1 and 0 < tr["test_fraction"] < 1, "split fractions must lie in (0, 1)")
    need(math.isclose(tr["train_fraction"] + tr["test_fraction"], 1.0, abs_tol=1e-12), "split fractions must sum to 1")
    m = d["metric"]
    need(m["technique"] in TECHNIQUES, f"metric.technique must be one of {', '.join(TECHNIQUES)}")
    need(0 < m["quantile"] < 1, "metric.quantile must lie in (0, 1)")
    need(m["learning_rate"] > 0 and 0 <= m["momentum"] < 1, "invalid SGD settings")
    need(m["epochs"] >= 0 and m["batch_size"] >= 0, "epochs and batch_size must be >= 0 (0 = technique default)")
    need(m["sdml_eta"] >= 0 and m["sdml_lambda"] >= 0, "SDML eta and lambda must be >= 0")
    need(m["sdml_pair_scaling"] in ("sum", "mean"), "metric.sdml_pair_scaling must be 'sum' or 'mean'")
    need(m["sdml_m0"] in ("covariance", "identity"), "metric.sdml_m0 must be 'covariance' or 'identity'")
    k = d["kl"]
    need(k["beta"] > 0, "kl.beta must be positive")
    need(k["scaling"] in ("max", "minmax"), "kl.scaling must be 'max' or 'minmax'")
    need(all(t in TECHNIQUES for t in k["techniques"]), "kl.techniques lists an unknown technique")
    need(k["quantiles"] and all(0 < q < 1 for q in k["quantiles"]), "kl.quantiles must lie in (0, 1)")
    a = d["abc"]
    need(a["n_sample"] >= 2 and a["n_step"] >= 1, "abc.n_sample must be >= 2 and abc.n_step >= 1")
    need(0 < a["acc_cutoff"] < 1 and 0 < a["keep_fraction"] < 1, "abc cutoffs must lie in (0, 1)")
    need(a["kernel_scale"] > 0, "abc.kernel_scale must be positive")
    need(len(d["observation"]["theta"]) == 2, "observation.theta must have two entries")
    need(d["ppc"]["n_draws"] >= 1, "ppc.n_draws must be >= 1")
    p = d["parallel"]
    need(p["teams"] >= 1 and p["workers_per_team"] >= 1, "teams and workers_per_team must be >= 1")
    need(p["timeout"] >= 0, "parallel.timeout must be >= 0")
    return d


def default_config() -> RunConfig:
    return RunConfig(validate(copy.deepcopy(DEFAULTS)))


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc
    return RunConfig(validate(_merge(DEFAULTS, raw)), Path(base_dir))


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_config(text, path.parent)
    obs = cfg.observation_path()
    if obs is not None and not obs.exists():
        raise ConfigError(f"observation file {obs} does not exist")
    return cfg

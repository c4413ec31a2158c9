"""File formats for pipeline artifacts.

All writers are deterministic: floats are written with ``repr`` (shortest
round-trip form), JSON keys are sorted, and nothing time-dependent is
recorded, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ArtifactError(ValueError):
    pass


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_training_set(path, thetas: np.ndarray, datasets: np.ndarray) -> None:
    """One JSON object per line: ``{"theta": [u0, r0], "x": [...]}``."""
    with open(path, "w") as fh:
        for t, x in zip(thetas, datasets):
            fh.write(json.dumps({"theta": [float(v) for v in t], "x": [float(v) for v in x]}) + "\n")


def read_training_set(path) -> tuple[np.ndarray, np.ndarray]:
    thetas, xs = [], []
    try:
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                thetas.append(rec["theta"])
                xs.append(rec["x"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ArtifactError(f"bad training set {path}: {exc}") from exc
    if not thetas or len({len(x) for x in xs}) != 1:
        raise ArtifactError(f"training set {path} is empty or ragged")
    return np.array(thetas, dtype=float), np.array(xs, dtype=float)


def write_split(path, train: Sequence[int], test: Sequence[int]) -> None:
    write_json(path, {"train": [int(i) for i in train], "test": [int(i) for i in test]})


def read_split(path) -> tuple[np.ndarray, np.ndarray]:
    obj = read_json(path)
    try:
        return np.array(obj["train"], dtype=int), np.array(obj["test"], dtype=int)
    except KeyError as exc:
        raise ArtifactError(f"split file {path} lacks {exc}") from exc


def write_manifest(path, stage: str, config_hash: str, data_hash: str, seeds: dict, files: Iterable) -> None:
    files = sorted(Path(f) for f in files)
    write_json(
        path,
        {
            "stage": stage,
            "config_hash": config_hash,
            "data_hash": data_hash,
            "seeds": {k: int(v) for k, v in seeds.items()},
            "files": {f.name: file_sha256(f) for f in files},
        },
    )


def read_manifest(path) -> dict:
    obj = read_json(path)
    for key in ("stage", "config_hash", "data_hash"):
        if key not in obj:
            raise ArtifactError(f"manifest {path} lacks '{key}'")
    return obj


def write_observation(path, loads, location_ids, theta=None) -> None:
    obj = {"loads": [float(v) for v in loads], "location_ids": [int(i) for i in location_ids]}
    if theta is not None:
        obj["theta"] = [float(v) for v in theta]
    write_json(path, obj)


def read_observation(path) -> dict:
    obj = read_json(path)
    if "loads" not in obj:
        raise ArtifactError(f"observation {path} lacks 'loads'")
    loads = np.asarray(obj["loads"], dtype=float)
    if not np.all(np.isfinite(loads)) or np.any(loads < 0):
        raise ArtifactError(f"observation {path} has negative or non-finite loads")
    obj["loads"] = loads
    obj["location_ids"] = np.asarray(obj.get("location_ids", range(len(loads))), dtype=int)
    return obj


def _csv_writer(fh):
    return csv.writer(fh, lineterminator="\n")


def _fmt(v) -> str:
    return repr(float(v))


def write_trace(path, trace: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["epoch", "loss"])
        for k, v in enumerate(trace):
            w.writerow([k, _fmt(v)])


def write_posterior_samples(path, generations) -> None:
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["step", "particle_id", "u0", "r0", "weight", "distance"])
        for g in generations:
            for k, (t, wt, d) in enumerate(zip(g.thetas, g.weights, g.distances)):
                w.writerow([g.step, k, _fmt(t[0]), _fmt(t[1]), _fmt(wt), _fmt(d)])


def read_posterior_samples(path, step: int | None = None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Thetas, weights and distances of one step (the last one by default)."""
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ArtifactError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise ArtifactError(f"{path} has no particles")
    steps = [int(r["step"]) for r in rows]
    step = max(steps) if step is None else step
    sel = [r for r, s in zip(rows, steps) if s == step]
    thetas = np.array([[float(r["u0"]), float(r["r0"])] for r in sel])
    weights = np.array([float(r["weight"]) for r in sel])
    dists = np.array([float(r["distance"]) for r in sel])
    return thetas, weights, dists


def write_ppc(path, summary) -> None:
    with open(path, "w", newline="") as fh:
        w = _csv_writer(fh)
        w.writerow(["location_id", "obs", "mean", "q25", "q50", "q75", "lo_whisker", "hi_whisker"])
        for row in summary.rows():
            w.writerow([row[0]] + [_fmt(v) for v in row[1:]])

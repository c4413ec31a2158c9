"""Adapter for simulators that run as an external executable.

Wire protocol (UTF-8 JSON lines)::

    request  {"theta": [u0, r0], "seed": <u64>}\\n
    reply    {"loads": [...]}\\n

A reply may carry ``"protocol": <int>``; when present it must match the
adapter's protocol version.
"""

from __future__ import annotations

import json
import subprocess
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

PROTOCOL_VERSION = 1


class SimulatorError(RuntimeError):
    """Base class for simulator failures, attributed to a work item."""

    kind = "error"

    def __init__(self, message: str, *, theta=None, seed=None, item_id=None):
        super().__init__(message)
        self.theta = None if theta is None else [float(v) for v in np.ravel(theta)]
        self.seed = seed
        self.item_id = item_id

    def to_record(self) -> dict:
        return {
            "kind": self.kind,
            "message": str(self),
            "theta": self.theta,
            "seed": self.seed,
            "item_id": self.item_id,
        }


class SimulatorCrash(SimulatorError):
    kind = "crash"

    def __init__(self, message, *, returncode=None, stderr="", **kw):
        super().__init__(message, **kw)
        self.returncode = returncode
        self.stderr = stderr


class SimulatorTimeout(SimulatorError):
    kind = "timeout"


class MalformedReply(SimulatorError):
    kind = "malformed"


@dataclass
class ExternalSimulatorConfig:
    command: Sequence[str]
    output_length: int = 72
    timeout: float = 60.0
    protocol_version: int = PROTOCOL_VERSION
    env: dict | None = field(default=None)


def simulate_external(theta, adapter_config: ExternalSimulatorConfig, seed: int = 0, item_id=None) -> np.ndarray:
    """Run the external simulator once and return its deposit vector."""
    theta = [float(v) for v in np.ravel(getattr(theta, "as_array", lambda: theta)())]
    attribution = dict(theta=theta, seed=int(seed), item_id=item_id)
    request = json.dumps({"theta": theta, "seed": int(seed)}) + "\n"
    try:
        proc = subprocess.run(
            list(adapter_config.command),
            input=request.encode("utf-8"),
            capture_output=True,
            timeout=adapter_config.timeout,
            env=adapter_config.env,
        )
    except subprocess.TimeoutExpired as exc:
        raise SimulatorTimeout(f"external simulator exceeded {adapter_config.timeout}s", **attribution) from exc
    except OSError as exc:
        raise SimulatorCrash(f"could not launch external simulator: {exc}", **attribution) from exc
    if proc.returncode != 0:
        stderr = proc.stderr.decode("utf-8", "replace")
        raise SimulatorCrash(
            f"external simulator exited with status {proc.returncode}",
            returncode=proc.returncode,
            stderr=stderr,
            **attribution,
        )
    lines = [ln for ln in proc.stdout.decode("utf-8", "replace").splitlines() if ln.strip()]
    if not lines:
        raise MalformedReply("external simulator produced no reply", **attribution)
    try:
        reply = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise MalformedReply(f"reply is not JSON: {exc}", **attribution) from exc
    if not isinstance(reply, dict) or "loads" not in reply:
        raise MalformedReply("reply lacks a 'loads' field", **attribution)
    if "protocol" in reply and reply["protocol"] != adapter_config.protocol_version:
        raise MalformedReply(
            f"protocol mismatch: simulator speaks {reply['protocol']}, adapter expects {adapter_config.protocol_version}",
            **attribution,
        )
    try:
        loads = np.asarray(reply["loads"], dtype=float)
    except (TypeError, ValueError) as exc:
        raise MalformedReply(f"loads are not numeric: {exc}", **attribution) from exc
    if loads.ndim != 1 or loads.size != adapter_config.output_length:
        raise MalformedReply(
            f"expected {adapter_config.output_length} loads, got shape {loads.shape}", **attribution
        )
    if not np.all(np.isfinite(loads)) or np.any(loads < 0):
        raise MalformedReply("loads must be finite and non-negative", **attribution)
    return loads


@dataclass
class ExternalSimulator:
    """Callable ``(theta, seed) -> loads`` backed by :func:`simulate_external`."""

    config: ExternalSimulatorConfig

    @property
    def output_length(self) -> int:
        return self.config.output_length

    def __call__(self, theta, stream: int = 0) -> np.ndarray:
        return simulate_external(theta, self.config, seed=stream)

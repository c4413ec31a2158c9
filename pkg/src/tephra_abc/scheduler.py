"""Two-level work distribution: a scheduler hands items to teams of workers.

Each team is a forked leader process plus ``worker_count - 1`` helper
processes. Only the leader talks to the scheduler. When the simulator offers
``partial(theta, seed, rank, size)`` and ``reduce(parts)``, the leader
broadcasts each item to its helpers, computes its own share and gathers the
rest; otherwise the leader simulates alone.

Messages are JSON objects framed by a 4-byte big-endian length and carried
over ``os.pipe`` pairs::

    {"type": "work", "item_id": 3, "theta": [...], "seed": 123}
    {"type": "result", "item_id": 3, "loads": [...]}
    {"type": "failure", "item_id": 3, "kind": "crash", "message": "..."}
    {"type": "shutdown"}

Results depend only on each item's seed, never on which team ran it or when.
"""

from __future__ import annotations

import json
import logging
import multiprocessing as mp
import os
import select
import signal
import struct
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .abc import SimulationFailed

log = logging.getLogger(__name__)

_HEADER = struct.Struct(">I")
_ORPHAN_POLL = 0.2
_CTX = mp.get_context("fork")


class TeamUnavailable(RuntimeError):
    pass


class BatchError(RuntimeError):
    def __init__(self, message: str, pending: Sequence[int] = ()):
        super().__init__(message)
        self.pending = list(pending)


@dataclass(frozen=True)
class WorkItem:
    item_id: int
    theta: tuple[float, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(t) for t in np.ravel(self.theta)))
        if not 0 <= int(self.seed) < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        object.__setattr__(self, "seed", int(self.seed))

    def frame(self) -> dict:
        return {"type": "work", "item_id": self.item_id, "theta": list(self.theta), "seed": self.seed}


@dataclass(frozen=True)
class TeamDescriptor:
    team_id: int
    worker_count: int = 1

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")


@dataclass
class WorkResult:
    item_id: int
    loads: np.ndarray | None
    failure: dict | None = None
    wall_time: float = 0.0
    dispatches: int = 1

    @property
    def ok(self) -> bool:
        return self.failure is None

    def same_outcome(self, other: "WorkResult") -> bool:
        """Bitwise comparison of outcomes, ignoring timing."""
        if self.item_id != other.item_id or self.ok != other.ok:
            return False
        if self.ok:
            return self.loads.tobytes() == other.loads.tobytes()
        return self.failure.get("kind") == other.failure.get("kind")


# -- framing -----------------------------------------------------------------


def send_frame(fd: int, obj: dict) -> None:
    data = json.dumps(obj).encode()
    buf = memoryview(_HEADER.pack(len(data)) + data)
    while buf:
        n = os.write(fd, buf)
        buf = buf[n:]


def _read_exact(fd: int, n: int) -> bytes | None:
    chunks, got = [], 0
    while got < n:
        b = os.read(fd, n - got)
        if not b:
            return None
        chunks.append(b)
        got += len(b)
    return b"".join(chunks)


def recv_frame(fd: int) -> dict | None:
    """Next frame, or ``None`` on end of stream."""
    head = _read_exact(fd, _HEADER.size)
    if head is None:
        return None
    body = _read_exact(fd, _HEADER.unpack(head)[0])
    if body is None:
        return None
    return json.loads(body)


def _wait_readable(fd: int, parent: int) -> bool:
    """Block until ``fd`` is readable; ``False`` once the parent process is gone."""
    while True:
        r, _, _ = select.select([fd], [], [], _ORPHAN_POLL)
        if r:
            return True
        if os.getppid() != parent:
            return False


def _close_all(fds) -> None:
    for fd in fds:
        try:
            os.close(fd)
        except OSError:
            pass


# -- team processes -----------------------------------------------------------


def _failure_frame(item_id, exc: BaseException) -> dict:
    return {"type": "failure", "item_id": item_id, "kind": getattr(exc, "kind", "crash"), "message": str(exc)}


def _helper_main(cmd_r: int, part_w: int, simulate, rank: int, size: int, leader: int) -> None:
    while _wait_readable(cmd_r, leader):
        msg = recv_frame(cmd_r)
        if msg is None or msg["type"] == "shutdown":
            break
        try:
            part = simulate.partial(np.asarray(msg["theta"]), msg["seed"], rank, size)
            send_frame(part_w, {"type": "part", "rank": rank, "values": [float(v) for v in part]})
        except Exception as exc:
            send_frame(part_w, _failure_frame(msg["item_id"], exc))
    os._exit(0)


def _leader_main(work_r: int, result_w: int, simulate, worker_count: int, foreign: list[int]) -> None:
    _close_all(foreign)
    scheduler = os.getppid()
    me = os.getpid()
    splittable = worker_count > 1 and hasattr(simulate, "partial") and hasattr(simulate, "reduce")
    helpers: list[tuple[int, int, int]] = []  # (pid, cmd_w, part_r)
    n_helpers = worker_count - 1 if splittable else 0
    for rank in range(1, n_helpers + 1):
        cmd_r, cmd_w = os.pipe()
        part_r, part_w = os.pipe()
        pid = os.fork()
        if pid == 0:
            _close_all([work_r, result_w, cmd_w, part_r] + [fd for _, c, p in helpers for fd in (c, p)])
            _helper_main(cmd_r, part_w, simulate, rank, worker_count, me)
        os.close(cmd_r)
        os.close(part_w)
        helpers.append((pid, cmd_w, part_r))
    send_frame(result_w, {"type": "ready", "pids": [me] + [h[0] for h in helpers]})

    while _wait_readable(work_r, scheduler):
        msg = recv_frame(work_r)
        if msg is None or msg["type"] == "shutdown":
            break
        item_id, theta, seed = msg["item_id"], np.asarray(msg["theta"], dtype=float), msg["seed"]
        try:
            if helpers:
                for _, cmd_w, _ in helpers:
                    send_frame(cmd_w, msg)
                try:
                    parts = [simulate.partial(theta, seed, 0, worker_count)]
                except Exception as exc:
                    parts, own_error = [], exc
                else:
                    own_error = None
                replies = [recv_frame(part_r) for _, _, part_r in helpers]
                if any(r is None for r in replies):
                    os._exit(70)  # a helper died: the whole team is lost
                if own_error is not None:
                    raise own_error
                for reply in replies:
                    if reply["type"] == "failure":
                        raise RuntimeError(reply["message"])
                    parts.append(reply["values"])
                loads = simulate.reduce(parts)
            else:
                loads = simulate(theta, seed)
            loads = np.asarray(loads, dtype=float).ravel()
            send_frame(result_w, {"type": "result", "item_id": item_id, "loads": loads.tolist()})
        except Exception as exc:
            send_frame(result_w, _failure_frame(item_id, exc))

    for pid, cmd_w, _ in helpers:
        try:
            send_frame(cmd_w, {"type": "shutdown"})
        except OSError:
            pass
    for pid, _, _ in helpers:
        try:
            os.waitpid(pid, 0)
        except ChildProcessError:
            pass


def _leader_entry(*args) -> None:
    try:
        _leader_main(*args)
    finally:
        os._exit(0)


class Team:
    """Running team handle: leader process plus the scheduler's pipe ends."""

    def __init__(self, desc: TeamDescriptor, process, work_w: int, result_r: int, pids: list[int]):
        self.desc = desc
        self.process = process
        self.work_w = work_w
        self.result_r = result_r
        self.pids = pids
        self.alive = True
        self.item: WorkItem | None = None
        self.started = 0.0

    @property
    def team_id(self) -> int:
        return self.desc.team_id

    @property
    def sentinel(self) -> int:
        return self.process.sentinel

    def send(self, item: WorkItem) -> None:
        send_frame(self.work_w, item.frame())
        self.item = item
        self.started = time.monotonic()

    def kill(self) -> None:
        self.alive = False
        for pid in reversed(self.pids):
            try:
                os.kill(pid, signal.SIGKILL)
            except (ProcessLookupError, PermissionError):
                pass
        self.process.join(5)
        self._close_fds()

    def shutdown(self, timeout: float = 5.0) -> None:
        if self.alive:
            try:
                send_frame(self.work_w, {"type": "shutdown"})
            except OSError:
                pass
            self.process.join(timeout)
            if self.process.is_alive():
                self.kill()
        self.alive = False
        self._close_fds()

    def _close_fds(self) -> None:
        _close_all([self.work_w, self.result_r])
        self.work_w = self.result_r = -1


def team_lifecycle(desc: TeamDescriptor, simulate: Callable, foreign: Sequence[int] = (), ready_timeout: float = 30.0) -> Team:
    """Start a team; returns once the leader and all helpers are up."""
    work_r, work_w = os.pipe()
    result_r, result_w = os.pipe()
    try:
        proc = _CTX.Process(
            target=_leader_entry,
            args=(work_r, result_w, simulate, desc.worker_count, list(foreign) + [work_w, result_r]),
            daemon=True,
        )
        proc.start()
    except OSError as exc:
        _close_all([work_r, work_w, result_r, result_w])
        raise TeamUnavailable(f"team {desc.team_id}: spawn failed: {exc}") from exc
    os.close(work_r)
    os.close(result_w)
    r, _, _ = select.select([result_r], [], [], ready_timeout)
    msg = recv_frame(result_r) if r else None
    if not msg or msg.get("type") != "ready":
        proc.kill()
        proc.join(5)
        _close_all([work_w, result_r])
        raise TeamUnavailable(f"team {desc.team_id}: did not report ready")
    return Team(desc, proc, work_w, result_r, msg["pids"])


# -- scheduler ---------------------------------------------------------------


@dataclass
class TeamPool:
    """Set of running teams reused across batches.

    A team that dies is replaced by a fresh one (``respawn_budget`` times in
    total) so that a long run does not bleed capacity.
    """

    simulate: Callable
    descriptors: Sequence[TeamDescriptor]
    timeout: float | None = None
    respawn_budget: int = 1000
    teams: list[Team] = field(default_factory=list, init=False)

    def __post_init__(self):
        if not self.descriptors:
            raise ValueError("need at least one team")
        for desc in self.descriptors:
            self._spawn(desc)

    def _foreign_fds(self) -> list[int]:
        return [fd for t in self.teams if t.alive for fd in (t.work_w, t.result_r)]

    def _spawn(self, desc: TeamDescriptor) -> Team | None:
        try:
            team = team_lifecycle(desc, self.simulate, self._foreign_fds())
        except TeamUnavailable as exc:
            log.warning("%s", exc)
            return None
        self.teams.append(team)
        return team

    def _replace(self, team: Team) -> None:
        self.teams.remove(team)
        if self.respawn_budget > 0:
            self.respawn_budget -= 1
            self._spawn(team.desc)

    @property
    def alive(self) -> list[Team]:
        return [t for t in self.teams if t.alive]

    def run(self, items: Sequence[WorkItem]) -> list[WorkResult]:
        ids = [it.item_id for it in items]
        if len(set(ids)) != len(ids):
            raise ValueError("item ids must be unique within a batch")
        pending = deque(items)
        dispatches = {i: 0 for i in ids}
        results: dict[int, WorkResult] = {}

        while pending or any(t.item is not None for t in self.alive):
            for team in self.alive:
                if team.item is None and pending:
                    item = pending.popleft()
                    dispatches[item.item_id] += 1
                    try:
                        team.send(item)
                    except OSError:
                        team.item = item
                        self._on_death(team, pending, dispatches, results)
            busy = [t for t in self.alive if t.item is not None]
            if not busy:
                if pending:
                    raise BatchError("all teams are dead", [it.item_id for it in pending])
                break
            wait = None
            if self.timeout is not None:
                now = time.monotonic()
                wait = max(0.0, min(t.started + self.timeout - now for t in busy))
            fds = [t.result_r for t in busy] + [t.sentinel for t in busy]
            ready, _, _ = select.select(fds, [], [], wait)
            for team in busy:
                if team.result_r in ready:
                    msg = recv_frame(team.result_r)
                    if msg is None:
                        self._on_death(team, pending, dispatches, results)
                        continue
                    self._on_message(team, msg, dispatches, results)
                elif team.sentinel in ready:
                    self._on_death(team, pending, dispatches, results)
                elif self.timeout is not None and time.monotonic() - team.started >= self.timeout:
                    item = team.item
                    results[item.item_id] = WorkResult(
                        item.item_id,
                        None,
                        {"kind": "timeout", "message": f"no result within {self.timeout} s", "theta": list(item.theta), "seed": item.seed},
                        time.monotonic() - team.started,
                        dispatches[item.item_id],
                    )
                    team.item = None
                    team.kill()
                    self._replace(team)
        return [results[i] for i in sorted(ids)]

    def _on_message(self, team: Team, msg: dict, dispatches, results) -> None:
        item = team.item
        if item is None or msg.get("item_id") != item.item_id:
            raise BatchError(f"team {team.team_id} replied out of turn: {msg.get('type')}")
        elapsed = time.monotonic() - team.started
        if msg["type"] == "result":
            loads = np.asarray(msg["loads"], dtype=float)
            results[item.item_id] = WorkResult(item.item_id, loads, None, elapsed, dispatches[item.item_id])
        else:
            failure = {"kind": msg.get("kind", "crash"), "message": msg.get("message", ""), "theta": list(item.theta), "seed": item.seed}
            results[item.item_id] = WorkResult(item.item_id, None, failure, elapsed, dispatches[item.item_id])
        team.item = None

    def _on_death(self, team: Team, pending, dispatches, results) -> None:
        item = team.item
        team.item = None
        log.warning("team %d died%s", team.team_id, "" if item is None else f" while running item {item.item_id}")
        team.kill()
        self._replace(team)
        if item is None:
            return
        if dispatches[item.item_id] < 2:
            pending.appendleft(item)
        else:
            results[item.item_id] = WorkResult(
                item.item_id,
                None,
                {"kind": "crash", "message": "team died twice on this item", "theta": list(item.theta), "seed": item.seed},
                0.0,
                dispatches[item.item_id],
            )

    def close(self, timeout: float = 5.0) -> None:
        for team in self.teams:
            team.shutdown(timeout)
        self.teams.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def make_teams(n_teams: int, workers_per_team: int = 1) -> list[TeamDescriptor]:
    return [TeamDescriptor(k, workers_per_team) for k in range(n_teams)]


def run_batch(
    items: Sequence[WorkItem],
    teams: Sequence[TeamDescriptor],
    simulate: Callable,
    timeout: float | None = None,
) -> list[WorkResult]:
    """Run every item on a freshly started set of teams; results sorted by ``item_id``."""
    if not items:
        raise ValueError("items must be nonempty")
    with TeamPool(simulate, teams, timeout=timeout) as pool:
        return pool.run(items)


class TeamRunner:
    """Batch runner backed by a :class:`TeamPool`, usable by the ABC engine."""

    is_runner = True

    def __init__(self, simulate: Callable, teams: Sequence[TeamDescriptor], timeout: float | None = None):
        self.pool = TeamPool(simulate, teams, timeout=timeout)
        self._next_id = 0

    def __call__(self, thetas, seeds) -> list[np.ndarray]:
        base = self._next_id
        items = [WorkItem(base + k, t, s) for k, (t, s) in enumerate(zip(thetas, seeds))]
        self._next_id += len(items)
        out = []
        for k, res in enumerate(self.pool.run(items)):
            if not res.ok:
                raise SimulationFailed(f"simulation {k} failed ({res.failure['kind']}): {res.failure['message']}", index=k)
            out.append(res.loads)
        return out

    def close(self) -> None:
        self.pool.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

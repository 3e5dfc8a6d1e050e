"""Discontinuity-bounded best-first search over motion primitives.

Plans for a single robot by concatenating library primitives, allowing a
state-metric mismatch of at most delta at the start and at every join
(positions stay continuous because primitives are replayed at the current
position; only heading / velocity / attitude jump).  Cost is trajectory
duration, the heuristic is straight-line distance over top speed, and
duplicate states are pruned per time step within delta/2.

The returned state sequence is the concatenation of the translated
primitive rollouts; the joins carry the bounded jumps that trajectory
optimization later smooths away.
"""

from __future__ import annotations

import hashlib
import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Environment
from .primitives import PrimitiveLibrary, position_dim, state_metric, state_metric_batch

__all__ = ["AvoidConstraint", "DbResult", "db_astar"]


@dataclass(frozen=True)
class AvoidConstraint:
    """Keep one robot out of a ball during a time window.

    With `state` unset the ball is Euclidean around `position` (physical
    avoidance, robot-robot).  With `state` set it is a ball in the search's
    state metric around that full state: the robot must pass the window in a
    measurably different way, not necessarily somewhere else entirely.
    """

    robot: int
    step: int                 # first covered timestep index
    duration: int             # number of covered steps
    position: np.ndarray      # (3,) ball center
    radius: float
    kind: str = "robot-robot"  # or "coupling", "element-obstacle"
    state: np.ndarray | None = None

    @property
    def last_step(self) -> int:
        return self.step + self.duration - 1


@dataclass
class DbResult:
    status: str               # "solved" | "exhausted" | "expansion_cap" | "timeout"
    states: np.ndarray | None = None
    actions: np.ndarray | None = None
    cost: float = np.inf
    expansions: int = 0

    @property
    def solved(self) -> bool:
        return self.status == "solved"


@dataclass(order=True)
class _Node:
    f: float
    h: float
    tie: int
    idx: int = field(compare=False)          # index into node store
    steps: int = field(compare=False)


def _state_tie(state: np.ndarray) -> int:
    # content-based tie-break: stable across runs and library permutations
    return int.from_bytes(hashlib.blake2b(state.tobytes(), digest_size=8).digest(), "big")


def _to3d(pos2: np.ndarray) -> np.ndarray:
    out = np.zeros((len(pos2), 3))
    out[:, : pos2.shape[1]] = pos2
    return out


def _segment_ok(states: np.ndarray, pd: int, first_step: int, env: Environment,
                radius: float, constraints, kind: str) -> bool:
    """states: (K, dim) covering timesteps first_step..first_step+K-1."""
    p3 = _to3d(states[:, :pd])
    if not np.all(env.positions_in_bounds(p3)):
        return False
    if np.min(env.sphere_clearances(p3, radius)) <= 0.0:
        return False
    for c in constraints:
        lo = max(first_step, c.step)
        hi = min(first_step + len(states) - 1, c.last_step)
        if lo > hi:
            continue
        span = slice(lo - first_step, hi - first_step + 1)
        if c.state is None:
            if np.min(np.linalg.norm(p3[span] - c.position, axis=1)) < c.radius:
                return False
        elif np.min(state_metric_batch(states[span], c.state, kind)) < c.radius:
            return False
    return True


class _Bucket:
    """Per-timestep visited set with an amortized-growth state matrix."""

    __slots__ = ("data", "n")

    def __init__(self, dim: int):
        self.data = np.empty((8, dim))
        self.n = 0

    def append(self, state: np.ndarray) -> None:
        if self.n == len(self.data):
            self.data = np.vstack([self.data, np.empty_like(self.data)])
        self.data[self.n] = state
        self.n += 1

    def min_gap(self, state: np.ndarray, kind: str) -> float:
        if self.n == 0:
            return np.inf
        return float(np.min(state_metric_batch(self.data[: self.n], state, kind)))


def db_astar(model, start: np.ndarray, goal: np.ndarray, delta: float,
             library: PrimitiveLibrary, env: Environment, constraints=(),
             robot: int = 0, body_radius: float = 0.1,
             max_expansions: int = 200_000, max_steps: int = 2000,
             time_cap: float | None = None) -> DbResult:
    """Single-robot primitive search from `start` to within `delta` of `goal`."""
    kind = model.kind
    pd = position_dim(kind)
    dt = model.dt
    constraints = [c for c in constraints if c.robot == robot]
    start = np.asarray(start, dtype=float)
    goal = np.asarray(goal, dtype=float)

    if state_metric(start, goal, kind) <= delta:
        p3 = _to3d(start[None, :pd])[0]
        stay_ok = (env.sphere_clearances(p3[None], body_radius)[0] > 0.0 and all(
            (np.linalg.norm(p3 - c.position) if c.state is None
             else state_metric(start, c.state, kind)) >= c.radius
            for c in constraints))
        if stay_ok:
            return DbResult("solved", start[None].copy(),
                            np.empty((0, model.action_dim)), 0.0, 0)

    prims = library.primitives(kind)
    # states[i], parent[i], via_prim[i] reconstruct the plan
    states: list[np.ndarray] = [start]
    parent = [-1]
    via = [-1]
    h0 = float(np.linalg.norm(start[:pd] - goal[:pd])) / model.max_speed
    heap = [_Node(h0, h0, _state_tie(start), 0, 0)]
    # per-timestep visited states for delta/2 duplicate pruning
    visited: dict[int, _Bucket] = {0: _Bucket(len(start))}
    visited[0].append(start)
    expansions = 0
    t_start = time.monotonic() if time_cap is not None else 0.0

    while heap:
        node = heapq.heappop(heap)
        x = states[node.idx]
        # goal test at pop keeps the search cost-optimal over the heap order
        if node.steps > 0 and state_metric(x, goal, kind) <= delta:
            return _reconstruct(states, parent, via, node.idx, prims, pd,
                                node.steps * dt, expansions)
        expansions += 1
        if expansions > max_expansions:
            return DbResult("expansion_cap", expansions=expansions)
        if time_cap is not None and expansions % 64 == 0:
            if time.monotonic() - t_start > time_cap:
                return DbResult("timeout", expansions=expansions)

        idxs, _gaps = library.query(kind, x, delta)
        candidates = []
        for i in idxs:
            prim = prims[i]
            seg = prim.states.copy()
            seg[:, :pd] += x[:pd]
            if not _segment_ok(seg[1:], pd, node.steps + 1, env, body_radius,
                               constraints, kind):
                continue
            end = seg[-1]
            candidates.append((_state_tie(end), int(i), prim.K, end))
        # content order makes duplicate pruning independent of library order
        candidates.sort(key=lambda c: c[0])
        for tie, i, K, end in candidates:
            steps = node.steps + K
            if steps > max_steps:
                continue
            bucket = visited.get(steps)
            if bucket is None:
                bucket = visited[steps] = _Bucket(len(start))
            elif bucket.min_gap(end, kind) <= 0.5 * delta:
                continue
            bucket.append(end)
            states.append(end)
            parent.append(node.idx)
            via.append(i)
            g = steps * dt
            h = float(np.linalg.norm(end[:pd] - goal[:pd])) / model.max_speed
            heapq.heappush(heap, _Node(g + h, h, tie, len(states) - 1, steps))

    return DbResult("exhausted", expansions=expansions)


def _reconstruct(states, parent, via, leaf, prims, pd, cost, expansions) -> DbResult:
    chain = []
    i = leaf
    while parent[i] >= 0:
        chain.append((parent[i], via[i]))
        i = parent[i]
    chain.reverse()
    out_states = [states[0][None]]
    out_actions = []
    for parent_idx, prim_idx in chain:
        prim = prims[prim_idx]
        seg = prim.states.copy()
        seg[:, :pd] += states[parent_idx][:pd]
        out_states.append(seg[1:])
        out_actions.append(prim.actions)
    return DbResult("solved", np.vstack(out_states), np.vstack(out_actions),
                    float(cost), expansions)

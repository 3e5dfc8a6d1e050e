"""Motion-primitive generation, storage, and metric-space retrieval.

A primitive is a short dynamically-exact rollout (states over K steps plus
the actions that produce them), stored in canonical form: start position at
the origin, everything else (heading, velocity, attitude) preserved.
Because both robot models are translation invariant, a primitive can be
replayed from any position; the discontinuity a search pays for using it
is the state-metric gap on the non-position components.

The library is enriched online by splitting optimizer trajectories into
per-robot segments and re-simulating them under the single-robot dynamics.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .coupled import CouplingSpec, minimal_to_stacked
from .dynamics import RobotModel, UnicycleModel, step, wrap_angle

__all__ = [
    "MotionPrimitive",
    "PrimitiveLibrary",
    "state_metric",
    "state_metric_batch",
    "position_dim",
    "generate_primitives",
    "split_solution",
    "save_library",
    "load_library",
]

# metric weights: one meter of position offset is comparable to pi rad of
# heading error; velocity/attitude/body-rate terms scaled likewise
W_HEADING = 0.5
W_VELOCITY = 0.5
W_ATTITUDE = 0.3
W_BODY_RATE = 0.1


def position_dim(kind: str) -> int:
    return 2 if kind == "unicycle" else 3


def state_metric(a: np.ndarray, b: np.ndarray, kind: str) -> float:
    """Weighted state distance; a true metric for each robot kind."""
    if kind == "unicycle":
        return float(np.linalg.norm(a[:2] - b[:2]) + W_HEADING * abs(wrap_angle(a[2] - b[2])))
    if kind == "multirotor":
        dp = np.linalg.norm(a[0:3] - b[0:3])
        dv = np.linalg.norm(a[12:15] - b[12:15])
        dom = np.linalg.norm(a[15:18] - b[15:18])
        tr = float(a[3:12] @ b[3:12])  # Frobenius inner product = tr(Ra^T Rb)
        ang = np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0))
        return float(dp + W_VELOCITY * dv + W_ATTITUDE * ang + W_BODY_RATE * dom)
    raise ValueError(f"unknown robot kind {kind!r}")


def _row_norms(d: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", d, d))


def state_metric_batch(A: np.ndarray, b: np.ndarray, kind: str) -> np.ndarray:
    """state_metric of each row of A against b."""
    if kind == "unicycle":
        dp = _row_norms(A[:, :2] - b[:2])
        return dp + W_HEADING * np.abs(wrap_angle(A[:, 2] - b[2]))
    if kind == "multirotor":
        dp = _row_norms(A[:, 0:3] - b[0:3])
        dv = _row_norms(A[:, 12:15] - b[12:15])
        dom = _row_norms(A[:, 15:18] - b[15:18])
        tr = A[:, 3:12] @ b[3:12]
        ang = np.arccos(np.clip((tr - 1.0) * 0.5, -1.0, 1.0))
        return dp + W_VELOCITY * dv + W_ATTITUDE * ang + W_BODY_RATE * dom
    raise ValueError(f"unknown robot kind {kind!r}")


@dataclass(frozen=True)
class MotionPrimitive:
    kind: str
    states: np.ndarray   # (K+1, state_dim)
    actions: np.ndarray  # (K, action_dim)
    canonical: bool = True

    @property
    def K(self) -> int:
        return len(self.actions)

    def resimulation_residual(self, model: RobotModel, dt: float) -> float:
        x = self.states[0].copy()
        worst = 0.0
        for k in range(self.K):
            x = step(model, x, self.actions[k], dt)
            worst = max(worst, float(np.max(np.abs(x - self.states[k + 1]))))
        return worst


def _canonical_rollout(model: RobotModel, start: np.ndarray, actions: np.ndarray,
                       dt: float) -> np.ndarray:
    """Re-roll states from a start translated to the origin (exact by construction)."""
    pd = position_dim(model.kind)
    x = start.copy()
    x[:pd] = 0.0
    states = np.empty((len(actions) + 1, len(start)))
    states[0] = x
    for k, u in enumerate(actions):
        x = step(model, x, u, dt)
        states[k + 1] = x
    return states


class PrimitiveLibrary:
    """Append-only store of canonical primitives with exact radius queries."""

    def __init__(self, seed: int | None = None):
        self.seed = seed
        self.revision = 0
        self._prims: dict[str, list[MotionPrimitive]] = {}
        self._starts: dict[str, np.ndarray] = {}

    def primitives(self, kind: str) -> list[MotionPrimitive]:
        return self._prims.get(kind, [])

    def size(self, kind: str | None = None) -> int:
        if kind is not None:
            return len(self._prims.get(kind, []))
        return sum(len(v) for v in self._prims.values())

    def add(self, prims) -> None:
        prims = list(prims)
        if not prims:
            return
        for p in prims:
            self._prims.setdefault(p.kind, []).append(p)
        for kind in {p.kind for p in prims}:
            self._starts.pop(kind, None)
        self.revision += 1

    def _start_matrix(self, kind: str) -> np.ndarray:
        if kind not in self._starts:
            ps = self._prims.get(kind, [])
            self._starts[kind] = (np.stack([p.states[0] for p in ps])
                                  if ps else np.empty((0, 1)))
        return self._starts[kind]

    def query(self, kind: str, state: np.ndarray, delta: float):
        """Indices and metric gaps of primitives applicable at `state`.

        A canonical start is applied at the query position, so the gap is
        the metric on the non-position components only.
        """
        ps = self._prims.get(kind, [])
        if not ps:
            return np.empty(0, dtype=int), np.empty(0)
        starts = self._start_matrix(kind)
        probe = state.copy()
        probe[:position_dim(kind)] = 0.0
        gaps = state_metric_batch(starts, probe, kind)
        idx = np.flatnonzero(gaps <= delta)
        return idx, gaps[idx]


# ---------------------------------------------------------------------------
# generation

def generate_primitives(model: RobotModel, count: int, K: int, seed,
                        dt: float | None = None) -> list[MotionPrimitive]:
    """Sample `count` random short rollouts (two piecewise-constant action
    segments each), canonicalized; deterministic under the seed.

    Multirotor rollouts leaving the velocity/attitude/body-rate envelope
    are discarded; raises if the yield falls below 10%.
    """
    if count < 1 or K < 1:
        raise ValueError("count and K must be >= 1")
    dt = model.dt if dt is None else dt
    rng = np.random.default_rng(seed)
    out: list[MotionPrimitive] = []
    attempts = 0
    max_attempts = 10 * count
    while len(out) < count and attempts < max_attempts:
        attempts += 1
        prim = _sample_primitive(model, K, dt, rng)
        if prim is not None:
            out.append(prim)
    if len(out) < count and len(out) < max(1, count // 10):
        raise ValueError(
            f"primitive generation yield too low: {len(out)}/{count} after {attempts} attempts")
    return out


def _two_segment_actions(K: int, lo: np.ndarray, hi: np.ndarray, rng) -> np.ndarray:
    u1 = rng.uniform(lo, hi)
    u2 = rng.uniform(lo, hi)
    split = K // 2
    return np.vstack([np.tile(u1, (split, 1)), np.tile(u2, (K - split, 1))])


def _sample_primitive(model: RobotModel, K: int, dt: float, rng):
    if isinstance(model, UnicycleModel):
        start = np.array([0.0, 0.0, rng.uniform(-np.pi, np.pi)])
        actions = _two_segment_actions(K, model.u_lo, model.u_hi, rng)
        states = _canonical_rollout(model, start, actions, dt)
        return MotionPrimitive("unicycle", states, actions)

    # multirotor: sample a mild initial flight condition and near-hover motors
    from .dynamics import exp_so3, mr_state  # local import to avoid cycle noise

    v = rng.uniform(-0.3 * model.v_max, 0.3 * model.v_max, 3)
    rotvec = rng.uniform(-0.3 * model.tilt_max, 0.3 * model.tilt_max, 3)
    Om = rng.uniform(-0.2 * model.body_rate_max, 0.2 * model.body_rate_max, 3)
    start = mr_state(np.zeros(3), exp_so3(rotvec), v, Om)
    h = model.hover_force
    lo = np.maximum(model.u_lo, h * 0.85 * np.ones(4))
    hi = np.minimum(model.u_hi, h * 1.15 * np.ones(4))
    actions = _two_segment_actions(K, lo, hi, rng)
    states = _canonical_rollout(model, start, actions, dt)
    # envelope check on every visited state
    vs = states[:, 12:15]
    oms = states[:, 15:18]
    if np.any(np.linalg.norm(vs, axis=1) > model.v_max):
        return None
    if np.any(np.linalg.norm(oms, axis=1) > model.body_rate_max):
        return None
    Rz = states[:, 3:12].reshape(-1, 3, 3)[:, 2, 2]  # cos(tilt) = e3 . R e3
    if np.any(np.arccos(np.clip(Rz, -1.0, 1.0)) > model.tilt_max):
        return None
    return MotionPrimitive("multirotor", states, actions)


# ---------------------------------------------------------------------------
# enrichment from coupled solutions

def split_solution(states_min: np.ndarray, actions: np.ndarray, cspec: CouplingSpec,
                   models, K: int, dt: float) -> list[MotionPrimitive]:
    """Slice a coupled minimal-coordinate trajectory into single-robot
    primitives of length K.

    Each robot's stacked trajectory is cut into segments whose states are
    re-rolled under the *single-robot* dynamics from the segment start
    (coupled and free dynamics differ, so stored states are replaced).
    Segments with out-of-bounds actions are dropped.
    """
    n = cspec.n_robots
    if not isinstance(models, (list, tuple)):
        models = [models] * n
    T = len(actions)
    stacked = np.stack([minimal_to_stacked(x, cspec) for x in states_min])
    sdim = stacked.shape[1] // n
    adim = models[0].action_dim
    acts = np.asarray(actions, dtype=float).reshape(T, n, adim)
    out: list[MotionPrimitive] = []
    for r in range(n):
        model = models[r]
        for k0 in range(0, T - K + 1, K):
            seg_u = acts[k0:k0 + K, r]
            if np.any(seg_u < model.u_lo - 1e-9) or np.any(seg_u > model.u_hi + 1e-9):
                continue
            seg_u = np.clip(seg_u, model.u_lo, model.u_hi)
            start = stacked[k0, sdim * r:sdim * (r + 1)]
            states = _canonical_rollout(model, start, seg_u, dt)
            out.append(MotionPrimitive(model.kind, states, seg_u))
    return out


# ---------------------------------------------------------------------------
# serialization (deterministic JSON)

def save_library(lib: PrimitiveLibrary, path: str, model_params: dict | None = None,
                 dt: float | None = None, K: int | None = None) -> None:
    doc = {
        "schema": 1,
        "seed": lib.seed,
        "dt": dt,
        "K": K,
        "model": model_params or {},
        "kinds": {
            kind: [{"states": p.states.tolist(), "actions": p.actions.tolist()}
                   for p in lib.primitives(kind)]
            for kind in sorted(lib._prims)
        },
    }
    tmp = path + ".tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    os.replace(tmp, path)


def load_library(path: str) -> PrimitiveLibrary:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != 1:
        raise ValueError(f"unsupported primitive-library schema {doc.get('schema')!r}")
    lib = PrimitiveLibrary(seed=doc.get("seed"))
    for kind, entries in doc.get("kinds", {}).items():
        lib.add(MotionPrimitive(kind, np.asarray(e["states"], dtype=float),
                                np.asarray(e["actions"], dtype=float))
                for e in entries)
    return lib

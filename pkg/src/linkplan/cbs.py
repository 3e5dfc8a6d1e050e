"""Conflict-based high-level search over per-robot primitive plans.

Plans each robot independently with the bounded-discontinuity search, then
resolves three kinds of conflicts in strict priority order:

1. robot-robot body overlap (two children, one constraining each robot),
2. coupling-length residual beyond delta (one child constraining a robot
   picked uniformly at random among the participants; for cable teams every
   robot participates and the payload position comes from the estimator),
3. coupling element (rod or cable capsule) hitting an obstacle (one child
   constraining the robot adjacent to the offending element).

Nodes are popped in nondecreasing total-cost order; a clean node yields the
stacked multi-robot trajectory.  All randomness flows through per-node
generators derived from (master seed, node id), so runs are reproducible.
"""

from __future__ import annotations

import heapq
import time
from dataclasses import dataclass, field

import numpy as np

from .coupled import CouplingSpec, estimate_payload
from .dbastar import AvoidConstraint, DbResult, db_astar
from .dynamics import MultirotorModel
from .geometry import Environment
from .primitives import PrimitiveLibrary, position_dim

__all__ = [
    "Conflict",
    "HighLevelNode",
    "HLContext",
    "HLResult",
    "hl_discrete_search",
    "resolve_robot_collision",
    "resolve_physical_constraint",
    "resolve_pc_collision",
]


@dataclass(frozen=True)
class Conflict:
    kind: str                  # "robot-robot" | "coupling" | "element-obstacle"
    step: int                  # first violated timestep
    robots: tuple[int, ...]
    residual: float = 0.0
    element: int | None = None
    obstacle: int | None = None
    span: int = 1              # length of the contiguous violated run


@dataclass
class HighLevelNode:
    node_id: int
    parent_id: int
    constraints: list[tuple[AvoidConstraint, ...]]   # per robot
    trajs: list[DbResult]
    cost: float
    payload_estimates: np.ndarray | None = None      # (H+1, 3), cable teams only

    def __lt__(self, other):  # heap tie-break: creation order
        return (self.cost, self.node_id) < (other.cost, other.node_id)


@dataclass
class HLContext:
    """Immutable inputs shared by every node of one high-level search."""

    models: list
    cspec: CouplingSpec
    env: Environment
    library: PrimitiveLibrary
    delta: float
    starts: list[np.ndarray]
    goals: list[np.ndarray]
    seed: int = 0
    body_radius: float = 0.1
    margin: float = 0.01
    payload_start: np.ndarray | None = None
    db_max_expansions: int = 200_000
    db_max_steps: int = 2000
    estimator_mu: float = 0.1
    estimator_lam: float = 10.0
    trace: list = field(default_factory=list)
    _counter: int = 0

    def next_id(self) -> int:
        self._counter += 1
        return self._counter

    @property
    def n(self) -> int:
        return len(self.models)


@dataclass
class HLResult:
    status: str               # "solved" | "infeasible-initial" | "exhausted" | ...
    states: np.ndarray | None = None    # (H+1, n*state_dim)
    actions: np.ndarray | None = None   # (H, n*action_dim)
    cost: float = np.inf
    trajs: list[DbResult] | None = None
    payload_estimates: np.ndarray | None = None
    nodes_expanded: int = 0
    failed_robot: int | None = None

    @property
    def solved(self) -> bool:
        return self.status == "solved"


# ---------------------------------------------------------------------------
# padding helpers

def _padded_positions(node: HighLevelNode, ctx: HLContext) -> np.ndarray:
    """(n, H+1, 3) robot positions, short plans padded with their final state."""
    horizon = max(len(t.states) for t in node.trajs)
    out = np.zeros((ctx.n, horizon, 3))
    for r, t in enumerate(node.trajs):
        pd = position_dim(ctx.models[r].kind)
        out[r, : len(t.states), :pd] = t.states[:, :pd]
        out[r, len(t.states):, :pd] = t.states[-1, :pd]
    return out


def _pad_action(model) -> np.ndarray:
    if isinstance(model, MultirotorModel):
        return np.full(model.action_dim, model.hover_force)
    return np.zeros(model.action_dim)


def _assemble(node: HighLevelNode, ctx: HLContext):
    """Stack per-robot plans into one aligned trajectory (wait-at-goal padding)."""
    horizon = max(len(t.states) for t in node.trajs)
    states = []
    actions = []
    for r, t in enumerate(node.trajs):
        s = t.states
        if len(s) < horizon:
            s = np.vstack([s, np.tile(s[-1], (horizon - len(s), 1))])
        a = t.actions
        if len(a) < horizon - 1:
            pad = np.tile(_pad_action(ctx.models[r]), (horizon - 1 - len(a), 1))
            a = np.vstack([a, pad]) if len(a) else pad
        states.append(s)
        actions.append(a)
    return np.hstack(states), np.hstack(actions)


# ---------------------------------------------------------------------------
# child construction

def _padded_state(traj: DbResult, k: int) -> np.ndarray:
    """Full state of a plan at step k, holding the last state past the end."""
    return traj.states[min(k, len(traj.states) - 1)].copy()


def _run_end(flags: np.ndarray, k: int) -> int:
    """Last index of the contiguous True run of `flags` starting at k."""
    while k + 1 < len(flags) and flags[k + 1]:
        k += 1
    return k


def _make_child(node: HighLevelNode, ctx: HLContext, robot: int,
                new_constraints) -> HighLevelNode | None:
    """Re-plan `robot` under extra constraints; None if now infeasible."""
    cons = list(node.constraints)
    cons[robot] = cons[robot] + tuple(new_constraints)
    res = db_astar(ctx.models[robot], ctx.starts[robot], ctx.goals[robot], ctx.delta,
                   ctx.library, ctx.env, constraints=cons[robot], robot=robot,
                   body_radius=ctx.body_radius, max_expansions=ctx.db_max_expansions,
                   max_steps=ctx.db_max_steps)
    if not res.solved:
        return None
    trajs = list(node.trajs)
    trajs[robot] = res
    return HighLevelNode(ctx.next_id(), node.node_id, cons, trajs,
                         sum(t.cost for t in trajs))


def _log(ctx: HLContext, node: HighLevelNode, conflict: Conflict, chosen, children):
    ctx.trace.append({
        "node": node.node_id,
        "kind": conflict.kind,
        "step": conflict.step,
        "span": conflict.span,
        "robots": list(conflict.robots),
        "residual": float(conflict.residual),
        "element": conflict.element,
        "obstacle": conflict.obstacle,
        "chosen": chosen,
        "children": [c.node_id for c in children],
    })


# ---------------------------------------------------------------------------
# the three resolvers (strict priority order)

def resolve_robot_collision(node: HighLevelNode, ctx: HLContext, queue: list) -> bool:
    """Earliest pair of robot bodies closer than 2*radius + margin -> 2 children."""
    pos = _padded_positions(node, ctx)
    n = pos.shape[0]
    limit = 2.0 * ctx.body_radius + ctx.margin
    best = None   # earliest (k, i, j); pair order breaks ties at equal k
    for i in range(n):
        for j in range(i + 1, n):
            ks = np.flatnonzero(np.linalg.norm(pos[i] - pos[j], axis=1) < limit)
            if len(ks) and (best is None or ks[0] < best[0]):
                best = (int(ks[0]), i, j)
    if best is None:
        return False
    k, i, j = best
    conflict = Conflict("robot-robot", k, (i, j))
    children = []
    for robot, other in ((i, j), (j, i)):
        c = AvoidConstraint(robot, k, 1, pos[other, k].copy(), limit,
                            kind="robot-robot")
        child = _make_child(node, ctx, robot, (c,))
        if child is not None:
            children.append(child)
    for child in children:
        heapq.heappush(queue, child)
    _log(ctx, node, conflict, None, children)
    return True


def _coupling_residuals(node: HighLevelNode, ctx: HLContext, pos: np.ndarray):
    """Per-step coupling length residuals: (H+1, n_elements); fills payload
    estimates for cable teams.  Estimator failure marks the step with inf."""
    horizon = pos.shape[1]
    spec = ctx.cspec
    if spec.kind == "rods":
        seps = np.linalg.norm(np.diff(pos, axis=0), axis=2)   # (n-1, H+1)
        return np.abs(seps - spec.lengths[:, None]).T
    res = np.zeros((horizon, spec.n_robots))
    est = np.zeros((horizon, 3))
    prev = None if ctx.payload_start is None else np.asarray(ctx.payload_start, float)
    for k in range(horizon):
        p, ok = estimate_payload(pos[:, k], spec.lengths, p_prev=prev,
                                 mu=ctx.estimator_mu, lam=ctx.estimator_lam)
        est[k] = p
        if not ok:
            res[k] = np.inf
        else:
            res[k] = np.abs(np.linalg.norm(p - pos[:, k], axis=1) - spec.lengths)
        prev = p
    node.payload_estimates = est
    return res


def resolve_physical_constraint(node: HighLevelNode, ctx: HLContext,
                                queue: list) -> bool:
    """First step (k >= 1) whose coupling residual exceeds delta -> one child
    constraining a uniformly random participating robot."""
    pos = _padded_positions(node, ctx)
    res = _coupling_residuals(node, ctx, pos)
    bad = np.argwhere(res[1:] > ctx.delta)
    if len(bad) == 0:
        return False
    k, elem = int(bad[0, 0]) + 1, int(bad[0, 1])
    k_end = _run_end(res[:, elem] > ctx.delta, k)
    if ctx.cspec.kind == "rods":
        participants = (elem, elem + 1)
    else:
        participants = tuple(range(ctx.n))
    rng = np.random.default_rng((ctx.seed, node.node_id))
    robot = int(participants[rng.integers(len(participants))])
    conflict = Conflict("coupling", k, participants, residual=float(res[k, elem]),
                        element=elem, span=k_end - k + 1)
    # metric balls: the robot must cross the violated span in states measurably
    # different from the ones that broke the coupling, not vacate a whole
    # spatial region; single-step constraints only shift the violation by one
    new = tuple(
        AvoidConstraint(robot, kk, 1, pos[robot, kk].copy(), ctx.delta,
                        kind="coupling", state=_padded_state(node.trajs[robot], kk))
        for kk in range(k, k_end + 1))
    child = _make_child(node, ctx, robot, new)
    children = [] if child is None else [child]
    for ch in children:
        heapq.heappush(queue, ch)
    _log(ctx, node, conflict, robot, children)
    return True


def resolve_pc_collision(node: HighLevelNode, ctx: HLContext, queue: list) -> bool:
    """First coupling element capsule that hits an obstacle -> one child
    constraining the adjacent robot (for rods: the endpoint nearer the obstacle)."""
    if not ctx.env.obstacles:
        return False
    pos = _padded_positions(node, ctx)
    spec = ctx.cspec
    horizon = pos.shape[1]
    if spec.kind == "rods":
        n_elem = spec.n_robots - 1
        a = pos[:-1].reshape(-1, 3)          # element e at step k -> row e*H + k
        b = pos[1:].reshape(-1, 3)
    else:
        if node.payload_estimates is None:
            _coupling_residuals(node, ctx, pos)
        n_elem = spec.n_robots
        a = pos.reshape(-1, 3)
        b = np.tile(node.payload_estimates, (n_elem, 1))
    clear = ctx.env.capsule_clearances(a, b, spec.element_radius).reshape(n_elem, horizon)
    bad = np.argwhere(clear.T <= 0.0)
    if len(bad) == 0:
        return False
    k, elem = int(bad[0, 0]), int(bad[0, 1])
    if spec.kind == "rods":
        # nearer endpoint of the rod is "adjacent"; ties go to the lower index
        d0 = ctx.env.sphere_clearances(pos[elem, k][None], 0.0)[0]
        d1 = ctx.env.sphere_clearances(pos[elem + 1, k][None], 0.0)[0]
        robot = elem if d0 <= d1 else elem + 1
    else:
        robot = elem
    k_end = _run_end(clear[elem] <= 0.0, k)
    conflict = Conflict("element-obstacle", k, (robot,), element=elem,
                        span=k_end - k + 1)
    new = tuple(
        AvoidConstraint(robot, kk, 1, pos[robot, kk].copy(), ctx.delta,
                        kind="element-obstacle",
                        state=_padded_state(node.trajs[robot], kk))
        for kk in range(k, k_end + 1))
    child = _make_child(node, ctx, robot, new)
    children = [] if child is None else [child]
    for ch in children:
        heapq.heappush(queue, ch)
    _log(ctx, node, conflict, robot, children)
    return True


# ---------------------------------------------------------------------------
# the high-level loop

def hl_discrete_search(ctx: HLContext, node_cap: int = 10_000,
                       time_cap: float | None = None) -> HLResult:
    t0 = time.monotonic() if time_cap is not None else 0.0
    trajs = []
    for r in range(ctx.n):
        res = db_astar(ctx.models[r], ctx.starts[r], ctx.goals[r], ctx.delta,
                       ctx.library, ctx.env, robot=r, body_radius=ctx.body_radius,
                       max_expansions=ctx.db_max_expansions, max_steps=ctx.db_max_steps)
        if not res.solved:
            return HLResult("infeasible-initial", failed_robot=r)
        trajs.append(res)
    root = HighLevelNode(0, -1, [() for _ in range(ctx.n)], trajs,
                         sum(t.cost for t in trajs))
    queue = [root]
    expanded = 0
    while queue:
        if expanded >= node_cap:
            return HLResult("node-cap", nodes_expanded=expanded)
        if time_cap is not None and time.monotonic() - t0 > time_cap:
            return HLResult("timeout", nodes_expanded=expanded)
        node = heapq.heappop(queue)
        expanded += 1
        if resolve_robot_collision(node, ctx, queue):
            continue
        if resolve_physical_constraint(node, ctx, queue):
            continue
        if resolve_pc_collision(node, ctx, queue):
            continue
        states, actions = _assemble(node, ctx)
        return HLResult("solved", states, actions, node.cost, node.trajs,
                        node.payload_estimates, expanded)
    return HLResult("exhausted", nodes_expanded=expanded)

"""Anytime planning loop over the discrete search and the optimizer.

Each iteration shrinks the allowed inter-primitive gap, grows the
primitive library (random rollouts plus slices of previous optimizer
output), runs the conflict-resolving discrete search, converts its
stacked output to minimal coordinates, and hands the result to the
trajectory optimizer.  Feasible optimized trajectories are emitted only
when they strictly improve the incumbent cost, so the emitted cost
sequence is strictly decreasing by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cbs import HLContext, hl_discrete_search
from .coupled import (
    CouplingSpec,
    coupling_lengths,
    element_capsules,
    minimal_to_stacked,
    mp_step,
    mp_track_reference,
    stacked_to_minimal,
    ur_step,
)
from .dynamics import MultirotorModel, RobotModel, UnicycleModel
from .geometry import Environment, Sphere
from .primitives import (
    PrimitiveLibrary,
    generate_primitives,
    split_solution,
    state_metric,
)
from .trajopt import OptProblem, OptResult, optimize

__all__ = [
    "PlannerConfig",
    "ProblemInstance",
    "SolutionRecord",
    "PlanSummary",
    "ValidationReport",
    "plan",
    "validate_instance",
    "validate_solution",
    "delta_schedule",
    "grow_library",
    "minimal_endpoints",
]


# ---------------------------------------------------------------------------
# configuration


@dataclass
class PlannerConfig:
    """Schedule and budget knobs of the anytime loop.

    Fields left at None are resolved per coupling kind by `resolved`:
    delta0 0.5 (rods) / 0.9 (cables), primitive_K 5 / 10, dt0 = model dt.
    With timing=False every wall-clock readout is reported as 0.0 and only
    iteration caps terminate the run, which makes two equally-seeded runs
    byte-identical regardless of machine load.
    """

    delta0: float | None = None
    delta_decay: float = 0.8
    delta_min: float = 0.05
    initial_primitives: int = 100
    growth_primitives: int = 50
    primitive_K: int | None = None
    time_limit: float = 350.0
    max_planner_iterations: int = 50
    stagnation_window: int = 5
    seed: int = 0
    dt0: float | None = None
    beta1: float = 1e-2
    beta2: float = 1e-4
    margin: float = 0.01
    opt_max_iterations: int = 250
    opt_max_outer: int = 12
    opt_inner_cap: int = 25
    db_max_expansions: int = 200_000
    db_max_steps: int = 2000
    hl_node_cap: int = 10_000
    search_budget_frac: float = 0.4
    opt_budget_frac: float = 0.6
    timing: bool = True

    def validate(self) -> None:
        if not 0.0 < self.delta_decay < 1.0:
            raise ValueError("delta decay must lie in (0, 1)")
        if self.delta0 is not None and self.delta0 <= 0:
            raise ValueError("initial delta must be positive")
        if self.time_limit <= 0:
            raise ValueError("time limit must be positive")
        if self.delta_min <= 0:
            raise ValueError("delta floor must be positive")
        if self.max_planner_iterations < 1:
            raise ValueError("need at least one planner iteration")


def resolved(config: PlannerConfig | None, instance: "ProblemInstance") -> PlannerConfig:
    """Fill kind-dependent defaults; instance config overrides, then validate."""
    cfg = replace(config) if config is not None else PlannerConfig()
    overrides = {k: v for k, v in instance.config.items() if hasattr(cfg, k)}
    cfg = replace(cfg, **overrides)
    rods = instance.cspec.kind == "rods"
    if cfg.delta0 is None:
        cfg = replace(cfg, delta0=0.5 if rods else 0.9)
    if cfg.primitive_K is None:
        cfg = replace(cfg, primitive_K=5 if rods else 10)
    if cfg.dt0 is None:
        cfg = replace(cfg, dt0=float(instance.models[0].dt))
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# problem instance


@dataclass
class ProblemInstance:
    """One planning problem: environment, robots, coupling, endpoints.

    starts/goals are stacked per-robot states (n, state_dim).  Cable teams
    must also provide the full minimal start/goal (payload position and
    velocity are not recoverable from robot states alone); rod teams
    derive minimal endpoints from the stacked ones.
    """

    name: str
    env: Environment
    models: list
    starts: np.ndarray
    goals: np.ndarray
    cspec: CouplingSpec
    body_radius: float = 0.1
    minimal_start: np.ndarray | None = None
    minimal_goal: np.ndarray | None = None
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.models, (UnicycleModel, MultirotorModel)):
            self.models = [self.models] * self.cspec.n_robots
        self.models = list(self.models)
        n = self.cspec.n_robots
        if len(self.models) != n:
            raise ValueError("need one robot model per coupled robot")
        if self.starts is None and self.minimal_start is not None:
            self.starts = _stack_rows(minimal_to_stacked(self.minimal_start, self.cspec), n)
        if self.goals is None and self.minimal_goal is not None:
            self.goals = _stack_rows(minimal_to_stacked(self.minimal_goal, self.cspec), n)
        self.starts = np.atleast_2d(np.asarray(self.starts, dtype=float))
        self.goals = np.atleast_2d(np.asarray(self.goals, dtype=float))

    @property
    def payload_start(self) -> np.ndarray | None:
        if self.minimal_start is None:
            return None
        return self.minimal_start[0:3]


def _stack_rows(flat: np.ndarray, n: int) -> np.ndarray:
    return flat.reshape(n, -1)


def _coupling_residual(x_m: np.ndarray, spec: CouplingSpec) -> float:
    if len(spec.lengths) == 0:
        return 0.0
    return float(np.max(np.abs(coupling_lengths(x_m, spec) - spec.lengths)))


def minimal_endpoints(instance: ProblemInstance) -> tuple[np.ndarray, np.ndarray]:
    """Minimal-coordinate start and goal of the coupled system."""
    spec = instance.cspec
    if spec.kind == "cables":
        if instance.minimal_start is None or instance.minimal_goal is None:
            raise ValueError("cable instances must carry minimal start/goal states")
        return (np.asarray(instance.minimal_start, dtype=float),
                np.asarray(instance.minimal_goal, dtype=float))
    out = []
    for stacked in (instance.starts, instance.goals):
        n = spec.n_robots
        x = np.empty(2 * n + 1)
        x[0:2] = stacked[0, 0:2]
        x[2:2 + n] = stacked[:, 2]
        for i in range(n - 1):
            d = stacked[i + 1, 0:2] - stacked[i, 0:2]
            x[2 + n + i] = np.arctan2(d[1], d[0])
        out.append(x)
    return out[0], out[1]


def validate_instance(instance: ProblemInstance) -> None:
    """Raise ValueError on the first structural or physical inconsistency."""
    spec = instance.cspec
    n = spec.n_robots
    sdim = instance.models[0].state_dim
    if instance.starts.shape != (n, sdim) or instance.goals.shape != (n, sdim):
        raise ValueError(f"instance {instance.name!r}: starts/goals must be ({n}, {sdim})")
    if len({m.kind for m in instance.models}) != 1:
        raise ValueError("mixed robot kinds in one coupled team are not supported")
    want = "unicycle" if spec.kind == "rods" else "multirotor"
    if instance.models[0].kind != want:
        raise ValueError(f"{spec.kind} coupling requires {want} robots")
    for tag, stacked in (("start", instance.starts), ("goal", instance.goals)):
        x_m = minimal_endpoints(instance)[0 if tag == "start" else 1]
        if spec.kind == "rods" and n > 1:
            # minimal coordinates have exact lengths by construction, so
            # measure the residual on the as-given robot positions
            seps = np.linalg.norm(np.diff(stacked[:, 0:2], axis=0), axis=1)
            resid = float(np.max(np.abs(seps - spec.lengths)))
        else:
            resid = _coupling_residual(x_m, spec)
        if resid > 1e-6:
            raise ValueError(f"instance {instance.name!r}: coupling residual {resid:.2e} at {tag}")
        pos = [instance.models[i].position(stacked[i]) for i in range(n)]
        for i, p in enumerate(pos):
            if not instance.env.in_bounds(p):
                raise ValueError(f"instance {instance.name!r}: robot {i} {tag} out of bounds")
            if instance.env.clearance(Sphere(p, instance.body_radius)) <= 0.0:
                raise ValueError(f"instance {instance.name!r}: robot {i} {tag} in collision")
        payload = x_m[0:3] if spec.kind == "cables" else None
        for j, cap in enumerate(element_capsules(spec, pos, payload)):
            if instance.env.clearance(cap) <= 0.0:
                raise ValueError(
                    f"instance {instance.name!r}: coupling element {j} collides at {tag}")
        # endpoints are immovable, so any residual contact (including body
        # radius vs workspace walls) makes the whole problem infeasible
        worst = _formation_clearance(instance.env, spec, x_m, instance.models,
                                     instance.body_radius)
        if worst <= 0.0:
            raise ValueError(
                f"instance {instance.name!r}: {tag} formation clearance {worst:.4g} <= 0")
        if spec.kind == "cables":
            x_check = _stack_rows(minimal_to_stacked(x_m, spec), n)
            if np.max(np.abs(x_check - stacked)) > 1e-6:
                raise ValueError(
                    f"instance {instance.name!r}: stacked {tag} disagrees with minimal {tag}")


# ---------------------------------------------------------------------------
# independent solution validator


@dataclass
class ValidationReport:
    """Residuals of a candidate trajectory, recomputed from scratch."""

    defect: float
    start_error: float
    goal_error: float
    min_clearance: float
    penetration: float
    bound_violation: float
    coupling_residual: float

    @property
    def ok(self) -> bool:
        return (self.defect <= 1e-6 and self.goal_error <= 1e-4
                and self.penetration <= 1e-6 and self.bound_violation <= 1e-9
                and self.coupling_residual <= 1e-9 and self.start_error <= 1e-9)

    def as_dict(self) -> dict:
        return {
            "defect": self.defect,
            "start_error": self.start_error,
            "goal_error": self.goal_error,
            "min_clearance": self.min_clearance,
            "penetration": self.penetration,
            "bound_violation": self.bound_violation,
            "coupling_residual": self.coupling_residual,
            "ok": self.ok,
        }


def _metric_minimal(a: np.ndarray, b: np.ndarray, spec: CouplingSpec, models) -> float:
    sa = minimal_to_stacked(a, spec)
    sb = minimal_to_stacked(b, spec)
    width = sa.size // spec.n_robots
    return max(
        state_metric(sa[i * width:(i + 1) * width], sb[i * width:(i + 1) * width],
                     models[i].kind)
        for i in range(spec.n_robots))


def _formation_clearance(env: Environment, spec: CouplingSpec, x_m: np.ndarray,
                         models, body_radius: float) -> float:
    """Min signed clearance of one coupled state, assembled shape by shape."""
    n = spec.n_robots
    stacked = _stack_rows(minimal_to_stacked(x_m, spec), n)
    pos = [models[i].position(stacked[i]) for i in range(n)]
    worst = np.inf
    d = env.dim
    for p in pos:
        worst = min(worst, env.clearance(Sphere(p, body_radius)))
        worst = min(worst, float(np.min(np.minimum(p[:d] - env.lo[:d], env.hi[:d] - p[:d])))
                    - body_radius)
    payload = x_m[0:3] if spec.kind == "cables" else None
    for cap in element_capsules(spec, pos, payload):
        worst = min(worst, env.clearance(cap))
        for p in (cap.a, cap.b):
            worst = min(worst, float(np.min(np.minimum(p[:d] - env.lo[:d], env.hi[:d] - p[:d])))
                        - cap.radius)
    return float(worst)


def validate_solution(instance: ProblemInstance, states: np.ndarray,
                      actions: np.ndarray, dt: float) -> ValidationReport:
    """Re-simulate and re-measure a minimal-coordinate trajectory.

    Deliberately assembled from the scalar-path dynamics and shape-by-shape
    clearance queries rather than the optimizer's batched internals, so it
    cross-checks them.
    """
    spec, models = instance.cspec, instance.models
    X = np.asarray(states, dtype=float)
    U = np.asarray(actions, dtype=float)
    x_s, x_f = minimal_endpoints(instance)

    defect = 0.0
    for k in range(len(U)):
        if spec.kind == "rods":
            pred = ur_step(X[k], U[k], spec, dt)
        else:
            pred = mp_step(X[k], U[k], spec, models, dt)
        defect = max(defect, _metric_minimal(pred, X[k + 1], spec, models))

    start_error = _metric_minimal(X[0], x_s, spec, models)
    goal_error = _metric_minimal(X[-1], x_f, spec, models)

    min_clear = min(
        _formation_clearance(instance.env, spec, x, models, instance.body_radius)
        for x in X)

    lo = np.concatenate([m.u_lo for m in models])
    hi = np.concatenate([m.u_hi for m in models])
    bound = max(0.0, float(np.max(U - hi)), float(np.max(lo - U)))

    coupling = max(_coupling_residual(x, spec) for x in X)

    return ValidationReport(
        defect=defect, start_error=start_error, goal_error=goal_error,
        min_clearance=min_clear, penetration=max(0.0, -min_clear),
        bound_violation=bound, coupling_residual=coupling)


# ---------------------------------------------------------------------------
# schedule


def delta_schedule(config: PlannerConfig, iteration: int) -> float:
    """Gap bound for a 1-based iteration: decayed geometrically, floored."""
    return max(config.delta_min, config.delta0 * config.delta_decay ** (iteration - 1))


def _iteration_seed(master: int, iteration: int) -> int:
    return int(np.random.default_rng((int(master), int(iteration))).integers(2 ** 62))


def grow_library(library: PrimitiveLibrary, config: PlannerConfig, model: RobotModel,
                 iteration: int, cspec: CouplingSpec | None = None, models=None,
                 opt_result: OptResult | None = None) -> int:
    """Add this iteration's primitives; returns how many were added.

    Iteration 1 seeds the initial batch; later iterations add fresh random
    primitives plus slices of the previous optimizer output (kept even
    when that optimization did not converge).
    """
    count = config.initial_primitives if iteration == 1 else config.growth_primitives
    prims = generate_primitives(model, count, config.primitive_K,
                                seed=_iteration_seed(config.seed, iteration))
    if opt_result is not None and cspec is not None:
        prims = prims + split_solution(opt_result.states, opt_result.actions, cspec,
                                       models, config.primitive_K, config.dt0)
    library.add(prims)
    return len(prims)


# ---------------------------------------------------------------------------
# records and summary


@dataclass
class SolutionRecord:
    """One emitted (strictly improving) solution."""

    iteration: int
    delta: float
    discrete_cost: float
    cost: float
    t_wall: float
    states: np.ndarray
    actions: np.ndarray
    dt: float
    residuals: ValidationReport
    opt_iterations: int
    coupling_iterate_max: float


@dataclass
class PlanSummary:
    status: str
    stop_reason: str
    records: list
    best: SolutionRecord | None
    iterations: list
    wall_time: float
    config: PlannerConfig

    @property
    def failure_counts(self) -> dict:
        counts: dict[str, int] = {}
        for entry in self.iterations:
            if entry["outcome"] != "improved":
                counts[entry["outcome"]] = counts.get(entry["outcome"], 0) + 1
        return counts

    @property
    def stalled_level(self) -> str | None:
        if self.iterations and self.best is None:
            return self.iterations[-1]["outcome"]
        return None


# ---------------------------------------------------------------------------
# the anytime loop


def plan(instance: ProblemInstance, config: PlannerConfig | None = None,
         on_solution=None) -> PlanSummary:
    """Run the anytime loop until time/iteration caps or stagnation."""
    cfg = resolved(config, instance)
    validate_instance(instance)
    spec, models, env = instance.cspec, instance.models, instance.env
    x_s, x_f = minimal_endpoints(instance)
    t0 = time.perf_counter()

    def elapsed() -> float:
        return time.perf_counter() - t0 if cfg.timing else 0.0

    library = PrimitiveLibrary(seed=cfg.seed)
    records: list[SolutionRecord] = []
    iter_log: list[dict] = []
    best: SolutionRecord | None = None
    last_opt: OptResult | None = None
    stagnation = 0
    stop_reason = "iteration-cap"

    for it in range(1, cfg.max_planner_iterations + 1):
        if cfg.timing and elapsed() >= cfg.time_limit:
            stop_reason = "time-limit"
            break
        delta = delta_schedule(cfg, it)
        added = grow_library(library, cfg, models[0], it, cspec=spec, models=models,
                             opt_result=last_opt)
        # an iteration counts once its search phase starts; if growing the
        # library already exhausted the budget, stop without logging one
        if cfg.timing and elapsed() >= cfg.time_limit:
            stop_reason = "time-limit"
            break
        entry = {"iteration": it, "delta": delta, "library": library.size(),
                 "added": added, "outcome": None, "t_start": elapsed()}
        iter_log.append(entry)

        hl_cap = None
        if cfg.timing:
            remaining = max(cfg.time_limit - elapsed(), 0.0)
            hl_cap = min(remaining, max(0.5, cfg.search_budget_frac * remaining))
        ctx = HLContext(
            models=models, cspec=spec, env=env, library=library, delta=delta,
            starts=list(instance.starts), goals=list(instance.goals),
            seed=_iteration_seed(cfg.seed, 10_000 + it), body_radius=instance.body_radius,
            margin=cfg.margin, payload_start=instance.payload_start,
            db_max_expansions=cfg.db_max_expansions, db_max_steps=cfg.db_max_steps)
        hl = hl_discrete_search(ctx, node_cap=cfg.hl_node_cap, time_cap=hl_cap)
        entry["hl_status"] = hl.status
        entry["hl_nodes"] = hl.nodes_expanded
        if not hl.solved:
            entry["outcome"] = ("db-infeasible" if hl.status == "infeasible-initial"
                                else f"hl-{hl.status}")
            if hl.failed_robot is not None:
                entry["failed_robot"] = hl.failed_robot
            stagnation += 1
            if stagnation >= cfg.stagnation_window:
                stop_reason = "stagnation"
                break
            continue

        X_min, conv_ok = stacked_to_minimal(hl.states, spec, cfg.dt0,
                                            prev_payload=instance.payload_start)
        if not conv_ok:
            entry["outcome"] = "conversion-failed"
            stagnation += 1
            if stagnation >= cfg.stagnation_window:
                stop_reason = "stagnation"
                break
            continue
        horizon = len(hl.actions)
        entry["discrete_cost"] = horizon * cfg.dt0

        X_warm, U_warm = X_min, hl.actions
        if spec.kind == "cables":
            # open-loop replay of stitched actions diverges (unstable
            # dynamics); re-roll the route closed-loop instead
            X_warm, U_warm = mp_track_reference(X_min, spec, models, cfg.dt0)

        opt_cap = None
        if cfg.timing:
            remaining = max(cfg.time_limit - elapsed(), 0.0)
            opt_cap = min(remaining, max(0.5, cfg.opt_budget_frac * remaining))
        problem = OptProblem(
            cspec=spec, models=models, start=x_s, goal=x_f, horizon=horizon,
            dt0=cfg.dt0, env=env, beta1=cfg.beta1, beta2=cfg.beta2,
            margin=cfg.margin, body_radius=instance.body_radius)
        res = optimize(problem, X_warm, U_warm, max_iterations=cfg.opt_max_iterations,
                       time_cap=opt_cap, max_outer=cfg.opt_max_outer,
                       inner_cap=cfg.opt_inner_cap)
        last_opt = res
        entry["opt_status"] = res.status
        entry["opt_iterations"] = res.iterations

        if not res.converged:
            entry["outcome"] = "opt-failed"
            stagnation += 1
            if stagnation >= cfg.stagnation_window:
                stop_reason = "stagnation"
                break
            continue
        report = validate_solution(instance, res.states, res.actions, res.dt)
        if not report.ok:
            entry["outcome"] = "invalid"
        elif best is not None and res.duration >= best.cost - 1e-12:
            entry["outcome"] = "worse"
            entry["cost"] = res.duration
        else:
            record = SolutionRecord(
                iteration=it, delta=delta, discrete_cost=horizon * cfg.dt0,
                cost=res.duration, t_wall=elapsed(), states=res.states,
                actions=res.actions, dt=res.dt, residuals=report,
                opt_iterations=res.iterations,
                coupling_iterate_max=max(res.iterate_coupling_residuals))
            records.append(record)
            best = record
            entry["outcome"] = "improved"
            entry["cost"] = record.cost
            if on_solution is not None:
                on_solution(record)
        if entry["outcome"] != "improved":
            stagnation += 1
        else:
            stagnation = 0
        if stagnation >= cfg.stagnation_window:
            stop_reason = "stagnation"
            break
    else:
        stop_reason = "iteration-cap"

    return PlanSummary(
        status="solved" if best is not None else "no-solution",
        stop_reason=stop_reason, records=records, best=best, iterations=iter_log,
        wall_time=elapsed(), config=cfg)

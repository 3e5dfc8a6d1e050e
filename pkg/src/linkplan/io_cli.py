"""Problem-instance and trajectory files, metrics, SVG plots, and the CLI.

File formats are JSON with a "schema" version; every write is atomic
(temp file + rename) and byte-deterministic (sorted keys, fixed float
handling), so identical runs produce identical artifacts.  Exit codes:
0 success, 1 planner finished without a solution, 2 parse or validation
errors.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import hashlib
import json
import os
import sys
import tempfile
import warnings
from dataclasses import asdict

import numpy as np

from .coupled import CouplingSpec, minimal_to_stacked, mp_hover_state
from .dynamics import model_for_kind
from .geometry import Box, Capsule, Environment, Sphere
from .planner import (
    PlannerConfig,
    ProblemInstance,
    plan,
    resolved,
    validate_instance,
    validate_solution,
)
from .primitives import PrimitiveLibrary, generate_primitives, save_library

SCHEMA_VERSION = 1

__all__ = [
    "InstanceError",
    "load_instance",
    "load_trajectory",
    "trajectory_doc",
    "save_json",
    "plot_instance_svg",
    "plot_anytime_svg",
    "main",
]


class InstanceError(ValueError):
    """Parse/validation failure addressed to a file and field path."""


# ---------------------------------------------------------------------------
# atomic, deterministic writes


def _dumps(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_json(path: str, doc) -> None:
    atomic_write_text(path, _dumps(doc))


# ---------------------------------------------------------------------------
# instance files


def _need(d: dict, key: str, where: str):
    if key not in d:
        raise InstanceError(f"{where}: missing field {key!r}")
    return d[key]


def _floats(v, where: str) -> list[float]:
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise InstanceError(f"{where}: expected a list of numbers") from None


def _obstacle_from_json(d: dict, where: str):
    kind = _need(d, "type", where)
    try:
        if kind == "box":
            return Box(_floats(_need(d, "lo", where), f"{where}.lo"),
                       _floats(_need(d, "hi", where), f"{where}.hi"))
        if kind == "sphere":
            return Sphere(_floats(_need(d, "center", where), f"{where}.center"),
                          float(_need(d, "radius", where)))
        if kind == "capsule":
            return Capsule(_floats(_need(d, "a", where), f"{where}.a"),
                           _floats(_need(d, "b", where), f"{where}.b"),
                           float(_need(d, "radius", where)))
    except InstanceError:
        raise
    except (TypeError, ValueError) as e:
        raise InstanceError(f"{where}: {e}") from None
    raise InstanceError(f"{where}: unknown obstacle type {kind!r}")


_KNOWN_TOP = {"schema", "name", "environment", "robots", "coupling", "config"}
_KNOWN_ROBOT = {"kind", "start", "goal", "radius", "model"}
_KNOWN_COUPLING = {"kind", "lengths", "payload_mass", "element_radius",
                   "start", "goal"}


def _warn_unknown(d: dict, known: set, where: str) -> None:
    for key in d:
        if key not in known:
            warnings.warn(f"{where}: ignoring unknown field {key!r}", stacklevel=3)


def _endpoint_state(d, spec: CouplingSpec, models, where: str) -> np.ndarray:
    """Minimal cable-system state from either a full vector or the
    payload+directions shorthand (equilibrium attitudes, zero velocity)."""
    if isinstance(d, dict) and "minimal" in d:
        return np.asarray(_floats(d["minimal"], f"{where}.minimal"))
    if not isinstance(d, dict) or "payload" not in d:
        raise InstanceError(
            f"{where}: expected {{'payload': [...], 'directions': [[...]]}} "
            "or {'minimal': [...]}")
    payload = _floats(d["payload"], f"{where}.payload")
    if len(payload) != 3:
        raise InstanceError(f"{where}.payload: expected 3 numbers")
    n = spec.n_robots
    if "directions" in d:
        dirs = [_floats(row, f"{where}.directions[{i}]")
                for i, row in enumerate(d["directions"])]
        if len(dirs) != n or any(len(r) != 3 for r in dirs):
            raise InstanceError(f"{where}.directions: expected {n} unit 3-vectors")
    else:
        dirs = [[0.0, 0.0, -1.0]] * n  # robots directly above the payload
    try:
        x, _ = mp_hover_state(spec, models, payload, np.asarray(dirs))
    except ValueError as e:
        raise InstanceError(f"{where}: {e}") from None
    return x


def load_instance(path: str) -> ProblemInstance:
    """Parse and validate an instance file into a ProblemInstance."""
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InstanceError(f"{path}: {e}") from None
    except json.JSONDecodeError as e:
        raise InstanceError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    if not isinstance(doc, dict):
        raise InstanceError(f"{path}: top level must be an object")
    if doc.get("schema") != SCHEMA_VERSION:
        raise InstanceError(
            f"{path}: schema: unsupported version {doc.get('schema')!r} "
            f"(expected {SCHEMA_VERSION})")
    _warn_unknown(doc, _KNOWN_TOP, path)
    name = str(_need(doc, "name", path))

    envd = _need(doc, "environment", path)
    bounds = _need(envd, "bounds", f"{path}: environment")
    where = f"{path}: environment.bounds"
    obstacles = [
        _obstacle_from_json(o, f"{path}: environment.obstacles[{i}]")
        for i, o in enumerate(envd.get("obstacles", []))
    ]
    try:
        env = Environment(
            lo=_floats(_need(bounds, "lo", where), f"{where}.lo"),
            hi=_floats(_need(bounds, "hi", where), f"{where}.hi"),
            obstacles=obstacles, dim=int(bounds.get("dim", 3)))
    except ValueError as e:
        raise InstanceError(f"{where}: {e}") from None

    robots = _need(doc, "robots", path)
    if not robots:
        raise InstanceError(f"{path}: robots: need at least one robot")
    models, radii = [], []
    for i, rd in enumerate(robots):
        where = f"{path}: robots[{i}]"
        _warn_unknown(rd, _KNOWN_ROBOT, where)
        kind = _need(rd, "kind", where)
        params = dict(rd.get("model", {}))
        try:
            models.append(model_for_kind(kind, **params))
        except (TypeError, ValueError) as e:
            raise InstanceError(f"{where}.model: {e}") from None
        radii.append(float(_need(rd, "radius", where)))
    if len(set(radii)) != 1:
        raise InstanceError(f"{path}: robots: all radii must be equal")

    cd = _need(doc, "coupling", path)
    where = f"{path}: coupling"
    _warn_unknown(cd, _KNOWN_COUPLING, where)
    try:
        cspec = CouplingSpec(
            kind=_need(cd, "kind", where),
            lengths=np.asarray(_floats(_need(cd, "lengths", where),
                                       f"{where}.lengths")),
            payload_mass=float(cd.get("payload_mass", 0.0)),
            element_radius=float(cd.get("element_radius", 0.01)))
    except ValueError as e:
        raise InstanceError(f"{where}: {e}") from None
    if cspec.n_robots != len(models):
        raise InstanceError(
            f"{path}: robots: coupling implies {cspec.n_robots} robots, "
            f"file lists {len(models)}")

    config = dict(doc.get("config", {}))
    for key in config:
        if not hasattr(PlannerConfig(), key):
            warnings.warn(f"{path}: config: ignoring unknown option {key!r}",
                          stacklevel=2)

    if cspec.kind == "rods":
        starts, goals = [], []
        for i, rd in enumerate(robots):
            where = f"{path}: robots[{i}]"
            starts.append(_floats(_need(rd, "start", where), f"{where}.start"))
            goals.append(_floats(_need(rd, "goal", where), f"{where}.goal"))
        inst = ProblemInstance(
            name=name, env=env, models=models, starts=np.asarray(starts),
            goals=np.asarray(goals), cspec=cspec, body_radius=radii[0],
            config=config)
    else:
        for i, rd in enumerate(robots):
            if "start" in rd or "goal" in rd:
                raise InstanceError(
                    f"{path}: robots[{i}]: cable-team robot states derive from "
                    "coupling.start/goal; remove per-robot start/goal")
        x_s = _endpoint_state(_need(cd, "start", where), cspec, models,
                              f"{where}.start")
        x_f = _endpoint_state(_need(cd, "goal", where), cspec, models,
                              f"{where}.goal")
        inst = ProblemInstance(
            name=name, env=env, models=models, starts=None, goals=None,
            cspec=cspec, body_radius=radii[0], minimal_start=x_s,
            minimal_goal=x_f, config=config)
    try:
        validate_instance(inst)
    except ValueError as e:
        raise InstanceError(str(e)) from None
    return inst


# ---------------------------------------------------------------------------
# trajectory files, records, metrics


def config_hash(cfg: PlannerConfig) -> str:
    return hashlib.blake2b(_dumps(asdict(cfg)).encode(), digest_size=8).hexdigest()


def trajectory_doc(record, instance: ProblemInstance, cfg: PlannerConfig) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "representation": "minimal",
        "dt": record.dt,
        "states": [list(map(float, row)) for row in record.states],
        "actions": [list(map(float, row)) for row in record.actions],
        "meta": {
            "instance": instance.name,
            "iteration": record.iteration,
            "delta": record.delta,
            "cost": record.cost,
            "t_wall": record.t_wall,
            "residuals": record.residuals.as_dict(),
            "seed": cfg.seed,
            "config_hash": config_hash(cfg),
        },
    }


def load_trajectory(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as e:
        raise InstanceError(f"{path}: {e}") from None
    except json.JSONDecodeError as e:
        raise InstanceError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    for key in ("representation", "dt", "states", "actions"):
        if key not in doc:
            raise InstanceError(f"{path}: missing field {key!r}")
    if doc["representation"] != "minimal":
        raise InstanceError(
            f"{path}: representation: only 'minimal' is supported")
    return doc


def records_jsonl(summary, instance: ProblemInstance) -> str:
    lines = []
    for rec in summary.records:
        doc = trajectory_doc(rec, instance, summary.config)
        lines.append(json.dumps(doc, sort_keys=True))
    return "".join(line + "\n" for line in lines)


def metrics_row(instance: ProblemInstance, summary) -> dict:
    return {
        "instance": instance.name,
        "success": int(summary.best is not None),
        "cost": f"{summary.best.cost:.6f}" if summary.best else "",
        "time_to_first_solution":
            f"{summary.records[0].t_wall:.3f}" if summary.records else "",
    }


_METRIC_FIELDS = ["instance", "success", "cost", "time_to_first_solution"]


def write_metrics_csv(path: str, rows: list[dict]) -> None:
    import io as _io

    buf = _io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=_METRIC_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    atomic_write_text(path, buf.getvalue())


def summary_doc(summary, instance: ProblemInstance) -> dict:
    return {
        "schema": SCHEMA_VERSION,
        "instance": instance.name,
        "status": summary.status,
        "stop_reason": summary.stop_reason,
        "wall_time": summary.wall_time,
        "iterations": summary.iterations,
        "failure_counts": summary.failure_counts,
        "n_solutions": len(summary.records),
        "best_cost": summary.best.cost if summary.best else None,
        "config": asdict(summary.config),
        "config_hash": config_hash(summary.config),
    }


# ---------------------------------------------------------------------------
# SVG plots (hand-rolled, deterministic: no timestamps, fixed formatting)

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"]


def _fmt(x: float) -> str:
    return f"{x:.4f}"


class _Canvas:
    def __init__(self, lo, hi, width=640.0, pad=24.0):
        span = np.maximum(hi - lo, 1e-9)
        self.scale = (width - 2 * pad) / span[0]
        self.lo, self.pad = lo, pad
        self.w = width
        self.h = span[1] * self.scale + 2 * pad
        self.parts: list[str] = []

    def pt(self, p) -> tuple[float, float]:
        x = self.pad + (p[0] - self.lo[0]) * self.scale
        y = self.h - self.pad - (p[1] - self.lo[1]) * self.scale
        return x, y

    def line(self, a, b, stroke, width=1.0, opacity=1.0, cap="butt"):
        (x1, y1), (x2, y2) = self.pt(a), self.pt(b)
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(width)}" '
            f'stroke-opacity="{_fmt(opacity)}" stroke-linecap="{cap}" />')

    def circle(self, c, r_world, fill, opacity=1.0):
        x, y = self.pt(c)
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r_world * self.scale)}" '
            f'fill="{fill}" fill-opacity="{_fmt(opacity)}" />')

    def rect(self, lo, hi, fill, stroke="none", opacity=1.0):
        x1, y1 = self.pt([lo[0], hi[1]])
        x2, y2 = self.pt([hi[0], lo[1]])
        self.parts.append(
            f'<rect x="{_fmt(x1)}" y="{_fmt(y1)}" width="{_fmt(x2 - x1)}" '
            f'height="{_fmt(y2 - y1)}" fill="{fill}" fill-opacity="{_fmt(opacity)}" '
            f'stroke="{stroke}" />')

    def polyline(self, pts, stroke, width=1.5):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (self.pt(p) for p in pts))
        self.parts.append(
            f'<polyline points="{coords}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(width)}" />')

    def svg(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(self.w)}" '
                f'height="{_fmt(self.h)}" viewBox="0 0 {_fmt(self.w)} {_fmt(self.h)}">')
        return head + "\n" + "\n".join(self.parts) + "\n</svg>\n"


def _proj_axes(env: Environment) -> tuple[int, int]:
    # planar problems plot x/y; spatial ones use the x/z side view
    return (0, 1) if env.dim == 2 else (0, 2)


def _robot_positions(instance: ProblemInstance, x_m: np.ndarray) -> np.ndarray:
    n = instance.cspec.n_robots
    stacked = minimal_to_stacked(x_m, instance.cspec).reshape(n, -1)
    return np.stack([instance.models[i].position(stacked[i]) for i in range(n)])


def plot_instance_svg(instance: ProblemInstance, trajectories=()) -> str:
    ax, ay = _proj_axes(instance.env)
    env = instance.env
    cv = _Canvas(np.array([env.lo[ax], env.lo[ay]]),
                 np.array([env.hi[ax], env.hi[ay]]))
    cv.rect([env.lo[ax], env.lo[ay]], [env.hi[ax], env.hi[ay]],
            fill="#ffffff", stroke="#333333")
    for obs in env.obstacles:
        if isinstance(obs, Box):
            cv.rect([obs.lo[ax], obs.lo[ay]], [obs.hi[ax], obs.hi[ay]],
                    fill="#888888", opacity=0.8)
        elif isinstance(obs, Sphere):
            cv.circle([obs.center[ax], obs.center[ay]], obs.radius,
                      fill="#888888", opacity=0.8)
        else:
            cv.line([obs.a[ax], obs.a[ay]], [obs.b[ax], obs.b[ay]],
                    stroke="#888888", width=2 * obs.radius * cv.scale,
                    opacity=0.8, cap="round")

    from .planner import minimal_endpoints

    x_s, x_f = minimal_endpoints(instance)
    for tag, x_m, color in (("start", x_s, "#2ca02c"), ("goal", x_f, "#d62728")):
        for p in _robot_positions(instance, x_m):
            cv.circle([p[ax], p[ay]], instance.body_radius, fill=color, opacity=0.35)

    for t_idx, states in enumerate(trajectories):
        states = np.asarray(states, dtype=float)
        color = _PALETTE[t_idx % len(_PALETTE)]
        pos = np.stack([_robot_positions(instance, x) for x in states])
        for r in range(instance.cspec.n_robots):
            cv.polyline([[p[ax], p[ay]] for p in pos[:, r]], stroke=color)
        step = max(1, (len(states) - 1) // 8)
        for k in range(0, len(states), step):
            pk = pos[k]
            if instance.cspec.kind == "rods":
                for i in range(len(pk) - 1):
                    cv.line([pk[i][ax], pk[i][ay]], [pk[i + 1][ax], pk[i + 1][ay]],
                            stroke="#444444", width=1.0, opacity=0.6)
            else:
                p0 = states[k][0:3]
                cv.circle([p0[ax], p0[ay]], 0.02, fill="#444444")
                for i in range(len(pk)):
                    cv.line([pk[i][ax], pk[i][ay]], [p0[ax], p0[ay]],
                            stroke="#444444", width=1.0, opacity=0.6)
    return cv.svg()


def plot_anytime_svg(records: list[dict]) -> str:
    w, h, pad = 480.0, 320.0, 40.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(w)}" '
             f'height="{_fmt(h)}" viewBox="0 0 {_fmt(w)} {_fmt(h)}">']
    parts.append(f'<rect x="0" y="0" width="{_fmt(w)}" height="{_fmt(h)}" '
                 'fill="#ffffff" />')
    parts.append(f'<line x1="{_fmt(pad)}" y1="{_fmt(h - pad)}" x2="{_fmt(w - pad)}" '
                 f'y2="{_fmt(h - pad)}" stroke="#333333" stroke-width="1" />')
    parts.append(f'<line x1="{_fmt(pad)}" y1="{_fmt(pad)}" x2="{_fmt(pad)}" '
                 f'y2="{_fmt(h - pad)}" stroke="#333333" stroke-width="1" />')
    if records:
        costs = [float(r["meta"]["cost"]) for r in records]
        walls = [float(r["meta"].get("t_wall", 0.0)) for r in records]
        xs = walls if any(t > 0 for t in walls) else \
            [float(r["meta"]["iteration"]) for r in records]
        x_lo, x_hi = 0.0, max(max(xs), 1e-9) * 1.05
        c_lo, c_hi = 0.0, max(costs) * 1.1
        def px(x): return pad + (x - x_lo) / (x_hi - x_lo) * (w - 2 * pad)
        def py(c): return h - pad - (c - c_lo) / (c_hi - c_lo) * (h - 2 * pad)
        pts = [(px(xs[0]), py(c_hi))]  # drop in from "no solution yet"
        for i, (x, c) in enumerate(zip(xs, costs)):
            if i > 0:
                pts.append((px(x), py(costs[i - 1])))  # hold previous cost
            pts.append((px(x), py(c)))
        pts.append((px(x_hi), py(costs[-1])))
        coords = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="#1f77b4" '
                     'stroke-width="2" />')
        for x, c in zip(xs, costs):
            parts.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(c))}" r="3" '
                         'fill="#1f77b4" />')
        parts.append(f'<text x="{_fmt(w - pad)}" y="{_fmt(h - pad + 16)}" '
                     f'text-anchor="end" font-size="11">{_fmt(x_hi)}</text>')
        parts.append(f'<text x="{_fmt(pad - 4)}" y="{_fmt(pad)}" text-anchor="end" '
                     f'font-size="11">{_fmt(c_hi)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# CLI


def _env_default(var: str, cast, fallback):
    raw = os.environ.get(var)
    if raw is None:
        return fallback
    try:
        return cast(raw)
    except ValueError:
        warnings.warn(f"ignoring invalid {var}={raw!r}")
        return fallback


def _build_config(args) -> PlannerConfig:
    cfg = PlannerConfig()
    seed = _env_default("LINKPLAN_SEED", int, cfg.seed)
    time_limit = _env_default("LINKPLAN_TIME_LIMIT", float, cfg.time_limit)
    if args.seed is not None:
        seed = args.seed
    if args.time_limit is not None:
        time_limit = args.time_limit
    kw = dict(seed=seed, time_limit=time_limit)
    if getattr(args, "no_timing", False):
        kw["timing"] = False
    if getattr(args, "max_iterations", None) is not None:
        kw["max_planner_iterations"] = args.max_iterations
    return PlannerConfig(**kw)


def _run_plan(instance_path: str, args) -> tuple[int, dict]:
    instance = load_instance(instance_path)
    cfg = _build_config(args)
    summary = plan(instance, cfg)
    outdir = args.out or "."
    os.makedirs(outdir, exist_ok=True)
    stem = os.path.join(outdir, instance.name)
    if summary.best is not None:
        save_json(stem + "_best.json",
                  trajectory_doc(summary.best, instance, summary.config))
    atomic_write_text(stem + "_records.jsonl", records_jsonl(summary, instance))
    row = metrics_row(instance, summary)
    write_metrics_csv(stem + "_metrics.csv", [row])
    save_json(stem + "_summary.json", summary_doc(summary, instance))
    return (0 if summary.best is not None else 1), row


def cmd_plan(args) -> int:
    code, row = _run_plan(args.instance, args)
    print(f"{row['instance']}: success={row['success']} cost={row['cost'] or '-'} "
          f"t_first={row['time_to_first_solution'] or '-'}")
    return code


def cmd_gen_primitives(args) -> int:
    try:
        model = model_for_kind(args.kind, **({"dt": args.dt} if args.dt else {}))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    prims = generate_primitives(model, args.count, args.K, seed=args.seed)
    lib = PrimitiveLibrary(seed=args.seed)
    lib.add(prims)
    save_library(lib, args.out, model_params={"kind": args.kind},
                 dt=model.dt, K=args.K)
    print(f"wrote {len(prims)} primitives to {args.out}")
    return 0


def cmd_validate(args) -> int:
    traj = load_trajectory(args.trajectory)
    instance = load_instance(args.instance)
    states = np.asarray(traj["states"], dtype=float)
    actions = np.asarray(traj["actions"], dtype=float)

    from .planner import minimal_endpoints

    want_dim = len(minimal_endpoints(instance)[0])
    want_act = sum(len(m.u_lo) for m in instance.models)
    if states.ndim != 2 or states.shape[1] != want_dim:
        raise InstanceError(
            f"{args.trajectory}: states are {states.shape[1] if states.ndim == 2 else '?'}-dimensional "
            f"but instance {instance.name!r} needs {want_dim}")
    if actions.ndim != 2 or actions.shape[1] != want_act or \
            len(actions) + 1 != len(states):
        raise InstanceError(
            f"{args.trajectory}: actions do not match instance {instance.name!r}")
    report = validate_solution(instance, states, actions, float(traj["dt"]))
    for key, val in report.as_dict().items():
        print(f"{key}: {val}")
    return 0 if report.ok else 1


def cmd_plot(args) -> int:
    instance = load_instance(args.instance)
    trajs = [np.asarray(load_trajectory(p)["states"], dtype=float)
             for p in args.trajectories]
    atomic_write_text(args.out, plot_instance_svg(instance, trajs))
    print(f"wrote {args.out}")
    return 0


def cmd_plot_anytime(args) -> int:
    records = []
    try:
        with open(args.records) as fh:
            for lineno, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        records.append(json.loads(line))
                    except json.JSONDecodeError as e:
                        raise InstanceError(
                            f"{args.records}:{lineno}: {e.msg}") from None
    except OSError as e:
        raise InstanceError(f"{args.records}: {e}") from None
    atomic_write_text(args.out, plot_anytime_svg(records))
    print(f"wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    rows, codes = [], []
    with concurrent.futures.ProcessPoolExecutor(max_workers=args.jobs) as pool:
        futures = [pool.submit(_run_plan, path, args) for path in args.instances]
        for fut in futures:
            code, row = fut.result()
            codes.append(code)
            rows.append(row)
    rows.sort(key=lambda r: r["instance"])
    outdir = args.out or "."
    write_metrics_csv(os.path.join(outdir, "metrics.csv"), rows)
    for row in rows:
        print(f"{row['instance']}: success={row['success']} cost={row['cost'] or '-'}")
    return 0 if all(c == 0 for c in codes) else 1


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="linkplan",
        description="Anytime kinodynamic planning for physically linked robot teams.")
    sub = ap.add_subparsers(dest="command", required=True)

    def add_plan_flags(p):
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (env LINKPLAN_SEED, lower precedence)")
        p.add_argument("--time-limit", type=float, default=None,
                       help="wall-clock budget in seconds (env LINKPLAN_TIME_LIMIT)")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--max-iterations", type=int, default=None,
                       help="cap on planner iterations")
        p.add_argument("--no-timing", action="store_true",
                       help="deterministic mode: iteration caps only, wall-clock "
                            "readouts reported as 0")

    p = sub.add_parser("plan", help="run the anytime planner on one instance")
    p.add_argument("instance")
    add_plan_flags(p)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("gen-primitives", help="sample a primitive library file")
    p.add_argument("kind", choices=["unicycle", "multirotor"])
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--K", type=int, required=True, help="steps per primitive")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_primitives)

    p = sub.add_parser("validate", help="re-check a trajectory against an instance")
    p.add_argument("trajectory")
    p.add_argument("instance")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("plot", help="render an instance (and trajectories) to SVG")
    p.add_argument("instance")
    p.add_argument("trajectories", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("plot-anytime", help="render the cost-vs-time curve to SVG")
    p.add_argument("records")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot_anytime)

    p = sub.add_parser("bench", help="run plan over many instances")
    p.add_argument("instances", nargs="+")
    add_plan_flags(p)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.func(args)
    except InstanceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())

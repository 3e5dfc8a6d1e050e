"""Instance/trajectory file formats, SVG plots, and the CLI."""

import copy
import json
import re
from pathlib import Path

import numpy as np
import pytest

from linkplan.dynamics import model_for_kind, step
from linkplan.io_cli import (
    InstanceError,
    _build_config,
    _parser,
    atomic_write_text,
    load_instance,
    load_trajectory,
    main,
    plot_anytime_svg,
    save_json,
)
from linkplan.primitives import load_library

REPO = Path(__file__).resolve().parents[1]

CORRIDOR = {
    "schema": 1,
    "name": "corridor",
    "environment": {
        "bounds": {"lo": [0.0, -0.25], "hi": [1.5, 0.25], "dim": 2},
        "obstacles": [],
    },
    "robots": [
        {"kind": "unicycle", "start": [0.15, 0.0, 0.0],
         "goal": [1.0, 0.0, 0.0], "radius": 0.1},
    ],
    "coupling": {"kind": "rods", "lengths": []},
    "config": {"initial_primitives": 30, "growth_primitives": 20,
               "max_planner_iterations": 4, "timing": False},
}

PAIR = {
    "schema": 1,
    "name": "pair",
    "environment": {
        "bounds": {"lo": [0.0, 0.0], "hi": [3.0, 1.5], "dim": 2},
        "obstacles": [],
    },
    "robots": [
        {"kind": "unicycle", "start": [0.3, 0.5, 0.0],
         "goal": [2.7, 0.5, 0.0], "radius": 0.1},
        {"kind": "unicycle", "start": [0.3, 1.0, 0.0],
         "goal": [2.7, 1.0, 0.0], "radius": 0.1},
    ],
    "coupling": {"kind": "rods", "lengths": [0.5]},
}


def write_doc(path: Path, doc) -> str:
    path.write_text(json.dumps(doc) + "\n")
    return str(path)


@pytest.fixture(scope="module")
def ws(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corridor_path(ws):
    return write_doc(ws / "corridor.json", CORRIDOR)


@pytest.fixture(scope="module")
def planned(ws, corridor_path):
    out = ws / "run1"
    code = main(["plan", corridor_path, "--seed", "7", "--out", str(out)])
    return code, out


# ---------------------------------------------------------------------------
# instance parsing


def test_shipped_corpus_parses():
    files = sorted((REPO / "instances").glob("*.json"))
    assert len(files) == 9
    names = {load_instance(str(f)).name for f in files}
    assert names == {f.stem for f in files}
    kinds = {load_instance(str(f)).cspec.kind for f in files}
    assert kinds == {"rods", "cables"}


def test_load_instance_fields(corridor_path):
    inst = load_instance(corridor_path)
    assert inst.name == "corridor"
    assert inst.cspec.kind == "rods" and len(inst.cspec.lengths) == 0
    assert inst.env.dim == 2 and inst.body_radius == 0.1
    assert len(inst.models) == 1
    assert inst.config["timing"] is False


def test_malformed_json_names_position(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"schema": 1,\n  nope\n}\n')
    with pytest.raises(InstanceError, match=r"bad\.json:2:3"):
        load_instance(str(p))
    assert main(["plan", str(p)]) == 2


def test_unknown_schema_rejected(tmp_path):
    doc = copy.deepcopy(CORRIDOR)
    doc["schema"] = 99
    with pytest.raises(InstanceError, match="schema"):
        load_instance(write_doc(tmp_path / "v99.json", doc))


def test_field_addressed_errors(tmp_path):
    def expect(mutate, pattern):
        doc = copy.deepcopy(CORRIDOR)
        mutate(doc)
        with pytest.raises(InstanceError, match=pattern):
            load_instance(write_doc(tmp_path / "bad.json", doc))

    expect(lambda d: d.pop("robots"), r"missing field 'robots'")
    expect(lambda d: d["environment"]["obstacles"].append({"type": "torus"}),
           r"obstacles\[0\].*torus")
    expect(lambda d: d["robots"][0].update(start="zero"),
           r"robots\[0\]\.start")
    expect(lambda d: d["robots"][0].update(kind="ornithopter"),
           r"robots\[0\]\.model")
    pair = copy.deepcopy(PAIR)
    pair["robots"][1]["radius"] = 0.2
    with pytest.raises(InstanceError, match="radii must be equal"):
        load_instance(write_doc(tmp_path / "radii.json", pair))
    pair = copy.deepcopy(PAIR)
    pair["coupling"]["lengths"] = [0.5, 0.5]
    with pytest.raises(InstanceError, match="coupling implies 3 robots"):
        load_instance(write_doc(tmp_path / "count.json", pair))


def test_unknown_fields_warn(tmp_path):
    doc = copy.deepcopy(CORRIDOR)
    doc["colour"] = "red"
    doc["config"]["bogus_knob"] = 1
    path = write_doc(tmp_path / "warn.json", doc)
    with pytest.warns(UserWarning) as caught:
        inst = load_instance(path)
    text = "".join(str(w.message) for w in caught)
    assert "colour" in text and "bogus_knob" in text
    assert inst.name == "corridor"  # still loads


def test_cable_instances_forbid_per_robot_endpoints(tmp_path):
    mp = json.loads((REPO / "instances" / "mp_window_n2.json").read_text())
    mp["robots"][0]["start"] = [0.0, 0.0, 0.0]
    with pytest.raises(InstanceError, match="derive from"):
        load_instance(write_doc(tmp_path / "mp.json", mp))


# ---------------------------------------------------------------------------
# plan subcommand and its artifacts


def test_plan_cli_writes_artifacts(planned, corridor_path):
    code, out = planned
    assert code == 0
    best = json.loads((out / "corridor_best.json").read_text())
    assert best["representation"] == "minimal"
    assert 1.699 <= best["meta"]["cost"] <= 2.2
    assert best["meta"]["seed"] == 7
    assert re.fullmatch(r"[0-9a-f]{16}", best["meta"]["config_hash"])
    assert len(best["states"]) == len(best["actions"]) + 1

    lines = (out / "corridor_records.jsonl").read_text().splitlines()
    costs = [json.loads(ln)["meta"]["cost"] for ln in lines]
    assert costs == sorted(costs, reverse=True) and len(set(costs)) == len(costs)
    assert costs[-1] == best["meta"]["cost"]

    metrics = (out / "corridor_metrics.csv").read_text()
    header, row = metrics.splitlines()
    assert header == "instance,success,cost,time_to_first_solution"
    fields = row.split(",")
    assert fields[0] == "corridor" and fields[1] == "1"
    assert float(fields[2]) == pytest.approx(best["meta"]["cost"], abs=1e-6)
    assert fields[3] == "0.000"  # timing disabled in instance config

    summary = json.loads((out / "corridor_summary.json").read_text())
    assert summary["status"] == "solved"
    assert summary["config"]["seed"] == 7
    assert summary["n_solutions"] == len(lines)
    assert len(summary["iterations"]) <= 4
    assert not list(out.glob(".tmp-*"))  # atomic writes leave no debris


def test_plan_cli_is_deterministic(planned, ws, corridor_path):
    _, out1 = planned
    out2 = ws / "run2"
    assert main(["plan", corridor_path, "--seed", "7", "--out", str(out2)]) == 0
    for name in ("corridor_best.json", "corridor_records.jsonl",
                 "corridor_metrics.csv", "corridor_summary.json"):
        assert (out1 / name).read_bytes() == (out2 / name).read_bytes()


def test_tiny_time_limit_exits_one_with_no_iterations(ws):
    doc = copy.deepcopy(CORRIDOR)
    doc["name"] = "timed"
    del doc["config"]["timing"]  # wall clock active
    path = write_doc(ws / "timed.json", doc)
    out = ws / "timed_out"
    code = main(["plan", path, "--seed", "1", "--time-limit", "0.001",
                 "--out", str(out)])
    assert code == 1
    summary = json.loads((out / "timed_summary.json").read_text())
    assert summary["status"] == "no-solution"
    assert summary["iterations"] == []
    assert summary["stop_reason"] == "time-limit"
    assert not (out / "timed_best.json").exists()


def test_env_overrides_sit_below_flags(monkeypatch):
    parse = _parser().parse_args
    monkeypatch.setenv("LINKPLAN_SEED", "123")
    monkeypatch.setenv("LINKPLAN_TIME_LIMIT", "42.5")
    cfg = _build_config(parse(["plan", "x.json"]))
    assert cfg.seed == 123 and cfg.time_limit == 42.5
    cfg = _build_config(parse(["plan", "x.json", "--seed", "5",
                               "--time-limit", "9"]))
    assert cfg.seed == 5 and cfg.time_limit == 9.0
    monkeypatch.setenv("LINKPLAN_SEED", "not-a-number")
    with pytest.warns(UserWarning, match="LINKPLAN_SEED"):
        cfg = _build_config(parse(["plan", "x.json"]))
    assert cfg.seed == 0


# ---------------------------------------------------------------------------
# trajectory files and validate subcommand


def test_trajectory_roundtrip_is_byte_identical(planned, tmp_path):
    _, out = planned
    src = out / "corridor_best.json"
    doc = load_trajectory(str(src))
    dst = tmp_path / "rewritten.json"
    save_json(str(dst), doc)
    assert src.read_bytes() == dst.read_bytes()


def test_trajectory_parse_errors(tmp_path):
    p = tmp_path / "t.json"
    p.write_text(json.dumps({"representation": "minimal", "states": [],
                             "actions": []}))
    with pytest.raises(InstanceError, match="missing field 'dt'"):
        load_trajectory(str(p))
    p.write_text(json.dumps({"representation": "stacked", "dt": 0.1,
                             "states": [], "actions": []}))
    with pytest.raises(InstanceError, match="minimal"):
        load_trajectory(str(p))


def test_validate_exit_codes(planned, corridor_path, ws, tmp_path):
    _, out = planned
    best = str(out / "corridor_best.json")
    assert main(["validate", best, corridor_path]) == 0

    doc = json.loads(Path(best).read_text())
    doc["actions"][0][0] += 0.1  # breaks the dynamics defect
    perturbed = write_doc(tmp_path / "perturbed.json", doc)
    assert main(["validate", perturbed, corridor_path]) == 1

    pair_path = write_doc(ws / "pair.json", PAIR)
    assert main(["validate", best, pair_path]) == 2  # wrong robot count
    assert main(["validate", str(tmp_path / "missing.json"), corridor_path]) == 2


# ---------------------------------------------------------------------------
# gen-primitives subcommand


def test_gen_primitives_deterministic_and_replayable(tmp_path):
    a, b, c = (str(tmp_path / f"{n}.json") for n in "abc")
    flags = ["gen-primitives", "unicycle", "--count", "12", "--K", "5",
             "--seed", "3"]
    assert main(flags + ["--out", a]) == 0
    assert main(flags + ["--out", b]) == 0
    assert Path(a).read_bytes() == Path(b).read_bytes()
    assert main(["gen-primitives", "unicycle", "--count", "12", "--K", "5",
                 "--seed", "4", "--out", c]) == 0
    assert Path(a).read_bytes() != Path(c).read_bytes()

    lib = load_library(a)
    prims = lib.primitives("unicycle")
    assert len(prims) == 12
    model = model_for_kind("unicycle")
    for p in prims:
        x = p.states[0]
        for k, u in enumerate(p.actions):
            x = step(model, x, u)
            assert np.allclose(x, p.states[k + 1], atol=1e-12)


# ---------------------------------------------------------------------------
# plots


def test_plot_svg_deterministic(planned, corridor_path, tmp_path):
    _, out = planned
    best = str(out / "corridor_best.json")
    s1, s2, s3 = (str(tmp_path / f"{n}.svg") for n in "xyz")
    assert main(["plot", corridor_path, best, "--out", s1]) == 0
    assert main(["plot", corridor_path, best, "--out", s2]) == 0
    body = Path(s1).read_text()
    assert Path(s1).read_bytes() == Path(s2).read_bytes()
    assert body.startswith("<svg ") and "<polyline" in body

    assert main(["plot", corridor_path, "--out", s3]) == 0
    env_only = Path(s3).read_text()
    assert "<polyline" not in env_only  # environment-only render
    assert "<circle" in env_only  # start/goal markers remain


def test_anytime_plot_has_one_drop_per_solution(tmp_path):
    records = [{"meta": {"cost": c, "t_wall": t, "iteration": i + 1}}
               for i, (c, t) in enumerate([(8.0, 1.0), (6.5, 2.5), (5.0, 4.0)])]
    svg = plot_anytime_svg(records)
    pts = re.search(r'<polyline points="([^"]+)"', svg).group(1)
    coords = [tuple(map(float, p.split(","))) for p in pts.split()]
    drops = sum(1 for a, b in zip(coords, coords[1:])
                if a[0] == b[0] and b[1] > a[1])  # svg y grows downward
    assert drops == 3

    path = tmp_path / "rec.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in records))
    o1, o2 = str(tmp_path / "a1.svg"), str(tmp_path / "a2.svg")
    assert main(["plot-anytime", str(path), "--out", o1]) == 0
    assert main(["plot-anytime", str(path), "--out", o2]) == 0
    assert Path(o1).read_bytes() == Path(o2).read_bytes()
    assert main(["plot-anytime", str(tmp_path / "nope.jsonl"), "--out", o1]) == 2


def test_atomic_write_roundtrip(tmp_path):
    p = tmp_path / "sub" / "file.txt"
    atomic_write_text(str(p), "payload\n")
    assert p.read_text() == "payload\n"
    assert list(p.parent.glob(".tmp-*")) == []

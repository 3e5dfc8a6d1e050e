"""Regenerate the shipped instance corpus under instances/.

Layouts are reconstructions at a similar obstacle density to the
scenarios the planner is meant to handle (window / forest / wall for rod
teams, window / forest for cable teams); every file is validated by
loading it back through the strict parser.
"""

import math
import os
import sys

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))

from linkplan.io_cli import load_instance, save_json  # noqa: E402

OUT = os.path.join(os.path.dirname(__file__), "..", "instances")

C45 = math.sqrt(0.5)


def box(lo, hi):
    return {"type": "box", "lo": lo, "hi": hi}


def sphere(center, radius):
    return {"type": "sphere", "center": center, "radius": radius}


def tree(x, y, radius=0.1, z_hi=1.2):
    return {"type": "capsule", "a": [x, y, 0.0], "b": [x, y, z_hi],
            "radius": radius}


def ur(name, bounds_hi, obstacles, starts, goals, lengths, model=None,
       config=None):
    robots = []
    for s, g in zip(starts, goals):
        entry = {"kind": "unicycle", "start": s, "goal": g, "radius": 0.1}
        if model:
            entry["model"] = model
        robots.append(entry)
    return {
        "schema": 1,
        "name": name,
        "environment": {
            "bounds": {"lo": [0.0, 0.0, -1.0], "hi": bounds_hi, "dim": 2},
            "obstacles": obstacles,
        },
        "robots": robots,
        "coupling": {"kind": "rods", "lengths": lengths,
                     "element_radius": 0.01},
        "config": config or {},
    }


def mp(name, bounds_hi, obstacles, payload_start, payload_goal, dirs,
       config=None):
    n = len(dirs)
    return {
        "schema": 1,
        "name": name,
        "environment": {
            "bounds": {"lo": [0.0, 0.0, 0.0], "hi": bounds_hi, "dim": 3},
            "obstacles": obstacles,
        },
        "robots": [{"kind": "multirotor", "radius": 0.15,
                    "model": {"dt": 0.02}} for _ in range(n)],
        "coupling": {
            "kind": "cables",
            "lengths": [0.5] * n,
            "payload_mass": 0.01,
            "element_radius": 0.01,
            "start": {"payload": payload_start, "directions": dirs},
            "goal": {"payload": payload_goal, "directions": dirs},
        },
        "config": config or {"opt_max_iterations": 450},
    }


def cone_dirs(n, tilt_deg, azimuth0_deg=90.0):
    out = []
    tilt = math.radians(tilt_deg)
    for i in range(n):
        az = math.radians(azimuth0_deg + 360.0 * i / n)
        out.append([math.sin(tilt) * math.cos(az),
                    math.sin(tilt) * math.sin(az),
                    -math.cos(tilt)])
    return out


INSTANCES = [
    ur("ur_window_n2", [3.0, 1.5, 1.0],
       [box([1.45, -0.1, -1.0], [1.55, 0.45, 1.0]),
        box([1.45, 1.05, -1.0], [1.55, 1.6, 1.0])],
       starts=[[0.3, 0.45, 0.0], [0.3, 0.95, 0.0]],
       goals=[[2.7, 0.45, 0.0], [2.7, 0.95, 0.0]],
       lengths=[0.5]),

    ur("ur_window_n3", [3.0, 2.0, 1.0],
       [box([1.45, -0.1, -1.0], [1.55, 0.35, 1.0]),
        box([1.45, 1.65, -1.0], [1.55, 2.1, 1.0])],
       starts=[[0.3, 0.5, 0.0], [0.3, 1.0, 0.0], [0.3, 1.5, 0.0]],
       goals=[[2.7, 0.5, 0.0], [2.7, 1.0, 0.0], [2.7, 1.5, 0.0]],
       lengths=[0.5, 0.5]),

    ur("ur_forest_n2", [3.0, 1.5, 1.0],
       [sphere([0.85, 0.4, 0.0], 0.13),
        sphere([1.5, 1.0, 0.0], 0.14),
        sphere([2.1, 0.5, 0.0], 0.13)],
       starts=[[0.3, 0.45, 0.0], [0.3, 0.95, 0.0]],
       goals=[[2.7, 0.45, 0.0], [2.7, 0.95, 0.0]],
       lengths=[0.5]),

    ur("ur_forest_n3", [3.0, 2.0, 1.0],
       [sphere([0.9, 0.5, 0.0], 0.13),
        sphere([1.5, 1.45, 0.0], 0.14),
        sphere([2.1, 0.6, 0.0], 0.13)],
       starts=[[0.3, 0.5, 0.0], [0.3, 1.0, 0.0], [0.3, 1.5, 0.0]],
       goals=[[2.7, 0.5, 0.0], [2.7, 1.0, 0.0], [2.7, 1.5, 0.0]],
       lengths=[0.5, 0.5]),

    # one-sided turning: the chain cannot fit through the gap upright, so
    # the team must reorient along the wall using left turns only
    ur("ur_wall_n2", [3.0, 1.5, 1.0],
       [box([1.45, -0.1, -1.0], [1.55, 0.9, 1.0])],
       starts=[[0.3, 0.45, 0.0], [0.3, 0.95, 0.0]],
       goals=[[2.7, 0.45, 0.0], [2.7, 0.95, 0.0]],
       lengths=[0.5],
       model={"u_lo": [-0.5, 0.0], "u_hi": [0.5, 0.5]}),

    ur("ur_wall_n3", [3.0, 2.0, 1.0],
       [box([1.45, -0.1, -1.0], [1.55, 1.2, 1.0])],
       starts=[[0.3, 0.5, 0.0], [0.3, 1.0, 0.0], [0.3, 1.5, 0.0]],
       goals=[[2.7, 0.5, 0.0], [2.7, 1.0, 0.0], [2.7, 1.5, 0.0]],
       lengths=[0.5, 0.5],
       model={"u_lo": [-0.5, 0.0], "u_hi": [0.5, 0.5]}),

    mp("mp_window_n2", [2.4, 1.2, 1.2],
       [box([1.15, -0.1, -0.1], [1.25, 1.3, 0.35]),
        box([1.15, -0.1, 1.05], [1.25, 1.3, 1.3]),
        box([1.15, -0.1, 0.35], [1.25, 0.3, 1.05]),
        box([1.15, 0.9, 0.35], [1.25, 1.3, 1.05])],
       payload_start=[0.6, 0.6, 0.45], payload_goal=[1.8, 0.6, 0.45],
       dirs=[[C45, 0.0, -C45], [-C45, 0.0, -C45]]),

    mp("mp_window_n3", [2.4, 1.4, 1.4],
       [box([1.15, -0.1, -0.1], [1.25, 1.5, 0.3]),
        box([1.15, -0.1, 1.3], [1.25, 1.5, 1.5]),
        box([1.15, -0.1, 0.3], [1.25, 0.25, 1.3]),
        box([1.15, 1.15, 0.3], [1.25, 1.5, 1.3])],
       payload_start=[0.6, 0.7, 0.4], payload_goal=[1.8, 0.7, 0.4],
       dirs=cone_dirs(3, 30.0)),

    mp("mp_forest_n2", [2.8, 1.2, 1.2],
       [tree(0.9, 0.25), tree(1.5, 0.95), tree(2.0, 0.25)],
       payload_start=[0.55, 0.6, 0.45], payload_goal=[2.2, 0.6, 0.45],
       dirs=[[C45, 0.0, -C45], [-C45, 0.0, -C45]]),
]


def main():
    os.makedirs(OUT, exist_ok=True)
    for doc in INSTANCES:
        path = os.path.join(OUT, doc["name"] + ".json")
        save_json(path, doc)
        inst = load_instance(path)  # strict parse + feasibility validation
        print(f"{doc['name']}: ok ({inst.cspec.kind}, {inst.cspec.n_robots} robots)")


if __name__ == "__main__":
    main()

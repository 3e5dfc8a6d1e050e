"""Shared fixtures: the corridor micro-instance used by search tests."""

import numpy as np

from linkplan.dynamics import UnicycleModel, step
from linkplan.geometry import Environment
from linkplan.primitives import MotionPrimitive, PrimitiveLibrary

CORRIDOR_START = np.array([0.3, 0.75, 0.0])
CORRIDOR_GOAL = np.array([1.15, 0.75, 0.0])
CORRIDOR_RADIUS = 0.1


def corridor_env() -> Environment:
    """A 2 m long, 0.6 m wide free corridor (the walls are the bounds)."""
    return Environment(lo=(0.0, 0.45, -1.0), hi=(2.0, 1.05, 1.0), dim=2)


def make_unicycle_primitive(model: UnicycleModel, theta0: float,
                            actions: np.ndarray) -> MotionPrimitive:
    x = np.array([0.0, 0.0, theta0])
    states = [x]
    for u in actions:
        x = step(model, x, np.asarray(u, dtype=float), model.dt)
        states.append(x)
    return MotionPrimitive("unicycle", np.stack(states), np.asarray(actions, dtype=float))


def corridor_library(model: UnicycleModel) -> PrimitiveLibrary:
    """Four handcrafted primitives: forward, two gentle arcs, and turn-in-place."""
    lib = PrimitiveLibrary(seed=0)
    lib.add([
        make_unicycle_primitive(model, 0.0, np.tile([0.5, 0.0], (5, 1))),
        make_unicycle_primitive(model, 0.0, np.tile([0.5, 0.2], (5, 1))),
        make_unicycle_primitive(model, 0.0, np.tile([0.5, -0.2], (5, 1))),
        make_unicycle_primitive(model, 0.0, np.tile([0.0, 0.5], (5, 1))),
    ])
    return lib

"""Collision primitives, environments, and signed-distance queries.

Robots are collision-checked as spheres (disks in 2D), linkage elements
(rods, cables) as capsules.  Signed distance is the primitive: positive
values are separation, negative magnitude is penetration depth, so the
optimizer can build smooth clearance penalties from the same code path.
2D problems use 3D shapes with z = 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Sphere",
    "Box",
    "Capsule",
    "Shape",
    "Environment",
    "distance",
    "state_in_collision",
]


def _vec3(x) -> np.ndarray:
    a = np.asarray(x, dtype=float).reshape(-1)
    if a.size == 2:
        a = np.append(a, 0.0)
    if a.size != 3:
        raise ValueError(f"expected 2- or 3-vector, got shape {a.shape}")
    return a


@dataclass(frozen=True)
class Sphere:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", _vec3(self.center))
        if self.radius < 0:
            raise ValueError("sphere radius must be >= 0")

    def aabb(self):
        return self.center - self.radius, self.center + self.radius


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _vec3(self.lo))
        object.__setattr__(self, "hi", _vec3(self.hi))
        if np.any(self.lo > self.hi):
            raise ValueError("box lo must be <= hi componentwise")

    def aabb(self):
        return self.lo, self.hi


@dataclass(frozen=True)
class Capsule:
    a: np.ndarray
    b: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", _vec3(self.a))
        object.__setattr__(self, "b", _vec3(self.b))
        if self.radius < 0:
            raise ValueError("capsule radius must be >= 0")

    def aabb(self):
        return np.minimum(self.a, self.b) - self.radius, np.maximum(self.a, self.b) + self.radius


Shape = Sphere | Box | Capsule


# ---------------------------------------------------------------------------
# elementary distances

def _point_box_signed(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    # Signed distance from point to solid box (negative inside).
    g = np.maximum(lo - p, p - hi)
    if np.all(g <= 0.0):
        return float(np.max(g))
    return float(np.linalg.norm(np.maximum(g, 0.0)))


def _point_seg_dist(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    d = b - a
    dd = float(d @ d)
    if dd < 1e-24:
        return float(np.linalg.norm(p - a))
    t = float(np.clip((p - a) @ d / dd, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * d)))


def _seg_seg_dist(p1, q1, p2, q2) -> float:
    # Closest distance between segments [p1,q1] and [p2,q2] (Ericson-style).
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = float(d1 @ d1)
    e = float(d2 @ d2)
    f = float(d2 @ r)
    if a < 1e-24 and e < 1e-24:
        return float(np.linalg.norm(r))
    if a < 1e-24:
        s = 0.0
        t = np.clip(f / e, 0.0, 1.0)
    else:
        c = float(d1 @ r)
        if e < 1e-24:
            t = 0.0
            s = np.clip(-c / a, 0.0, 1.0)
        else:
            b = float(d1 @ d2)
            denom = a * e - b * b
            s = np.clip((b * f - c * e) / denom, 0.0, 1.0) if denom > 1e-24 else 0.0
            t = (b * s + f) / e
            if t < 0.0:
                t = 0.0
                s = np.clip(-c / a, 0.0, 1.0)
            elif t > 1.0:
                t = 1.0
                s = np.clip((b - c) / a, 0.0, 1.0)
    cp1 = p1 + s * d1
    cp2 = p2 + t * d2
    return float(np.linalg.norm(cp1 - cp2))


def _seg_box_signed(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> float:
    # min over the segment of the box signed distance.  The SDF of a convex
    # body is convex, so golden-section search over t in [0,1] is exact.
    if float((b - a) @ (b - a)) < 1e-24:
        return _point_box_signed(a, lo, hi)
    phi = 0.5 * (np.sqrt(5.0) - 1.0)
    t0, t1 = 0.0, 1.0
    t2 = t1 - phi * (t1 - t0)
    t3 = t0 + phi * (t1 - t0)
    f2 = _point_box_signed(a + t2 * (b - a), lo, hi)
    f3 = _point_box_signed(a + t3 * (b - a), lo, hi)
    for _ in range(80):
        if f2 <= f3:
            t1, t3, f3 = t3, t2, f2
            t2 = t1 - phi * (t1 - t0)
            f2 = _point_box_signed(a + t2 * (b - a), lo, hi)
        else:
            t0, t2, f2 = t2, t3, f3
            t3 = t0 + phi * (t1 - t0)
            f3 = _point_box_signed(a + t3 * (b - a), lo, hi)
    ends = min(_point_box_signed(a, lo, hi), _point_box_signed(b, lo, hi))
    return min(f2, f3, ends)


# ---------------------------------------------------------------------------
# public pairwise signed distance

def distance(a: Shape, b: Shape) -> float:
    """Signed separation distance between two shapes (negative = penetration)."""
    if isinstance(a, Sphere) and isinstance(b, Sphere):
        return float(np.linalg.norm(a.center - b.center)) - a.radius - b.radius
    if isinstance(a, Sphere) and isinstance(b, Box):
        return _point_box_signed(a.center, b.lo, b.hi) - a.radius
    if isinstance(a, Box) and isinstance(b, Sphere):
        return distance(b, a)
    if isinstance(a, Sphere) and isinstance(b, Capsule):
        return _point_seg_dist(a.center, b.a, b.b) - a.radius - b.radius
    if isinstance(a, Capsule) and isinstance(b, Sphere):
        return distance(b, a)
    if isinstance(a, Capsule) and isinstance(b, Capsule):
        return _seg_seg_dist(a.a, a.b, b.a, b.b) - a.radius - b.radius
    if isinstance(a, Capsule) and isinstance(b, Box):
        return _seg_box_signed(a.a, a.b, b.lo, b.hi) - a.radius
    if isinstance(a, Box) and isinstance(b, Capsule):
        return distance(b, a)
    if isinstance(a, Box) and isinstance(b, Box):
        g = np.maximum(a.lo - b.hi, b.lo - a.hi)
        if np.all(g <= 0.0):
            return float(np.max(g))
        return float(np.linalg.norm(np.maximum(g, 0.0)))
    raise TypeError(f"unsupported shape pair {type(a).__name__}/{type(b).__name__}")


# ---------------------------------------------------------------------------
# environment

@dataclass
class Environment:
    """Workspace bounds plus static obstacles.

    `dim` is 2 for planar problems; bound checks apply to the first `dim`
    axes only, obstacle geometry is always held in 3D.
    """

    lo: np.ndarray
    hi: np.ndarray
    obstacles: list[Shape] = field(default_factory=list)
    body_radius: dict[str, float] = field(default_factory=dict)
    dim: int = 3

    def __post_init__(self):
        self.lo = _vec3(self.lo)
        self.hi = _vec3(self.hi)
        if np.any(self.lo[: self.dim] >= self.hi[: self.dim]):
            raise ValueError("workspace bounds must be nonempty")
        ws = Box(np.where(np.arange(3) < self.dim, self.lo, -1.0),
                 np.where(np.arange(3) < self.dim, self.hi, 1.0))
        for obs in self.obstacles:
            if distance(ws, obs) > 0.0:
                raise ValueError("obstacle lies fully outside the workspace")
        self._obs_lo = (np.stack([o.aabb()[0] for o in self.obstacles])
                        if self.obstacles else np.zeros((0, 3)))
        self._obs_hi = (np.stack([o.aabb()[1] for o in self.obstacles])
                        if self.obstacles else np.zeros((0, 3)))
        # type-grouped stacks so batch queries broadcast over all obstacles
        boxes = [o for o in self.obstacles if isinstance(o, Box)]
        spheres = [o for o in self.obstacles if isinstance(o, Sphere)]
        self._box_lo = np.stack([o.lo for o in boxes]) if boxes else None
        self._box_hi = np.stack([o.hi for o in boxes]) if boxes else None
        self._sph_c = np.stack([o.center for o in spheres]) if spheres else None
        self._sph_r = np.array([o.radius for o in spheres]) if spheres else None
        self._caps = [o for o in self.obstacles if isinstance(o, Capsule)]

    def in_bounds(self, p) -> bool:
        p = _vec3(p)
        d = self.dim
        return bool(np.all(p[:d] >= self.lo[:d]) and np.all(p[:d] <= self.hi[:d]))

    def clearance(self, shape: Shape) -> float:
        """Signed distance from `shape` to the nearest obstacle (inf if none)."""
        if not self.obstacles:
            return float("inf")
        return min(distance(shape, o) for o in self.obstacles)

    # -- vectorized batch queries (hot paths in search and optimization) -----

    def sphere_clearances(self, centers: np.ndarray, radius: float) -> np.ndarray:
        """Min signed distance to any obstacle for a batch of sphere centers.

        centers: (B, 3).  Returns (B,) array (inf where no obstacles).
        """
        centers = np.atleast_2d(np.asarray(centers, dtype=float))
        out = np.full(len(centers), np.inf)
        if self._box_lo is not None:
            g = np.maximum(self._box_lo - centers[:, None], centers[:, None] - self._box_hi)
            outside = np.sqrt(np.sum(np.square(np.maximum(g, 0.0)), axis=2))
            d = np.where(np.all(g <= 0.0, axis=2), np.max(g, axis=2), outside)
            np.minimum(out, d.min(axis=1), out=out)
        if self._sph_c is not None:
            diff = centers[:, None] - self._sph_c
            d = np.sqrt(np.sum(np.square(diff), axis=2)) - self._sph_r
            np.minimum(out, d.min(axis=1), out=out)
        for obs in self._caps:
            np.minimum(out, _points_seg_dist(centers, obs.a, obs.b) - obs.radius,
                       out=out)
        return out - radius

    def capsule_clearances(self, a: np.ndarray, b: np.ndarray, radius: float) -> np.ndarray:
        """Min signed distance to any obstacle for a batch of capsules (a,b: (B,3))."""
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        out = np.full(len(a), np.inf)
        for obs in self.obstacles:
            if isinstance(obs, Sphere):
                d = _points_segs_dist(obs.center, a, b) - obs.radius
            elif isinstance(obs, Box):
                d = _segs_box_signed(a, b, obs.lo, obs.hi)
            else:
                d = np.array([_seg_seg_dist(a[i], b[i], obs.a, obs.b) for i in range(len(a))])
                d = d - obs.radius
            np.minimum(out, d, out=out)
        return out - radius

    def positions_in_bounds(self, p: np.ndarray) -> np.ndarray:
        p = np.atleast_2d(np.asarray(p, dtype=float))
        d = self.dim
        return np.all((p[:, :d] >= self.lo[:d]) & (p[:, :d] <= self.hi[:d]), axis=1)


def _points_box_signed(p: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    g = np.maximum(lo - p, p - hi)
    inside = np.all(g <= 0.0, axis=1)
    out = np.linalg.norm(np.maximum(g, 0.0), axis=1)
    if np.any(inside):
        out[inside] = np.max(g[inside], axis=1)
    return out


def _points_seg_dist(pts_or_point, a, b) -> np.ndarray:
    # distance from many points to one segment
    p = np.atleast_2d(pts_or_point)
    d = b - a
    dd = float(d @ d)
    if dd < 1e-24:
        return np.linalg.norm(p - a, axis=1)
    t = np.clip((p - a) @ d / dd, 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=1)


def _points_segs_dist(point, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # distance from one point to many segments
    d = b - a
    dd = np.einsum("ij,ij->i", d, d)
    t = np.zeros(len(a))
    ok = dd >= 1e-24
    t[ok] = np.clip(np.einsum("ij,ij->i", point - a[ok], d[ok]) / dd[ok], 0.0, 1.0)
    return np.linalg.norm(point - (a + t[:, None] * d), axis=1)


def _segs_box_signed(a: np.ndarray, b: np.ndarray, lo, hi) -> np.ndarray:
    # batched golden-section over t for each segment (convex objective)
    def f(t):
        p = a + t[:, None] * (b - a)
        return _points_box_signed(p, lo, hi)

    phi = 0.5 * (np.sqrt(5.0) - 1.0)
    n = len(a)
    t0 = np.zeros(n)
    t1 = np.ones(n)
    for _ in range(60):
        t2 = t1 - phi * (t1 - t0)
        t3 = t0 + phi * (t1 - t0)
        left = f(t2) <= f(t3)
        t1 = np.where(left, t3, t1)
        t0 = np.where(left, t0, t2)
    mid = f(0.5 * (t0 + t1))
    return np.minimum(mid, np.minimum(f(np.zeros(n)), f(np.ones(n))))


def state_in_collision(env: Environment, positions, coupling_shapes=(), radius: float | np.ndarray = 0.1) -> bool:
    """True iff any robot sphere or coupling shape collides or leaves bounds.

    positions: (N, 2|3) robot centers; radius: scalar or per-robot array.
    """
    pts = np.atleast_2d(np.asarray(positions, dtype=float))
    if pts.shape[1] == 2:
        pts = np.hstack([pts, np.zeros((len(pts), 1))])
    if not np.all(env.positions_in_bounds(pts)):
        return True
    radii = np.broadcast_to(np.asarray(radius, dtype=float), (len(pts),))
    for p, r in zip(pts, radii):
        if env.clearance(Sphere(p, r)) < 0.0:
            return True
    for shape in coupling_shapes:
        if env.clearance(shape) < 0.0:
            return True
    return False

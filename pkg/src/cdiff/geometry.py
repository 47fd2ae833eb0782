"""Constrained domains built from linear and spherical inequalities.

A :class:`ConstraintSet` stores its linear constraints as a matrix ``A`` of
unit-norm rows and offsets ``b`` (``A x < b``) and its balls as centres and
radii (``|x - c| < r``).  Constraint identifiers are integers: ``0..m-1`` index
the linear rows, ``m..m+q-1`` the spheres.

Most functions accept a single point of shape ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import linprog

from .errors import (
    InfeasibleDomainError,
    InfeasiblePointError,
    NoIntersectionError,
    OffSurfaceError,
)

SURFACE_TOL = 1e-9
INTERIOR_MARGIN = 1e-6
# Directions this close to tangent never hit a face.
GRAZING_TOL = 1e-12


@dataclass(frozen=True)
class LinearConstraint:
    """Half-space ``<normal, x> < offset`` with ``normal`` rescaled to unit norm."""

    normal: np.ndarray
    offset: float

    def __post_init__(self):
        a = np.asarray(self.normal, dtype=float).ravel()
        norm = np.linalg.norm(a)
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("linear constraint needs a nonzero finite normal")
        if abs(norm - 1.0) < 1e-12:
            norm = 1.0  # leave unit normals bit-identical so serialised domains round-trip
        object.__setattr__(self, "normal", a / norm)
        object.__setattr__(self, "offset", float(self.offset) / norm)


@dataclass(frozen=True)
class SphereConstraint:
    """Open ball ``|x - center| < radius``."""

    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).ravel())
        if not self.radius > 0:
            raise ValueError("sphere radius must be positive")
        object.__setattr__(self, "radius", float(self.radius))


def _frozen(a):
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


class ConstraintSet:
    """Intersection of open half-spaces and open balls in ``R^d``.

    The interior is checked to be nonempty on construction unless
    ``check=False``.
    """

    def __init__(self, dimension: int, linear: Sequence[LinearConstraint] = (),
                 spheres: Sequence[SphereConstraint] = (), check: bool = True):
        if dimension < 1:
            raise ValueError("dimension must be >= 1")
        self.dimension = int(dimension)
        self.linear = tuple(linear)
        self.spheres = tuple(spheres)
        for c in self.linear:
            if c.normal.shape != (self.dimension,):
                raise ValueError("linear constraint dimension mismatch")
        for s in self.spheres:
            if s.center.shape != (self.dimension,):
                raise ValueError("sphere constraint dimension mismatch")
        d = self.dimension
        self.A = _frozen(np.array([c.normal for c in self.linear]).reshape(-1, d))
        self.b = _frozen([c.offset for c in self.linear])
        self.centers = _frozen(np.array([s.center for s in self.spheres]).reshape(-1, d))
        self.radii = _frozen([s.radius for s in self.spheres])
        self._interior = None
        if check:
            self._interior = interior_point(self)

    @classmethod
    def from_arrays(cls, A, b, centers=(), radii=(), check=True):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        linear = [LinearConstraint(a, o) for a, o in zip(A, np.ravel(b))]
        spheres = [SphereConstraint(c, r) for c, r in zip(centers, radii)]
        return cls(A.shape[1], linear, spheres, check=check)

    @property
    def n_linear(self):
        return len(self.linear)

    @property
    def n_constraints(self):
        return len(self.linear) + len(self.spheres)

    @property
    def linear_only(self):
        return not self.spheres

    def contains(self, x, margin=0.0):
        """Boolean mask of points with every slack strictly above ``margin``."""
        return np.min(slacks(x, self), axis=-1) > margin

    def to_dict(self):
        return {
            "dimension": self.dimension,
            "linear": [{"normal": c.normal.tolist(), "offset": c.offset} for c in self.linear],
            "spheres": [{"center": s.center.tolist(), "radius": s.radius} for s in self.spheres],
        }

    @classmethod
    def from_dict(cls, doc):
        d = int(doc["dimension"])
        linear = [LinearConstraint(c["normal"], c["offset"]) for c in doc.get("linear", [])]
        spheres = [SphereConstraint(s["center"], s["radius"]) for s in doc.get("spheres", [])]
        return cls(d, linear, spheres)

    def __repr__(self):
        return (f"ConstraintSet(dimension={self.dimension}, linear={self.n_linear}, "
                f"spheres={len(self.spheres)})")


@dataclass(frozen=True)
class DomainSpec:
    """Product of a constrained block and ``periodic_dims`` circle coordinates.

    Constrained coordinates come first; periodic coordinates live on
    ``[0, 2*pi)``.  ``constrained`` may be ``None`` for a pure torus.
    """

    constrained: ConstraintSet | None
    periodic_dims: int = 0
    name: str = field(default="", compare=False)

    def __post_init__(self):
        if self.periodic_dims < 0:
            raise ValueError("periodic_dims must be >= 0")
        if self.dimension < 1:
            raise ValueError("domain must have at least one coordinate")

    @property
    def constrained_dims(self):
        return 0 if self.constrained is None else self.constrained.dimension

    @property
    def dimension(self):
        return self.constrained_dims + self.periodic_dims

    def split(self, x):
        x = np.asarray(x, dtype=float)
        dc = self.constrained_dims
        return x[..., :dc], x[..., dc:]

    def contains(self, x, margin=0.0):
        xc, _ = self.split(x)
        if self.constrained is None:
            return np.ones(np.shape(x)[:-1], dtype=bool)
        return self.constrained.contains(xc, margin)

    def to_dict(self):
        if self.constrained is None:
            doc = {"dimension": 0, "linear": [], "spheres": []}
        else:
            doc = self.constrained.to_dict()
        doc["periodic_dims"] = self.periodic_dims
        return doc

    @classmethod
    def from_dict(cls, doc):
        p = int(doc.get("periodic_dims", 0))
        if int(doc["dimension"]) == 0:
            return cls(None, p)
        return cls(ConstraintSet.from_dict(doc), p)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def hash(self):
        """Stable digest of the domain definition (16 hex chars)."""
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


def as_domain(obj) -> DomainSpec:
    if isinstance(obj, DomainSpec):
        return obj
    if isinstance(obj, ConstraintSet):
        return DomainSpec(obj, 0)
    raise TypeError(f"expected DomainSpec or ConstraintSet, got {type(obj).__name__}")


# ---------------------------------------------------------------------------
# Distances and intersections
# ---------------------------------------------------------------------------

def slacks(x, cset: ConstraintSet):
    """Per-constraint distances to each surface, shape ``(..., m + q)``.

    Linear: ``b_i - <a_i, x>``.  Sphere: ``r - |x - c|``.  Negative outside.
    """
    x = np.asarray(x, dtype=float)
    out = []
    if cset.n_linear:
        out.append(cset.b - x @ cset.A.T)
    if cset.spheres:
        diff = x[..., None, :] - cset.centers
        out.append(cset.radii - np.linalg.norm(diff, axis=-1))
    if not out:
        return np.full(x.shape[:-1] + (1,), np.inf)
    return np.concatenate(out, axis=-1)


def distance_to_boundary(x, cset: ConstraintSet, check=True):
    """Minimum slack over all constraints.

    Raises :class:`InfeasiblePointError` if any point is outside or on the
    boundary (pass ``check=False`` to get raw, possibly non-positive, values).
    """
    dist = np.min(slacks(x, cset), axis=-1)
    if check and np.any(~(dist > 0)):
        raise InfeasiblePointError("point is not strictly inside the domain")
    return dist


def distance_gradient(x, cset: ConstraintSet):
    """Gradient of :func:`distance_to_boundary` (from the active constraint)."""
    x = np.asarray(x, dtype=float)
    s = slacks(x, cset)
    idx = np.argmin(s, axis=-1)
    m = cset.n_linear
    grads = []
    if m:
        grads.append(np.broadcast_to(-cset.A, x.shape[:-1] + cset.A.shape))
    if cset.spheres:
        diff = x[..., None, :] - cset.centers
        nrm = np.linalg.norm(diff, axis=-1, keepdims=True)
        grads.append(-diff / np.where(nrm > 0, nrm, 1.0))
    if not grads:
        return np.zeros_like(x)
    g = np.concatenate(grads, axis=-2)
    return np.take_along_axis(g, idx[..., None, None], axis=-2)[..., 0, :]


def ray_distances(x, s_hat, cset: ConstraintSet):
    """Distance along ``x + t s_hat`` to every constraint surface, ``inf`` if none.

    Points slightly outside a face they are heading through get distance 0.
    """
    x = np.asarray(x, dtype=float)
    s_hat = np.asarray(s_hat, dtype=float)
    out = []
    if cset.n_linear:
        denom = s_hat @ cset.A.T
        slack = cset.b - x @ cset.A.T
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = np.where(denom > GRAZING_TOL, np.maximum(slack, 0.0) / denom, np.inf)
        out.append(t)
    if cset.spheres:
        diff = x[..., None, :] - cset.centers
        p = np.einsum("...d,...kd->...k", s_hat, diff)
        c = np.einsum("...kd,...kd->...k", diff, diff) - cset.radii ** 2
        disc = p * p - c
        root = np.sqrt(np.maximum(disc, 0.0))
        # Stable form of the positive root of t^2 + 2 p t + c = 0.
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(p > 0, -c / (p + root), root - p)
        t = np.where(disc >= 0, np.maximum(t, 0.0), np.inf)
        out.append(t)
    if not out:
        return np.full(x.shape[:-1] + (1,), np.inf)
    return np.concatenate(out, axis=-1)


def ray_intersect(x, s_hat, cset: ConstraintSet):
    """Nearest constraint hit along the ray ``x + t s_hat``.

    Returns ``(distance, hit)`` where ``hit`` is the constraint identifier.
    Raises :class:`NoIntersectionError` if the ray never leaves the set.
    """
    t = ray_distances(x, s_hat, cset)
    hit = np.argmin(t, axis=-1)
    dist = np.take_along_axis(t, hit[..., None], axis=-1)[..., 0]
    if np.any(~np.isfinite(dist)):
        raise NoIntersectionError("ray does not meet any constraint")
    if np.ndim(dist) == 0:
        return float(dist), int(hit)
    return dist, hit


def reflect_direction(s_hat, n_hat):
    """Mirror ``s_hat`` across the plane with unit normal ``n_hat``."""
    s_hat = np.asarray(s_hat, dtype=float)
    n_hat = np.asarray(n_hat, dtype=float)
    dot = np.sum(s_hat * n_hat, axis=-1, keepdims=True)
    return s_hat - 2.0 * dot * n_hat


def normals_at(hit, x_hit, cset: ConstraintSet):
    """Vectorised outward normals without the on-surface check."""
    hit = np.asarray(hit)
    x_hit = np.asarray(x_hit, dtype=float)
    m = cset.n_linear
    d = cset.dimension
    out = np.empty(hit.shape + (d,))
    lin = hit < m
    if np.any(lin):
        out[lin] = cset.A[hit[lin]]
    sph = ~lin
    if np.any(sph):
        diff = x_hit[sph] - cset.centers[hit[sph] - m]
        out[sph] = diff / np.linalg.norm(diff, axis=-1, keepdims=True)
    return out


def outward_normal(hit: int, x_hit, cset: ConstraintSet, tol=SURFACE_TOL):
    """Unit outward normal of constraint ``hit`` at a point on its surface."""
    x_hit = np.asarray(x_hit, dtype=float)
    m = cset.n_linear
    if hit < m:
        gap = cset.b[hit] - cset.A[hit] @ x_hit
    else:
        k = hit - m
        gap = cset.radii[k] - np.linalg.norm(x_hit - cset.centers[k])
    if abs(gap) > tol:
        raise OffSurfaceError(f"point is {gap:.3g} away from constraint {hit}")
    return normals_at(np.array([hit]), x_hit[None], cset)[0]


# ---------------------------------------------------------------------------
# Feasibility
# ---------------------------------------------------------------------------

def interior_point(cset: ConstraintSet):
    """A point deep inside the set.

    Maximises the smallest linear slack (Chebyshev centre) by linear
    programming.  Each ball enters through the inscribed box
    ``|x_j - c_j| <= (r - t) / sqrt(d)``, whose points lie inside the ball.
    """
    if cset._interior is not None:
        return cset._interior.copy()
    d = cset.dimension
    rows, rhs = [], []
    for a, b in zip(cset.A, cset.b):
        rows.append(np.append(a, 1.0))
        rhs.append(b)
    sq = np.sqrt(d)
    for c, r in zip(cset.centers, cset.radii):
        for j in range(d):
            for sign in (1.0, -1.0):
                row = np.zeros(d + 1)
                row[j] = sign * sq
                row[d] = 1.0
                rows.append(row)
                rhs.append(sign * sq * c[j] + r)
    if not rows:
        return np.zeros(d)
    cost = np.zeros(d + 1)
    cost[d] = -1.0
    bounds = [(None, None)] * d + [(None, 1e3)]
    res = linprog(cost, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds,
                  method="highs")
    if res.status != 0 or res.x is None:
        raise InfeasibleDomainError(f"feasibility program failed: {res.message}")
    x = res.x[:d]
    if not distance_to_boundary(x, cset, check=False) >= INTERIOR_MARGIN:
        raise InfeasibleDomainError("constraint set has empty interior")
    x.setflags(write=False)
    return x.copy()


def bounding_box(cset: ConstraintSet):
    """Axis-aligned bounds ``(lo, hi)`` of the set; ``inf`` where unbounded."""
    d = cset.dimension
    lo = np.full(d, -np.inf)
    hi = np.full(d, np.inf)
    for c, r in zip(cset.centers, cset.radii):
        lo = np.maximum(lo, c - r)
        hi = np.minimum(hi, c + r)
    if cset.n_linear:
        bounds = [(lo[j] if np.isfinite(lo[j]) else None,
                   hi[j] if np.isfinite(hi[j]) else None) for j in range(d)]
        for j in range(d):
            for sign in (1.0, -1.0):
                cost = np.zeros(d)
                cost[j] = -sign
                res = linprog(cost, A_ub=cset.A, b_ub=cset.b, bounds=bounds, method="highs")
                if res.status == 0:
                    if sign > 0:
                        hi[j] = min(hi[j], res.x[j])
                    else:
                        lo[j] = max(lo[j], res.x[j])
    return lo, hi


def is_bounded(cset: ConstraintSet):
    lo, hi = bounding_box(cset)
    return bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))


# ---------------------------------------------------------------------------
# Canonical domains
# ---------------------------------------------------------------------------

def make_interval(lo=0.0, hi=1.0):
    return ConstraintSet.from_arrays([[1.0], [-1.0]], [hi, -lo])


def make_hypercube(d: int):
    """``[-1, 1]^d`` as ``2d`` half-spaces ``+-x_j < 1``."""
    if d < 1:
        raise ValueError("d must be >= 1")
    A = np.zeros((2 * d, d))
    for j in range(d):
        A[2 * j, j] = 1.0
        A[2 * j + 1, j] = -1.0
    return ConstraintSet.from_arrays(A, np.ones(2 * d))


def make_simplex(d: int):
    """Simplex in its ``d`` free coordinates: ``x_i > 0`` and ``sum x < 1``.

    The remaining barycentric coordinate is ``1 - sum(x)``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    A = np.vstack([-np.eye(d), np.ones((1, d))])
    b = np.append(np.zeros(d), 1.0)
    return ConstraintSet.from_arrays(A, b)


def make_birkhoff(n: int):
    """Doubly stochastic ``n x n`` matrices charted by the top-left block.

    Coordinates are the ``(n-1)^2`` block entries in row-major order.  The
    last column, last row and corner entry are affine in the block, and
    positivity of all ``n^2`` entries gives the linear constraints.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    k = n - 1
    d = k * k
    A, b = [], []
    for i in range(d):  # block entries > 0
        row = np.zeros(d)
        row[i] = -1.0
        A.append(row)
        b.append(0.0)
    for i in range(k):  # P[i, n-1] = 1 - row sum > 0
        row = np.zeros((k, k))
        row[i, :] = 1.0
        A.append(row.ravel())
        b.append(1.0)
    for j in range(k):  # P[n-1, j] = 1 - column sum > 0
        row = np.zeros((k, k))
        row[:, j] = 1.0
        A.append(row.ravel())
        b.append(1.0)
    # P[n-1, n-1] = 2 - n + sum(block) > 0
    A.append(-np.ones(d))
    b.append(2.0 - n)
    return ConstraintSet.from_arrays(np.array(A), np.array(b))


def birkhoff_matrix(x, n: int):
    """Expand block coordinates into full ``n x n`` doubly stochastic matrices."""
    x = np.asarray(x, dtype=float)
    k = n - 1
    block = x.reshape(x.shape[:-1] + (k, k))
    P = np.empty(x.shape[:-1] + (n, n))
    P[..., :k, :k] = block
    P[..., :k, k] = 1.0 - block.sum(axis=-1)
    P[..., k, :k] = 1.0 - block.sum(axis=-2)
    P[..., k, k] = 1.0 - P[..., :k, k].sum(axis=-1)
    return P


def cholesky_index(d: int):
    """Row-major ``(i, j)`` pairs, ``i >= j``, of a lower-triangular factor."""
    return [(i, j) for i in range(d) for j in range(i + 1)]


def make_cholesky_ball(d: int, C: float):
    """Lower-triangular ``L`` with ``|L|_F < sqrt(C)`` and ``L_ii > 0``.

    These parameterise SPD matrices ``L L^T`` with trace below ``C``.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    if not C > 0:
        raise ValueError("C must be positive")
    idx = cholesky_index(d)
    p = len(idx)
    linear = []
    for k, (i, j) in enumerate(idx):
        if i == j:
            a = np.zeros(p)
            a[k] = -1.0
            linear.append(LinearConstraint(a, 0.0))
    sphere = SphereConstraint(np.zeros(p), np.sqrt(C))
    return ConstraintSet(p, linear, [sphere])


def cholesky_matrix(x, d: int):
    """Rebuild the SPD matrices ``L L^T`` from flat factor coordinates."""
    x = np.asarray(x, dtype=float)
    L = np.zeros(x.shape[:-1] + (d, d))
    for k, (i, j) in enumerate(cholesky_index(d)):
        L[..., i, j] = x[..., k]
    return L @ np.swapaxes(L, -1, -2)


def make_loop_polytope(lengths, d_anchor: float):
    """Feasible anchor distances ``r(1,3) .. r(1,N-1)`` of a closed chain.

    ``lengths`` holds the link lengths ``l_1 .. l_{N-1}``; the anchor distance
    closes the loop.  The polytope has ``N - 3`` coordinates.
    """
    ell = [float(v) for v in lengths]
    if len(ell) < 3 or min(ell) <= 0:
        raise ValueError("need at least 3 positive link lengths")
    if d_anchor < 0:
        raise ValueError("d_anchor must be >= 0")
    N = len(ell) + 1
    d = N - 3

    def r(j):  # unit vector selecting r(1, j), j = 3 .. N-1
        e = np.zeros(d)
        e[j - 3] = 1.0
        return e

    l = lambda j: ell[j - 1]  # noqa: E731  (1-based link index)
    A, b = [], []
    A += [r(3), -r(3)]
    b += [l(1) + l(2), -abs(l(1) - l(2))]
    for j in range(3, N - 1):
        A += [r(j) - r(j + 1), -r(j) + r(j + 1), -r(j) - r(j + 1)]
        b += [l(j), l(j), -l(j)]
    A += [r(N - 1), -r(N - 1)]
    b += [l(N - 1) + d_anchor, -abs(l(N - 1) - d_anchor)]
    return ConstraintSet.from_arrays(np.array(A), np.array(b))


def make_domain(kind: str, **kw) -> DomainSpec:
    """Build a named domain: hypercube, simplex, birkhoff, cholesky_ball,
    loop, interval or torus."""
    periodic = int(kw.pop("periodic_dims", 0))
    if kind == "hypercube":
        cset = make_hypercube(int(kw["dim"]))
    elif kind == "simplex":
        cset = make_simplex(int(kw["dim"]))
    elif kind == "birkhoff":
        cset = make_birkhoff(int(kw["n"]))
    elif kind == "cholesky_ball":
        cset = make_cholesky_ball(int(kw["dim"]), float(kw["C"]))
    elif kind == "loop":
        cset = make_loop_polytope(kw["lengths"], float(kw["d_anchor"]))
    elif kind == "interval":
        cset = make_interval(float(kw.get("lo", 0.0)), float(kw.get("hi", 1.0)))
    elif kind == "torus":
        cset = None
        periodic = int(kw.get("dim", periodic))
    else:
        raise ValueError(f"unknown domain kind {kind!r}")
    return DomainSpec(cset, periodic, name=kind)

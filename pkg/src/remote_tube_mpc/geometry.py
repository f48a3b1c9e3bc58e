"""H-polytopes and the support-function set calculus.

Every set is kept in half-space form ``{x : H x <= h}``.  Linear images and
Minkowski sums are never converted to half-spaces; they are represented lazily
by :class:`LinearMap` and :class:`MinkowskiSum`, which only expose a support
function.  That is enough for tightening, inclusion and membership tests.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from .optimization import FEAS_TOL, LinearProgram, Status, lp_solve

GEOM_TOL = 1e-8
# support values feed containment checks at GEOM_TOL, so solve tighter
SUPPORT_TOL = 1e-10


class EmptySetError(ValueError):
    pass


class UnboundedSetError(ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class HPolytope:
    """Intersection of half-spaces ``{x : H x <= h}``."""

    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        h = np.atleast_1d(np.asarray(self.h, dtype=float)).ravel()
        if H.shape[0] < 1:
            raise ValueError("a polytope needs at least one half-space")
        if H.shape[0] != h.shape[0]:
            raise ValueError(f"H has {H.shape[0]} rows, h has {h.shape[0]} entries")
        if np.any(np.all(H == 0.0, axis=1)):
            raise ValueError("H contains an all-zero row")
        object.__setattr__(self, "H", _frozen(H))
        object.__setattr__(self, "h", _frozen(h))

    @property
    def n(self) -> int:
        return self.H.shape[1]

    @property
    def m(self) -> int:
        return self.H.shape[0]

    @classmethod
    def from_box(cls, lower, upper) -> "HPolytope":
        lower = np.atleast_1d(np.asarray(lower, dtype=float))
        upper = np.atleast_1d(np.asarray(upper, dtype=float))
        eye = np.eye(lower.size)
        return cls(np.vstack([eye, -eye]), np.concatenate([upper, -lower]))

    @classmethod
    def symmetric_box(cls, bounds) -> "HPolytope":
        bounds = np.atleast_1d(np.asarray(bounds, dtype=float))
        return cls.from_box(-bounds, bounds)

    @cached_property
    def box(self) -> "Box | None":
        """The equivalent :class:`Box` if the rows are exactly ``+-e_i``."""
        n = self.n
        if self.m != 2 * n:
            return None
        eye = np.eye(n)
        upper = np.full(n, np.nan)
        lower = np.full(n, np.nan)
        for row, off in zip(self.H, self.h):
            nz = np.flatnonzero(row)
            if nz.size != 1:
                return None
            i = nz[0]
            if np.array_equal(row, eye[i]) and np.isnan(upper[i]):
                upper[i] = off
            elif np.array_equal(row, -eye[i]) and np.isnan(lower[i]):
                lower[i] = -off
            else:
                return None
        if np.any(upper < lower):
            return None
        return Box((upper + lower) / 2, (upper - lower) / 2)

    @cached_property
    def is_empty(self) -> bool:
        if self.box is not None:
            return False
        res = lp_solve(LinearProgram(np.zeros(self.n), self.H, self.h))
        return res.status is Status.INFEASIBLE

    @cached_property
    def is_bounded(self) -> bool:
        if self.box is not None:
            return True
        for d in np.vstack([np.eye(self.n), -np.eye(self.n)]):
            res = lp_solve(LinearProgram(d, self.H, self.h))
            if res.status is Status.UNBOUNDED:
                return False
        return True

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float)
        if self.box is not None:
            return self.box.support(d)
        if not d.any():
            if self.is_empty:
                raise EmptySetError("support of an empty set")
            return 0.0
        res = lp_solve(LinearProgram(d, self.H, self.h), SUPPORT_TOL)
        if res.status is Status.INFEASIBLE:
            raise EmptySetError("support of an empty set")
        if res.status is Status.UNBOUNDED:
            raise UnboundedSetError(f"set is unbounded in direction {d}")
        if not res.optimal:
            raise RuntimeError(f"support LP failed: {res.message}")
        return res.value

    def contains(self, x, tol: float = GEOM_TOL) -> bool:
        return bool(np.all(self.H @ np.asarray(x, dtype=float) <= self.h + tol))

    def scaled(self, alpha: float) -> "HPolytope":
        """``alpha * P`` for ``alpha > 0``."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        return HPolytope(self.H, alpha * self.h)

    def intersect(self, other: "HPolytope") -> "HPolytope":
        return HPolytope(np.vstack([self.H, other.H]), np.concatenate([self.h, other.h]))

    def to_dict(self) -> dict:
        return {"H": self.H.tolist(), "h": self.h.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "HPolytope":
        return cls(np.asarray(data["H"], dtype=float), np.asarray(data["h"], dtype=float))

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    def __repr__(self) -> str:
        return f"HPolytope(n={self.n}, m={self.m})"


@dataclass(frozen=True, eq=False)
class Box:
    """Axis-aligned box ``center +- half_widths``."""

    center: np.ndarray
    half_widths: np.ndarray

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.center, dtype=float))
        w = np.atleast_1d(np.asarray(self.half_widths, dtype=float))
        if c.shape != w.shape:
            raise ValueError("center and half_widths differ in shape")
        if np.any(w < 0):
            raise ValueError("half_widths must be nonnegative")
        object.__setattr__(self, "center", _frozen(c))
        object.__setattr__(self, "half_widths", _frozen(w))

    @property
    def n(self) -> int:
        return self.center.size

    def support(self, d) -> float:
        d = np.asarray(d, dtype=float)
        return float(d @ self.center + np.abs(d) @ self.half_widths)

    def to_polytope(self) -> HPolytope:
        return HPolytope.from_box(self.center - self.half_widths, self.center + self.half_widths)

    def contains(self, x, tol: float = GEOM_TOL) -> bool:
        return bool(np.all(np.abs(np.asarray(x) - self.center) <= self.half_widths + tol))

    def sample(self, u01: np.ndarray) -> np.ndarray:
        """Map a vector of uniforms on [0, 1) to a point of the box."""
        return self.center + self.half_widths * (2.0 * np.asarray(u01) - 1.0)


class LinearMap:
    """Lazy image ``M S`` of a convex set; support is ``h_S(M' d)``."""

    def __init__(self, M, S):
        self.M = np.atleast_2d(np.asarray(M, dtype=float))
        self.S = S

    @property
    def n(self) -> int:
        return self.M.shape[0]

    def support(self, d) -> float:
        return support(self.S, self.M.T @ np.asarray(d, dtype=float))


class MinkowskiSum:
    """Lazy Minkowski sum of convex sets; supports add."""

    def __init__(self, *sets):
        if not sets:
            raise ValueError("need at least one set")
        self.sets = sets

    @property
    def n(self) -> int:
        return self.sets[0].n

    def support(self, d) -> float:
        return sum(support(S, d) for S in self.sets)


def support(P, d) -> float:
    """``max_{x in P} d.x``; raises on empty or unbounded sets."""
    return P.support(d)


def pontryagin_diff(P: HPolytope, Q) -> HPolytope:
    """``P - Q``: keep ``P``'s normals and shrink each offset by ``h_Q``.

    The result may be empty; check ``.is_empty``.
    """
    shrink = np.array([support(Q, row) for row in P.H])
    return HPolytope(P.H, P.h - shrink)


def inclusion_check(P, Q: HPolytope, tol: float = GEOM_TOL) -> bool:
    """True iff ``P`` is contained in ``Q`` (up to ``tol`` per row of ``Q``).

    ``P`` may be any object with a support function.
    """
    if isinstance(P, HPolytope) and P.is_empty:
        warnings.warn("inclusion_check: left-hand set is empty", stacklevel=2)
        return True
    return all(support(P, row) <= off + tol for row, off in zip(Q.H, Q.h))


def contains_point(P: HPolytope, x, tol: float = GEOM_TOL) -> bool:
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape[0] != P.n:
        raise ValueError(f"point has dimension {x.shape[0]}, set has {P.n}")
    return P.contains(x, tol)


def minkowski_support(P, Q, d) -> float:
    return support(P, d) + support(Q, d)


def in_translate(center, Z: HPolytope, x, tol: float = GEOM_TOL) -> bool:
    """Membership ``x in {center} + Z``."""
    return contains_point(Z, np.asarray(x) - np.asarray(center), tol)


def template_outer(support_fn: Callable[[np.ndarray], float],
                   directions: Sequence | np.ndarray) -> HPolytope:
    """Outer approximation ``{x : d.x <= support_fn(d), d in D}``."""
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    check_template(D)
    return HPolytope(D, np.array([support_fn(d) for d in D]))


def check_template(D: np.ndarray) -> None:
    """Raise unless the directions positively span the whole space."""
    n = D.shape[1]
    if np.linalg.matrix_rank(D) < n:
        raise ValueError("template directions do not span the space")
    if np.any(np.all(D == 0.0, axis=1)):
        raise ValueError("template contains a zero direction")
    probe = HPolytope(D, np.ones(D.shape[0]))
    if not probe.is_bounded:
        raise ValueError("template directions do not positively span the space")


def normalize_directions(dirs: Iterable, tol: float = 1e-12) -> np.ndarray:
    """Scale to unit length and drop (near-)duplicates, preserving order."""
    out: list[np.ndarray] = []
    for d in dirs:
        d = np.asarray(d, dtype=float)
        nrm = np.linalg.norm(d)
        if nrm <= tol:
            continue
        d = d / nrm
        if any(np.abs(d - e).max() <= 1e-12 for e in out):
            continue
        out.append(d)
    return np.array(out)


def chebyshev_center(P: HPolytope) -> tuple[np.ndarray, float]:
    """Centre and radius of the largest ball inside ``P``."""
    norms = np.linalg.norm(P.H, axis=1)
    c = np.zeros(P.n + 1)
    c[-1] = 1.0
    A = np.hstack([P.H, norms[:, None]])
    A = np.vstack([A, -c])
    b = np.concatenate([P.h, [0.0]])
    res = lp_solve(LinearProgram(c, A, b))
    if res.status is Status.INFEASIBLE:
        raise EmptySetError("Chebyshev centre of an empty set")
    if not res.optimal:
        raise UnboundedSetError("Chebyshev ball is unbounded")
    return res.x[:-1], float(res.x[-1])


def _facet_rows(P: HPolytope, tol: float) -> np.ndarray | None:
    """Rows supporting a facet, from the vertex set computed by qhull.

    Returns ``None`` when qhull cannot be used (low dimension, empty
    interior, numerical failure); callers then fall back to LPs.
    """
    from scipy.spatial import HalfspaceIntersection, QhullError

    n = P.n
    if n < 2:
        return None
    try:
        center, radius = chebyshev_center(P)
    except ValueError:
        return None
    if radius <= 1e-9 * max(1.0, np.abs(P.h).max()):
        return None
    try:
        hs = HalfspaceIntersection(np.hstack([P.H, -P.h[:, None]]), center)
    except (QhullError, ValueError):
        return None
    V = hs.intersections
    if not np.all(np.isfinite(V)):
        return None
    norms = np.linalg.norm(P.H, axis=1)
    slack = (P.h[:, None] - P.H @ V.T) / norms[:, None]
    scale = max(1.0, np.abs(V).max())
    keep = np.zeros(P.m, dtype=bool)
    for i in range(P.m):
        tight = V[slack[i] <= tol * scale]
        if tight.shape[0] >= n and np.linalg.matrix_rank(tight[1:] - tight[0], tol=1e-9 * scale) == n - 1:
            keep[i] = True
    return keep


def remove_redundant(P: HPolytope, tol: float = 1e-9) -> HPolytope:
    """Drop rows implied by the remaining ones.

    Full-dimensional polytopes go through a vertex enumeration; otherwise
    one LP per row decides.
    """
    keep = _facet_rows(P, tol)
    if keep is not None and keep.any():
        # confirm every dropped row against the kept ones; tiny facets can
        # be missed by the vertex test
        for i in np.flatnonzero(~keep):
            H = np.vstack([P.H[keep], P.H[i]])
            h = np.concatenate([P.h[keep], [P.h[i] + 1.0]])
            res = lp_solve(LinearProgram(P.H[i], H, h), SUPPORT_TOL)
            if not (res.optimal and res.value <= P.h[i] + tol):
                keep[i] = True
        return HPolytope(P.H[keep], P.h[keep])
    keep = np.ones(P.m, dtype=bool)
    for i in range(P.m):
        keep[i] = False
        others = np.flatnonzero(keep)
        if others.size == 0:
            keep[i] = True
            continue
        # bound the LP with the tested row relaxed by one unit
        H = np.vstack([P.H[others], P.H[i]])
        h = np.concatenate([P.h[others], [P.h[i] + 1.0]])
        res = lp_solve(LinearProgram(P.H[i], H, h), FEAS_TOL)
        if not (res.optimal and res.value <= P.h[i] + tol):
            keep[i] = True
    return HPolytope(P.H[keep], P.h[keep])


def vertices_2d(P: HPolytope, tol: float = 1e-9) -> np.ndarray:
    """Brute-force vertex enumeration of a planar polytope (test oracle)."""
    if P.n != 2:
        raise ValueError("vertex enumeration is only provided in 2-D")
    pts = []
    for i in range(P.m):
        for j in range(i + 1, P.m):
            M = P.H[[i, j]]
            if abs(np.linalg.det(M)) < 1e-12:
                continue
            x = np.linalg.solve(M, P.h[[i, j]])
            if P.contains(x, tol):
                pts.append(x)
    if not pts:
        return np.zeros((0, 2))
    pts = np.unique(np.round(np.array(pts), 12), axis=0)
    c = pts.mean(axis=0)
    order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
    return pts[order]

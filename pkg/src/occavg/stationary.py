"""The set of stationary state-control measures as an explicit polytope.

For a finite grid the balance condition only has to be imposed for the
indicator functions of the y cells, so the set is cut out by ``ny`` balance
rows, the mass row and nonnegativity.  Support queries are answered by the
dense simplex in :mod:`occavg.lp`, warm-started from a feasible basis that is
computed once per polytope.
"""

from __future__ import annotations

import csv
import io
import itertools
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import lp
from .errors import InvalidArgument, NumericalFailure
from .measures import EXPECTATION, GridSpec, OccMeasure, require_same_grid
from .rng import sampling_stream

VERTEX_CELL_LIMIT = 12


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """``P[c, y']``: probability of moving to ``y'`` from cell ``c = iy * nu + iu``."""

    grid: GridSpec
    P: np.ndarray

    def __post_init__(self):
        P = np.array(self.P, dtype=float)
        if P.shape != (self.grid.n_cells, self.grid.ny):
            raise InvalidArgument("kernel shape does not match the grid")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise InvalidArgument("kernel rows must be probability vectors")
        P.setflags(write=False)
        object.__setattr__(self, "P", P)


def build_kernel(spec) -> TransitionKernel:
    g = spec.grid
    P = np.zeros((g.n_cells, g.ny))
    cells = np.arange(g.n_cells)
    nxt = spec.next_index.reshape(g.n_cells, g.ns)
    for js in range(g.ns):
        np.add.at(P, (cells, nxt[:, js]), g.s_probs[js])
    return TransitionKernel(g, P)


class SupportResult(NamedTuple):
    value: float
    gamma: OccMeasure
    basis: tuple


@dataclass
class SupportLog:
    """Audit log of support calls: direction, value and optimal basis."""

    rows: list = field(default_factory=list)

    def record(self, c, value, basis):
        self.rows.append((np.array(c, dtype=float), float(value), tuple(int(i) for i in basis)))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["call", "direction", "value", "basis"])
        for k, (c, v, basis) in enumerate(self.rows):
            w.writerow([k, " ".join(repr(float(x)) for x in c), repr(v), " ".join(map(str, basis))])
        return buf.getvalue()


@dataclass(frozen=True, eq=False)
class MeasurePolytope:
    """``{x >= 0 : A x = b}`` over flattened cell weights, with a warm start."""

    grid: GridSpec
    A: np.ndarray
    b: np.ndarray
    row_names: tuple
    start: lp.FeasibleStart = field(repr=False)
    vertices: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_cells(self):
        return self.grid.n_cells

    def to_lp_text(self, objective=None):
        """CPLEX-style LP text; column ``g_i_j`` is the weight of cell ``(i, j)``."""
        names = [f"g_{iy}_{iu}" for iy in range(self.grid.ny) for iu in range(self.grid.nu)]
        obj = np.zeros(self.n_cells) if objective is None else np.asarray(objective, dtype=float).ravel()
        lines = ["\\ stationary measure polytope", "Maximize", " obj: " + _lin(obj, names, keep_zeros=True),
                 "Subject To"]
        for name, row, rhs in zip(self.row_names, self.A, self.b):
            lines.append(f" {name}: {_lin(row, names)} = {rhs!r}")
        lines.append("Bounds")
        lines.extend(f" {n} >= 0" for n in names)
        lines.append("End")
        return "\n".join(lines) + "\n"


def _lin(coefs, names, keep_zeros=False):
    terms = []
    for a, n in zip(coefs, names):
        if a != 0.0 or keep_zeros:
            terms.append(f"{'-' if a < 0 else '+'} {abs(float(a))!r} {n}")
    if not terms:
        return "0"
    s = " ".join(terms)
    return s[2:] if s.startswith("+ ") else s


def stationary_polytope(kernel: TransitionKernel, enumerate_vertices: bool | None = None) -> MeasurePolytope:
    g = kernel.grid
    E = np.repeat(np.eye(g.ny), g.nu, axis=0)  # E[c, y] = 1 iff cell c sits on state y
    A = np.vstack([(kernel.P - E).T, np.ones((1, g.n_cells))])
    b = np.zeros(g.ny + 1)
    b[-1] = 1.0
    names = tuple(f"balance_{i}" for i in range(g.ny)) + ("mass",)
    try:
        start = lp.phase_one(A, b)
    except NumericalFailure as exc:
        raise NumericalFailure(f"stationary set is empty, kernel is inconsistent: {exc}") from exc
    A.setflags(write=False)
    b.setflags(write=False)
    poly = MeasurePolytope(g, A, b, names, start)
    if enumerate_vertices is None:
        enumerate_vertices = g.n_cells <= VERTEX_CELL_LIMIT
    if enumerate_vertices:
        object.__setattr__(poly, "vertices", enumerate_polytope_vertices(poly))
    return poly


def enumerate_polytope_vertices(poly: MeasurePolytope) -> np.ndarray:
    """All basic feasible solutions, sorted lexicographically (small instances only)."""
    if poly.n_cells > VERTEX_CELL_LIMIT:
        raise InvalidArgument(f"vertex enumeration is limited to {VERTEX_CELL_LIMIT} cells")
    A, b = poly.start.A, poly.start.b
    m, n = A.shape
    found = []
    for cols in itertools.combinations(range(n), m):
        B = A[:, cols]
        if abs(np.linalg.det(B)) < 1e-12:
            continue
        xB = np.linalg.solve(B, b)
        if np.any(xB < -1e-12):
            continue
        x = np.zeros(n)
        x[list(cols)] = np.clip(xB, 0.0, None)
        if not any(np.max(np.abs(x - v)) < 1e-9 for v in found):
            found.append(x)
    V = np.array(sorted(found, key=lambda v: tuple(np.round(v, 12))))
    for v in V:
        if np.max(np.abs(poly.A @ v - poly.b)) > 1e-9:
            raise NumericalFailure("enumerated vertex violates the constraints")
    V.setflags(write=False)
    return V


def _cost_vector(poly, c):
    c = np.asarray(c, dtype=float)
    if c.shape in ((poly.grid.ny, poly.grid.nu), (poly.n_cells,)):
        return c.reshape(-1)
    raise InvalidArgument(f"cost of shape {c.shape} does not match {poly.n_cells} cells")


def support(poly: MeasurePolytope, c, log: SupportLog | None = None) -> SupportResult:
    """``max c @ gamma`` over the polytope and a maximising vertex."""
    cv = _cost_vector(poly, c)
    res = lp.solve_from_basis(-cv, poly.start.A, poly.start.b, poly.start.basis)
    gamma = OccMeasure(poly.grid, res.x / res.x.sum(), EXPECTATION)
    value = float(cv @ gamma.flat)
    if log is not None:
        log.record(cv, value, res.basis)
    return SupportResult(value, gamma, res.basis)


def contains(poly: MeasurePolytope, gamma: OccMeasure, tol: float = 1e-8) -> bool:
    require_same_grid(poly.grid, gamma.grid)
    x = gamma.flat
    return bool(np.max(np.abs(poly.A @ x - poly.b)) <= tol and np.all(x >= -tol))


def balance_residual(poly: MeasurePolytope, gamma: OccMeasure) -> float:
    return float(np.max(np.abs(poly.A @ gamma.flat - poly.b)))


def _image_matrix(poly, H):
    H = np.asarray(H, dtype=float)
    if H.ndim == 3 or (H.ndim == 2 and H.shape == (poly.grid.ny, poly.grid.nu)):
        H = H.reshape(-1, poly.n_cells) if H.ndim == 3 else H.reshape(1, -1)
    if H.ndim != 2 or H.shape[1] != poly.n_cells:
        raise InvalidArgument("test-function matrix does not match the polytope cells")
    return H


def image_support(poly: MeasurePolytope, H, p, log: SupportLog | None = None):
    """Support of the linear image ``H W`` in direction ``p``: ``(value, H gamma*)``."""
    H = _image_matrix(poly, H)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape != (H.shape[0],):
        raise InvalidArgument("direction dimension does not match the image")
    res = support(poly, H.T @ p, log)
    return res.value, H @ res.gamma.flat


@dataclass(frozen=True, eq=False)
class ImageSet:
    """The convex set ``H W`` seen through its support function."""

    poly: MeasurePolytope
    H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", _image_matrix(self.poly, self.H))

    @property
    def dim(self):
        return self.H.shape[0]

    def support_values(self, directions):
        return np.array([image_support(self.poly, self.H, p)[0] for p in directions])


def support_values(S, directions) -> np.ndarray:
    """Support values of a convex set given as an ImageSet, point cloud or callable."""
    D = np.asarray(directions, dtype=float)
    if isinstance(S, ImageSet):
        return S.support_values(D)
    if callable(S):
        return np.array([float(S(p)) for p in D])
    P = np.atleast_2d(np.asarray(S, dtype=float))
    if P.shape[1] != D.shape[1]:
        raise InvalidArgument("point cloud and directions have different dimensions")
    return np.max(D @ P.T, axis=1)


MIN_DIRECTIONS = 16


def unit_directions(dim: int, count: int | None = None, seed: int = 0) -> np.ndarray:
    """Deterministic direction fan: ``+-1`` in 1-D, an even circle in 2-D, seeded Gaussians beyond."""
    if dim == 1:
        return np.array([[1.0], [-1.0]])
    if dim == 2:
        count = count or 256
        a = 2 * np.pi * np.arange(count) / count
        return np.column_stack([np.cos(a), np.sin(a)])
    count = count or 2048
    D = sampling_stream(seed, 13).normal(size=(count, dim))
    return D / np.linalg.norm(D, axis=1, keepdims=True)


def polytope_set_hausdorff(P1, P2, directions) -> float:
    """``max_p |h_P1(p) - h_P2(p)|`` over the given unit directions.

    A lower bound of the Hausdorff distance between the convex hulls that
    becomes exact as the directions fill the sphere (and is exact in 1-D with
    the two directions ``+-1``).
    """
    D = np.atleast_2d(np.asarray(directions, dtype=float))
    if D.shape[1] == 1:
        if not (np.any(D[:, 0] > 0) and np.any(D[:, 0] < 0)):
            raise InvalidArgument("1-D comparison needs both directions +1 and -1")
    elif len(D) < MIN_DIRECTIONS:
        raise InvalidArgument(f"at least {MIN_DIRECTIONS} directions are required")
    D = D / np.linalg.norm(D, axis=1, keepdims=True)
    return float(np.max(np.abs(support_values(P1, D) - support_values(P2, D))))

"""Probability measures on a finite state-control grid and their distances.

Cells are ordered y-major: cell ``iy * nu + iu`` holds the pair
``(y_points[iy], u_points[iu])``.  All measures are stored dense as an
``(ny, nu)`` weight array.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import InvalidArgument
from .rng import sampling_stream

EMPIRICAL = "empirical-random"
EXPECTATION = "expectation"
_KINDS = (EMPIRICAL, EXPECTATION)


def _frozen(a, dtype=float, ndim=2):
    a = np.array(a, dtype=dtype)
    if a.ndim == 1 and ndim == 2:
        a = a[:, None]
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class GridSpec:
    """Finite grids for the state set, the control set and the noise law.

    ``y_points`` is ``(ny, m)``, ``u_points`` is ``(nu, k)`` and ``s_points``
    is ``(ns, d)``; one-dimensional inputs are promoted to a single column.
    """

    y_points: np.ndarray
    u_points: np.ndarray
    s_points: np.ndarray
    s_probs: np.ndarray

    def __post_init__(self):
        y = _frozen(self.y_points)
        u = _frozen(self.u_points)
        s = _frozen(self.s_points)
        p = _frozen(self.s_probs, ndim=1)
        if len(y) == 0 or len(u) == 0 or len(s) == 0:
            raise InvalidArgument("grids must be nonempty")
        if len(np.unique(y, axis=0)) != len(y):
            raise InvalidArgument("y_points must be distinct")
        if len(np.unique(u, axis=0)) != len(u):
            raise InvalidArgument("u_points must be distinct")
        if p.shape != (len(s),):
            raise InvalidArgument("one probability per noise atom is required")
        if np.any(p <= 0) or abs(p.sum() - 1.0) > 1e-12:
            raise InvalidArgument("noise probabilities must be positive and sum to 1")
        object.__setattr__(self, "y_points", y)
        object.__setattr__(self, "u_points", u)
        object.__setattr__(self, "s_points", s)
        object.__setattr__(self, "s_probs", p)

    @property
    def ny(self):
        return len(self.y_points)

    @property
    def nu(self):
        return len(self.u_points)

    @property
    def ns(self):
        return len(self.s_points)

    @property
    def n_cells(self):
        return self.ny * self.nu

    def cell_coordinates(self):
        """Return ``(Y, U)`` arrays of shape ``(n_cells, m)`` and ``(n_cells, k)``."""
        Y = np.repeat(self.y_points, self.nu, axis=0)
        U = np.tile(self.u_points, (self.ny, 1))
        return Y, U

    def same_as(self, other):
        if self is other:
            return True
        return (
            isinstance(other, GridSpec)
            and np.array_equal(self.y_points, other.y_points)
            and np.array_equal(self.u_points, other.u_points)
            and np.array_equal(self.s_points, other.s_points)
            and np.array_equal(self.s_probs, other.s_probs)
        )


def require_same_grid(a, b):
    if not a.same_as(b):
        raise InvalidArgument("objects are defined on different grids")


@dataclass(frozen=True, eq=False)
class OccMeasure:
    grid: GridSpec
    weights: np.ndarray
    kind: str = EXPECTATION

    def __post_init__(self):
        w = np.array(self.weights, dtype=float)
        if w.shape == (self.grid.n_cells,):
            w = w.reshape(self.grid.ny, self.grid.nu)
        if w.shape != (self.grid.ny, self.grid.nu):
            raise InvalidArgument(
                f"weights of shape {w.shape} do not match grid {(self.grid.ny, self.grid.nu)}"
            )
        if self.kind not in _KINDS:
            raise InvalidArgument(f"unknown measure kind {self.kind!r}")
        if np.any(w < -1e-12):
            raise InvalidArgument("measure weights must be nonnegative")
        if abs(w.sum() - 1.0) > 1e-10:
            raise InvalidArgument(f"measure mass {w.sum()!r} is not 1")
        w = np.clip(w, 0.0, None)
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)

    @property
    def flat(self):
        return self.weights.ravel()

    def y_marginal(self):
        return self.weights.sum(axis=1)

    @classmethod
    def point_mass(cls, grid, iy, iu, kind=EXPECTATION):
        w = np.zeros((grid.ny, grid.nu))
        w[iy, iu] = 1.0
        return cls(grid, w, kind)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["cell_y_index", "cell_u_index", "weight"])
        for iy in range(self.grid.ny):
            for iu in range(self.grid.nu):
                writer.writerow([iy, iu, repr(float(self.weights[iy, iu]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text, grid, kind=EXPECTATION):
        w = np.zeros((grid.ny, grid.nu))
        for row in csv.DictReader(io.StringIO(text)):
            w[int(row["cell_y_index"]), int(row["cell_u_index"])] = float(row["weight"])
        return cls(grid, w, kind)


# -- metric basis -----------------------------------------------------------

_N_WAVES = 2


def _raw_basis_values(coef, X):
    # coef: dict with a0 (J,), a (J, D), c (J, W), omega (J, W, D), phi (J, W)
    lin = coef["a0"][:, None] + coef["a"] @ X.T
    waves = np.einsum("jw,jwn->jn", coef["c"], np.sin(np.einsum("jwd,nd->jwn", coef["omega"], X) + coef["phi"][:, :, None]))
    return lin + waves


@dataclass(frozen=True, eq=False)
class MetricBasis:
    """A seeded family ``q_1..q_J`` of Lipschitz functions with ``|q_j| <= 1``.

    ``values[j]`` holds ``q_{j+1}`` tabulated on the grid cells and
    ``lipschitz_bounds[j]`` its largest difference quotient over all pairs of
    grid cells (Euclidean metric on the concatenated coordinates).
    """

    grid: GridSpec
    J: int
    seed: int
    coefficients: dict
    scales: np.ndarray
    values: np.ndarray = field(repr=False)
    lipschitz_bounds: np.ndarray = field(repr=False)

    @property
    def weights(self):
        return 0.5 ** np.arange(1, self.J + 1)

    def evaluate(self, y, u):
        """Evaluate all ``J`` functions at arbitrary points; returns ``(J, n)``."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        u = np.atleast_2d(np.asarray(u, dtype=float))
        X = np.hstack([y, u])
        raw = _raw_basis_values(self.coefficients, X)
        return np.clip(raw / self.scales[:, None], -1.0, 1.0)

    def function(self, j):
        """Return ``q_j`` (1-based) as a callable on ``(y, u)`` point arrays."""
        if not 1 <= j <= self.J:
            raise InvalidArgument(f"basis index {j} outside 1..{self.J}")
        return lambda y, u: self.evaluate(y, u)[j - 1]

    def moments(self, gamma):
        """``(J,)`` vector of integrals of every basis function against ``gamma``."""
        require_same_grid(self.grid, gamma.grid)
        return self.values.reshape(self.J, -1) @ gamma.flat

    def to_text(self):
        payload = {
            "format": "occavg-metric-basis/1",
            "J": self.J,
            "seed": self.seed,
            "coefficients": {k: v.tolist() for k, v in self.coefficients.items()},
            "scales": self.scales.tolist(),
        }
        return json.dumps(payload, indent=1, sort_keys=True)

    @classmethod
    def from_text(cls, text, grid):
        payload = json.loads(text)
        coef = {k: np.array(v, dtype=float) for k, v in payload["coefficients"].items()}
        return _assemble_basis(grid, int(payload["J"]), int(payload["seed"]), coef,
                               np.array(payload["scales"], dtype=float))


def _pairwise_lipschitz(X, vals):
    """Max |q(x_i) - q(x_j)| / |x_i - x_j| over distinct pairs, for each row of vals."""
    n = len(X)
    out = np.zeros(len(vals))
    if n < 2:
        return out
    D = cdist(X, X)
    iu = np.triu_indices(n, k=1)
    d = D[iu]
    keep = d > 0
    for j, q in enumerate(vals):
        diff = np.abs(q[:, None] - q[None, :])[iu]
        out[j] = np.max(diff[keep] / d[keep]) if keep.any() else 0.0
    return out


def _assemble_basis(grid, J, seed, coef, scales):
    Y, U = grid.cell_coordinates()
    X = np.hstack([Y, U])
    vals = np.clip(_raw_basis_values(coef, X) / scales[:, None], -1.0, 1.0)
    lips = _pairwise_lipschitz(X, vals)
    for arr in (*coef.values(), scales, vals, lips):
        arr.setflags(write=False)
    return MetricBasis(grid, J, seed, coef, scales,
                       vals.reshape(J, grid.ny, grid.nu), lips)


def build_metric_basis(grid: GridSpec, J: int = 16, seed: int = 0) -> MetricBasis:
    """Draw ``J`` random affine-plus-sinusoid functions, normalised on the grid."""
    if int(J) < 1:
        raise InvalidArgument("J must be at least 1")
    J = int(J)
    D = grid.y_points.shape[1] + grid.u_points.shape[1]
    gen = sampling_stream(seed, 11)
    coef = {
        "a0": gen.uniform(-1.0, 1.0, size=J),
        "a": gen.normal(size=(J, D)),
        "c": gen.normal(size=(J, _N_WAVES)),
        "omega": gen.normal(scale=2.0, size=(J, _N_WAVES, D)),
        "phi": gen.uniform(0.0, 2 * np.pi, size=(J, _N_WAVES)),
    }
    Y, U = grid.cell_coordinates()
    raw = _raw_basis_values(coef, np.hstack([Y, U]))
    scales = np.max(np.abs(raw), axis=1)
    scales = np.where(scales > 1e-12, scales, 1.0)
    return _assemble_basis(grid, J, int(seed), coef, scales)


# -- integrals and distances ------------------------------------------------

def integrate(q, gamma: OccMeasure) -> float:
    """Integral of ``q`` against ``gamma``.

    ``q`` is either an ``(ny, nu)`` table or a callable evaluated on the cell
    coordinates ``q(Y, U)``.
    """
    if callable(q):
        Y, U = gamma.grid.cell_coordinates()
        vals = np.asarray(q(Y, U), dtype=float).reshape(-1)
    else:
        vals = np.asarray(q, dtype=float)
        if vals.shape not in ((gamma.grid.ny, gamma.grid.nu), (gamma.grid.n_cells,)):
            raise InvalidArgument(f"integrand of shape {vals.shape} does not match the measure grid")
        vals = vals.reshape(-1)
    if vals.shape != (gamma.grid.n_cells,):
        raise InvalidArgument("integrand returned the wrong number of values")
    return float(vals @ gamma.flat)


def embed(gammas: Sequence[OccMeasure], basis: MetricBasis) -> np.ndarray:
    """Weighted moment embedding; rho is the l1 distance between rows."""
    for g in gammas:
        require_same_grid(basis.grid, g.grid)
    W = np.stack([g.flat for g in gammas])
    return (W @ basis.values.reshape(basis.J, -1).T) * basis.weights


def rho(g1: OccMeasure, g2: OccMeasure, basis: MetricBasis) -> float:
    require_same_grid(g1.grid, g2.grid)
    require_same_grid(basis.grid, g1.grid)
    diff = basis.values.reshape(basis.J, -1) @ (g1.flat - g2.flat)
    return float(np.sum(basis.weights * np.abs(diff)))


def rho_hausdorff(S1, S2, basis: MetricBasis) -> float:
    if len(S1) == 0 or len(S2) == 0:
        raise InvalidArgument("Hausdorff distance needs nonempty sets")
    D = cdist(embed(S1, basis), embed(S2, basis), metric="cityblock")
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


def vec_hausdorff(V1, V2) -> float:
    V1 = np.atleast_2d(np.asarray(V1, dtype=float))
    V2 = np.atleast_2d(np.asarray(V2, dtype=float))
    if V1.size == 0 or V2.size == 0:
        raise InvalidArgument("Hausdorff distance needs nonempty sets")
    if V1.shape[1] != V2.shape[1]:
        raise InvalidArgument("vector sets have different dimensions")
    D = cdist(V1, V2)
    return float(max(D.min(axis=1).max(), D.min(axis=0).max()))


class ExpectedDistance(NamedTuple):
    value: float
    stderr: float
    index: int


def expected_set_distance(target, ensemble, basis: MetricBasis | None = None) -> ExpectedDistance:
    """Monte Carlo estimate of ``inf_candidate E[dist(target, candidate)]``.

    ``ensemble[c][r]`` is replicate ``r`` of candidate ``c``; replicates with
    the same ``r`` are assumed to share random numbers.  Vectors use the
    Euclidean norm, measures use ``rho`` (``basis`` required).
    """
    if len(ensemble) == 0:
        raise InvalidArgument("ensemble has no candidates")
    if isinstance(target, OccMeasure):
        if basis is None:
            raise InvalidArgument("a metric basis is required for measure ensembles")
        n_rep = {len(c) for c in ensemble}
        if 0 in n_rep:
            raise InvalidArgument("ensemble has zero replicates")
        t = embed([target], basis)[0]
        dist = [np.abs(embed(list(c), basis) - t).sum(axis=1) for c in ensemble]
    else:
        arr = np.asarray(ensemble, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[1] == 0:
            raise InvalidArgument("ensemble has zero replicates")
        t = np.asarray(target, dtype=float).reshape(-1)
        if arr.shape[2] != t.size:
            raise InvalidArgument("ensemble and target dimensions differ")
        dist = list(np.linalg.norm(arr - t, axis=2))
    means = np.array([d.mean() for d in dist])
    best = int(np.argmin(means))
    d = dist[best]
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    return ExpectedDistance(float(means[best]), se, best)

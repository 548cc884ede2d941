"""Finite-horizon value sets, their support-function DP, and convergence reports.

For a vector test function ``h`` on the cells, the set of expected
``h``-averages over horizon ``T`` reachable from ``y0`` is a convex-hull
object whose support function in direction ``p`` is a finite-horizon
optimal-control value.  That value is computed by backward induction.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import lp
from .errors import GuardError, InvalidArgument
from .measures import MetricBasis
from .rng import sampling_stream
from .stationary import (ImageSet, MeasurePolytope, build_kernel, polytope_set_hausdorff, stationary_polytope,
                         support, unit_directions)
from .system import ControlPlan, SystemSpec, noise_indices, occupation_counts, simulate_batch

MIN_REPLICATES = 30


@dataclass(frozen=True, eq=False)
class TestVector:
    """Vector function ``h = (h_1..h_j)`` tabulated on the cells: ``values`` is ``(j, ny, nu)``."""

    __test__ = False  # not a pytest class

    values: np.ndarray
    y_points: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 2:
            v = v[None]
        if v.ndim != 3 or v.shape[0] < 1:
            raise InvalidArgument("test vector needs shape (j, ny, nu) with j >= 1")
        if v.shape[1] != len(self.y_points):
            raise InvalidArgument("test vector does not match the state grid")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def j(self):
        return self.values.shape[0]

    @property
    def flat(self):
        """``(j, n_cells)`` matrix."""
        return self.values.reshape(self.j, -1)

    @property
    def c_h(self):
        return float(np.max(np.linalg.norm(self.values, axis=0)))

    @property
    def lipschitz_y(self):
        """Largest ``|h(y1, u) - h(y2, u)| / |y1 - y2|`` over grid pairs with a shared control."""
        Y = np.atleast_2d(np.asarray(self.y_points, dtype=float))
        if Y.shape[0] == 1 and Y.shape[1] != 1:
            Y = Y.T
        ny = Y.shape[0]
        best = 0.0
        for a in range(ny):
            for b in range(a + 1, ny):
                d = np.linalg.norm(Y[a] - Y[b])
                diff = np.linalg.norm(self.values[:, a, :] - self.values[:, b, :], axis=0).max()
                best = max(best, diff / d)
        return float(best)

    @classmethod
    def from_basis(cls, basis: MetricBasis, j=None, weighted=False):
        j = basis.J if j is None else int(j)
        if not 1 <= j <= basis.J:
            raise InvalidArgument(f"basis prefix length {j} outside 1..{basis.J}")
        vals = basis.values[:j]
        if weighted:
            vals = vals * basis.weights[:j, None, None]
        return cls(vals, basis.grid.y_points)

    @classmethod
    def from_functions(cls, grid, funcs):
        Y, U = grid.cell_coordinates()
        vals = [np.asarray(fn(Y, U), dtype=float).reshape(grid.ny, grid.nu) for fn in funcs]
        return cls(np.stack(vals), grid.y_points)


FINITE_HORIZON_DP = "finite-horizon-DP"
POLYTOPE_IMAGE = "polytope-image"
MONTE_CARLO = "monte-carlo"


@dataclass(frozen=True, eq=False)
class ValueSet:
    points: np.ndarray
    provenance: str
    directions: np.ndarray | None = None
    supports: np.ndarray | None = None

    def __post_init__(self):
        if self.provenance not in (FINITE_HORIZON_DP, POLYTOPE_IMAGE, MONTE_CARLO):
            raise InvalidArgument(f"unknown provenance {self.provenance!r}")
        object.__setattr__(self, "points", np.atleast_2d(np.asarray(self.points, dtype=float)))


# -- dynamic programming ----------------------------------------------------

def _directions_matrix(p, j):
    P = np.atleast_2d(np.asarray(p, dtype=float))
    if P.shape[1] != j:
        raise InvalidArgument(f"direction dimension {P.shape[1]} does not match h dimension {j}")
    return P


def psi_dp_tables(spec: SystemSpec, h: TestVector, P, T: int):
    """Backward induction for a batch of directions.

    Returns ``(V0, policy)`` where ``V0`` is ``(D, ny)`` with the optimal
    *total* reward over ``T`` steps and ``policy`` is ``(T, D, ny)`` with the
    maximising control (lowest index on ties).
    """
    if int(T) < 1:
        raise InvalidArgument("T must be at least 1")
    g = spec.grid
    P = _directions_matrix(P, h.j)
    reward = np.einsum("dj,jyu->dyu", P, h.values)  # (D, ny, nu)
    probs = g.s_probs
    V = np.zeros((len(P), g.ny))
    policy = np.empty((T, len(P), g.ny), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        Q = reward + V[:, spec.next_index] @ probs  # (D, ny, nu)
        a = np.argmax(Q, axis=2)
        policy[t] = a
        V = np.take_along_axis(Q, a[..., None], axis=2)[..., 0]
    return V, policy


def psi_h_dp(spec: SystemSpec, h: TestVector, p, T: int, y0: int) -> float:
    """Support value of the expected ``h``-average set in direction ``p``."""
    V, _ = psi_dp_tables(spec, h, np.asarray(p, dtype=float).reshape(1, -1), T)
    return float(V[0, y0] / T)


def psi_h_batch(spec, h, P, T, y0):
    V, _ = psi_dp_tables(spec, h, P, T)
    return V[:, y0] / T


def _policy_average(spec, h, policy, T, y0):
    """Exact expected ``h``-averages of deterministic Markov policies ``(T, D, ny)``."""
    g = spec.grid
    D = policy.shape[1]
    dist = np.zeros((D, g.ny))
    dist[:, y0] = 1.0
    acc = np.zeros((D, h.j))
    rows = np.arange(g.ny)
    for t in range(T):
        a = policy[t]  # (D, ny)
        hv = h.values[:, rows[None, :], a]  # (j, D, ny)
        acc += np.einsum("dy,jdy->dj", dist, hv)
        new = np.zeros(D * g.ny)
        offs = (np.arange(D) * g.ny)[:, None]
        for js, ps in enumerate(g.s_probs):
            nxt = spec.next_index[rows[None, :], a, js]  # (D, ny)
            new += np.bincount((nxt + offs).ravel(), weights=(ps * dist).ravel(), minlength=D * g.ny)
        dist = new.reshape(D, g.ny)
    return acc / T


def value_set_VhT(spec, h: TestVector, T, y0, directions) -> ValueSet:
    """Points of the expected-average set that are extreme in the given directions."""
    P = _directions_matrix(directions, h.j)
    if len(P) < 16 and h.j > 1:
        raise InvalidArgument("at least 16 directions are required")
    V, policy = psi_dp_tables(spec, h, P, T)
    pts = _policy_average(spec, h, policy, T, y0)
    return ValueSet(pts, FINITE_HORIZON_DP, P, V[:, y0] / T)


def default_directions(j, seed=0):
    return unit_directions(j, None if j > 1 else 2, seed)


# -- h-approximation estimates ----------------------------------------------

def weak_nu_estimate(spec, h, T, y0_pairs, directions=None) -> float:
    """Largest support-function distance between value sets from paired initial states."""
    if len(y0_pairs) == 0:
        raise InvalidArgument("at least one pair of initial states is required")
    D = default_directions(h.j) if directions is None else np.atleast_2d(directions)
    clouds = {y: value_set_VhT(spec, h, T, y, D).points for pair in y0_pairs for y in pair}
    return max(polytope_set_hausdorff(clouds[a], clouds[b], D) for a, b in y0_pairs)


def example3_bound(h: TestVector, T, contraction, diameter):
    """``L_h diam / (T (1 - |A|))`` for a linear map contracting by ``|A| < 1``."""
    if not 0 <= contraction < 1:
        raise InvalidArgument("contraction factor must lie in [0, 1)")
    return h.lipschitz_y * diameter / (T * (1.0 - contraction))


def random_plan_family(spec, horizon, count, seed, kinds=("history", "markov"), max_window=4):
    """Seeded sample of plans used as a stand-in for the set of all plans.

    ``history`` plans map the last ``w`` noise atoms (``w`` cycling through
    ``0..max_window``) and the step to a control; ``markov`` plans are
    time-varying randomised state feedback.  The first history plan with
    ``w = 0`` is an open-loop plan.
    """
    g = spec.grid
    gen = sampling_stream(seed, 31)
    plans = []
    k = 0
    while len(plans) < count:
        kind = kinds[k % len(kinds)]
        if kind == "history":
            w = (k // len(kinds)) % (max_window + 1)
            table = gen.integers(g.nu, size=(horizon, (g.ns + 1) ** w))
            plans.append(ControlPlan.history(table, g.nu, g.ns, w))
        elif kind == "markov":
            if (k // len(kinds)) % 2 == 0:
                table = gen.integers(g.nu, size=(horizon, g.ny))
                plans.append(ControlPlan.markov(table, g.nu))
            else:
                probs = gen.dirichlet(np.ones(g.nu), size=g.ny)
                plans.append(ControlPlan.markov(probs, g.nu, stationary=True))
        else:
            raise InvalidArgument(f"unknown plan kind {kind!r}")
        k += 1
    return plans


def _h_averages(spec, h, plan, y0, T, replicates, seed, noise):
    b = simulate_batch(spec, plan, y0, T, replicates, seed, noise=noise)
    occ = occupation_counts(spec.grid, b.y, b.u)  # (R, cells)
    return occ @ h.flat.T  # (R, j)


class StrongEstimate(NamedTuple):
    estimate: float
    stderr: float
    plan_index: int


def strong_nu_estimate(spec, h, T, y0_pairs, replicates, seed, plans=None, coupling="search") -> StrongEstimate:
    """Empirical strong-approximation gap (a lower bound of the supremum over plans).

    For every pair and every ``pi'`` in ``plans``, the matching plan
    ``pi''`` is ``pi'`` itself (``coupling="same"``) or the plan in ``plans``
    minimising the Monte Carlo estimate of
    ``E |avg h(y', u') - avg h(y'', u'')|`` under common random numbers
    (``coupling="search"``).  The maximum over ``pi'`` and pairs is returned.
    """
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    if len(y0_pairs) == 0:
        raise InvalidArgument("at least one pair of initial states is required")
    if coupling not in ("same", "search"):
        raise InvalidArgument(f"unknown coupling {coupling!r}")
    if plans is None:
        plans = random_plan_family(spec, T, 200 if coupling == "same" else 20, seed)
    noise = noise_indices(spec, T, seed, replicates)
    starts = sorted({y for pair in y0_pairs for y in pair})
    avg = {(y, i): _h_averages(spec, h, pl, y, T, replicates, seed, noise)
           for y in starts for i, pl in enumerate(plans)}
    best = StrongEstimate(-1.0, 0.0, 0)
    for a, b in y0_pairs:
        for i in range(len(plans)):
            cands = [i] if coupling == "same" else range(len(plans))
            dists = [np.linalg.norm(avg[(a, i)] - avg[(b, k)], axis=1) for k in cands]
            means = [d.mean() for d in dists]
            k = int(np.argmin(means))
            if means[k] > best.estimate:
                d = dists[k]
                best = StrongEstimate(float(means[k]), float(d.std(ddof=1) / np.sqrt(len(d))), i)
    return best


# -- distances to the stationary set ----------------------------------------

def rho_to_polytope(poly: MeasurePolytope, basis: MetricBasis, weights) -> float:
    """Exact ``min_{gamma in W} rho(chi, gamma)`` by a weighted-l1 linear program."""
    Q = basis.values.reshape(basis.J, -1)
    w = np.asarray(weights, dtype=float).reshape(-1)
    res = lp.min_weighted_residual(poly.start, Q, Q @ w, basis.weights)
    return max(float(res.value), 0.0)


def stationary_vertex_sample(poly, basis, count=16, seed=0):
    """Distinct maximisers of random moment directions: a sample of extreme stationary measures."""
    gen = sampling_stream(seed, 32)
    Q = basis.values.reshape(basis.J, -1)
    out = []
    for _ in range(count):
        p = gen.normal(size=basis.J)
        gam = support(poly, Q.T @ p).gamma
        if not any(np.max(np.abs(gam.flat - o.flat)) < 1e-9 for o in out):
            out.append(gam)
    return out


@dataclass
class ConvergenceReport:
    """Distance estimates per horizon and their fitted log-log slopes."""

    horizons: list
    rows: list = field(default_factory=list)  # (T, metric, estimate, stderr)
    notes: dict = field(default_factory=dict)
    bounds: dict = field(default_factory=dict)  # (T, metric) -> analytic bound

    def add(self, T, metric, estimate, stderr=0.0):
        if estimate < 0:
            raise InvalidArgument("distance estimates are nonnegative")
        self.rows.append((int(T), metric, float(estimate), float(stderr)))

    def series(self, metric):
        pts = sorted((T, e, s) for T, m, e, s in self.rows if m == metric)
        return np.array([p[0] for p in pts]), np.array([p[1] for p in pts]), np.array([p[2] for p in pts])

    def metrics(self):
        seen = []
        for _, m, _, _ in self.rows:
            if m not in seen:
                seen.append(m)
        return seen

    def slope(self, metric):
        T, e, _ = self.series(metric)
        if len(T) < 2 or np.any(e <= 0):
            return float("nan")
        return float(np.polyfit(np.log(T), np.log(e), 1)[0])

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        with_bounds = bool(self.bounds)
        w.writerow(["T", "metric", "estimate", "stderr"] + (["analytic_bound"] if with_bounds else []))
        for T, m, e, s in self.rows:
            extra = []
            if with_bounds:
                bnd = self.bounds.get((T, m))
                extra = [repr(float(bnd)) if bnd is not None else ""]
            w.writerow([T, m, repr(e), repr(s)] + extra)
        return buf.getvalue()

    def summary(self):
        lines = ["horizons: " + " ".join(str(T) for T in self.horizons)]
        for m in self.metrics():
            lines.append(f"slope[{m}]: {self.slope(m)!r}")
        for k in sorted(self.notes):
            lines.append(f"{k}: {self.notes[k]}")
        return "\n".join(lines) + "\n"


LOMS_HULL = "hull_distance"
LOMS_RANDOM = "sup_expected_rho_to_W"
LOMS_REACH = "sup_vertex_rho_E_to_B"


def loms_report(spec, basis: MetricBasis, y0, horizons, replicates, seed, metrics=(LOMS_HULL, LOMS_RANDOM, LOMS_REACH),
                n_plans=50, n_directions=None, n_vertices=8) -> ConvergenceReport:
    """Convergence of occupation-measure sets to the stationary set.

    ``hull_distance``
        support-function distance between the expected-average set of
        ``h = (2^-j q_j)`` over horizon ``T`` and the image of the stationary
        set under ``h``.
    ``sup_expected_rho_to_W``
        largest, over a seeded plan sample, Monte Carlo mean of the exact
        ``rho`` distance from the random occupation measure to the stationary
        set.
    ``sup_vertex_rho_E_to_B``
        largest, over sampled extreme stationary measures, smallest mean
        ``rho`` distance to the random occupation measures of candidate plans
        (the measure's own feedback policy and the plan sample).
    """
    horizons = [int(T) for T in horizons]
    if any(b <= a for a, b in zip(horizons, horizons[1:])) or not horizons or horizons[0] < 1:
        raise InvalidArgument("horizons must be positive and strictly increasing")
    if (LOMS_RANDOM in metrics or LOMS_REACH in metrics) and int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    poly = stationary_polytope(build_kernel(spec), enumerate_vertices=False)
    report = ConvergenceReport(horizons)
    report.notes["basis_J"] = basis.J
    report.notes["basis_seed"] = basis.seed
    report.notes["truncation_floor"] = repr(2.0 ** (-basis.J + 1))
    Tmax = horizons[-1]
    if LOMS_HULL in metrics:
        h = TestVector.from_basis(basis, weighted=True)
        D = unit_directions(h.j, n_directions, seed)
        W_img = ImageSet(poly, h.flat).support_values(D)
        report.notes["hull_directions"] = len(D)
        for T in horizons:
            psi = psi_h_batch(spec, h, D, T, y0)
            report.add(T, LOMS_HULL, float(np.max(np.abs(psi - W_img))))
    if LOMS_RANDOM in metrics or LOMS_REACH in metrics:
        plans = random_plan_family(spec, Tmax, n_plans, seed)
        noise = noise_indices(spec, Tmax, seed, replicates)
        report.notes["plans"] = n_plans
    if LOMS_RANDOM in metrics:
        for T in horizons:
            best = (-1.0, 0.0)
            for plan in plans:
                b = simulate_batch(spec, plan, y0, T, replicates, seed, noise=noise)
                occ = occupation_counts(spec.grid, b.y, b.u)
                d = np.array([rho_to_polytope(poly, basis, w) for w in occ])
                m = float(d.mean())
                if m > best[0]:
                    best = (m, float(d.std(ddof=1) / np.sqrt(len(d))))
            report.add(T, LOMS_RANDOM, *best)
    if LOMS_REACH in metrics:
        from .synthesis import policy_from_measure

        verts = stationary_vertex_sample(poly, basis, n_vertices, seed)
        Qw = basis.values.reshape(basis.J, -1) * basis.weights[:, None]
        for T in horizons:
            emb = []
            for plan in plans:
                b = simulate_batch(spec, plan, y0, T, replicates, seed, noise=noise)
                emb.append(occupation_counts(spec.grid, b.y, b.u) @ Qw.T)
            best = (-1.0, 0.0)
            for gam in verts:
                own = policy_from_measure(gam)
                b = simulate_batch(spec, own, y0, T, replicates, seed, noise=noise)
                cands = emb + [occupation_counts(spec.grid, b.y, b.u) @ Qw.T]
                target = Qw @ gam.flat
                dists = [np.abs(c - target).sum(axis=1) for c in cands]
                k = int(np.argmin([d.mean() for d in dists]))
                m = float(dists[k].mean())
                if m > best[0]:
                    best = (m, float(dists[k].std(ddof=1) / np.sqrt(len(dists[k]))))
            report.add(T, LOMS_REACH, *best)
    return report

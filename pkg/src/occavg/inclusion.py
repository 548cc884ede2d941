"""Averaged velocity sets and the differential inclusion ``z' in V_g(z)``.

``V_g(z)`` is the image of the stationary set under ``gamma -> int g(z, .) d gamma``.
It is only ever accessed through its support function, one linear program
per query.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import ConvergenceFailure, InvalidArgument
from .hybrid import HybridSpec, TimeGrid
from .measures import EXPECTATION, OccMeasure
from .rng import sampling_stream
from .stationary import MeasurePolytope, support, unit_directions

FW_TOL = 1e-8
FW_MAX_ITER = 500
FW_FAIL = 1e-4


class SupportVg(NamedTuple):
    value: float
    gamma: OccMeasure
    v: np.ndarray


@dataclass(eq=False)
class VelocityOracle:
    """Support oracle of ``V_g(z)`` with a cache keyed by rounded ``(z, p)``."""

    polytope: MeasurePolytope
    hspec: HybridSpec
    cache: dict = field(default_factory=dict, repr=False)

    @property
    def grid(self):
        return self.polytope.grid

    @property
    def n(self):
        return self.hspec.n

    def field_table(self, z):
        return self.hspec.field_table(z, self.grid)

    def check_z(self, z):
        z = np.asarray(z, dtype=float).reshape(-1)
        lo, hi = self.hspec.z_box
        if z.shape != (self.n,) or np.any(z < lo - 1e-9) or np.any(z > hi + 1e-9):
            raise InvalidArgument(f"z = {z.tolist()} is outside z_box")
        return z


def support_Vg(oracle: VelocityOracle, z, p) -> SupportVg:
    z = oracle.check_z(z)
    p = np.asarray(p, dtype=float).reshape(-1)
    if p.shape != (oracle.n,) or not np.linalg.norm(p) > 0:
        raise InvalidArgument("direction must be a nonzero vector of the slow dimension")
    key = (tuple(np.round(z, 9)), tuple(np.round(p, 12)))
    hit = oracle.cache.get(key)
    if hit is not None:
        return hit
    F = oracle.field_table(z)  # (cells, n)
    res = support(oracle.polytope, F @ p)
    v = F.T @ res.gamma.flat
    out = SupportVg(float(p @ v), res.gamma, v)
    oracle.cache[key] = out
    return out


def velocity_of(oracle, z, gamma: OccMeasure):
    return oracle.field_table(z).T @ gamma.flat


class Projection(NamedTuple):
    v: np.ndarray
    gap: float
    gamma: OccMeasure  # stationary measure whose velocity is ``v``
    iterations: int


def _affine_min_norm(Q):
    """Minimum-norm point of the affine hull of the columns of ``Q``: weights summing to 1."""
    k = Q.shape[1]
    A = np.zeros((k + 1, k + 1))
    A[:k, :k] = Q.T @ Q
    A[:k, k] = 1.0
    A[k, :k] = 1.0
    rhs = np.zeros(k + 1)
    rhs[k] = 1.0
    sol = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return sol[:k]


def project_onto_Vg(oracle: VelocityOracle, v, z, tol=FW_TOL, max_iter=FW_MAX_ITER) -> Projection:
    """Euclidean projection of ``v`` onto ``V_g(z)``.

    Wolfe's minimum-norm-point method run on the translated set
    ``V_g(z) - v``, with the support oracle as the linear minimisation step.
    The returned gap is the conditional-gradient certificate
    ``<x - v, x - s>``, an upper bound of ``|x - v|^2 - dist(v, V_g(z))^2``.
    """
    z = oracle.check_z(z)
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.shape != (oracle.n,) or not np.all(np.isfinite(v)):
        raise InvalidArgument("velocity must be a finite vector of the slow dimension")

    def lmo(direction):
        # minimise <direction, w> over V_g(z)
        if np.linalg.norm(direction) == 0:
            direction = np.eye(oracle.n)[0]
        s = support_Vg(oracle, z, -direction)
        return s.v, s.gamma

    first_dir = v if np.linalg.norm(v) > 0 else np.eye(oracle.n)[0]
    s, gam = lmo(-first_dir)
    atoms = [s - v]
    measures = [gam.flat]
    lam = np.array([1.0])
    x = atoms[0]
    gap = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        s, gam = lmo(x)
        q = s - v
        gap = float(x @ (x - q))
        if gap <= tol:
            break
        if any(np.array_equal(q, a) for a in atoms):
            # the oracle repeats an atom: x is already optimal up to round-off
            break
        atoms.append(q)
        measures.append(gam.flat)
        lam = np.append(lam, 0.0)
        while True:
            Q = np.column_stack(atoms)
            mu = _affine_min_norm(Q)
            if np.all(mu > 1e-14):
                lam = mu
                break
            neg = mu <= 1e-14
            with np.errstate(divide="ignore", invalid="ignore"):
                ratios = np.where(neg, lam / (lam - mu), np.inf)
            theta = float(min(1.0, np.min(ratios)))
            lam = lam + theta * (mu - lam)
            keep = lam > 1e-14
            keep[np.argmax(lam)] = True
            atoms = [a for a, k in zip(atoms, keep) if k]
            measures = [m for m, k in zip(measures, keep) if k]
            lam = lam[keep] / lam[keep].sum()
            if len(atoms) == 1:
                break
        x = np.column_stack(atoms) @ lam
    else:
        if gap > FW_FAIL:
            raise ConvergenceFailure(f"projection onto V_g stalled with gap {gap:.3e}")
    if gap > FW_FAIL and it >= max_iter:
        raise ConvergenceFailure(f"projection onto V_g stalled with gap {gap:.3e}")
    w = np.clip(np.column_stack(measures) @ lam, 0.0, None)
    gamma = OccMeasure(oracle.grid, w / w.sum(), EXPECTATION)
    return Projection(x + v, max(gap, 0.0), gamma, it)


def distance_to_Vg(oracle, v, z):
    return float(np.linalg.norm(project_onto_Vg(oracle, v, z).v - np.asarray(v, dtype=float)))


# -- solutions --------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InclusionSolution:
    """Piecewise-linear path with node states ``zeta[t]`` at ``breakpoints[t]``.

    ``velocities[t]`` is used on ``[breakpoints[t], breakpoints[t+1]]``; the
    last breakpoint is ``1``.  When ``tau_N < 1`` the final segment is the
    tail ``[tau_N, 1]``.
    """

    breakpoints: np.ndarray
    zeta: np.ndarray
    velocities: np.ndarray
    gaps: np.ndarray
    measures: list = field(repr=False)
    defects: np.ndarray = field(repr=False)
    terminal_cost: float = float("nan")

    @property
    def n(self):
        return self.zeta.shape[1]

    def at(self, s):
        s = np.atleast_1d(np.asarray(s, dtype=float))
        bp = self.breakpoints
        idx = np.clip(np.searchsorted(bp, s, side="right") - 1, 0, len(self.velocities) - 1)
        return self.zeta[idx] + (s - bp[idx])[:, None] * self.velocities[idx]

    def window_derivative(self, a, b):
        """Average derivative over ``[a, b]``, exact for the piecewise-linear path."""
        za, zb = self.at([a, b])
        return (zb - za) / (b - a)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.n
        w.writerow(["t", "tau"] + [f"zeta_{i + 1}" for i in range(n)] + [f"v_{i + 1}" for i in range(n)] + ["gap"])
        for t, tau in enumerate(self.breakpoints):
            if t < len(self.velocities):
                vv = [repr(float(x)) for x in self.velocities[t]]
                gp = repr(float(self.gaps[t]))
            else:
                vv, gp = [""] * n, ""
            w.writerow([t, repr(float(tau))] + [repr(float(x)) for x in self.zeta[t]] + vv + [gp])
        return buf.getvalue()


def _segments(tgrid: TimeGrid):
    bp = list(tgrid.tau)
    if bp[-1] < 1.0:
        bp.append(1.0)
    return np.array(bp)


def solve_inclusion(oracle: VelocityOracle, tgrid: TimeGrid, selector: Callable, z0=None,
                    measure_defects=True) -> InclusionSolution:
    """Euler scheme ``zeta_{t+1} = zeta_t + len_t * proj(selector(t, zeta_t), V_g(zeta_t))``.

    Segments are the windows of ``tgrid`` followed by the tail up to 1.  The
    logged defect of segment ``t`` is the distance of its velocity from
    ``V_g`` at the segment's end state.
    """
    z = oracle.check_z(oracle.hspec.z0 if z0 is None else z0)
    bp = _segments(tgrid)
    zeta = [z]
    vel, gaps, meas, defects = [], [], [], []
    for t in range(len(bp) - 1):
        target = np.asarray(selector(t, zeta[-1]), dtype=float).reshape(-1)
        proj = project_onto_Vg(oracle, target, zeta[-1])
        znew = zeta[-1] + (bp[t + 1] - bp[t]) * proj.v
        vel.append(proj.v)
        gaps.append(proj.gap)
        meas.append(proj.gamma)
        zeta.append(oracle.check_z(znew))
        if measure_defects:
            defects.append(distance_to_Vg(oracle, proj.v, znew))
    zeta = np.array(zeta)
    G = float(np.asarray(oracle.hspec.G(zeta[-1][None]), dtype=float).reshape(-1)[0])
    return InclusionSolution(bp, zeta, np.array(vel), np.array(gaps), meas,
                             np.array(defects) if measure_defects else np.zeros(0), G)


# -- optimal control of the inclusion ----------------------------------------

def _fan(n, count):
    """Direction fan: ``+-1`` in one dimension, ``count`` directions otherwise."""
    return unit_directions(n, None if n == 1 else count)


def velocity_menu(oracle, z, n_fan=32, mixes=8):
    """Candidate velocities at ``z``: fan extreme points and mixtures of neighbouring ones.

    In one dimension the fan reduces to the two interval ends and the menu
    is ``mixes + 1`` evenly spaced points of the interval.
    """
    D = _fan(oracle.n, n_fan)
    ext = np.array([support_Vg(oracle, z, p).v for p in D])
    menu = [ext]
    if mixes > 1:
        lam = np.arange(1, mixes) / mixes
        nxt = np.roll(ext, -1, axis=0) if len(ext) > 2 else ext[::-1]
        for l in lam:
            menu.append((1 - l) * ext + l * nxt)
    M = np.concatenate(menu)
    _, idx = np.unique(np.round(M, 12), axis=0, return_index=True)
    return M[np.sort(idx)]


class F0Result(NamedTuple):
    value: float            # DP value at z0
    rollout_value: float    # G at the end of the greedy rollout from z0
    solution: InclusionSolution
    lattice: int
    refinement_delta: float


def _interp_value(values, axes, Z):
    """Multilinear interpolation of ``values`` on the lattice ``axes`` (clamped)."""
    if len(axes) == 1:
        return np.interp(Z[:, 0], axes[0], values)
    from scipy.interpolate import RegularGridInterpolator

    f = RegularGridInterpolator(axes, values, bounds_error=False, fill_value=None)
    lo = np.array([a[0] for a in axes])
    hi = np.array([a[-1] for a in axes])
    return f(np.clip(Z, lo, hi))


def _dp_tables(oracle, tgrid, G, lattice, n_fan, mixes):
    lo, hi = oracle.hspec.z_box
    axes = [np.linspace(lo[i], hi[i], lattice) for i in range(oracle.n)]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, oracle.n)
    menus = [velocity_menu(oracle, z, n_fan, mixes) for z in mesh]
    bp = _segments(tgrid)
    shape = (lattice,) * oracle.n
    V = np.asarray(G(mesh), dtype=float).reshape(shape)
    tables = [V]
    for t in range(len(bp) - 2, -1, -1):
        h = bp[t + 1] - bp[t]
        Vflat = np.empty(len(mesh))
        for i, (z, menu) in enumerate(zip(mesh, menus)):
            Vflat[i] = _interp_value(V, axes, z + h * menu).min()
        V = Vflat.reshape(shape)
        tables.append(V)
    tables.reverse()
    return axes, tables, bp


def _cost(G, sol):
    return float(np.asarray(G(sol.zeta[-1][None]), dtype=float).reshape(-1)[0])


def optimize_F0(oracle: VelocityOracle, tgrid: TimeGrid, G=None, z0=None, method="grid-DP", lattice=None,
                n_fan=32, mixes=8, refine=False, n_starts=64, seed=0) -> F0Result:
    """Minimise ``G(z(1))`` over Euler solutions of the inclusion on the window grid.

    ``grid-DP`` runs backward value iteration on a z-lattice (``n <= 2``),
    then rolls the greedy policy forward from ``z0``.  ``extreme-point``
    evaluates seeded random sequences of fan directions and keeps the best.
    """
    G = oracle.hspec.G if G is None else G
    z0 = oracle.check_z(oracle.hspec.z0 if z0 is None else z0)
    if method == "grid-DP":
        if oracle.n > 2:
            raise InvalidArgument("grid-DP supports slow dimension 1 or 2 only")
        lattice = lattice or (401 if oracle.n == 1 else 41)
        axes, tables, bp = _dp_tables(oracle, tgrid, G, lattice, n_fan, mixes)

        def selector(t, z):
            menu = velocity_menu(oracle, z, n_fan, mixes)
            vals = _interp_value(tables[t + 1], axes, z + (bp[t + 1] - bp[t]) * menu)
            return menu[int(np.argmin(vals))]

        sol = solve_inclusion(oracle, tgrid, selector, z0)
        value = float(_interp_value(tables[0], axes, z0[None])[0])
        delta = float("nan")
        if refine:
            coarse = optimize_F0(oracle, tgrid, G, z0, method, (lattice + 1) // 2, n_fan, mixes)
            delta = abs(value - coarse.value)
        return F0Result(value, _cost(G, sol), sol, lattice, delta)
    if method == "extreme-point":
        D = _fan(oracle.n, n_fan)
        n_seg = len(_segments(tgrid)) - 1
        gen = sampling_stream(seed, 41)
        seqs = [np.full(n_seg, k) for k in range(len(D))]
        seqs += [gen.integers(len(D), size=n_seg) for _ in range(n_starts)]
        best = None
        for seq in seqs:
            sol = solve_inclusion(oracle, tgrid, lambda t, z, _s=seq: support_Vg(oracle, z, D[_s[t]]).v, z0,
                                  measure_defects=False)
            c = _cost(G, sol)
            if best is None or c < best[0]:
                best = (c, sol)
        return F0Result(best[0], best[0], best[1], 0, float("nan"))
    raise InvalidArgument(f"unknown method {method!r}")


# -- averaged shadow of a hybrid run -----------------------------------------

def shadow_path(oracle: VelocityOracle, tgrid: TimeGrid, y_idx, u_idx):
    """Inclusion path built from one realised fast path (used to test averaging).

    Per window: freeze ``z_t`` and advance it by the exact integral of
    ``g(z_t, y, u)`` along the realised fast path; take the ``K``-step average
    of ``g(z_t, y(l), u(l))`` from the window's first fast step, project it
    onto ``V_g(z_t)`` and then onto ``V_g(zeta_t)``, and step ``zeta`` by the
    window length.  The tail up to 1 uses the fast steps available there.
    Returns the breakpoints and node states of the piecewise-linear ``zeta``.
    """
    grid = oracle.grid
    eps = tgrid.epsilon
    bp = _segments(tgrid)
    starts = tgrid.starts
    K = tgrid.K
    n_fast = len(u_idx)
    z = oracle.hspec.z0.copy()
    zeta = [z.copy()]
    zt = z.copy()
    for t in range(len(bp) - 1):
        a, b = bp[t], bp[t + 1]
        l0 = int(starts[t])
        if t < tgrid.N:
            steps = np.arange(l0, l0 + K)
        else:
            steps = np.arange(l0, n_fast)
        cells = y_idx[steps] * grid.nu + u_idx[steps]
        F = oracle.field_table(zt)  # (cells, n)
        target = F[cells].mean(axis=0)
        v = project_onto_Vg(oracle, target, zt).v
        vt = project_onto_Vg(oracle, v, zeta[-1]).v
        # frozen-z integral over [a, b] along the fast path
        ls = np.arange(math.floor(a / eps + 1e-9) - 1, math.ceil(b / eps) + 1)
        ls = ls[(ls >= 0) & (ls < n_fast)]
        lo_s = np.clip(ls * eps, a, b)
        hi_s = np.clip((ls + 1) * eps, a, b)
        wts = hi_s - lo_s
        cells_all = y_idx[ls] * grid.nu + u_idx[ls]
        zt = oracle.check_z(zt + wts @ F[cells_all])
        zeta.append(oracle.check_z(zeta[-1] + (b - a) * vt))
    return bp, np.array(zeta)

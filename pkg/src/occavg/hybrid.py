"""Two-timescale hybrid system: a slow ODE driven by the fast controlled chain.

The fast pair ``(y(t), u(t))`` is held constant on ``[eps t, eps (t+1))`` and
the slow state follows ``z' = g(z, y, u)`` on ``[0, 1]``.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, NamedTuple

import numpy as np

from .errors import GuardError, InvalidArgument, ModelViolation
from .measures import GridSpec
from .rng import sampling_stream
from .system import Batch, ControlPlan, SystemSpec, simulate_batch

MIN_REPLICATES = 30


def _as_fraction(x):
    if isinstance(x, Fraction):
        return x
    if isinstance(x, int):
        return Fraction(x)
    # repr gives the shortest decimal that round-trips, so 0.01 becomes 1/100
    return Fraction(repr(float(x)))


@dataclass(frozen=True, eq=False)
class HybridSpec:
    """Slow dynamics, terminal cost and declared constants.

    ``g(z, y, u)`` must broadcast over leading axes: ``z`` is ``(..., n)``,
    ``y`` is ``(..., m)`` and ``u`` is ``(..., k)``; it returns ``(..., n)``.
    ``G`` maps ``(..., n)`` to ``(...)``.  When ``grid`` is given the
    declared ``lipschitz_C``, ``bound_M`` and ``lipschitz_CG`` are checked by
    random sampling over the box and the grid.
    """

    g: Callable = field(repr=False)
    G: Callable = field(repr=False)
    z0: np.ndarray
    epsilon: float
    lipschitz_C: float
    bound_M: float
    lipschitz_CG: float
    z_box: tuple
    grid: GridSpec | None = field(default=None, repr=False)
    validation_samples: int = 2000

    def __post_init__(self):
        z0 = np.asarray(self.z0, dtype=float).reshape(-1)
        lo, hi = (np.asarray(v, dtype=float).reshape(-1) for v in self.z_box)
        if lo.shape != z0.shape or hi.shape != z0.shape or np.any(lo >= hi):
            raise InvalidArgument("z_box must be a nonempty box of the same dimension as z0")
        if np.any(z0 < lo) or np.any(z0 > hi):
            raise InvalidArgument("z0 lies outside z_box")
        if not 0.0 < float(self.epsilon) < 1.0:
            raise InvalidArgument("epsilon must lie in (0, 1)")
        for name in ("lipschitz_C", "bound_M", "lipschitz_CG"):
            if not float(getattr(self, name)) >= 0.0:
                raise InvalidArgument(f"{name} must be nonnegative")
        object.__setattr__(self, "z0", z0)
        object.__setattr__(self, "z_box", (lo, hi))
        if self.grid is not None:
            validate_constants(self, self.grid, self.validation_samples)

    @property
    def n(self):
        return len(self.z0)

    def with_epsilon(self, epsilon):
        return HybridSpec(self.g, self.G, self.z0, epsilon, self.lipschitz_C, self.bound_M,
                          self.lipschitz_CG, self.z_box)

    def field_table(self, z, grid):
        """``g(z, y, u)`` at every cell: shape ``(n_cells, n)`` for a single ``z``."""
        Y, U = grid.cell_coordinates()
        Z = np.broadcast_to(np.asarray(z, dtype=float), (grid.n_cells, self.n))
        return np.asarray(self.g(Z, Y, U), dtype=float).reshape(grid.n_cells, self.n)


def validate_constants(h: HybridSpec, grid: GridSpec, samples=2000, seed=0):
    """Reject declared constants contradicted by sampled evidence."""
    gen = sampling_stream(seed, 21)
    lo, hi = h.z_box
    Y, U = grid.cell_coordinates()
    cells = gen.integers(grid.n_cells, size=samples)
    Z1 = lo + (hi - lo) * gen.random((samples, h.n))
    Z2 = lo + (hi - lo) * gen.random((samples, h.n))
    g1 = np.asarray(h.g(Z1, Y[cells], U[cells]), dtype=float)
    g2 = np.asarray(h.g(Z2, Y[cells], U[cells]), dtype=float)
    # the corners of the box are where affine fields peak
    corners = np.array(np.meshgrid(*zip(lo, hi))).reshape(h.n, -1).T
    Zc = np.repeat(corners, grid.n_cells, axis=0)
    gc = np.asarray(h.g(Zc, np.tile(Y, (len(corners), 1)), np.tile(U, (len(corners), 1))), dtype=float)
    slack = 1e-9
    M_obs = max(np.linalg.norm(g1, axis=1).max(), np.linalg.norm(gc, axis=1).max())
    if M_obs > h.bound_M * (1 + slack) + slack:
        raise ModelViolation(f"declared bound M = {h.bound_M} but |g| reaches {M_obs:.6g}",
                             dump={"constant": "M", "declared": h.bound_M, "observed": float(M_obs)})
    dz = np.linalg.norm(Z1 - Z2, axis=1)
    ok = dz > 1e-12
    C_obs = np.max(np.linalg.norm(g1 - g2, axis=1)[ok] / dz[ok])
    if C_obs > h.lipschitz_C * (1 + slack) + slack:
        raise ModelViolation(f"declared Lipschitz constant C = {h.lipschitz_C} but g reaches {C_obs:.6g}",
                             dump={"constant": "C", "declared": h.lipschitz_C, "observed": float(C_obs)})
    G1 = np.asarray(h.G(Z1), dtype=float).reshape(-1)
    G2 = np.asarray(h.G(Z2), dtype=float).reshape(-1)
    CG_obs = np.max(np.abs(G1 - G2)[ok] / dz[ok])
    if CG_obs > h.lipschitz_CG * (1 + slack) + slack:
        raise ModelViolation(f"declared Lipschitz constant C_G = {h.lipschitz_CG} but G reaches {CG_obs:.6g}",
                             dump={"constant": "C_G", "declared": h.lipschitz_CG, "observed": float(CG_obs)})
    return {"M": float(M_obs), "C": float(C_obs), "C_G": float(CG_obs)}


# -- time grid --------------------------------------------------------------

@dataclass(frozen=True)
class TimeGrid:
    """Averaging windows ``[tau_t, tau_t+1]`` of length ``Delta`` on ``[0, 1]``.

    Exact rational arithmetic is used throughout; ``epsilon_q`` and
    ``Delta_q`` are the rationals behind the float fields.
    """

    epsilon_q: Fraction
    Delta_q: Fraction

    @property
    def epsilon(self):
        return float(self.epsilon_q)

    @property
    def Delta(self):
        return float(self.Delta_q)

    @property
    def N(self):
        return math.floor(1 / self.Delta_q)

    @property
    def n_fast(self):
        """Number of fast steps ``floor(1/eps) + 1`` covering ``[0, 1]``."""
        return math.floor(1 / self.epsilon_q) + 1

    @property
    def tau(self):
        return np.array([float(t * self.Delta_q) for t in range(self.N + 1)])

    @property
    def starts(self):
        """``floor(tau_t / eps)`` for ``t = 0..N``."""
        return np.array([math.floor(t * self.Delta_q / self.epsilon_q) for t in range(self.N + 1)],
                        dtype=np.int64)

    @property
    def Kt(self):
        return np.diff(self.starts)

    @property
    def K(self):
        return int(self.Kt.min())

    def lemma_holds(self):
        """Check both window-count inequalities in exact arithmetic."""
        r = self.Delta_q / self.epsilon_q
        inv = 1 / r
        bound = inv * inv / (1 - inv)
        starts = [math.floor(t * r) for t in range(self.N + 1)]
        for a, b in zip(starts, starts[1:]):
            K = b - a
            if abs(K - r) > 1 or K <= 0 or abs(Fraction(1, K) - inv) > bound:
                return False
        return True


def _parse_schedule(schedule):
    if callable(schedule):
        return schedule
    if isinstance(schedule, dict):
        table = {_as_fraction(k): v for k, v in schedule.items()}
        return lambda eps: table[_as_fraction(eps)]
    if isinstance(schedule, (tuple, list)) and len(schedule) == 2 and schedule[0] == "power":
        alpha = float(schedule[1])
        return lambda eps: float(eps) ** alpha
    if isinstance(schedule, str):
        s = schedule.strip().lower()
        if s == "sqrt":
            return lambda eps: math.sqrt(float(eps))
        m = re.fullmatch(r"power\(\s*([0-9.eE+-]+)\s*\)", s)
        if m:
            alpha = float(m.group(1))
            return lambda eps: float(eps) ** alpha
    raise InvalidArgument(f"unknown Delta schedule {schedule!r}")


def make_time_grid(epsilon, schedule="sqrt") -> TimeGrid:
    eps = _as_fraction(epsilon)
    if not 0 < eps < 1:
        raise InvalidArgument("epsilon must lie in (0, 1)")
    try:
        delta = _parse_schedule(schedule)(float(eps) if not isinstance(epsilon, Fraction) else epsilon)
    except KeyError as exc:
        raise InvalidArgument(f"schedule table has no entry for epsilon = {epsilon}") from exc
    D = _as_fraction(delta)
    if D <= eps:
        raise InvalidArgument(f"Delta = {float(D)} must exceed epsilon = {float(eps)}")
    if D >= 1:
        raise InvalidArgument(f"Delta = {float(D)} must be below 1")
    return TimeGrid(eps, D)


# -- simulation -------------------------------------------------------------

def output_mesh(epsilon) -> np.ndarray:
    """Fast-step boundaries ``eps l`` in ``[0, 1]``, plus ``1`` when it is not one of them."""
    eps = _as_fraction(epsilon)
    L = math.floor(1 / eps)
    pts = [float(l * eps) for l in range(L + 1)]
    if L * eps < 1:
        pts.append(1.0)
    return np.array(pts)


@dataclass(frozen=True, eq=False)
class HybridTrajectory:
    """Slow path on the output mesh plus the fast path that drove it."""

    s: np.ndarray
    z: np.ndarray  # (L, n)
    fast: Batch
    seed: int
    replicate: int
    terminal_cost: float

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = self.z.shape[1]
        w.writerow(["s"] + [f"z_{i + 1}" for i in range(n)] + ["y_index", "u_index"])
        T = self.fast.u.shape[1]
        for l, s in enumerate(self.s):
            yu = [int(self.fast.y[0, l]), int(self.fast.u[0, l])] if l < T else ["", ""]
            w.writerow([repr(float(s))] + [repr(float(v)) for v in self.z[l]] + yu)
        return buf.getvalue()


class HybridBatch(NamedTuple):
    s: np.ndarray        # (L,)
    z: np.ndarray        # (R, L, n)
    fast: Batch
    terminal: np.ndarray  # (R,)


def _rk4(g, z, y, u, h, substeps):
    for _ in range(substeps):
        k1 = g(z, y, u)
        k2 = g(z + 0.5 * h * k1, y, u)
        k3 = g(z + 0.5 * h * k2, y, u)
        k4 = g(z + h * k3, y, u)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return z


def simulate_hybrid_batch(hspec: HybridSpec, sysspec: SystemSpec, plan: ControlPlan, y0, replicates, seed,
                          substeps=4, noise=None, first=0) -> HybridBatch:
    """Replicated hybrid runs; replicate ``r`` uses the fast streams ``(seed, first + r)``."""
    if substeps < 4:
        raise InvalidArgument("at least 4 integrator substeps per fast step are required")
    mesh = output_mesh(hspec.epsilon)
    L = len(mesh)
    n_fast = math.floor(1 / _as_fraction(hspec.epsilon)) + 1
    if plan.horizon < n_fast:
        raise InvalidArgument(f"plan horizon {plan.horizon} is shorter than the {n_fast} fast steps")
    fast = simulate_batch(sysspec, plan, y0, n_fast, replicates, seed, noise=noise, first=first)
    grid = sysspec.grid
    lo, hi = hspec.z_box
    Z = np.empty((replicates, L, hspec.n))
    z = np.tile(hspec.z0, (replicates, 1))
    Z[:, 0] = z
    for l in range(L - 1):
        h = (mesh[l + 1] - mesh[l]) / substeps
        yp = grid.y_points[fast.y[:, l]]
        up = grid.u_points[fast.u[:, l]]
        z = _rk4(hspec.g, z, yp, up, h, substeps)
        out = np.any((z < lo - 1e-12) | (z > hi + 1e-12), axis=1)
        if out.any():
            r = int(np.flatnonzero(out)[0])
            raise ModelViolation(
                f"slow state left z_box at s = {float(mesh[l + 1])!r} in replicate {r}",
                dump={"replicate": r, "s": mesh[: l + 2].tolist(),
                      "z": np.concatenate([Z[r, : l + 1], z[r][None]]).tolist(),
                      "y_index": fast.y[r, : l + 1].tolist(), "u_index": fast.u[r, : l + 1].tolist()},
            )
        Z[:, l + 1] = z
    terminal = np.asarray(hspec.G(Z[:, -1]), dtype=float).reshape(replicates)
    return HybridBatch(mesh, Z, fast, terminal)


def simulate_hybrid(hspec, sysspec, plan, y0, seed, substeps=4, replicate=0) -> HybridTrajectory:
    b = simulate_hybrid_batch(hspec, sysspec, plan, y0, 1, seed, substeps, first=replicate)
    return HybridTrajectory(b.s, b.z[0], b.fast, seed, replicate, float(b.terminal[0]))


def window_drift(tgrid: TimeGrid, s, z):
    """Largest ``|z(s) - z(s_t)|`` per window, ``s_t`` the first mesh point of the window.

    ``z`` is ``(..., L, n)`` on the mesh ``s``; windows are ``[tau_t, tau_t+1]``
    for ``t < N`` and the tail ``[tau_N, 1]``.
    """
    edges = list(tgrid.tau) + ([1.0] if tgrid.tau[-1] < 1.0 else [])
    out = []
    for a, b in zip(edges, edges[1:]):
        idx = np.flatnonzero((s >= a - 1e-12) & (s <= b + 1e-12))
        d = np.linalg.norm(z[..., idx, :] - z[..., idx[:1], :], axis=-1)
        out.append(d.max(axis=-1))
    return np.stack(out, axis=-1)


class FEstimate(NamedTuple):
    values: np.ndarray
    stderrs: np.ndarray
    best: float
    best_index: int
    label: str


def estimate_F_eps(hspec, sysspec, plans, y0, replicates, seed, substeps=4) -> FEstimate:
    """Monte Carlo ``E[G(z(1))]`` for each plan under common random numbers.

    The minimum over the given plans is an upper bound of the optimal value,
    not the optimal value itself.
    """
    if len(plans) == 0:
        raise InvalidArgument("at least one plan is required")
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    vals, ses = [], []
    for plan in plans:
        b = simulate_hybrid_batch(hspec, sysspec, plan, y0, int(replicates), seed, substeps)
        vals.append(b.terminal.mean())
        ses.append(b.terminal.std(ddof=1) / np.sqrt(len(b.terminal)))
    vals = np.array(vals)
    k = int(np.argmin(vals))
    return FEstimate(vals, np.array(ses), float(vals[k]), k, "upper bound over the supplied plans")


def f_table_csv(est: FEstimate, names=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["plan", "estimate", "stderr"])
    for i, (v, s) in enumerate(zip(est.values, est.stderrs)):
        w.writerow([names[i] if names else i, repr(float(v)), repr(float(s))])
    w.writerow(["best_upper_bound", repr(est.best), ""])
    return buf.getvalue()

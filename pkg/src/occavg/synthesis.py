"""Build a fast-chain control plan whose hybrid trajectory follows an inclusion path.

Each averaging window gets a target velocity, a stationary measure that
realises it, and the randomised feedback policy induced by that measure.
The policy runs for the first ``K`` fast steps of the window; the remaining
steps of the window and the tail after the last window use a fixed filler
control.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import lp
from .errors import GuardError, InfeasibleError, InvalidArgument
from .hybrid import MIN_REPLICATES, TimeGrid, simulate_hybrid_batch
from .inclusion import InclusionSolution, VelocityOracle, project_onto_Vg, shadow_path
from .measures import EXPECTATION, OccMeasure
from .system import ControlPlan, simulate_batch

REALIZATION_TOL = 1e-7
UNREACHABLE_COST = 1e9


@dataclass(frozen=True)
class SynthesisConfig:
    grid: TimeGrid
    burn_in: int = 0
    tolerance: float = REALIZATION_TOL
    filler: int = 0
    log_replicates: int = 30
    seed: int = 0
    y0: int = 0
    steer: bool = True

    def __post_init__(self):
        if not 0 <= self.burn_in < self.grid.K:
            raise InvalidArgument(f"burn-in {self.burn_in} must lie in [0, K = {self.grid.K})")


@dataclass(frozen=True, eq=False)
class SynthesizedPlan:
    """Time-varying randomised feedback table of length ``floor(1/eps) + 1`` with provenance."""

    plan: ControlPlan
    windows: list = field(repr=False)  # one dict per window
    filler: int = 0

    @property
    def length(self):
        return self.plan.table.shape[0]

    def to_text(self):
        return self.plan.to_text()

    def provenance_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        n = len(self.windows[0]["v"]) if self.windows else 0
        w.writerow(["t", "first_step", "block_length"] + [f"v_{i + 1}" for i in range(n)]
                   + ["slack", "gamma_digest", "nu_hat", "nu_hat_stderr"])
        for rec in self.windows:
            w.writerow([rec["t"], rec["first_step"], rec["block_length"]]
                       + [repr(float(x)) for x in rec["v"]]
                       + [repr(rec["slack"]), rec["gamma_digest"], repr(rec["nu_hat"]), repr(rec["nu_hat_stderr"])])
        return buf.getvalue()


def target_velocity(zbar: InclusionSolution, t: int, oracle: VelocityOracle, grid: TimeGrid):
    """Projection of the window-average derivative of ``zbar`` onto ``V_g(zbar(tau_t))``."""
    if not 0 <= t < grid.N:
        raise InvalidArgument(f"window index {t} outside 0..{grid.N - 1}")
    a, b = t * grid.Delta, (t + 1) * grid.Delta
    avg = zbar.window_derivative(a, b)
    return project_onto_Vg(oracle, avg, zbar.at(a)[0]).v


def measure_for_velocity(oracle: VelocityOracle, z, v, tol=REALIZATION_TOL):
    """A stationary measure with ``int g(z, .) d gamma = v``; returns ``(gamma, slack)``."""
    z = oracle.check_z(z)
    F = oracle.field_table(z)
    v = np.asarray(v, dtype=float).reshape(-1)
    res = lp.min_weighted_residual(oracle.polytope.start, F.T, v, np.ones(len(v)))
    if res.value > tol:
        raise InfeasibleError(f"velocity {v.tolist()} is not realisable at z = {z.tolist()} (slack {res.value:.3e})")
    x = np.clip(res.x, 0.0, None)
    return OccMeasure(oracle.grid, x / x.sum(), EXPECTATION), float(res.value)


def policy_table(gamma: OccMeasure, filler=0):
    """Conditional control law ``gamma(u | y)``; states without mass play ``filler``."""
    w = gamma.weights
    marg = w.sum(axis=1, keepdims=True)
    table = np.zeros_like(w)
    table[:, filler] = 1.0
    pos = marg[:, 0] > 0
    table[pos] = w[pos] / marg[pos]
    return table


def steering_controls(sysspec, target_states, filler=0, tol=1e-12, max_iter=20_000):
    """Per-state control minimising the expected time to hit ``target_states``.

    States from which the target cannot be reached get ``filler``; states in
    the target get ``-1``.  Ties go to the lowest control index.
    """
    g = sysspec.grid
    nxt = sysspec.next_index
    target = np.zeros(g.ny, dtype=bool)
    target[np.asarray(target_states, dtype=np.int64)] = True
    reach = target.copy()
    while True:
        grow = ~reach & np.any(reach[nxt], axis=(1, 2))
        if not grow.any():
            break
        reach |= grow
    # landing where the target is unreachable costs a large fixed penalty
    h = np.where(reach, 0.0, UNREACHABLE_COST)
    for _ in range(max_iter):
        Q = 1.0 + h[nxt] @ g.s_probs
        new = np.where(target, 0.0, np.where(reach, Q.min(axis=1), UNREACHABLE_COST))
        done = np.max(np.abs(new - h)) <= tol * max(1.0, np.max(np.abs(new)))
        h = new
        if done:
            break
    Q = 1.0 + h[nxt] @ g.s_probs
    ctrl = np.argmin(Q, axis=1)
    ctrl[~reach] = filler
    ctrl[target] = -1
    return ctrl


def policy_from_measure(gamma: OccMeasure, filler=0, sysspec=None) -> ControlPlan:
    """Stationary randomised feedback ``gamma(u | y)``.

    States where ``gamma`` has no mass play ``filler``; with ``sysspec``
    given they instead play the control that reaches the support of
    ``gamma`` fastest in expectation (``filler`` where it is unreachable).
    """
    if not 0 <= filler < gamma.grid.nu:
        raise InvalidArgument("filler control outside the control grid")
    return ControlPlan.markov(_block_table(gamma, filler, sysspec), gamma.grid.nu, stationary=True)


def _block_table(gamma, filler, sysspec):
    table = policy_table(gamma, filler)
    if sysspec is not None:
        support_states = np.flatnonzero(gamma.weights.sum(axis=1) > 0)
        ctrl = steering_controls(sysspec, support_states, filler)
        off = ctrl >= 0
        table[off] = np.eye(gamma.grid.nu)[ctrl[off]]
    return table


def _digest(gamma):
    return hashlib.sha256(np.ascontiguousarray(gamma.weights).tobytes()).hexdigest()[:16]


def assemble_plan(zbar: InclusionSolution, oracle: VelocityOracle, sysspec, config: SynthesisConfig) -> SynthesizedPlan:
    grid = config.grid
    g = sysspec.grid
    if not 0 <= config.filler < g.nu:
        raise InvalidArgument("filler control outside the control grid")
    L = grid.n_fast
    table = np.zeros((L, g.ny, g.nu))
    table[:, :, config.filler] = 1.0
    K = grid.K
    starts = grid.starts
    windows = []
    for t in range(grid.N):
        try:
            z_t = zbar.at(t * grid.Delta)[0]
            v = target_velocity(zbar, t, oracle, grid)
            gamma, slack = measure_for_velocity(oracle, z_t, v, config.tolerance)
        except Exception as exc:
            raise type(exc)(f"window {t}: {exc}") from exc
        l0 = int(starts[t])
        table[l0:l0 + K] = _block_table(gamma, config.filler, sysspec if config.steer else None)
        windows.append({"t": t, "first_step": l0, "block_length": K, "v": v, "gamma": gamma, "z": z_t,
                        "slack": slack, "gamma_digest": _digest(gamma)})
    plan = ControlPlan.markov(table, g.nu)
    _log_realisation(windows, plan, oracle, sysspec, config)
    return SynthesizedPlan(plan, windows, config.filler)


def _log_realisation(windows, plan, oracle, sysspec, config):
    """Mean distance between each block's average of ``g(z_t, .)`` and its target ``v_t``."""
    R = max(int(config.log_replicates), 2)
    b = simulate_batch(sysspec, plan, config.y0, plan.horizon, R, config.seed)
    nu = sysspec.grid.nu
    for rec in windows:
        l0 = rec["first_step"] + config.burn_in
        l1 = rec["first_step"] + rec["block_length"]
        F = oracle.field_table(rec["z"])
        cells = b.y[:, l0:l1] * nu + b.u[:, l0:l1]
        avg = F[cells].mean(axis=1)
        d = np.linalg.norm(avg - rec["v"], axis=1)
        rec["nu_hat"] = float(d.mean())
        rec["nu_hat_stderr"] = float(d.std(ddof=1) / np.sqrt(R))


class Tracking(NamedTuple):
    estimate: float      # max over the mesh of the mean distance
    stderr: float        # standard error at the maximising mesh point
    s_max: float
    mean_by_s: np.ndarray
    stderr_by_s: np.ndarray


def tracking_error(hb, path_at) -> Tracking:
    """``max_s mean_r |z_r(s) - zbar(s)|`` for a hybrid batch and a path evaluator."""
    target = path_at(hb.s)  # (L, n)
    d = np.linalg.norm(hb.z - target[None], axis=2)  # (R, L)
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(len(d)) if len(d) > 1 else np.zeros_like(mean)
    k = int(np.argmax(mean))
    return Tracking(float(mean[k]), float(se[k]), float(hb.s[k]), mean, se)


def verify_tracking(hspec, sysspec, plan, zbar: InclusionSolution, replicates, seed, y0=0, substeps=4) -> Tracking:
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    cp = plan.plan if isinstance(plan, SynthesizedPlan) else plan
    hb = simulate_hybrid_batch(hspec, sysspec, cp, y0, int(replicates), seed, substeps)
    return tracking_error(hb, zbar.at)


def averaging_error(oracle: VelocityOracle, tgrid: TimeGrid, sysspec, plan, y0, replicates, seed,
                    substeps=4) -> Tracking:
    """Distance between hybrid runs of a fixed plan and their own averaged shadow paths.

    Each replicate is compared with the inclusion path that ``shadow_path``
    builds from that replicate's realised fast path.
    """
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    cp = plan.plan if isinstance(plan, SynthesizedPlan) else plan
    hb = simulate_hybrid_batch(oracle.hspec, sysspec, cp, y0, int(replicates), seed, substeps)
    d = np.empty(hb.z.shape[:2])
    for r in range(len(d)):
        bp, zeta = shadow_path(oracle, tgrid, hb.fast.y[r], hb.fast.u[r])
        sol = InclusionSolution(bp, zeta, np.diff(zeta, axis=0) / np.diff(bp)[:, None],
                                np.zeros(len(bp) - 1), [], np.zeros(0))
        d[r] = np.linalg.norm(hb.z[r] - sol.at(hb.s), axis=1)
    mean = d.mean(axis=0)
    se = d.std(axis=0, ddof=1) / np.sqrt(len(d))
    k = int(np.argmax(mean))
    return Tracking(float(mean[k]), float(se[k]), float(hb.s[k]), mean, se)


class GapReport(NamedTuple):
    cost: float
    cost_stderr: float
    F0: float
    gap: float
    baseline_min: float


def optimality_gap(hspec, sysspec, plan, F0, replicates, seed, y0=0, baseline=None, substeps=4) -> GapReport:
    """``E[G(z(1))] - F0`` for the plan; ``baseline`` is an optional ``FEstimate`` to compare."""
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    cp = plan.plan if isinstance(plan, SynthesizedPlan) else plan
    hb = simulate_hybrid_batch(hspec, sysspec, cp, y0, int(replicates), seed, substeps)
    cost = float(hb.terminal.mean())
    se = float(hb.terminal.std(ddof=1) / np.sqrt(len(hb.terminal)))
    base = float(baseline.best) if baseline is not None else float("nan")
    return GapReport(cost, se, float(F0), cost - float(F0), base)


def gap_csv(rows):
    """Rows of ``(epsilon, GapReport)``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epsilon", "cost", "cost_stderr", "F0", "gap", "baseline_min"])
    for eps, r in rows:
        w.writerow([repr(float(eps)), repr(r.cost), repr(r.cost_stderr), repr(r.F0), repr(r.gap), repr(r.baseline_min)])
    return buf.getvalue()

"""Fast discrete-time stochastic control system on a finite grid.

States are snapped to the nearest point of the y grid after every step, so
the whole system reduces to an integer transition table
``next_index[y, u, s]``.  Everything downstream works with that table.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import GuardError, InvalidArgument, ModelViolation, ResourceLimitError
from .measures import EMPIRICAL, EXPECTATION, GridSpec, OccMeasure
from .rng import control_stream, noise_stream

TIE_TOL = 1e-12
BOX_TOL = 1e-9


def nearest_index(points, x):
    """Index of the grid point closest to ``x``; ties go to the lower index."""
    d = np.linalg.norm(points - np.asarray(x, dtype=float).reshape(1, -1), axis=1)
    return int(np.flatnonzero(d <= d.min() + TIE_TOL)[0])


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """``y(t+1) = proj(f(y(t), u(t), s(t)))`` with ``s`` drawn from the atom law.

    ``f`` takes three 1-D coordinate arrays (a y point, a u point and a noise
    atom) and returns a point of the state space.  With
    ``check_invariance=True`` every raw image must fall inside the bounding
    box of the y grid, otherwise ``ModelViolation`` is raised.
    """

    grid: GridSpec
    f: Callable = field(repr=False)
    check_invariance: bool = True
    next_index: np.ndarray = field(init=False, repr=False)
    raw_images: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        g = self.grid
        m = g.y_points.shape[1]
        raw = np.empty((g.ny, g.nu, g.ns, m))
        nxt = np.empty((g.ny, g.nu, g.ns), dtype=np.int64)
        for iy, y in enumerate(g.y_points):
            for iu, u in enumerate(g.u_points):
                for js, s in enumerate(g.s_points):
                    img = np.asarray(self.f(y, u, s), dtype=float).reshape(-1)
                    if img.shape != (m,) or not np.all(np.isfinite(img)):
                        raise ModelViolation(
                            f"f returned {img!r} at cell ({iy}, {iu}), atom {js}",
                            dump={"y": iy, "u": iu, "s": js},
                        )
                    raw[iy, iu, js] = img
                    nxt[iy, iu, js] = nearest_index(g.y_points, img)
        if self.check_invariance:
            lo = g.y_points.min(axis=0) - BOX_TOL
            hi = g.y_points.max(axis=0) + BOX_TOL
            bad = np.argwhere(np.any((raw < lo) | (raw > hi), axis=-1))
            if len(bad):
                iy, iu, js = (int(v) for v in bad[0])
                raise ModelViolation(
                    f"state grid is not forward invariant: f(y[{iy}], u[{iu}], s[{js}]) = "
                    f"{raw[iy, iu, js].tolist()} leaves the grid hull",
                    dump={"y": iy, "u": iu, "s": js, "image": raw[iy, iu, js].tolist()},
                )
        raw.setflags(write=False)
        nxt.setflags(write=False)
        object.__setattr__(self, "raw_images", raw)
        object.__setattr__(self, "next_index", nxt)

    @property
    def cum_probs(self):
        c = np.cumsum(self.grid.s_probs)
        c[-1] = 1.0
        return c


def _check_index(name, value, n):
    if not (isinstance(value, (int, np.integer)) and 0 <= int(value) < n):
        raise InvalidArgument(f"{name} index {value!r} out of range 0..{n - 1}")
    return int(value)


def step(spec: SystemSpec, y: int, u: int, s: int) -> int:
    g = spec.grid
    return int(spec.next_index[_check_index("y", y, g.ny), _check_index("u", u, g.nu),
                               _check_index("s", s, g.ns)])


# -- control plans ----------------------------------------------------------

OPEN_LOOP = "open-loop"
MARKOV = "markov-feedback"
HISTORY = "history-lookup"


@dataclass(frozen=True, eq=False)
class ControlPlan:
    """Tabular control plan.

    ``open-loop``
        ``table`` has shape ``(H,)``: the control index at each step.
    ``markov-feedback``
        ``table`` has shape ``(H, ny, nu)``: the probability of each control
        given the step and the current state (rows one-hot for deterministic
        plans).  With ``stationary=True`` only ``H = 1`` is stored and reused
        at every step, and the horizon is unlimited.
    ``history-lookup``
        ``table`` has shape ``(H, (ns + 1) ** window)``: the control index as
        a function of the step and the last ``window`` noise atoms, encoded
        base ``ns + 1`` with digit 0 meaning "before time 0".
    """

    variant: str
    table: np.ndarray
    nu: int
    ns: int = 0
    window: int = 0
    stationary: bool = False

    def __post_init__(self):
        t = np.array(self.table)
        if self.variant == OPEN_LOOP:
            t = t.astype(np.int64).reshape(-1)
            ok = t.size > 0 and np.all((t >= 0) & (t < self.nu))
        elif self.variant == MARKOV:
            t = t.astype(float)
            ok = (t.ndim == 3 and t.shape[2] == self.nu and t.shape[0] > 0
                  and np.all(t >= 0) and np.allclose(t.sum(axis=2), 1.0, atol=1e-12))
            if self.stationary and t.shape[0] != 1:
                ok = False
        elif self.variant == HISTORY:
            t = t.astype(np.int64)
            ok = (self.window >= 0 and self.ns >= 1 and t.ndim == 2 and t.shape[0] > 0
                  and t.shape[1] == (self.ns + 1) ** self.window
                  and np.all((t >= 0) & (t < self.nu)))
        else:
            raise InvalidArgument(f"unknown plan variant {self.variant!r}")
        if not ok:
            raise InvalidArgument(f"malformed {self.variant} plan table of shape {t.shape}")
        t.setflags(write=False)
        object.__setattr__(self, "table", t)

    @property
    def horizon(self):
        if self.stationary:
            return np.inf
        return self.table.shape[0]

    # constructors

    @classmethod
    def open_loop(cls, actions, nu):
        return cls(OPEN_LOOP, actions, nu)

    @classmethod
    def markov(cls, table, nu, stationary=False):
        """From integer tables ``(H, ny)`` or probability tables ``(H, ny, nu)``.

        Stationary plans drop the leading step axis.
        """
        t = np.asarray(table)
        if t.dtype.kind in "iub":
            t = np.eye(nu)[t.astype(np.int64)]
        if stationary:
            t = t[None]
        return cls(MARKOV, t.astype(float), nu, stationary=stationary)

    @classmethod
    def history(cls, table, nu, ns, window):
        return cls(HISTORY, table, nu, ns=ns, window=window)

    @property
    def deterministic(self):
        return self.variant != MARKOV or bool(np.all((self.table == 0) | (self.table == 1)))

    def _row(self, t):
        return self.table[0 if self.stationary else t]

    def decide(self, t, y, hist, uniform):
        """Control index at step ``t``; vectorised over ``y``/``hist``/``uniform``."""
        if self.variant == OPEN_LOOP:
            return np.full(np.shape(y), self.table[t], dtype=np.int64)
        if self.variant == HISTORY:
            return self.table[t][hist]
        probs = self._row(t)[y]
        cum = np.cumsum(probs, axis=-1)
        u = (np.asarray(uniform)[..., None] >= cum[..., :-1]).sum(axis=-1)
        return u.astype(np.int64)

    def action_probs(self, t, ny):
        """Control probabilities ``(ny, nu)`` at step ``t`` (history plans excluded)."""
        if self.variant == OPEN_LOOP:
            return np.tile(np.eye(self.nu)[self.table[t]], (ny, 1))
        if self.variant == MARKOV:
            return self._row(t)
        raise InvalidArgument("history plans have no state-feedback representation")

    def update_history(self, hist, s):
        if self.variant != HISTORY or self.window == 0:
            return hist
        base = self.ns + 1
        return (hist * base + np.asarray(s) + 1) % base ** self.window

    def to_text(self):
        payload = {
            "format": "occavg-control-plan/1",
            "variant": self.variant,
            "nu": self.nu,
            "ns": self.ns,
            "window": self.window,
            "stationary": self.stationary,
            "table": self.table.tolist(),
        }
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_text(cls, text):
        d = json.loads(text)
        if d.get("format") != "occavg-control-plan/1":
            raise InvalidArgument("not a control plan document")
        return cls(d["variant"], np.array(d["table"]), d["nu"], ns=d["ns"],
                   window=d["window"], stationary=d["stationary"])


def stationary_markov(policy, nu):
    """Stationary Markov plan from ``(ny,)`` indices or an ``(ny, nu)`` probability table."""
    return ControlPlan.markov(policy, nu, stationary=True)


# -- trajectories -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Trajectory:
    y_path: np.ndarray
    u_path: np.ndarray
    s_path: np.ndarray
    seed: int
    replicate: int = 0

    @property
    def T(self):
        return len(self.u_path)

    def replay_ok(self, spec):
        expect = spec.next_index[self.y_path[:-1], self.u_path, self.s_path]
        return bool(np.array_equal(expect, self.y_path[1:]))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "y_index", "u_index", "s_index"])
        for t in range(self.T):
            w.writerow([t, int(self.y_path[t]), int(self.u_path[t]), int(self.s_path[t])])
        w.writerow([self.T, int(self.y_path[self.T]), "", ""])
        return buf.getvalue()


class Batch(NamedTuple):
    """Replicated paths: ``y`` is ``(R, T+1)``, ``u`` and ``s`` are ``(R, T)``."""

    y: np.ndarray
    u: np.ndarray
    s: np.ndarray


def noise_indices(spec, T, seed, replicates, first=0):
    """Atom indices ``(R, T)``; replicate ``r`` reads stream ``(seed, r)``.

    Streams are consumed front to back, so the first ``T`` draws do not depend
    on how many more are taken later.
    """
    cum = spec.cum_probs
    out = np.empty((replicates, T), dtype=np.int64)
    for r in range(replicates):
        out[r] = np.searchsorted(cum, noise_stream(seed, first + r).random(T), side="right")
    return np.minimum(out, spec.grid.ns - 1)


def _control_uniforms(plan, T, seed, replicates, first=0):
    if plan.deterministic:
        return np.zeros((replicates, T))
    return np.stack([control_stream(seed, first + r).random(T) for r in range(replicates)])


def _check_horizon(plan, T):
    if int(T) < 1:
        raise InvalidArgument("T must be at least 1")
    if plan.horizon < T:
        raise InvalidArgument(f"plan horizon {plan.horizon} is shorter than T = {T}")


def simulate_batch(spec, plan, y0, T, replicates, seed, noise=None, first=0):
    """Simulate replicates ``first .. first + replicates - 1`` at once.

    ``noise`` may supply pre-drawn atom indices ``(R, >= T)`` to share draws
    between plans.
    """
    _check_horizon(plan, T)
    if replicates < 1:
        raise InvalidArgument("replicates must be at least 1")
    _check_index("y0", y0, spec.grid.ny)
    if plan.nu != spec.grid.nu:
        raise InvalidArgument("plan and system have different control grids")
    S = noise_indices(spec, T, seed, replicates, first) if noise is None else np.asarray(noise)[:, :T]
    V = _control_uniforms(plan, T, seed, replicates, first)
    Y = np.empty((replicates, T + 1), dtype=np.int64)
    U = np.empty((replicates, T), dtype=np.int64)
    Y[:, 0] = y0
    hist = np.zeros(replicates, dtype=np.int64)
    for t in range(T):
        U[:, t] = plan.decide(t, Y[:, t], hist, V[:, t])
        Y[:, t + 1] = spec.next_index[Y[:, t], U[:, t], S[:, t]]
        hist = plan.update_history(hist, S[:, t])
    return Batch(Y, U, S)


def simulate(spec: SystemSpec, plan: ControlPlan, y0: int, T: int, seed: int, replicate: int = 0) -> Trajectory:
    b = simulate_batch(spec, plan, y0, T, 1, seed, first=replicate)
    return Trajectory(b.y[0], b.u[0], b.s[0], seed, replicate)


# -- occupation measures ----------------------------------------------------

def occupation_counts(grid, Y, U):
    """Per-replicate cell frequencies ``(R, n_cells)`` of paths ``Y[:, :T]``, ``U``."""
    Y = np.atleast_2d(Y)
    U = np.atleast_2d(U)
    T = U.shape[1]
    cells = Y[:, :T] * grid.nu + U
    R = len(cells)
    offs = (np.arange(R) * grid.n_cells)[:, None]
    counts = np.bincount((cells + offs).ravel(), minlength=R * grid.n_cells)
    return counts.reshape(R, grid.n_cells) / T


def random_occupation(traj: Trajectory, grid: GridSpec) -> OccMeasure:
    if traj.y_path.max(initial=0) >= grid.ny or traj.u_path.max(initial=0) >= grid.nu:
        raise InvalidArgument("trajectory indices exceed the grid")
    w = occupation_counts(grid, traj.y_path, traj.u_path)[0]
    return OccMeasure(grid, w, EMPIRICAL)


def expected_occupation(spec, plan, y0, T, replicates, seed):
    """Replicate-average occupation measure and its per-cell standard error."""
    if int(replicates) < 1:
        raise InvalidArgument("replicates must be at least 1")
    b = simulate_batch(spec, plan, y0, T, int(replicates), seed)
    occ = occupation_counts(spec.grid, b.y, b.u)
    mean = occ.mean(axis=0)
    if replicates > 1:
        se = occ.std(axis=0, ddof=1) / np.sqrt(replicates)
    else:
        se = np.zeros_like(mean)
    shape = (spec.grid.ny, spec.grid.nu)
    return OccMeasure(spec.grid, mean, EXPECTATION), se.reshape(shape)


ENUMERATION_LIMIT = 10**6


def exact_expected_occupation(spec, plan, y0, T) -> OccMeasure:
    """Exact expected occupation measure.

    Propagates the joint law of (noise-history code, state) forward, which
    sums over all ``ns ** T`` noise sequences (and all control
    randomisations) without listing them one by one.
    """
    _check_horizon(plan, T)
    g = spec.grid
    if g.ns ** T > ENUMERATION_LIMIT:
        raise ResourceLimitError(f"{g.ns}^{T} noise sequences exceed the enumeration limit")
    y0 = _check_index("y0", y0, g.ny)
    nh = (plan.ns + 1) ** plan.window if plan.variant == HISTORY else 1
    dist = np.zeros((nh, g.ny))
    dist[0, y0] = 1.0
    occ = np.zeros((g.ny, g.nu))
    codes = np.arange(nh)
    for t in range(T):
        if plan.variant == HISTORY:
            act = np.eye(g.nu)[plan.table[t]][:, None, :].repeat(g.ny, axis=1)  # (nh, ny, nu)
        else:
            act = plan.action_probs(t, g.ny)[None]
        joint = dist[:, :, None] * act  # (nh, ny, nu)
        occ += joint.sum(axis=0)
        new = np.zeros_like(dist)
        for js in range(g.ns):
            nxt_code = plan.update_history(codes, js) if plan.variant == HISTORY else codes
            contrib = np.zeros((nh, g.ny))
            for h in range(nh):
                np.add.at(contrib[h], spec.next_index[:, :, js].ravel(), joint[h].ravel())
            np.add.at(new, nxt_code, g.s_probs[js] * contrib)
        dist = new
    return OccMeasure(g, occ / T, EXPECTATION)


def _phi_values(phi, grid):
    if callable(phi):
        vals = np.asarray(phi(grid.y_points), dtype=float).reshape(-1)
    else:
        vals = np.asarray(phi, dtype=float).reshape(-1)
    if vals.shape != (grid.ny,):
        raise InvalidArgument("phi must give one value per y grid point")
    return vals


class VarianceCheck(NamedTuple):
    mean: float
    variance: float
    bound: float
    mean_stderr: float
    variance_stderr: float


MIN_REPLICATES = 30


def telescoping_variance_check(spec, plan, y0, T, phi, replicates, seed) -> VarianceCheck:
    """Mean and variance of ``(1/T) sum_t [phi(y(t+1)) - E_s phi(f(y(t), u(t), s))]``.

    Returns the bound ``2 max|phi|^2 / T`` alongside.
    """
    if int(replicates) < MIN_REPLICATES:
        raise GuardError(f"at least {MIN_REPLICATES} replicates are required")
    vals = _phi_values(phi, spec.grid)
    psi = vals[spec.next_index] @ spec.grid.s_probs  # (ny, nu)
    b = simulate_batch(spec, plan, y0, T, int(replicates), seed)
    Phi = vals[b.y[:, 1:]] - psi[b.y[:, :-1], b.u]
    X = Phi.mean(axis=1)
    R = len(X)
    mean = float(X.mean())
    var = float(X.var(ddof=1))
    c = X - mean
    m4 = float(np.mean(c ** 4))
    var_se = float(np.sqrt(max(m4 - var ** 2 * (R - 3) / (R - 1), 0.0) / R))
    bound = 2.0 * float(np.max(np.abs(vals))) ** 2 / T
    return VarianceCheck(mean, var, bound, float(X.std(ddof=1) / np.sqrt(R)), var_se)

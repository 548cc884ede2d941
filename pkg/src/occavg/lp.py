"""Dense revised simplex for small equality-form linear programs.

Problems are ``min c @ x  s.t.  A @ x = b, x >= 0``.  The pivot rule is
Dantzig's largest-decrease rule with ties to the lowest column index; after a
run of degenerate pivots the solver switches to Bland's rule for the rest of
the solve, which rules out cycling.  The leaving variable is always the
lowest-index basic variable among ratio-test ties.  Every choice is a pure
function of the inputs, so optimal bases are reproducible.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import InfeasibleError, NumericalFailure

TOL = 1e-10
PIVOT_TOL = 1e-9  # smallest admissible pivot entry, relative to the column's largest
DEGENERATE_RUN = 25


class LPResult(NamedTuple):
    value: float
    x: np.ndarray
    basis: tuple
    iterations: int


def _basic_solution(A, b, basis):
    B = A[:, basis]
    try:
        xB = np.linalg.solve(B, b)
    except np.linalg.LinAlgError as exc:
        raise NumericalFailure("singular basis matrix") from exc
    return B, xB


def solve_from_basis(c, A, b, basis, tol=TOL, max_iter=None) -> LPResult:
    """Phase-two simplex from a primal feasible basis (list of column indices)."""
    c = np.asarray(c, dtype=float)
    m, n = A.shape
    basis = list(basis)
    if len(basis) != m:
        raise NumericalFailure("basis size does not match the number of rows")
    max_iter = max_iter or 50 * (m + n)
    bland = False
    degenerate = 0
    for it in range(max_iter):
        B, xB = _basic_solution(A, b, basis)
        y = np.linalg.solve(B.T, c[basis])  # B is nonsingular once _basic_solution succeeded
        d = c - A.T @ y
        d[basis] = 0.0
        candidates = np.flatnonzero(d < -tol)
        if len(candidates) == 0:
            x = np.zeros(n)
            x[basis] = np.where(np.abs(xB) < tol, 0.0, xB)
            x = np.clip(x, 0.0, None)
            return LPResult(float(c @ x), x, tuple(basis), it)
        if bland:
            j = int(candidates[0])
        else:
            j = int(candidates[np.argmin(d[candidates])])  # argmin returns the first minimiser
        w = np.linalg.solve(B, A[:, j])
        rows = np.flatnonzero(w > max(tol, PIVOT_TOL * np.abs(w).max()))
        if len(rows) == 0:
            raise NumericalFailure("linear program is unbounded")
        ratios = np.maximum(xB[rows], 0.0) / w[rows]
        best = ratios.min()
        ties = rows[ratios <= best + tol * max(1.0, abs(best))]
        leave = int(ties[np.argmin([basis[i] for i in ties])])
        if best <= tol:
            degenerate += 1
            if degenerate >= DEGENERATE_RUN:
                bland = True
        else:
            degenerate = 0
        basis[leave] = j
    raise NumericalFailure(f"simplex did not terminate within {max_iter} pivots")


class FeasibleStart(NamedTuple):
    """Independent rows of the system and a feasible basis for them."""

    A: np.ndarray
    b: np.ndarray
    rows: np.ndarray
    basis: tuple


def phase_one(A, b, tol=1e-9) -> FeasibleStart:
    """Find a feasible basis, dropping linearly dependent rows on the way."""
    A = np.array(A, dtype=float)
    b = np.array(b, dtype=float)
    m, n = A.shape
    sign = np.where(b < 0, -1.0, 1.0)
    A1 = np.hstack([A * sign[:, None], np.eye(m)])
    b1 = b * sign
    c1 = np.concatenate([np.zeros(n), np.ones(m)])
    res = solve_from_basis(c1, A1, b1, list(range(n, n + m)))
    if res.value > tol * max(1.0, np.abs(b).sum()):
        raise InfeasibleError(f"constraints are infeasible (phase-one residual {res.value:.3e})")
    basis = list(res.basis)
    keep = list(range(m))
    # pivot artificials out of the basis; rows where that is impossible are redundant
    changed = True
    while changed:
        changed = False
        for pos, var in enumerate(basis):
            if var < n:
                continue
            B = A1[np.ix_(keep, basis)]
            # row `pos` of B^{-1} A over the original columns
            row = np.linalg.solve(B.T, np.eye(len(keep))[pos]) @ A1[keep, :n]
            cols = [j for j in np.flatnonzero(np.abs(row) > 1e-9) if j not in basis]
            if cols:
                basis[pos] = int(cols[0])
            else:
                del keep[pos]
                del basis[pos]
            changed = True
            break
    rows = np.array(keep, dtype=np.int64)
    Ar, br = A[rows], b[rows]
    _, xB = _basic_solution(Ar, br, basis)
    if np.any(xB < -1e-8):
        raise NumericalFailure("phase one produced an infeasible basis")
    return FeasibleStart(Ar, br, rows, tuple(basis))


def linprog_eq(c, A, b) -> LPResult:
    """Two-phase solve of ``min c @ x, A x = b, x >= 0``."""
    start = phase_one(A, b)
    return solve_from_basis(c, start.A, start.b, start.basis)


def min_weighted_residual(start: FeasibleStart, M, target, weights) -> LPResult:
    """Minimise ``sum_i weights_i |(M x - target)_i|`` over ``{A x = b, x >= 0}``.

    Written with split slacks ``M x + s_plus - s_minus = target``.  The start
    basis extends ``start.basis`` with one slack per extra row, so no second
    phase one is needed.  ``x`` in the result is the original variable block;
    ``value`` is the optimal weighted residual.
    """
    M = np.atleast_2d(np.asarray(M, dtype=float))
    target = np.asarray(target, dtype=float).reshape(-1)
    weights = np.asarray(weights, dtype=float).reshape(-1)
    m, n = start.A.shape
    k = M.shape[0]
    if M.shape[1] != n or target.shape != (k,) or weights.shape != (k,):
        raise NumericalFailure("residual system has inconsistent dimensions")
    A2 = np.block([
        [start.A, np.zeros((m, 2 * k))],
        [M, np.eye(k), -np.eye(k)],
    ])
    b2 = np.concatenate([start.b, target])
    c2 = np.concatenate([np.zeros(n), weights, weights])
    _, xB = _basic_solution(start.A, start.b, list(start.basis))
    x0 = np.zeros(n)
    x0[list(start.basis)] = xB
    resid = target - M @ x0
    slack = [n + i if resid[i] >= 0 else n + k + i for i in range(k)]
    res = solve_from_basis(c2, A2, b2, list(start.basis) + slack)
    return LPResult(res.value, res.x[:n], res.basis, res.iterations)

"""Canonical benchmark instances."""

from __future__ import annotations

import numpy as np

from .hybrid import HybridSpec
from .measures import GridSpec
from .system import SystemSpec

LINEAR_A = 0.5
LINEAR_B = 0.25
LINEAR_D = 0.25


def linear_benchmark(n_states=17, single_action=False):
    """``y' = 0.5 y + 0.25 u + 0.25 s`` on an even grid of ``[0, 1]``.

    Controls and noise atoms are ``{0, 1}`` (noise fair).  With 17 states the
    grid spacing is 1/16 and every image is a multiple of 1/32, so distances
    to the grid are computed exactly and half-way images go to the lower
    grid point.
    """
    grid = GridSpec(
        np.linspace(0.0, 1.0, n_states),
        [0.0] if single_action else [0.0, 1.0],
        [0.0, 1.0],
        [0.5, 0.5],
    )
    return SystemSpec(grid, lambda y, u, s: LINEAR_A * y + LINEAR_B * u + LINEAR_D * s)


TWO_STATE_PROBS = (0.3, 0.7)


def two_state_mdp():
    """Two states, two actions, two atoms with probabilities 0.3 and 0.7.

    Action 0 keeps the state on atom 0 and flips it on atom 1; action 1 moves
    to state 1 on atom 0 and to state 0 on atom 1.  The four deterministic
    stationary policies give four distinct stationary laws.
    """
    grid = GridSpec([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], list(TWO_STATE_PROBS))

    def f(y, u, s):
        if u[0] == 0:
            return y if s[0] == 0 else 1.0 - y
        return 1.0 - s

    return SystemSpec(grid, f)


def disconnected_chain():
    """Two absorbing states: no control or noise ever moves the state."""
    grid = GridSpec([0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [0.5, 0.5])
    return SystemSpec(grid, lambda y, u, s: y)


def swap_chain():
    """Deterministic two-cycle under a single action."""
    grid = GridSpec([0.0, 1.0], [0.0], [0.0], [1.0])
    return SystemSpec(grid, lambda y, u, s: 1.0 - y)


def absorbing_point():
    """A single state with a single action: the stationary set is one point mass."""
    grid = GridSpec([0.0], [0.0], [0.0], [1.0])
    return SystemSpec(grid, lambda y, u, s: y)


HYBRID_TARGET = 0.4


def benchmark_g(z, y, u):
    return -z + y[..., :1] * u[..., :1]


def benchmark_G(z):
    return (z[..., 0] - HYBRID_TARGET) ** 2


def hybrid_benchmark(epsilon, grid=None):
    """Scalar slow state ``z' = -z + y u`` with cost ``(z(1) - 0.4)^2``.

    On the box ``[-1, 2]`` the field is bounded by 2, 1-Lipschitz in ``z``,
    and the cost is 3.2-Lipschitz.
    """
    return HybridSpec(benchmark_g, benchmark_G, [0.0], epsilon, 1.0, 2.0, 3.2, ([-1.0], [2.0]), grid=grid)


def benchmark_markov_policy(spec):
    """Fixed feedback used for the averaging trend: control 1 below y = 0.5, else 0."""
    y = spec.grid.y_points[:, 0]
    return (y < 0.5).astype(np.int64)

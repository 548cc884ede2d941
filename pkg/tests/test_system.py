import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from occavg.errors import GuardError, InvalidArgument, ModelViolation, ResourceLimitError
from occavg.instances import linear_benchmark, swap_chain
from occavg.measures import EMPIRICAL, GridSpec, OccMeasure
from occavg.system import (ControlPlan, SystemSpec, exact_expected_occupation, expected_occupation, noise_indices,
                           occupation_counts, random_occupation, simulate, simulate_batch, stationary_markov, step,
                           telescoping_variance_check)


def small_linear():
    return linear_benchmark(n_states=5)


# -- step -----------------------------------------------------------------------

def test_step_fixed_point(lin):
    assert step(lin, 0, 0, 0) == 0


def test_step_boundary(lin):
    assert step(lin, 16, 1, 1) == 16


def test_step_midpoint(lin):
    # 0.5 * 0.5 + 0.25 = 0.5, grid index 8 on the 1/16 grid
    assert step(lin, 8, 0, 1) == 8
    assert lin.grid.y_points[8, 0] == 0.5


def test_step_rejects_bad_index(lin):
    with pytest.raises(InvalidArgument):
        step(lin, 17, 0, 0)
    with pytest.raises(InvalidArgument):
        step(lin, 0, 2, 0)


def test_projection_ties_go_low():
    grid = GridSpec([0.0, 1.0], [0.0], [0.0], [1.0])
    spec = SystemSpec(grid, lambda y, u, s: np.array([0.5]))
    assert step(spec, 0, 0, 0) == 0


def nearest_low(points, x):
    d = np.abs(points - x)
    return int(np.argmin(d))  # argmin returns the first, i.e. lower, index on ties


def test_forward_invariance_scan(lin):
    g = lin.grid
    pts = g.y_points[:, 0]
    for iy, iu, js in itertools.product(range(g.ny), range(g.nu), range(g.ns)):
        img = 0.5 * pts[iy] + 0.25 * g.u_points[iu, 0] + 0.25 * g.s_points[js, 0]
        assert 0.0 <= img <= 1.0
        assert step(lin, iy, iu, js) == nearest_low(pts, img)


def test_invariance_violation_reported():
    grid = GridSpec([0.0, 1.0], [0.0], [0.0], [1.0])
    with pytest.raises(ModelViolation) as exc:
        SystemSpec(grid, lambda y, u, s: y + 2.0)
    assert exc.value.dump["image"] == [2.0]


# -- plans ------------------------------------------------------------------------

def test_plan_text_roundtrip():
    plans = [ControlPlan.open_loop([0, 1, 1], 2),
             ControlPlan.markov(np.array([[0, 1], [1, 1]]), 2),
             stationary_markov(np.array([[0.3, 0.7], [1.0, 0.0]]), 2),
             ControlPlan.history(np.zeros((3, 9), dtype=int), 2, 2, 2)]
    for p in plans:
        back = ControlPlan.from_text(p.to_text())
        assert back.to_text() == p.to_text()


def test_plan_shorter_than_horizon(lin):
    with pytest.raises(InvalidArgument):
        simulate(lin, ControlPlan.open_loop([0, 1], 2), 0, 3, seed=0)


def test_plan_rejects_invalid_control():
    with pytest.raises(InvalidArgument):
        ControlPlan.open_loop([0, 2], 2)


# -- simulate ---------------------------------------------------------------------

def test_single_atom_matches_iteration():
    spec = swap_chain()
    tr = simulate(spec, ControlPlan.open_loop([0] * 6, 1), 0, 6, seed=4)
    assert tr.y_path.tolist() == [0, 1, 0, 1, 0, 1, 0]


def test_one_step(lin):
    tr = simulate(lin, ControlPlan.open_loop([1], 2), 3, 1, seed=9)
    assert tr.y_path.tolist() == [3, step(lin, 3, 1, int(tr.s_path[0]))]


def test_three_step_hand_unroll(lin):
    tr = simulate(lin, ControlPlan.open_loop([1, 0, 1], 2), 4, 3, seed=11)
    pts = lin.grid.y_points[:, 0]
    k = 4
    for t, u in enumerate([1, 0, 1]):
        k = nearest_low(pts, 0.5 * pts[k] + 0.25 * u + 0.25 * int(tr.s_path[t]))
        assert tr.y_path[t + 1] == k


def test_replay_bit_identical(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    a = simulate(lin, plan, 0, 50, seed=3, replicate=2)
    b = simulate(lin, plan, 0, 50, seed=3, replicate=2)
    assert a.to_csv() == b.to_csv()
    assert a.replay_ok(lin)
    assert a.to_csv().splitlines()[0] == "t,y_index,u_index,s_index"


def test_noise_prefix_property(lin):
    short = noise_indices(lin, 20, 5, 3)
    long = noise_indices(lin, 200, 5, 3)
    assert np.array_equal(short, long[:, :20])


def test_batch_matches_single_runs(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    b = simulate_batch(lin, plan, 2, 30, 4, seed=6)
    for r in range(4):
        tr = simulate(lin, plan, 2, 30, seed=6, replicate=r)
        assert np.array_equal(tr.y_path, b.y[r]) and np.array_equal(tr.u_path, b.u[r])


@given(st.integers(0, 10**6), st.integers(1, 19))
def test_non_anticipative(seed, t):
    spec = small_linear()
    T = 20
    rng = np.random.default_rng(seed)
    plan = ControlPlan.history(rng.integers(2, size=(T, 27)), 2, 2, 3)
    S = noise_indices(spec, T, seed, 1)
    S2 = S.copy()
    S2[0, t:] = rng.permutation(S2[0, t:])
    S2[0, t:] = 1 - S2[0, t:]
    a = simulate_batch(spec, plan, 1, T, 1, seed, noise=S)
    b = simulate_batch(spec, plan, 1, T, 1, seed, noise=S2)
    assert np.array_equal(a.u[0, :t + 1], b.u[0, :t + 1])


# -- occupation measures --------------------------------------------------------

def test_constant_trajectory_point_mass(lin):
    tr = simulate(lin, ControlPlan.open_loop([0] * 8, 2), 0, 8, seed=0)
    # y stays at 0 only if every atom is 0, so build the path directly
    tr2 = type(tr)(np.zeros(9, dtype=int), np.zeros(8, dtype=int), np.zeros(8, dtype=int), 0)
    occ = random_occupation(tr2, lin.grid)
    assert occ.weights[0, 0] == 1.0 and occ.kind == EMPIRICAL
    assert random_occupation(tr, lin.grid).flat.sum() == pytest.approx(1.0, abs=1e-15)


def test_two_cells_half_each(lin):
    tr = simulate(lin, ControlPlan.open_loop([0, 1], 2), 0, 2, seed=0)
    occ = random_occupation(tr, lin.grid)
    assert sorted(occ.flat[occ.flat > 0].tolist()) == [0.5, 0.5]


def test_occupation_recount(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    tr = simulate(lin, plan, 5, 10, seed=21)
    counts = np.zeros((17, 2))
    for t in range(10):
        counts[tr.y_path[t], tr.u_path[t]] += 1
    assert np.array_equal(random_occupation(tr, lin.grid).weights, counts / 10)


def test_expected_occupation_deterministic():
    spec = swap_chain()
    plan = ControlPlan.open_loop([0] * 5, 1)
    occ, se = expected_occupation(spec, plan, 0, 5, 4, seed=0)
    single = random_occupation(simulate(spec, plan, 0, 5, seed=0), spec.grid)
    assert np.array_equal(occ.weights, single.weights)
    assert np.all(se == 0.0)


def test_expected_occupation_one_replicate(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    occ, se = expected_occupation(lin, plan, 3, 12, 1, seed=2)
    tr = simulate(lin, plan, 3, 12, seed=2)
    assert np.array_equal(occ.weights, random_occupation(tr, lin.grid).weights)
    assert np.all(se == 0)
    with pytest.raises(InvalidArgument):
        expected_occupation(lin, plan, 3, 12, 0, seed=2)


def test_expected_occupation_near_exact():
    spec = small_linear()
    plan = ControlPlan.markov(np.array([[0, 1, 0, 1, 1], [1, 1, 0, 0, 1], [0, 0, 0, 1, 1], [1, 0, 1, 0, 1]]), 2)
    occ, se = expected_occupation(spec, plan, 2, 4, 4000, seed=8)
    exact = exact_expected_occupation(spec, plan, 2, 4)
    diff = np.abs(occ.weights - exact.weights)
    assert np.all(diff <= 3 * se + 1e-12)


def _enumerated_occupation(spec, plan, y0, T):
    """Sum over every atom sequence and every control randomisation."""
    g = spec.grid
    occ = np.zeros((g.ny, g.nu))
    for seq in itertools.product(range(g.ns), repeat=T):
        p_seq = np.prod([g.s_probs[s] for s in seq])
        branches = [(y0, 0, 1.0)]  # (state, history code, probability)
        for t, s in enumerate(seq):
            nxt = []
            for y, hist, p in branches:
                if plan.variant == "history-lookup":
                    probs = np.eye(g.nu)[plan.table[t][hist]]
                else:
                    probs = plan.action_probs(t, g.ny)[y]
                for u in range(g.nu):
                    if probs[u] == 0:
                        continue
                    occ[y, u] += p_seq * p * probs[u] / T
                    nxt.append((step(spec, y, u, s), int(plan.update_history(hist, s)), p * probs[u]))
            branches = nxt
    return occ


def test_exact_occupation_single_atom():
    spec = swap_chain()
    plan = ControlPlan.open_loop([0] * 3, 1)
    tr = simulate(spec, plan, 1, 3, seed=0)
    assert np.array_equal(exact_expected_occupation(spec, plan, 1, 3).weights,
                          random_occupation(tr, spec.grid).weights)


def test_exact_occupation_one_step(lin):
    occ = exact_expected_occupation(lin, ControlPlan.open_loop([1], 2), 7, 1)
    assert occ.weights[7, 1] == 1.0


@pytest.mark.parametrize("kind", ["open", "markov", "random", "history"])
def test_exact_occupation_eight_branches(kind):
    spec = small_linear()
    rng = np.random.default_rng(1)
    plan = {
        "open": ControlPlan.open_loop([1, 0, 1], 2),
        "markov": ControlPlan.markov(rng.integers(2, size=(3, 5)), 2),
        "random": ControlPlan.markov(rng.dirichlet([1, 1], size=(3, 5)), 2),
        "history": ControlPlan.history(rng.integers(2, size=(3, 9)), 2, 2, 2),
    }[kind]
    exact = exact_expected_occupation(spec, plan, 1, 3)
    assert np.allclose(exact.weights, _enumerated_occupation(spec, plan, 1, 3), atol=1e-15)


def test_exact_occupation_guard(lin):
    with pytest.raises(ResourceLimitError):
        exact_expected_occupation(lin, ControlPlan.open_loop([0] * 21, 2), 0, 21)


def test_occupation_counts_mass_one(lin):
    b = simulate_batch(lin, stationary_markov(np.full((17, 2), 0.5), 2), 0, 37, 5, seed=1)
    assert np.allclose(occupation_counts(lin.grid, b.y, b.u).sum(axis=1), 1.0, atol=1e-15)
    OccMeasure(lin.grid, occupation_counts(lin.grid, b.y, b.u)[0], EMPIRICAL)


# -- telescoping variance -------------------------------------------------------

def test_variance_constant_phi(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    res = telescoping_variance_check(lin, plan, 0, 50, np.ones(17), 30, seed=0)
    assert res.mean == 0.0 and res.variance == 0.0


def test_variance_single_atom():
    spec = swap_chain()
    res = telescoping_variance_check(spec, ControlPlan.open_loop([0] * 20, 1), 0, 20, lambda y: y[:, 0] ** 2, 30, 0)
    assert res.mean == 0.0 and res.variance == 0.0


def test_variance_linear_benchmark(lin):
    plan = stationary_markov(np.full((17, 2), 0.5), 2)
    res = telescoping_variance_check(lin, plan, 0, 100, lambda y: y[:, 0], 500, seed=4)
    assert abs(res.mean) <= 4 * res.mean_stderr
    assert res.variance <= res.bound
    assert res.bound == pytest.approx(2.0 / 100)


def test_variance_guard(lin):
    with pytest.raises(GuardError):
        telescoping_variance_check(lin, ControlPlan.open_loop([0] * 5, 2), 0, 5, np.ones(17), 29, 0)

from fractions import Fraction

import numpy as np
import pytest

from occavg.errors import GuardError, InfeasibleError, InvalidArgument
from occavg.hybrid import HybridSpec, make_time_grid
from occavg.inclusion import VelocityOracle, solve_inclusion
from occavg.instances import disconnected_chain, hybrid_benchmark
from occavg.measures import OccMeasure
from occavg.stationary import build_kernel, contains, stationary_polytope
from occavg.synthesis import (
    SynthesisConfig,
    assemble_plan,
    averaging_error,
    gap_csv,
    measure_for_velocity,
    optimality_gap,
    policy_from_measure,
    policy_table,
    steering_controls,
    target_velocity,
    verify_tracking,
)
from occavg.system import random_occupation, simulate, stationary_markov


@pytest.fixture(scope="module")
def lin_poly(lin):
    return stationary_polytope(build_kernel(lin))


@pytest.fixture(scope="module")
def oracle(lin_poly):
    return VelocityOracle(lin_poly, hybrid_benchmark(0.01))


def _zero_spec(eps=0.04, G=None):
    G = G or (lambda z: 0.25 + 0 * z[..., 0])
    return HybridSpec(lambda z, y, u: 0 * z, G, [0.2], eps, 0.0, 0.0, 0.0, ([-1.0], [2.0]))


def _const(c):
    return lambda t, z: np.array([c])


# target velocities and measures


def test_target_velocity_of_admissible_constant_path(oracle):
    tg = make_time_grid(0.01)
    sol = solve_inclusion(oracle, tg, _const(0.3), measure_defects=False)
    # the velocity set at z is [-z, 23/32 - z]; 0.3 stays admissible while z < 0.41
    for t in range(tg.N):
        np.testing.assert_allclose(target_velocity(sol, t, oracle, tg), sol.velocities[t], atol=1e-7)
    with pytest.raises(InvalidArgument):
        target_velocity(sol, tg.N, oracle, tg)


def test_measure_for_velocity_realises_target(oracle, lin, lin_poly):
    Y, U = lin.grid.cell_coordinates()
    for v in (0.0, 0.3, 23 / 32, 0.5 * 23 / 32):
        gamma, slack = measure_for_velocity(oracle, [0.0], [v])
        assert slack <= 1e-9
        assert contains(lin_poly, gamma)
        assert float((Y * U)[:, 0] @ gamma.flat) == pytest.approx(v, abs=1e-9)


def test_unrealisable_velocity_is_infeasible(oracle):
    with pytest.raises(InfeasibleError):
        measure_for_velocity(oracle, [0.0], [1.0])


# feedback policies


def test_policy_table_by_hand(mdp):
    gamma = OccMeasure(mdp.grid, [[0.2, 0.3], [0.5, 0.0]])
    np.testing.assert_allclose(policy_table(gamma), [[0.4, 0.6], [1.0, 0.0]])
    gamma = OccMeasure(mdp.grid, [[0.4, 0.6], [0.0, 0.0]])
    np.testing.assert_allclose(policy_table(gamma, filler=1), [[0.4, 0.6], [0.0, 1.0]])


def test_policy_from_measure_reproduces_vertex_occupation(mdp):
    poly = stationary_polytope(build_kernel(mdp))
    for v in poly.vertices:
        gamma = OccMeasure(mdp.grid, v)
        occ = random_occupation(simulate(mdp, policy_from_measure(gamma), 0, 10_000, seed=2), mdp.grid)
        assert np.max(np.abs(occ.flat - v)) < 0.05


def test_policy_from_randomised_measure(mdp):
    poly = stationary_polytope(build_kernel(mdp))
    gamma = OccMeasure(mdp.grid, 0.5 * poly.vertices[0] + 0.5 * poly.vertices[3])
    plan = policy_from_measure(gamma)
    assert not plan.deterministic
    occ = random_occupation(simulate(mdp, plan, 0, 10_000, seed=4), mdp.grid)
    # the long-run law of the induced chain need not be the mixture itself, but it is stationary
    assert contains(poly, occ, tol=0.05)
    with pytest.raises(InvalidArgument):
        policy_from_measure(gamma, filler=2)


def _hitting_times(spec, ctrl, target):
    """Oracle: expected hitting times of ``target`` under a fixed feedback, by a linear solve."""
    g = spec.grid
    P = np.zeros((g.ny, g.ny))
    for y in range(g.ny):
        for js, ps in enumerate(g.s_probs):
            P[y, spec.next_index[y, max(ctrl[y], 0), js]] += ps
    free = np.setdiff1d(np.arange(g.ny), target)
    h = np.zeros(g.ny)
    h[free] = np.linalg.solve(np.eye(len(free)) - P[np.ix_(free, free)], np.ones(len(free)))
    return h


def test_steering_controls_satisfy_bellman_optimality(lin):
    target = [12]
    ctrl = steering_controls(lin, target)
    assert ctrl[12] == -1 and np.all(ctrl[np.arange(17) != 12] >= 0)
    h = _hitting_times(lin, ctrl, target)
    for y in range(17):
        if y in target:
            continue
        q = [1 + h[lin.next_index[y, u]] @ lin.grid.s_probs for u in range(2)]
        assert h[y] == pytest.approx(min(q), rel=1e-9)
        assert q[ctrl[y]] == pytest.approx(min(q), rel=1e-9)


def test_steering_unreachable_states_play_filler(lin):
    # on this grid y = 1 is only reachable from itself: 15/16 maps at most to 31/32, which rounds down
    ctrl = steering_controls(lin, [16], filler=1)
    assert ctrl[16] == -1
    np.testing.assert_array_equal(ctrl[:16], 1)
    np.testing.assert_array_equal(steering_controls(disconnected_chain(), [0], filler=1), [-1, 1])


def test_steering_fills_zero_mass_states(lin):
    gamma = OccMeasure.point_mass(lin.grid, 12, 1)
    plain = policy_from_measure(gamma, filler=0)
    steered = policy_from_measure(gamma, filler=0, sysspec=lin)
    others = np.arange(17) != 12
    np.testing.assert_allclose(plain.table[0, others], [[1.0, 0.0]] * 16)
    ctrl = steering_controls(lin, [12])
    np.testing.assert_allclose(steered.table[0, others], np.eye(2)[ctrl[others]])
    np.testing.assert_allclose(steered.table[0, 12], [0.0, 1.0])


# plan assembly


def test_assemble_plan_shape_and_provenance(oracle, lin):
    tg = make_time_grid(0.01)
    sol = solve_inclusion(oracle, tg, _const(0.3), measure_defects=False)
    sp = assemble_plan(sol, oracle, lin, SynthesisConfig(tg, log_replicates=30))
    assert sp.length == tg.n_fast == 101
    assert [w["first_step"] for w in sp.windows] == list(tg.starts[:-1])
    rows = sp.provenance_csv().splitlines()
    assert rows[0] == "t,first_step,block_length,v_1,slack,gamma_digest,nu_hat,nu_hat_stderr"
    assert len(rows) == 1 + tg.N
    # the tail step after the last window plays the filler
    np.testing.assert_allclose(sp.plan.table[-1], np.eye(2)[[0] * lin.grid.ny])


def test_assemble_plan_with_unit_blocks(lin_poly, lin):
    tg = make_time_grid(Fraction(1, 10), {Fraction(1, 10): Fraction(3, 20)})
    assert tg.K == 1 and tg.N == 6
    o = VelocityOracle(lin_poly, hybrid_benchmark(0.1))
    sol = solve_inclusion(o, tg, _const(0.2), measure_defects=False)
    sp = assemble_plan(sol, o, lin, SynthesisConfig(tg))
    assert sp.length == 11
    assert all(w["block_length"] == 1 for w in sp.windows)


def test_burn_in_must_be_below_K():
    with pytest.raises(InvalidArgument):
        SynthesisConfig(make_time_grid(0.04), burn_in=5)


def test_plan_round_trips_through_text(oracle, lin):
    tg = make_time_grid(0.04)
    o = VelocityOracle(oracle.polytope, hybrid_benchmark(0.04))
    sol = solve_inclusion(o, tg, _const(0.3), measure_defects=False)
    sp = assemble_plan(sol, o, lin, SynthesisConfig(tg))
    from occavg.system import ControlPlan

    back = ControlPlan.from_text(sp.to_text())
    np.testing.assert_array_equal(back.table, sp.plan.table)


# tracking, averaging and gap


def test_tracking_with_zero_field_is_exact(lin, lin_poly):
    h = _zero_spec()
    o = VelocityOracle(lin_poly, h)
    tg = make_time_grid(0.04)
    sol = solve_inclusion(o, tg, _const(0.0))
    tr = verify_tracking(h, lin, stationary_markov(np.ones(17, dtype=int), 2), sol, 30, seed=0)
    assert tr.estimate == 0.0 and tr.stderr == 0.0
    with pytest.raises(GuardError):
        verify_tracking(h, lin, stationary_markov(np.ones(17, dtype=int), 2), sol, 10, seed=0)


def test_averaging_error_with_zero_field_is_zero(lin, lin_poly):
    h = _zero_spec()
    o = VelocityOracle(lin_poly, h)
    err = averaging_error(o, make_time_grid(0.04), lin, stationary_markov(np.ones(17, dtype=int), 2), 0, 30, seed=1)
    assert err.estimate == pytest.approx(0.0, abs=1e-12)


def test_averaging_error_shrinks_with_epsilon(lin, lin_poly):
    plan = stationary_markov((lin.grid.y_points[:, 0] < 0.5).astype(int), 2)
    errs = []
    for eps in (0.04, 0.0025):
        o = VelocityOracle(lin_poly, hybrid_benchmark(eps))
        errs.append(averaging_error(o, make_time_grid(eps), lin, plan, 0, 30, seed=0).estimate)
    assert errs[1] < errs[0]


def test_gap_with_constant_cost(lin):
    h = _zero_spec()
    gap = optimality_gap(h, lin, stationary_markov(np.zeros(17, dtype=int), 2), 0.1, 30, seed=0)
    assert gap.cost == pytest.approx(0.25)
    assert gap.gap == pytest.approx(0.15)
    assert gap.cost_stderr <= 1e-12 and np.isnan(gap.baseline_min)
    rows = gap_csv([(0.04, gap)]).splitlines()
    assert rows[0] == "epsilon,cost,cost_stderr,F0,gap,baseline_min"
    assert rows[1].startswith("0.04,0.25,")

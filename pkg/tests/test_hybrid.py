import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occavg.errors import GuardError, InvalidArgument, ModelViolation
from occavg.hybrid import (
    HybridSpec,
    estimate_F_eps,
    f_table_csv,
    make_time_grid,
    output_mesh,
    simulate_hybrid,
    simulate_hybrid_batch,
    validate_constants,
    window_drift,
)
from occavg.instances import absorbing_point, benchmark_g, hybrid_benchmark, linear_benchmark
from occavg.measures import GridSpec
from occavg.system import SystemSpec, stationary_markov


def _spec(g, G=None, z0=(0.0,), box=((-1.0,), (2.0,)), eps=0.01, M=2.0, C=1.0, CG=1.0):
    G = G or (lambda z: z[..., 0])
    return HybridSpec(g, G, list(z0), eps, C, M, CG, box)


def _always(spec, u=1):
    return stationary_markov(np.full(spec.grid.ny, u), spec.grid.nu)


# time grids


def test_time_grid_divisible_cases():
    tg = make_time_grid(0.01)
    assert (tg.Delta, tg.N, tg.K) == (0.1, 10, 10)
    assert tg.epsilon_q == Fraction(1, 100) and tg.Delta_q == Fraction(1, 10)
    np.testing.assert_array_equal(tg.Kt, 10)
    tg = make_time_grid(0.04)
    assert (tg.Delta, tg.N, tg.K) == (0.2, 5, 5)
    assert tg.n_fast == 26


def test_time_grid_non_divisible_case():
    tg = make_time_grid(0.03)
    assert tg.N == 5
    np.testing.assert_array_equal(tg.starts, [0, 5, 11, 17, 23, 28])
    assert set(tg.Kt) == {5, 6} and tg.K == 5
    assert tg.lemma_holds()


def test_time_grid_schedules():
    assert make_time_grid(0.01, "power(0.5)").Delta == pytest.approx(0.1)
    assert make_time_grid(0.01, ("power", 0.25)).N == 3
    assert make_time_grid(0.01, {0.01: 0.05}).N == 20
    assert make_time_grid(Fraction(1, 100), lambda e: Fraction(1, 5)).N == 5
    for bad in ("cubic", {0.02: 0.1}):
        with pytest.raises(InvalidArgument):
            make_time_grid(0.01, bad)
    with pytest.raises(InvalidArgument):
        make_time_grid(0.01, lambda e: 0.005)  # Delta not above epsilon
    with pytest.raises(InvalidArgument):
        make_time_grid(1.5)


@given(st.integers(5, 2000))
def test_window_counts_satisfy_lemma(k):
    tg = make_time_grid(Fraction(1, k))
    assert tg.lemma_holds()
    assert tg.N == math.floor(1 / tg.Delta_q)
    assert tg.starts[0] == 0 and np.all(tg.Kt >= 1)


def test_output_mesh():
    np.testing.assert_allclose(output_mesh(0.25), [0, 0.25, 0.5, 0.75, 1.0])
    m = output_mesh(0.3)
    np.testing.assert_allclose(m, [0, 0.3, 0.6, 0.9, 1.0])


# simulation


def test_zero_field_keeps_z0(lin):
    h = _spec(lambda z, y, u: 0 * z, z0=(0.7,))
    b = simulate_hybrid_batch(h, lin, _always(lin), 0, 3, seed=0)
    np.testing.assert_array_equal(b.z, 0.7)
    np.testing.assert_array_equal(b.terminal, 0.7)


def test_unit_field_reaches_one(lin):
    h = _spec(lambda z, y, u: np.ones_like(z))
    tr = simulate_hybrid(h, lin, _always(lin), 0, seed=0)
    np.testing.assert_allclose(tr.z[:, 0], tr.s, atol=1e-12)
    assert tr.terminal_cost == pytest.approx(1.0)


def test_exponential_relaxation_matches_closed_form():
    # one state y = 1 with control 1: z' = 1 - z
    grid = GridSpec([1.0], [1.0], [0.0], [1.0])
    spec = SystemSpec(grid, lambda y, u, s: y)
    h = hybrid_benchmark(0.01)
    tr = simulate_hybrid(h, spec, _always(spec, 0), 0, seed=0)
    np.testing.assert_allclose(tr.z[:, 0], 1 - np.exp(-tr.s), atol=1e-8)


def test_window_speed_limit(lin):
    h = hybrid_benchmark(0.01)
    tg = make_time_grid(0.01)
    b = simulate_hybrid_batch(h, lin, _always(lin), 0, 5, seed=1)
    drift = window_drift(tg, b.s, b.z)
    assert drift.shape == (5, tg.N)
    assert np.all(drift <= h.bound_M * tg.Delta + 1e-12)
    assert drift.max() > 0


def test_replicates_follow_fast_streams(lin):
    h = hybrid_benchmark(0.04)
    plan = _always(lin)
    b = simulate_hybrid_batch(h, lin, plan, 0, 4, seed=9)
    one = simulate_hybrid(h, lin, plan, 0, seed=9, replicate=2)
    np.testing.assert_array_equal(b.z[2], one.z)
    np.testing.assert_array_equal(b.fast.y[2], one.fast.y[0])


def test_trajectory_csv(lin):
    tr = simulate_hybrid(hybrid_benchmark(0.25), lin, _always(lin), 0, seed=0)
    rows = tr.to_csv().splitlines()
    assert rows[0] == "s,z_1,y_index,u_index"
    assert len(rows) == 1 + len(tr.s)


def test_box_exit_is_a_model_violation(lin):
    h = _spec(lambda z, y, u: np.ones_like(z), box=((-1.0,), (0.5,)))
    with pytest.raises(ModelViolation) as exc:
        simulate_hybrid_batch(h, lin, _always(lin), 0, 2, seed=0)
    assert exc.value.exit_code == 4
    assert exc.value.dump["replicate"] == 0
    assert exc.value.dump["z"][-1][0] > 0.5


def test_simulation_guards(lin):
    h = hybrid_benchmark(0.01)
    with pytest.raises(InvalidArgument):
        simulate_hybrid_batch(h, lin, _always(lin), 0, 2, seed=0, substeps=3)
    from occavg.system import ControlPlan

    short = ControlPlan.open_loop(np.zeros(50, dtype=int), 2)
    with pytest.raises(InvalidArgument):
        simulate_hybrid_batch(h, lin, short, 0, 2, seed=0)


# F_eps estimates


def test_F_eps_with_zero_field_is_G_of_z0(lin):
    h = _spec(lambda z, y, u: 0 * z, G=lambda z: (z[..., 0] - 0.4) ** 2, z0=(0.1,))
    est = estimate_F_eps(h, lin, [_always(lin, 0), _always(lin, 1)], 0, 30, seed=0)
    np.testing.assert_allclose(est.values, 0.09)
    assert np.all(est.stderrs <= 1e-12)
    assert est.best_index == 0 and est.label.startswith("upper bound")


def test_F_eps_prefers_the_better_plan(lin):
    h = hybrid_benchmark(0.04)
    est = estimate_F_eps(h, lin, [_always(lin, 0), _always(lin, 1)], 0, 30, seed=0)
    # control 0 freezes z at 0 (cost 0.16); control 1 pushes it towards 0.4
    assert est.values[0] == pytest.approx(0.16)
    assert est.best_index == 1 and est.best < 0.16
    text = f_table_csv(est, ["zero", "one"]).splitlines()
    assert text[0] == "plan,estimate,stderr" and text[1].startswith("zero,")
    assert text[-1].startswith("best_upper_bound,")


def test_F_eps_guards(lin):
    h = hybrid_benchmark(0.04)
    with pytest.raises(GuardError):
        estimate_F_eps(h, lin, [_always(lin)], 0, 29, seed=0)
    with pytest.raises(InvalidArgument):
        estimate_F_eps(h, lin, [], 0, 30, seed=0)


# declared constants


def test_benchmark_constants_validate(lin):
    obs = validate_constants(hybrid_benchmark(0.01), lin.grid)
    assert obs["M"] == pytest.approx(2.0)
    assert obs["C"] == pytest.approx(1.0)
    assert obs["C_G"] <= 3.2


@pytest.mark.parametrize("name,kwargs", [("M", dict(M=1.0)), ("C", dict(C=0.5)), ("C_G", dict(CG=2.0))])
def test_wrong_constants_raise(lin, name, kwargs):
    h = _spec(benchmark_g, G=lambda z: (z[..., 0] - 0.4) ** 2, **{**dict(M=2.0, C=1.0, CG=3.2), **kwargs})
    with pytest.raises(ModelViolation) as exc:
        validate_constants(h, lin.grid)
    assert exc.value.dump["constant"] == name
    assert exc.value.dump["observed"] > exc.value.dump["declared"]


def test_spec_validation():
    g = lambda z, y, u: 0 * z  # noqa: E731
    with pytest.raises(InvalidArgument):
        _spec(g, z0=(3.0,))
    with pytest.raises(InvalidArgument):
        _spec(g, eps=1.0)
    with pytest.raises(InvalidArgument):
        _spec(g, box=((1.0,), (0.0,)))
    with pytest.raises(InvalidArgument):
        _spec(g, M=-1.0)
    grid = absorbing_point().grid
    with pytest.raises(ModelViolation):
        HybridSpec(lambda z, y, u: 5 + 0 * z, lambda z: z[..., 0], [0.0], 0.1, 1.0, 1.0, 1.0,
                   ([-1.0], [1.0]), grid=grid)


def test_with_epsilon_keeps_the_rest():
    h = hybrid_benchmark(0.04)
    h2 = h.with_epsilon(0.01)
    assert h2.epsilon == 0.01 and h2.bound_M == h.bound_M
    np.testing.assert_array_equal(h2.z0, h.z0)


def test_field_table_shape():
    lin = linear_benchmark(n_states=3)
    F = hybrid_benchmark(0.1).field_table([0.5], lin.grid)
    Y, U = lin.grid.cell_coordinates()
    np.testing.assert_allclose(F[:, 0], -0.5 + Y[:, 0] * U[:, 0])

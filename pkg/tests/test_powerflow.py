"""Newton solver, linear model extraction and branch quantity tests."""

import math

import numpy as np
import pytest
import scipy.sparse as sp

from gridscreen.case_io import Bus, BusKind, GridCase
from gridscreen.errors import DivergenceError, PowerFlowError, SingularSystemError
from gridscreen.powerflow import (
    PowerFlowOptions,
    branch_power_flows,
    branch_terminal_currents,
    complex_to_state,
    expand_complex_matrix,
    linearize_at_solution,
    power_balance,
    solve_ac_powerflow,
    state_to_complex,
)

import reference
from gridbuild import parallel_pair, pv_case, radial_chain, ring5, triangle, two_bus

# solved IEEE 14-bus voltages as published with the case
CASE14_VMAG = [
    1.060, 1.045, 1.010, 1.018, 1.020, 1.070, 1.062,
    1.090, 1.056, 1.051, 1.057, 1.055, 1.050, 1.036,
]
CASE14_ANGLE_DEG = [
    0.00, -4.98, -12.72, -10.31, -8.77, -14.22, -13.36,
    -13.36, -14.94, -15.10, -14.79, -15.08, -15.16, -16.04,
]


def test_state_round_trip():
    rng = np.random.default_rng(7)
    v = rng.normal(size=6) + 1j * rng.normal(size=6)
    assert np.array_equal(state_to_complex(complex_to_state(v)), v)


def test_expand_complex_matrix_reproduces_complex_product():
    rng = np.random.default_rng(11)
    m = rng.normal(size=(5, 5)) + 1j * rng.normal(size=(5, 5))
    m[rng.random(size=(5, 5)) < 0.4] = 0.0
    v = rng.normal(size=5) + 1j * rng.normal(size=5)
    expanded = expand_complex_matrix(sp.csr_matrix(m))
    got = expanded @ complex_to_state(v)
    assert np.allclose(got, complex_to_state(m @ v), atol=1e-14)


def test_two_bus_matches_closed_form():
    p, x = 0.5, 0.1
    sol = solve_ac_powerflow(two_bus(p=p, x=x), PowerFlowOptions(tol=1e-13))
    v2 = sol.v_complex[1]
    expected = complex((1.0 + math.sqrt(1.0 - 4.0 * p * p * x * x)) / 2.0, -p * x)
    assert abs(v2 - expected) < 1e-10
    assert sol.v_complex[0] == pytest.approx(1.0 + 0.0j)


def test_constant_current_network_converges_in_one_iteration():
    for case in (ring5(), parallel_pair()):
        sol = solve_ac_powerflow(case)
        assert sol.iterations == 1
        assert sol.max_mismatch < 1e-12


def test_unloaded_network_converges_in_one_iteration():
    case = two_bus(p=0.0, q=0.0)
    sol = solve_ac_powerflow(case)
    assert sol.iterations == 1
    assert np.allclose(sol.v_complex, 1.0, atol=1e-14)


def test_case14_flat_start_convergence(sol14):
    assert sol14.iterations == 4
    assert sol14.max_mismatch < 1e-8


def test_case14_matches_published_solution(sol14):
    assert sol14.v_mag == pytest.approx(CASE14_VMAG, abs=1.5e-3)
    assert np.degrees(sol14.v_angle) == pytest.approx(CASE14_ANGLE_DEG, abs=2e-2)
    # published slack dispatch and total loss
    assert sol14.p_inj[0] == pytest.approx(2.3239, abs=2e-4)
    assert power_balance(sol14).p_series_loss == pytest.approx(0.13393, abs=2e-4)


def test_case118_flat_start_convergence(sol118):
    assert sol118.iterations <= 10
    assert sol118.max_mismatch < 1e-8


def test_residual_is_zero_at_reported_solution(sol14):
    f = reference.newton_residual(sol14, sol14.full_state)
    assert np.max(np.abs(f)) < 1e-8


def test_jacobian_matches_finite_differences(sol14, lin14):
    """Cross-validate the assembled Jacobian against an independent residual."""
    x_op = sol14.full_state
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(25):
        d = rng.normal(size=len(x_op))
        d /= np.linalg.norm(d)
        fd = reference.directional_derivative(
            lambda x: reference.newton_residual(sol14, x), x_op, d
        )
        jd = lin14.matrix @ d
        err = np.linalg.norm(jd - fd) / np.linalg.norm(fd)
        worst = max(worst, err)
    assert worst < 1e-6


def test_restart_from_solution_is_a_fixed_point(case14, sol14):
    opts = PowerFlowOptions(start="state", initial_state=sol14.state)
    again = solve_ac_powerflow(case14, opts)
    assert again.iterations == 1
    assert np.allclose(again.state, sol14.state, atol=1e-10)


def test_file_start_matches_flat_start(case14, sol14):
    sol = solve_ac_powerflow(case14, PowerFlowOptions(start="file"))
    assert np.allclose(sol.v_complex, sol14.v_complex, atol=1e-7)
    assert sol.iterations <= sol14.iterations


def test_unknown_start_mode_rejected(case14):
    with pytest.raises(PowerFlowError, match="start"):
        solve_ac_powerflow(case14, PowerFlowOptions(start="warm"))
    with pytest.raises(PowerFlowError, match="initial_state"):
        solve_ac_powerflow(case14, PowerFlowOptions(start="state"))


def test_iteration_budget_exhaustion_raises(case14):
    with pytest.raises(PowerFlowError, match="did not converge"):
        solve_ac_powerflow(case14, PowerFlowOptions(max_iter=2))


def test_infeasible_loading_diverges():
    # far beyond the loadability limit of the corridor
    with pytest.raises(DivergenceError):
        solve_ac_powerflow(two_bus(p=30.0, x=0.1))


def test_isolated_bus_gives_singular_system():
    case = triangle()
    case = GridCase(
        case.name,
        case.base_mva,
        case.buses + (Bus(4, BusKind.PQ),),
        case.branches,
        case.generators,
    )
    with pytest.raises(SingularSystemError):
        solve_ac_powerflow(case)


def test_pv_bus_holds_setpoint_without_limits():
    sol = solve_ac_powerflow(pv_case())
    assert sol.v_mag[1] == pytest.approx(1.02, abs=1e-9)
    assert sol.q_limited == {}
    assert sol.kinds_effective[1] == int(BusKind.PV)


def test_q_limit_upper_bound_enforced():
    case = pv_case(q_max=0.05)
    free = solve_ac_powerflow(case)
    assert free.q_gen[1] > 0.05  # the limit actually binds

    sol = solve_ac_powerflow(case, PowerFlowOptions(enforce_q_limits=True))
    assert sol.q_limited == {1: pytest.approx(0.05)}
    assert sol.kinds_effective[1] == int(BusKind.PQ)
    assert sol.q_gen[1] == pytest.approx(0.05, abs=1e-9)
    # a binding upper limit means the setpoint can no longer be held up
    assert sol.v_mag[1] < 1.02
    assert sol.iterations > free.iterations
    assert sol.max_mismatch < 1e-8


def test_q_limit_lower_bound_enforced():
    case = pv_case(q_max=5.0, p_load=0.0, q_load=-0.8, v_set=0.97)
    free = solve_ac_powerflow(case)
    assert free.q_gen[1] < -0.1  # absorbing below the floor

    sol = solve_ac_powerflow(case, PowerFlowOptions(enforce_q_limits=True))
    assert sol.q_limited == {1: pytest.approx(-0.1)}
    assert sol.q_gen[1] == pytest.approx(-0.1, abs=1e-9)
    # a binding lower limit leaves the bus above its setpoint
    assert sol.v_mag[1] > 0.97


def test_q_limits_off_by_default():
    sol = solve_ac_powerflow(pv_case(q_max=0.05))
    assert sol.q_limited == {}
    assert sol.v_mag[1] == pytest.approx(1.02, abs=1e-9)


def test_slack_q_recovered(sol14):
    # the slack generator covers the reactive mismatch at its bus
    k = sol14.case.slack_index()
    bus = sol14.case.buses[k]
    assert sol14.q_gen[k] == pytest.approx(sol14.q_inj[k] + bus.q_load, abs=1e-9)


def test_power_balance_closes(sol14, sol118):
    for sol in (sol14, sol118):
        bal = power_balance(sol)
        assert abs(bal.residual) < 1e-8
        assert bal.p_generation > bal.p_load > 0


def test_power_balance_includes_conductive_shunt():
    case = two_bus(p=0.2)
    case.buses[1].g_shunt = 0.05
    sol = solve_ac_powerflow(case)
    bal = power_balance(sol)
    assert bal.p_shunt_loss == pytest.approx(0.05 * sol.v_mag[1] ** 2, abs=1e-12)
    assert abs(bal.residual) < 1e-10


def test_power_balance_includes_current_loads():
    sol = solve_ac_powerflow(ring5())
    bal = power_balance(sol)
    v = sol.v_complex
    expected = sum(
        (v[k] * complex(b.i_load_r, b.i_load_i).conjugate()).real
        for k, b in enumerate(sol.case.buses)
    )
    assert bal.p_load == pytest.approx(expected, abs=1e-12)
    assert abs(bal.residual) < 1e-10


def test_branch_terminal_currents_match_reference(sol14):
    v = sol14.v_complex
    for idx in (0, 7, 14):
        got = branch_terminal_currents(sol14, idx)
        assert got.vector == pytest.approx(
            reference.terminal_currents(sol14.case, v, idx), abs=1e-12
        )


def test_branch_terminal_currents_rejects_bad_branches(case14):
    sol = solve_ac_powerflow(case14.with_branch_open(5))
    with pytest.raises(ValueError, match="open"):
        branch_terminal_currents(sol, 5)
    with pytest.raises(ValueError, match="range"):
        branch_terminal_currents(sol, 99)


def test_branch_power_flows_match_reference(sol14):
    flows = branch_power_flows(sol14)
    v = sol14.v_complex
    for idx in range(sol14.case.n_branch):
        assert flows.p_from[idx] == pytest.approx(
            reference.from_side_power(sol14.case, v, idx), abs=1e-12
        )
    # flow conservation: from-side plus to-side power is the branch loss >= 0
    loss = flows.p_from + flows.p_to
    assert np.all(loss > -1e-12)


def test_branch_power_flows_zero_for_open_branch(case14):
    sol = solve_ac_powerflow(case14.with_branch_open(5))
    flows = branch_power_flows(sol)
    assert flows.p_from[5] == 0.0 and flows.q_to[5] == 0.0


def test_linearize_full_reproduces_operating_point(sol14, lin14):
    assert lin14.size == 2 * sol14.n + len(lin14.pv)
    assert np.array_equal(lin14.rhs, lin14.matrix @ lin14.x_op)
    assert np.allclose(lin14.solve(lin14.rhs), sol14.full_state, atol=1e-9)
    assert np.allclose(lin14.v_op, sol14.v_complex, atol=0)


def test_linearize_network_mode_shape_and_pins(sol14, lin14_network):
    lin = lin14_network
    assert lin.size == 2 * sol14.n
    assert np.allclose(lin.solve(lin.rhs), sol14.state, atol=1e-9)
    s = lin.slack
    pin_rows = lin.matrix[[2 * s, 2 * s + 1], :].toarray()
    expected = np.zeros((2, lin.size))
    expected[0, 2 * s] = 1.0
    expected[1, 2 * s + 1] = 1.0
    assert np.array_equal(pin_rows, expected)


def test_linearize_kcl_rows(lin14):
    assert lin14.kcl_rows(lin14.slack) is None
    assert lin14.kcl_rows(3) == (6, 7)
    assert lin14.is_slack(lin14.slack)


def test_linearize_rejects_unknown_mode(sol14):
    with pytest.raises(ValueError, match="mode"):
        linearize_at_solution(sol14, mode="dc")


def test_radial_chain_voltage_drop_monotone():
    sol = solve_ac_powerflow(radial_chain(n=5, p=0.1))
    vmag = sol.v_mag
    assert np.all(np.diff(vmag) < 0)

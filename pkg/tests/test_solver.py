"""Tests for solver.py."""

import math
from dataclasses import replace

import numpy as np
import pytest

from conftest import DEFAULT_COEFFS, make_device, make_gpu, make_net, make_scenario
from eefwq.convergence import ConvergenceCoeffs
from eefwq.errors import (
    BandwidthInfeasibleError,
    DeadlineInfeasibleError,
    InfeasibleError,
    InvalidMultiplierError,
    MemoryInfeasibleError,
    QuantizationErrorInfeasibleError,
)
from eefwq.models import (
    DeviceProfile,
    GpuProfile,
    RadioProfile,
    alpha1,
    dbm_to_watts,
    gpu_power,
    linearize_gpu_time,
    mb_to_bits,
)
from eefwq import solver
from eefwq.solver import (
    DEFAULT_SETTINGS,
    Scenario,
    SolverSettings,
    bandwidth_kkt_residuals,
    brute_force,
    build_allocation,
    cardano_h,
    check_feasible,
    eps_q_min,
    h_bounds,
    iterate,
    objective_value,
    optimize_fixed_q,
    psi_minimizer_numeric,
    round_bits,
    solve_b_given_q,
    solve_h,
    solve_q_given_b,
    stationarity_qtilde,
    stationarity_qtilde_numeric,
    _phi,
)

LN2 = math.log(2.0)


def _unit_coeffs(a1=1.0, a2=1.0):
    return ConvergenceCoeffs(a1=a1, a2=a2, a3=0.0, eps=1.0, m_batch=1, s_scale=1.0)


def _identical(n, **kwargs):
    return [make_device(i, n, **kwargs) for i in range(n)]


def _random_scenario(seed, n):
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.ones(n))
    devices = [
        DeviceProfile(
            id=i,
            pi_weight=float(weights[i]),
            gpu=make_gpu(f_core=rng.uniform(0.8e9, 1.3e9), f_mem=rng.uniform(1.2e9, 1.8e9)),
            radio=RadioProfile(p_cm=dbm_to_watts(rng.uniform(15.0, 25.0)), h=10 ** rng.uniform(-4.0, -2.0)),
            mem_capacity=mb_to_bits(float(rng.choice([900.0, 1800.0]))),
            model_size=mb_to_bits(1800.0),
        )
        for i in range(n)
    ]
    return make_scenario(devices=devices, t_max=float(rng.uniform(2e4, 4e4)))


class TestScenario:
    def test_zero_deadline(self):
        with pytest.raises(DeadlineInfeasibleError):
            make_scenario(t_max=0.0)

    def test_weights_must_sum_to_one(self):
        devices = [replace(d, pi_weight=0.4) for d in _identical(2)]
        with pytest.raises(ValueError):
            make_scenario(devices=devices)

    def test_memory_starved(self):
        with pytest.raises(MemoryInfeasibleError):
            make_scenario(devices=[make_device(0, 1, capacity_mb=100.0)])

    def test_max_bits(self):
        devices = [make_device(0, 2, capacity_mb=900.0), make_device(1, 2)]
        assert make_scenario(devices=devices).max_bits() == [16, 32]


class TestObjective:
    def test_per_device_energies_add_up(self):
        scenario = make_scenario()
        allocation = build_allocation(scenario, 2, 0.001, [16, 32], [4e7, 6e7])
        total = sum(e.comp_energy + e.comm_energy for e in allocation.per_device)
        assert allocation.objective == pytest.approx(total)

    def test_doubling_bandwidth_halves_comm(self):
        scenario = make_scenario()
        b = np.array([2e7, 3e7])
        single = build_allocation(scenario, 1, 0.001, [16, 16], b)
        doubled = build_allocation(scenario, 1, 0.001, [16, 16], 2 * b)
        for e1, e2 in zip(single.per_device, doubled.per_device):
            assert e2.comm_energy == pytest.approx(e1.comm_energy / 2)
            assert e2.comp_energy == pytest.approx(e1.comp_energy)

    def test_default_scenario_positive(self):
        scenario = make_scenario()
        value = objective_value(scenario, 1, 0.0, [32, 32], [5e7, 5e7])
        assert math.isfinite(value) and value > 0

    def test_eps_q_min_monotone(self):
        devices = _identical(2)
        assert eps_q_min([8, 8], DEFAULT_COEFFS, devices) > eps_q_min([8, 16], DEFAULT_COEFFS, devices)
        assert eps_q_min([32, 32], DEFAULT_COEFFS, devices) < 1e-8


class TestCheckFeasible:
    def test_bandwidth_slack_zero_when_used_up(self):
        scenario = make_scenario()
        eps_q = eps_q_min([32, 32], scenario.coeffs, scenario.devices)
        allocation = build_allocation(scenario, 1, eps_q, [32, 32], [5e7, 5e7])
        assert allocation.report.slacks["bandwidth"] == pytest.approx(0.0, abs=1e-6)
        assert allocation.report.feasible

    def test_memory_violation(self):
        scenario = make_scenario(devices=[make_device(0, 2, capacity_mb=900.0), make_device(1, 2)])
        allocation = build_allocation(scenario, 1, 0.001, [32, 32], [5e7, 5e7])
        assert allocation.report.slacks["memory"] == pytest.approx(-1.0)
        assert allocation.report.first_violation() == "memory"

    def test_deadline_slack(self):
        scenario = make_scenario()
        allocation = build_allocation(scenario, 3, 0.001, [8, 32], [3e7, 7e7])
        round_times = [e.comp_time + e.comm_time for e in allocation.per_device]
        expected = scenario.t_max - allocation.k_rounds * max(round_times)
        assert check_feasible(scenario, allocation).slacks["deadline"] == pytest.approx(expected)

    def test_quant_error_slack_negative_below_minimum(self):
        scenario = make_scenario()
        allocation = build_allocation(scenario, 1, 1e-6, [8, 8], [5e7, 5e7])
        assert "quant_error" in allocation.report.violated()


class TestCardanoH:
    def test_hand_example(self):
        assert cardano_h(1.0, 1.0, _unit_coeffs()) == pytest.approx(0.5, rel=1e-12)

    def test_no_comm_energy_returns_lower_bound(self):
        assert cardano_h(0.0, 1.0, _unit_coeffs(), h_min=1.0) == 1.0
        assert cardano_h(0.0, 1.0, _unit_coeffs()) == 0.0

    def test_matches_numeric_minimizer(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            a1, a2, e_cm, e_cp = 10 ** rng.uniform(-3.0, 3.0, size=4)
            coeffs = _unit_coeffs(a1, a2)
            closed = cardano_h(e_cm, e_cp, coeffs)
            numeric = psi_minimizer_numeric(e_cm, e_cp, coeffs)
            assert closed == pytest.approx(numeric, rel=1e-6), (a1, a2, e_cm, e_cp)

    def test_root_of_cubic(self):
        a1, a2, e_cm, e_cp = 13.765, 1.023, 40.0, 8.0
        h = cardano_h(e_cm, e_cp, _unit_coeffs(a1, a2))
        alpha = (a1 * e_cm + 2 * a2 * e_cp) / (2 * a1 * e_cp)
        beta = -a2 ** 2 * e_cm / (2 * a1 ** 2 * e_cp)
        assert h ** 3 + alpha * h ** 2 + beta == pytest.approx(0.0, abs=1e-12)

    def test_clipping(self):
        assert cardano_h(1.0, 1.0, _unit_coeffs(), h_min=2.0, h_max=5.0) == 2.0
        assert cardano_h(1000.0, 1e-3, _unit_coeffs(1.0, 100.0), h_min=1.0, h_max=5.0) == 5.0

    def test_bad_compute_energy(self):
        with pytest.raises(ValueError):
            cardano_h(1.0, 0.0, _unit_coeffs())


def _bounds_scenario(threshold_scale=1.0):
    """Single device with rho(H) = threshold exactly at H = 2 and H = 18."""
    coeffs = ConvergenceCoeffs(a1=1.0, a2=10.0, a3=0.0, eps=0.1, m_batch=1, s_scale=1.0)
    net = make_net(b_max=1e7)
    radio = RadioProfile(p_cm=0.1, h=1e-3)
    t_cm = alpha1(radio, net) / net.b_max
    threshold = t_cm * 78.4
    gpu = GpuProfile(p_g0=3.0, zeta_mem=2e-9, zeta_core=4e-9, v_core=0.9, f_core=1.1e9, f_mem=1.5e9,
                     t0=threshold / 1764.0, theta_mem=0.0, theta_core=0.0)
    device = DeviceProfile(id=0, pi_weight=1.0, gpu=gpu, radio=radio,
                           mem_capacity=mb_to_bits(1800.0), model_size=mb_to_bits(1800.0))
    t_max = threshold_scale * threshold / (coeffs.m_batch * coeffs.eps ** 2)
    return Scenario(devices=(device,), net=net, coeffs=coeffs, t_max=t_max)


class TestHBounds:
    def test_known_roots(self):
        lo, hi = h_bounds(_bounds_scenario(), [32], [1e7], 0.0)
        assert lo == pytest.approx(2.0, abs=1e-6)
        assert hi == pytest.approx(18.0, abs=1e-6)

    def test_slack_deadline(self):
        scenario = make_scenario(t_max=1e30)
        assert h_bounds(scenario, [32, 32], [5e7, 5e7], 0.0) == (1.0, 1e4)

    def test_empty_interval(self):
        with pytest.raises(DeadlineInfeasibleError):
            h_bounds(_bounds_scenario(0.5), [32], [1e7], 0.0)

    def test_solve_h_clips_into_interval(self):
        scenario = _bounds_scenario()
        h, eps_q = solve_h(scenario, [32], [1e7])
        assert eps_q == 0.0
        assert 2.0 - 1e-6 <= h <= 18.0 + 1e-6
        t = scenario.terms
        e_cm = float(t.p_cm[0] * t.alpha[0] / 1e7)
        e_cp = float(t.p_cp[0] * t.t_cp([32])[0])
        assert h == pytest.approx(cardano_h(e_cm, e_cp, scenario.coeffs, 2.0, 18.0), rel=1e-6)

    def test_solve_h_eps_q_is_minimum(self):
        scenario = make_scenario()
        _, eps_q = solve_h(scenario, [8, 16], [5e7, 5e7])
        assert eps_q == eps_q_min([8, 16], scenario.coeffs, scenario.devices)


class TestStationarityQtilde:
    def _mu1_for(self, lam, device, coeffs, r_total):
        _, c2 = linearize_gpu_time(device.gpu)
        return lam * r_total * c2 * gpu_power(device.gpu) / (LN2 * coeffs.a3 * device.pi_weight ** 2 * coeffs.s_scale)

    def test_lambda_four(self):
        device = make_device(0, 1)
        coeffs = replace(DEFAULT_COEFFS, a3=1.0, s_scale=1.0)
        mu1 = self._mu1_for(4.0, device, coeffs, 1.0)
        assert stationarity_qtilde(mu1, 0.0, device, coeffs, 1.0) == pytest.approx(1.3466, abs=1e-4)

    @pytest.mark.parametrize("lam", [1e-3, 0.1, 4.0, 100.0, 1e4])
    def test_matches_root_finder(self, lam):
        device = make_device(0, 2)
        mu1 = self._mu1_for(lam, device, DEFAULT_COEFFS, 2734.0)
        closed = stationarity_qtilde(mu1, 0.5, device, DEFAULT_COEFFS, 2734.0)
        numeric = stationarity_qtilde_numeric(mu1, 0.5, device, DEFAULT_COEFFS, 2734.0)
        assert closed == pytest.approx(numeric, abs=1e-8)

    def test_increasing_in_mu1(self):
        device = make_device(0, 1)
        values = [stationarity_qtilde(mu, 0.0, device, DEFAULT_COEFFS, 100.0) for mu in (1.0, 10.0, 100.0)]
        assert values[0] < values[1] < values[2]

    @pytest.mark.parametrize("mu1", [0.0, -1.0])
    def test_invalid_multiplier(self, mu1):
        with pytest.raises(InvalidMultiplierError):
            stationarity_qtilde(mu1, 0.0, make_device(0, 1), DEFAULT_COEFFS, 100.0)


class TestSolveQGivenB:
    def test_identical_devices_get_identical_bits(self):
        scenario = make_scenario(devices=_identical(3))
        sol = solve_q_given_b(scenario, 1, 1e-3, np.full(3, 1e8 / 3))
        np.testing.assert_allclose(sol.q_tilde, sol.q_tilde[0], rtol=1e-12)
        assert 3.0 < sol.q_tilde[0] < 5.0
        assert sol.phi == pytest.approx(1e-3, rel=1e-6)

    def test_heavier_device_gets_more_bits(self):
        devices = [replace(make_device(0, 2), pi_weight=0.8), replace(make_device(1, 2), pi_weight=0.2)]
        scenario = make_scenario(devices=devices)
        eps_q = 1e-3
        sol = solve_q_given_b(scenario, 1, eps_q, [5e7, 5e7])
        assert sol.q_tilde[0] > sol.q_tilde[1]
        assert np.all(np.abs(sol.stationarity) <= 1e-6)

        t = scenario.terms
        # Scan q~_1 and put q~_2 exactly on the boundary phi = eps_q.
        t = scenario.terms
        weight = scenario.coeffs.a3 * scenario.coeffs.s_scale * t.pi ** 2
        q1 = np.linspace(3.0, 5.0, 200_001)
        room = eps_q - weight[0] / np.expm1(np.exp2(q1) * LN2)
        q1 = q1[room > 0]
        q2 = np.log2(np.log2(1.0 + weight[1] / room[room > 0]))
        inside = (q2 >= 3.0) & (q2 <= 5.0)
        q1, q2 = q1[inside], q2[inside]
        cost = t.p_cp[0] * t.c2[0] * np.exp2(q1) + t.p_cp[1] * t.c2[1] * np.exp2(q2)
        j = int(np.argmin(cost))
        solved = float(np.sum(t.p_cp * t.c2 * np.exp2(sol.q_tilde)))
        assert solved <= cost[j] * (1 + 1e-9)
        np.testing.assert_allclose(sol.q_tilde, [q1[j], q2[j]], atol=1e-3)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_boundary_scan(self, seed):
        rng = np.random.default_rng(seed)
        scenario = make_scenario(devices=list(_random_scenario(seed, 2).devices), t_max=1e6)
        t = scenario.terms
        lower = np.full(2, t.qt_min)
        upper = np.broadcast_to(t.qt_max, (2,)).astype(np.float64)
        eps_q = float(np.exp(rng.uniform(np.log(1.01 * _phi(scenario, upper)), np.log(_phi(scenario, lower)))))
        sol = solve_q_given_b(scenario, 1, eps_q, [5e7, 5e7])
        assert sol.phi <= eps_q * (1 + 1e-9)

        # Scan q~_1; q~_2 is the smallest value keeping phi <= eps_q.
        weight = scenario.coeffs.a3 * scenario.coeffs.s_scale * t.pi ** 2
        q1 = np.linspace(lower[0], upper[0], 200_001)
        room = eps_q - weight[0] / np.expm1(np.exp2(q1) * LN2)
        q1, room = q1[room > 0], room[room > 0]
        q2 = np.maximum(np.log2(np.log2(1.0 + weight[1] / room)), lower[1])
        inside = q2 <= upper[1]
        q1, q2 = q1[inside], q2[inside]
        cost = t.p_cp[0] * t.c2[0] * np.exp2(q1) + t.p_cp[1] * t.c2[1] * np.exp2(q2)
        solved = float(np.sum(t.p_cp * t.c2 * np.exp2(sol.q_tilde)))
        assert solved <= cost.min() * (1 + 1e-6)

    def test_loose_budget_gives_fewest_bits(self):
        scenario = make_scenario()
        sol = solve_q_given_b(scenario, 1, 0.02, [5e7, 5e7])
        np.testing.assert_allclose(sol.q_tilde, 3.0)
        assert sol.mu1 == 0.0

    def test_quantization_error_infeasible(self):
        scenario = make_scenario(devices=_identical(3))
        with pytest.raises(QuantizationErrorInfeasibleError):
            solve_q_given_b(scenario, 1, 1e-12, np.full(3, 1e8 / 3))

    def test_budget_within_tolerance_of_caps(self):
        scenario = make_scenario(devices=_identical(3))
        caps = np.broadcast_to(scenario.terms.qt_max, (3,)).astype(np.float64)
        eps_q = _phi(scenario, caps) * (1 - 1e-9)
        sol = solve_q_given_b(scenario, 1, eps_q, np.full(3, 1e8 / 3))
        np.testing.assert_allclose(sol.q_tilde, caps)
        assert sol.mu1 > 0
        assert np.isfinite(sol.mu1)

    def test_budget_beyond_tolerance_of_caps(self):
        scenario = make_scenario(devices=_identical(3))
        caps = np.broadcast_to(scenario.terms.qt_max, (3,)).astype(np.float64)
        with pytest.raises(QuantizationErrorInfeasibleError):
            solve_q_given_b(scenario, 1, _phi(scenario, caps) * (1 - 1e-5), np.full(3, 1e8 / 3))

    def test_deadline_infeasible(self):
        scenario = make_scenario(t_max=5000.0)
        with pytest.raises(DeadlineInfeasibleError):
            solve_q_given_b(scenario, 1, 1e-3, [5e7, 5e7])


def _device_with_delay(i, n, t0):
    device = make_device(i, n)
    return replace(device, gpu=make_gpu(t0=t0))


class TestSolveBGivenQ:
    def test_identical_devices_split_evenly(self):
        scenario = make_scenario(devices=_identical(3))
        sol = solve_b_given_q(scenario, 1, 1e-3, np.full(3, 5.0))
        np.testing.assert_allclose(sol.b, 1e8 / 3, rtol=1e-9)

    def test_square_root_rule(self):
        scenario = make_scenario()
        sol = solve_b_given_q(scenario, 1, 1e-3, [5.0, 5.0])
        t = scenario.terms
        root = np.sqrt(t.p_cm * t.alpha)
        expected = 1e8 * root / root.sum()
        assert np.all(sol.b_min < expected)
        np.testing.assert_allclose(sol.b, expected, rtol=1e-9)
        residuals = bandwidth_kkt_residuals(scenario, 1, 1e-3, sol)
        assert max(abs(r) for r in residuals["stationarity"]) <= 1e-6

    def test_linear_rule(self):
        scenario = make_scenario()
        sol = solve_b_given_q(scenario, 1, 1e-3, [5.0, 5.0], SolverSettings(bandwidth_rule="linear"))
        t = scenario.terms
        weights = t.p_cm * t.alpha
        np.testing.assert_allclose(sol.b, 1e8 * weights / weights.sum(), rtol=1e-9)

    @pytest.mark.parametrize("seed", range(50))
    def test_matches_grid_search(self, seed):
        rng = np.random.default_rng(1000 + seed)
        scenario = _random_scenario(seed, 2)
        eps_q = float(10 ** rng.uniform(-4.0, np.log10(5e-3)))
        sol = solve_b_given_q(scenario, 1, eps_q, rng.uniform(3.0, 5.0, size=2))
        t = scenario.terms
        b_max = scenario.net.b_max
        b1 = np.linspace(sol.b_min[0], b_max - sol.b_min[1], 100_001)
        energy = t.p_cm[0] * t.alpha[0] / b1 + t.p_cm[1] * t.alpha[1] / (b_max - b1)
        solved = float(np.sum(t.p_cm * t.alpha / sol.b))
        assert sol.b.sum() == pytest.approx(b_max, rel=1e-9)
        assert np.all(sol.b >= sol.b_min * (1 - 1e-12))
        assert solved <= energy.min() * (1 + 1e-9)

    def test_matches_grid_search_longer_rounds(self):
        scenario = make_scenario()
        sol = solve_b_given_q(scenario, 2, 1e-3, [3.0, 4.0])
        t = scenario.terms
        b1 = np.linspace(sol.b_min[0], 1e8 - sol.b_min[1], 100_001)
        energy = t.p_cm[0] * t.alpha[0] / b1 + t.p_cm[1] * t.alpha[1] / (1e8 - b1)
        solved = float(np.sum(t.p_cm * t.alpha / sol.b))
        assert solved <= energy.min() * (1 + 1e-9)

    def test_binding_floor(self):
        devices = [_device_with_delay(0, 3, 8.0), make_device(1, 3), make_device(2, 3)]
        scenario = make_scenario(devices=devices)
        eps_q = eps_q_min([32] * 3, scenario.coeffs, scenario.devices)
        sol = solve_b_given_q(scenario, 1, eps_q, np.full(3, 5.0))
        assert sol.b_min[0] > 1e8 / 3
        assert sol.b[0] == pytest.approx(sol.b_min[0], rel=1e-12)
        assert sol.b[1] == pytest.approx(sol.b[2], rel=1e-9)
        assert sol.b[1] > sol.b_min[1]
        assert sol.b.sum() == pytest.approx(1e8, rel=1e-9)

    def test_bandwidth_infeasible(self):
        scenario = make_scenario(b_max=1e6)
        with pytest.raises(BandwidthInfeasibleError):
            solve_b_given_q(scenario, 1, 1e-3, [5.0, 5.0])

    def test_compute_exceeds_deadline(self):
        scenario = make_scenario(devices=[_device_with_delay(0, 2, 20.0), make_device(1, 2)])
        with pytest.raises(DeadlineInfeasibleError):
            solve_b_given_q(scenario, 1, 1e-3, [5.0, 5.0])


class TestRoundBits:
    def test_powers_of_two(self):
        assert round_bits([3.0, 4.0, 5.0], (8, 16, 32)) == [8, 16, 32]

    def test_half_rounds_up(self):
        assert round_bits([3.5], (8, 16, 32)) == [16]

    def test_nearest(self):
        assert round_bits([4.4, 2.0], (8, 16, 32)) == [16, 8]

    def test_tie_goes_to_larger(self):
        assert round_bits([4.0], (8, 32)) == [32]


class TestOptimizeFixedQ:
    def test_integer_h_and_feasible(self):
        scenario = make_scenario()
        allocation = optimize_fixed_q(scenario, [16, 16])
        assert allocation.h == int(allocation.h) >= 1
        assert allocation.report.feasible
        assert allocation.b.sum() == pytest.approx(scenario.net.b_max, rel=1e-9)

    def test_bits_above_memory(self):
        scenario = make_scenario(devices=[make_device(0, 2, capacity_mb=900.0), make_device(1, 2)])
        with pytest.raises(MemoryInfeasibleError):
            optimize_fixed_q(scenario, [32, 32])


class TestIterate:
    def test_default_scenario(self):
        scenario = make_scenario()
        allocation = iterate(scenario)
        assert allocation.report.feasible
        assert allocation.h >= 1 and allocation.h == int(allocation.h)
        assert set(allocation.q) <= set(scenario.q_set)
        assert allocation.iterations >= 1

    def test_history_non_increasing(self):
        allocation = iterate(make_scenario(n=3))
        history = np.asarray(allocation.history)
        assert len(history) >= 1
        assert np.all(np.diff(history) <= 1e-9 * history[:-1])

    def test_iteration_cap_is_not_convergence(self):
        allocation = iterate(make_scenario(), settings=SolverSettings(max_outer=1))
        assert allocation.converged is False
        assert allocation.stop_reason == "max_outer"
        assert allocation.iterations == 1
        assert len(allocation.history) == 1

    def test_stop_reason_matches_converged(self):
        allocation = iterate(make_scenario())
        assert allocation.stop_reason in ("tolerance", "objective_increase")
        assert allocation.converged == (allocation.stop_reason == "tolerance")

    def test_objective_increase_keeps_best_state(self, monkeypatch):
        values = iter([10.0, 20.0, 5.0])
        monkeypatch.setattr(solver, "objective_value", lambda *args, **kwargs: next(values))
        scenario = make_scenario()
        state = solver._alternate(scenario, scenario.max_bits(), np.full(2, 5e7), DEFAULT_SETTINGS)
        assert state["converged"] is False
        assert state["stop_reason"] == "objective_increase"
        assert state["history"] == [10.0]
        assert state["iterations"] == 2
        assert "quant" in state

    def test_relaxed_kkt_residuals(self):
        relaxed = iterate(make_scenario()).relaxed
        assert max(abs(r) for r in relaxed["q_stationarity"]) <= 1e-6
        assert max(abs(r) for r in relaxed["b_stationarity"]) <= 1e-6

    def test_respects_memory(self):
        devices = [make_device(0, 2, capacity_mb=450.0), make_device(1, 2)]
        allocation = iterate(make_scenario(devices=devices))
        assert allocation.q[0] == 8
        assert allocation.report.slacks["memory"] >= 0

    def test_single_device_matches_exhaustive(self):
        scenario = make_scenario(n=1, devices=[make_device(0, 1)])
        solved = iterate(scenario)
        exhaustive = brute_force(scenario, range(1, 65))
        assert solved.objective == pytest.approx(exhaustive.objective, rel=1e-6)
        assert solved.q == exhaustive.q

    @pytest.mark.parametrize("seed", range(50))
    def test_close_to_exhaustive(self, seed):
        scenario = _random_scenario(seed, 2 + seed % 2)
        solved = iterate(scenario)
        exhaustive = brute_force(scenario, range(1, max(9, int(solved.h) + 3)), b_resolution=20)
        assert solved.report.feasible
        assert exhaustive is not None
        assert solved.objective <= 1.05 * exhaustive.objective

    def test_permutation(self):
        scenario = make_scenario(n=3)
        flipped = make_scenario(devices=list(reversed(scenario.devices)))
        a = iterate(scenario)
        b = iterate(flipped)
        assert a.objective == pytest.approx(b.objective, rel=1e-9)
        assert a.h == b.h

    def test_infeasible_everywhere(self):
        scenario = make_scenario(t_max=1.0)
        with pytest.raises(InfeasibleError):
            iterate(scenario)
        assert brute_force(scenario, range(1, 9)) is None

    def test_warm_start(self):
        scenario = make_scenario()
        first = iterate(scenario)
        second = iterate(scenario, init=first)
        assert second.objective <= first.objective * (1 + 1e-9)


class TestBruteForce:
    def test_fixed_precision(self):
        allocation = brute_force(make_scenario(), range(1, 9), q_set=(32,))
        assert allocation.q == [32, 32]

    def test_too_many_devices(self):
        with pytest.raises(ValueError):
            brute_force(make_scenario(n=5), range(1, 3))

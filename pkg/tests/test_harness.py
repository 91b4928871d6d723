"""Tests for harness.py."""

import math

import numpy as np
import pandas as pd
import pytest

from conftest import DEFAULT_COEFFS, make_device, make_gpu, make_scenario
from eefwq.harness import (
    GenerationParams,
    ScenarioTemplate,
    StrategyKind,
    SweepSpec,
    channel_groups,
    gen_devices,
    run_strategy,
    summarize,
    sweep,
)
from eefwq.models import DeviceProfile, RadioProfile, dbm_to_watts


def _template(**overrides):
    params = dict(n_devices=4, heterogeneity=0.0, b_max=1e8, n0=dbm_to_watts(-174.0), d_g=1.92e9,
                  coeffs=DEFAULT_COEFFS, t_max=30000.0)
    params.update(overrides)
    return ScenarioTemplate(**params)


class TestGenDevices:
    def test_capacity_groups(self):
        devices = gen_devices(8, 10.0, seed=0)
        capacities = [d.mem_capacity / 8e6 for d in devices]
        assert capacities == pytest.approx([1800, 1800, 2300, 2300, 3300, 3300, 3800, 3800])

    def test_homogeneous(self):
        devices = gen_devices(6, 0.0, seed=1)
        assert all(d.mem_capacity == devices[0].mem_capacity for d in devices)

    def test_equal_weights(self):
        devices = gen_devices(5, 1.0, seed=0)
        assert sum(d.pi_weight for d in devices) == pytest.approx(1.0)
        assert {d.pi_weight for d in devices} == {0.2}

    def test_deterministic(self):
        assert gen_devices(4, 5.0, seed=7) == gen_devices(4, 5.0, seed=7)
        assert gen_devices(4, 5.0, seed=7) != gen_devices(4, 5.0, seed=8)

    def test_draws_from_configured_options(self):
        params = GenerationParams(p_cm_dbm=(20.0,), f_core_mhz=(1000.0,))
        devices = gen_devices(10, 0.0, seed=3, params=params)
        assert all(d.radio.p_cm == pytest.approx(0.1) for d in devices)
        assert {d.gpu.f_core for d in devices} == {1e9}
        assert all(d.radio.h > 0 for d in devices)

    @pytest.mark.parametrize("n, heterogeneity", [(0, 1.0), (3, -1.0)])
    def test_invalid(self, n, heterogeneity):
        with pytest.raises(ValueError):
            gen_devices(n, heterogeneity, seed=0)


class TestChannelGroups:
    def _devices(self, gains):
        return [DeviceProfile(id=i, pi_weight=1 / len(gains), gpu=make_gpu(), radio=RadioProfile(p_cm=0.1, h=g),
                              mem_capacity=1.0, model_size=1.0) for i, g in enumerate(gains)]

    def test_four_devices(self):
        np.testing.assert_array_equal(channel_groups(self._devices([5.0, 1.0, 3.0, 2.0])), [3, 0, 2, 1])

    def test_eight_devices(self):
        groups = channel_groups(self._devices([8.0, 7.0, 6.0, 5.0, 4.0, 3.0, 2.0, 1.0]))
        np.testing.assert_array_equal(groups, [3, 3, 2, 2, 1, 1, 0, 0])


class TestScenarioTemplate:
    def test_with_value(self):
        template = _template()
        assert template.with_value("num_devices", 6).n_devices == 6
        assert template.with_value("heterogeneity", 2.5).heterogeneity == 2.5
        assert template.with_value("bandwidth", 5e7).b_max == 5e7

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            _template().with_value("deadline", 1.0)

    def test_draw(self):
        scenario = _template(n_devices=3).draw(seed=4)
        assert scenario.n == 3
        assert scenario.net.b_max == 1e8
        assert scenario.coeffs == DEFAULT_COEFFS


class TestRunStrategy:
    def test_fwq_beats_shared_bit_widths(self):
        scenario = _template(generation=GenerationParams(model_size_mb=1800.0)).draw(seed=0)
        fwq = run_strategy(StrategyKind.FWQ, scenario)
        unified = run_strategy(StrategyKind.UNIFIED_Q, scenario)
        full = run_strategy(StrategyKind.FULL_PRECISION, scenario)
        assert fwq.feasible and unified.feasible and full.feasible
        assert fwq.objective <= unified.objective * (1 + 1e-9)
        assert unified.objective <= full.objective * (1 + 1e-9)
        assert len(set(unified.allocation.q)) == 1
        assert full.allocation.q == [32] * 4

    def test_memory_starved_device(self):
        scenario = make_scenario(devices=[make_device(0, 2, capacity_mb=450.0), make_device(1, 2)])
        full = run_strategy(StrategyKind.FULL_PRECISION, scenario)
        assert not full.feasible
        assert full.constraint == "memory"
        assert math.isnan(full.objective)
        assert run_strategy(StrategyKind.UNIFIED_Q, scenario).allocation.q == [8, 8]
        assert run_strategy(StrategyKind.FWQ, scenario).allocation.q[0] == 8

    def test_random_bits(self):
        scenario = make_scenario(devices=[make_device(0, 2, capacity_mb=900.0), make_device(1, 2)])
        a = run_strategy(StrategyKind.RAND_Q, scenario, seed=5)
        b = run_strategy(StrategyKind.RAND_Q, scenario, seed=5)
        assert a.allocation.q == b.allocation.q
        assert a.allocation.q[0] in (8, 16)
        fwq = run_strategy(StrategyKind.FWQ, scenario)
        assert fwq.objective <= a.objective * (1 + 1e-9)

    def test_flexible_sparsification_placeholder(self):
        result = run_strategy(StrategyKind.FLEXIBLE_SPAR, make_scenario())
        assert not result.feasible
        assert result.note == "not implemented"

    def test_infeasible_is_recorded(self):
        result = run_strategy(StrategyKind.FWQ, make_scenario(t_max=1.0))
        assert not result.feasible
        assert result.allocation is None
        assert result.constraint

    def test_accepts_strategy_name(self):
        assert run_strategy("unifiedq", make_scenario()).strategy is StrategyKind.UNIFIED_Q


class TestSweep:
    def _spec(self, **overrides):
        params = dict(kind="num_devices", values=(2, 3), repeats=2, base=_template(),
                      strategies=(StrategyKind.FWQ, StrategyKind.UNIFIED_Q))
        params.update(overrides)
        return SweepSpec(**params)

    def test_rows_and_columns(self):
        table = sweep(self._spec())
        assert len(table) == 8
        assert list(table.columns[:7]) == ["sweep_value", "seed", "strategy", "objective_j", "h", "k_rounds",
                                           "eps_q"]
        assert {"q_1", "q_2", "q_3", "b_3_hz", "slack_deadline", "worst_group_min_q"} <= set(table.columns)
        assert table["q_3"].isna().sum() == 4
        assert table["strategy"].tolist()[:2] == ["fwq", "unifiedq"]

    def test_point_matches_single_solve(self):
        table = sweep(self._spec())
        row = table[(table["sweep_value"] == 3) & (table["seed"] == 1) & (table["strategy"] == "fwq")].iloc[0]
        scenario = _template().with_value("num_devices", 3).draw(seed=1)
        assert row["objective_j"] == pytest.approx(run_strategy(StrategyKind.FWQ, scenario).objective, rel=1e-12)

    def test_deterministic(self):
        pd.testing.assert_frame_equal(sweep(self._spec()), sweep(self._spec()))

    def test_parallel_matches_sequential(self):
        spec = self._spec(values=(2,), repeats=2)
        pd.testing.assert_frame_equal(sweep(spec, workers=2), sweep(spec))

    def test_bandwidth_sweep(self):
        table = sweep(self._spec(kind="bandwidth", values=(5e7, 1e8), repeats=1))
        fwq = table[table["strategy"] == "fwq"].set_index("sweep_value")["objective_j"]
        assert fwq[1e8] <= fwq[5e7]

    def test_heterogeneity_relaxes_memory_caps(self):
        spec = self._spec(kind="heterogeneity", values=(0.0, 5.0, 10.0), repeats=1,
                          base=_template(n_devices=10), strategies=(StrategyKind.FWQ,))
        table = sweep(spec).set_index("sweep_value")
        bits = table[[f"q_{i}" for i in range(1, 11)]]
        assert (bits.loc[0.0] == 8).all()
        assert (bits.loc[10.0] == 16).any()
        fwq = table["objective_j"]
        assert fwq[5.0] <= fwq[0.0] * (1 + 1e-6)
        assert fwq[10.0] <= fwq[5.0] * (1 + 1e-6)
        assert fwq[10.0] < fwq[0.0] * (1 - 1e-6)

    def test_cross_check_columns(self):
        spec = self._spec(values=(2,), repeats=1, strategies=(StrategyKind.FWQ,), cross_check=True,
                          cross_check_rounds=2)
        table = sweep(spec)
        assert np.isfinite(table["sim_grad_norm_sq"].iloc[0])
        assert table["sim_energy_j"].iloc[0] > 0

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            self._spec(kind="deadline")
        with pytest.raises(ValueError):
            self._spec(values=())
        with pytest.raises(ValueError):
            self._spec(repeats=0)


class TestSummarize:
    def test_counts_and_means(self):
        table = pd.DataFrame({
            "sweep_value": [1, 1, 1, 1, 2],
            "seed": [0, 1, 0, 1, 0],
            "strategy": ["fwq", "fwq", "unifiedq", "unifiedq", "fwq"],
            "objective_j": [10.0, 20.0, 30.0, math.nan, 5.0],
            "feasible": [True, True, True, False, True],
        })
        summary = summarize(table).set_index(["sweep_value", "strategy"])
        assert summary.loc[(1, "fwq"), "objective_mean"] == 15.0
        assert summary.loc[(1, "fwq"), "n_feasible"] == 2
        assert summary.loc[(1, "unifiedq"), "n_infeasible"] == 1
        assert summary.loc[(1, "unifiedq"), "objective_mean"] == 30.0
        assert summary.loc[(2, "fwq"), "n_rows"] == 1

    def test_all_infeasible_group(self):
        table = pd.DataFrame({
            "sweep_value": [1, 1],
            "seed": [0, 0],
            "strategy": ["fwq", "fullprecision"],
            "objective_j": [10.0, math.nan],
            "feasible": [True, False],
        })
        summary = summarize(table).set_index("strategy")
        assert summary.loc["fullprecision", "n_feasible"] == 0
        assert summary.loc["fullprecision", "n_infeasible"] == 1

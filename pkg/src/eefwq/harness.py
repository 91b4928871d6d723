"""Scenario generation, baseline strategies and parameter sweeps."""

import dataclasses
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from eefwq.convergence import ConvergenceCoeffs
from eefwq.errors import InfeasibleError, MemoryInfeasibleError
from eefwq.flsim import DataSpec, SimConfig, TrainingTrace, run_fwq_fl
from eefwq.models import (
    FULL_PRECISION_BITS,
    DeviceProfile,
    GpuProfile,
    NetworkConfig,
    RadioProfile,
    dbm_to_watts,
    mb_to_bits,
    memory_feasible,
    mhz_to_hz,
)
from eefwq.solver import DEFAULT_SETTINGS, Allocation, Scenario, SolverSettings, iterate, optimize_fixed_q
from eefwq.streams import substream

SWEEP_KINDS = ("num_devices", "heterogeneity", "bandwidth")


class StrategyKind(str, Enum):
    FWQ = "fwq"
    UNIFIED_Q = "unifiedq"
    RAND_Q = "randq"
    FULL_PRECISION = "fullprecision"
    FLEXIBLE_SPAR = "flexiblespar"


BASELINES = (StrategyKind.UNIFIED_Q, StrategyKind.RAND_Q, StrategyKind.FULL_PRECISION)
DEFAULT_STRATEGIES = (StrategyKind.FWQ,) + BASELINES


@dataclass(frozen=True)
class GenerationParams:
    """Distributions devices are drawn from. Config units (dBm, MHz, MB)."""
    p_cm_dbm: tuple[float, ...] = (19.0, 20.0, 21.0, 22.0, 23.0)
    path_loss: float = 1e-3
    f_core_mhz: tuple[float, ...] = (1050.0, 1100.0, 1150.0, 1200.0)
    f_mem_mhz: tuple[float, ...] = (1450.0, 1500.0, 1550.0, 1600.0)
    p_g0: float = 3.0
    zeta_mem: float = 2e-9
    zeta_core: float = 4e-9
    v_core: float = 0.9
    t0: float = 0.0
    theta_mem: float = 1e9
    theta_core: float = 2e9
    min_capacity_mb: float = 1800.0
    group_offsets: tuple[float, ...] = (0.0, 50.0, 150.0, 200.0)
    model_size_mb: float = 4500.0


@dataclass(frozen=True)
class ScenarioTemplate:
    """Everything needed to draw a scenario for one (sweep value, seed)."""
    n_devices: int
    heterogeneity: float
    b_max: float
    n0: float
    d_g: float
    coeffs: ConvergenceCoeffs
    t_max: float
    q_set: tuple[int, ...] = (8, 16, 32)
    rate_log: str = "ln"
    generation: GenerationParams = GenerationParams()

    def with_value(self, kind: str, value: float) -> "ScenarioTemplate":
        if kind == "num_devices":
            return dataclasses.replace(self, n_devices=int(value))
        if kind == "heterogeneity":
            return dataclasses.replace(self, heterogeneity=float(value))
        if kind == "bandwidth":
            return dataclasses.replace(self, b_max=float(value))
        raise ValueError(f"Unknown sweep kind {kind!r}")

    def network(self) -> NetworkConfig:
        return NetworkConfig(b_max=self.b_max, n0=self.n0, d_g=self.d_g, rate_log=self.rate_log)

    def draw(self, seed: int) -> Scenario:
        devices = gen_devices(self.n_devices, self.heterogeneity, seed, self.generation)
        return build_scenario(devices, self.network(), self.coeffs, self.t_max, self.q_set)


@dataclass(frozen=True)
class SweepSpec:
    kind: str
    values: tuple[float, ...]
    repeats: int
    base: ScenarioTemplate
    seed: int = 0
    strategies: tuple[StrategyKind, ...] = DEFAULT_STRATEGIES
    cross_check: bool = False
    cross_check_rounds: int = 20

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise ValueError(f"Sweep kind must be one of {SWEEP_KINDS}, got {self.kind!r}")
        if not self.values:
            raise ValueError("Sweep needs at least one value")
        if self.repeats < 1:
            raise ValueError("Sweep repeats must be >= 1")

    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.repeats)]


@dataclass
class StrategyResult:
    strategy: StrategyKind
    allocation: Optional[Allocation]
    feasible: bool
    constraint: str = ""
    note: str = ""
    trace: Optional[TrainingTrace] = None

    @property
    def objective(self) -> float:
        return self.allocation.objective if self.allocation is not None else math.nan


def gen_devices(n: int, heterogeneity_l: float, seed: int,
                params: GenerationParams = GenerationParams()) -> list[DeviceProfile]:
    """
    Draw n devices with equal data weights.

    Devices fall into contiguous capacity groups with capacity
    C + offset_g * L (MB); channel gains are path loss times a unit-mean
    exponential (Rayleigh power) draw.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if heterogeneity_l < 0:
        raise ValueError(f"heterogeneity must be >= 0, got {heterogeneity_l}")
    rng = substream(seed, "devices")
    n_groups = len(params.group_offsets)
    devices = []
    for i in range(n):
        gpu = GpuProfile(
            p_g0=params.p_g0,
            zeta_mem=params.zeta_mem,
            zeta_core=params.zeta_core,
            v_core=params.v_core,
            f_core=mhz_to_hz(float(rng.choice(params.f_core_mhz))),
            f_mem=mhz_to_hz(float(rng.choice(params.f_mem_mhz))),
            t0=params.t0,
            theta_mem=params.theta_mem,
            theta_core=params.theta_core,
        )
        radio = RadioProfile(
            p_cm=dbm_to_watts(float(rng.choice(params.p_cm_dbm))),
            h=params.path_loss * float(rng.exponential(1.0)),
        )
        group = i * n_groups // n
        capacity_mb = params.min_capacity_mb + params.group_offsets[group] * heterogeneity_l
        devices.append(DeviceProfile(
            id=i,
            pi_weight=1.0 / n,
            gpu=gpu,
            radio=radio,
            mem_capacity=mb_to_bits(capacity_mb),
            model_size=mb_to_bits(params.model_size_mb),
        ))
    return devices


def channel_groups(devices: Sequence[DeviceProfile], n_groups: int = 4) -> np.ndarray:
    """Group index per device by ascending channel gain; group 0 holds the worst channels."""
    gains = np.array([d.radio.h for d in devices])
    ranks = np.argsort(np.argsort(gains, kind="stable"), kind="stable")
    return ranks * n_groups // len(devices)


def build_scenario(devices: Sequence[DeviceProfile], net: NetworkConfig, coeffs: ConvergenceCoeffs,
                   t_max: float, q_set: Sequence[int] = (8, 16, 32)) -> Scenario:
    return Scenario(devices=tuple(devices), net=net, coeffs=coeffs, t_max=t_max, q_set=tuple(q_set))


def _unified_q(scenario: Scenario, settings: SolverSettings) -> Allocation:
    best = None
    first_error = None
    for bits in scenario.q_set:
        if not all(memory_feasible(d, bits) for d in scenario.devices):
            continue
        try:
            allocation = optimize_fixed_q(scenario, [bits] * scenario.n, settings)
        except InfeasibleError as e:
            first_error = first_error or e
            continue
        if best is None or allocation.objective < best.objective:
            best = allocation
    if best is None:
        raise first_error or MemoryInfeasibleError("No shared bit-width fits every device")
    return best


def _rand_q(scenario: Scenario, seed: int, settings: SolverSettings) -> Allocation:
    rng = substream(seed, "randq")
    bits = []
    for device in scenario.devices:
        options = [q for q in scenario.q_set if memory_feasible(device, q)]
        bits.append(int(rng.choice(options)))
    return optimize_fixed_q(scenario, bits, settings)


def run_strategy(strategy: StrategyKind, scenario: Scenario, seed: int = 0,
                 settings: SolverSettings = DEFAULT_SETTINGS) -> StrategyResult:
    """
    Solve a scenario with one strategy.

    Infeasibility is recorded in the result rather than raised.
    """
    strategy = StrategyKind(strategy)
    if strategy is StrategyKind.FLEXIBLE_SPAR:
        return StrategyResult(strategy, None, feasible=False, note="not implemented")
    try:
        if strategy is StrategyKind.FWQ:
            allocation = iterate(scenario, settings=settings)
        elif strategy is StrategyKind.UNIFIED_Q:
            allocation = _unified_q(scenario, settings)
        elif strategy is StrategyKind.RAND_Q:
            allocation = _rand_q(scenario, seed, settings)
        else:
            allocation = optimize_fixed_q(scenario, [FULL_PRECISION_BITS] * scenario.n, settings)
    except InfeasibleError as e:
        return StrategyResult(strategy, None, feasible=False, constraint=e.constraint, note=str(e))
    report = allocation.report
    return StrategyResult(strategy, allocation, feasible=report.feasible,
                          constraint=report.first_violation() or "")


def cross_check(scenario: Scenario, allocation: Allocation, seed: int, rounds: int = 20,
                data: DataSpec = DataSpec(n_samples=400)) -> TrainingTrace:
    """Train at the allocated H and bit-widths, with the allocated bandwidth as energy reference."""
    config = SimConfig(
        n_devices=scenario.n,
        h_steps=int(allocation.h),
        rounds=rounds,
        q_per_device=tuple(int(q) for q in allocation.q),
        seed=seed,
        data=data,
        devices=scenario.devices,
        net=scenario.net,
        b_ref=tuple(float(b) for b in allocation.b),
    )
    return run_fwq_fl(config)


def result_row(value: float, seed: int, result: StrategyResult, groups: Optional[np.ndarray] = None) -> dict:
    row = {
        "sweep_value": value,
        "seed": seed,
        "strategy": result.strategy.value,
        "objective_j": result.objective,
        "h": math.nan,
        "k_rounds": math.nan,
        "eps_q": math.nan,
    }
    allocation = result.allocation
    if allocation is not None:
        row.update(h=allocation.h, k_rounds=allocation.k_rounds, eps_q=allocation.eps_q)
        for i, (q, b) in enumerate(zip(allocation.q, allocation.b)):
            row[f"q_{i + 1}"] = q
            row[f"b_{i + 1}_hz"] = float(b)
    row["feasible"] = result.feasible
    row["constraint"] = result.constraint
    row["note"] = result.note
    if allocation is not None:
        for name, slack in allocation.report.slacks.items():
            row[f"slack_{name}"] = slack
        if groups is not None:
            row["worst_group_min_q"] = min(q for q, g in zip(allocation.q, groups) if g == 0)
    if result.trace is not None and result.trace.rounds:
        row["sim_grad_norm_sq"] = result.trace.grad_norm_sq[-1]
        row["sim_energy_j"] = result.trace.energy_j[-1]
    return row


def _run_point(spec: SweepSpec, value: float, seed: int, settings: SolverSettings) -> list[dict]:
    scenario = spec.base.with_value(spec.kind, value).draw(seed)
    groups = channel_groups(scenario.devices)
    rows = []
    for strategy in spec.strategies:
        result = run_strategy(strategy, scenario, seed, settings)
        if spec.cross_check and result.allocation is not None and scenario.n <= 4:
            result.trace = cross_check(scenario, result.allocation, seed, spec.cross_check_rounds)
        rows.append(result_row(value, seed, result, groups))
    return rows


def _column_order(rows: list[dict]) -> list[str]:
    n_max = max((int(k[2:]) for row in rows for k in row if k.startswith("q_") and k[2:].isdigit()), default=0)
    head = ["sweep_value", "seed", "strategy", "objective_j", "h", "k_rounds", "eps_q"]
    devices = [f"q_{i}" for i in range(1, n_max + 1)] + [f"b_{i}_hz" for i in range(1, n_max + 1)]
    tail = ["feasible", "constraint", "note"]
    known = set(head + devices + tail)
    extra = sorted({k for row in rows for k in row} - known)
    return head + devices + tail + extra


def sweep(spec: SweepSpec, settings: SolverSettings = DEFAULT_SETTINGS, workers: int = 1) -> pd.DataFrame:
    """
    Run every strategy for each sweep value and seed.

    Points run in a process pool when workers > 1; rows are always ordered by
    (sweep value, seed, strategy order).
    """
    points = [(value, seed) for value in spec.values for seed in spec.seeds()]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_run_point, spec, value, seed, settings) for value, seed in points]
            batches = [f.result() for f in futures]
    else:
        batches = [_run_point(spec, value, seed, settings) for value, seed in points]
    rows = [row for batch in batches for row in batch]
    return pd.DataFrame(rows, columns=_column_order(rows))


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard deviation of feasible objectives per (sweep value, strategy)."""
    counts = results.groupby(["sweep_value", "strategy"], sort=True).size().rename("n_rows")
    feasible = results[results["feasible"].astype(bool)]
    stats = feasible.groupby(["sweep_value", "strategy"], sort=True)["objective_j"].agg(["mean", "std", "count"])
    table = pd.concat([stats, counts], axis=1).reset_index()
    table["count"] = table["count"].fillna(0).astype(int)
    table["n_infeasible"] = table["n_rows"] - table["count"]
    return table.rename(columns={"mean": "objective_mean", "std": "objective_std", "count": "n_feasible"})

"""Energy and latency models for on-device GPU training and uplink transmission.

All quantities are SI: Hz, W, s, J, bits. Config files may use MHz/dBm/MB; the
helpers at the bottom convert them on load.
"""

import math
from dataclasses import dataclass
from typing import Hashable, Iterable

from eefwq.errors import MemoryInfeasibleError, ZeroRateError

FULL_PRECISION_BITS = 32


@dataclass(frozen=True)
class GpuProfile:
    """Runtime power and execution-time parameters of one device GPU."""
    p_g0: float
    zeta_mem: float
    zeta_core: float
    v_core: float
    f_core: float
    f_mem: float
    t0: float
    theta_mem: float
    theta_core: float
    c1_slope: float = 7.12e-3
    c1_intercept: float = 0.274
    c2_slope: float = 4.24e-4
    c2_intercept: float = 1.035

    def __post_init__(self):
        for name in ("p_g0", "zeta_mem", "zeta_core", "v_core", "t0", "theta_mem", "theta_core"):
            if getattr(self, name) < 0:
                raise ValueError(f"GpuProfile.{name} must be >= 0")
        if self.f_core <= 0 or self.f_mem <= 0:
            raise ValueError("GpuProfile frequencies must be > 0")

    def c1(self, q: float) -> float:
        return self.c1_slope * q + self.c1_intercept

    def c2(self, q: float) -> float:
        return self.c2_slope * q + self.c2_intercept


@dataclass(frozen=True)
class RadioProfile:
    p_cm: float
    h: float

    def __post_init__(self):
        if self.p_cm <= 0:
            raise ValueError("RadioProfile.p_cm must be > 0")
        if self.h < 0:
            raise ValueError("RadioProfile.h must be >= 0")


@dataclass(frozen=True)
class NetworkConfig:
    """
    Shared uplink parameters.

    rate_log selects the logarithm of the rate formula: "ln" (default) or
    "log2" for a Shannon-style rate.
    """
    b_max: float
    n0: float
    d_g: float
    rate_log: str = "ln"

    def __post_init__(self):
        if self.b_max <= 0 or self.n0 <= 0 or self.d_g <= 0:
            raise ValueError("NetworkConfig b_max, n0 and d_g must be > 0")
        if self.rate_log not in ("ln", "log2"):
            raise ValueError(f"NetworkConfig.rate_log must be 'ln' or 'log2', got {self.rate_log!r}")


@dataclass(frozen=True)
class DeviceProfile:
    """One mobile device: data weight, GPU, radio and memory."""
    id: Hashable
    pi_weight: float
    gpu: GpuProfile
    radio: RadioProfile
    mem_capacity: float
    model_size: float

    def __post_init__(self):
        if not 0 < self.pi_weight <= 1:
            raise ValueError(f"Device {self.id}: pi_weight must be in (0, 1]")
        if self.mem_capacity <= 0 or self.model_size <= 0:
            raise ValueError(f"Device {self.id}: mem_capacity and model_size must be > 0")


def gpu_power(gpu: GpuProfile) -> float:
    """Runtime power p_g0 + zeta_mem*f_mem + zeta_core*V^2*f_core (W)."""
    return gpu.p_g0 + gpu.zeta_mem * gpu.f_mem + gpu.zeta_core * gpu.v_core ** 2 * gpu.f_core


def gpu_time(gpu: GpuProfile, q: float) -> float:
    """Execution time of one mini-batch step at bit-width q (s)."""
    return gpu.t0 + gpu.c1(q) * gpu.theta_mem / gpu.f_mem + gpu.c2(q) * gpu.theta_core / gpu.f_core


def linearize_gpu_time(gpu: GpuProfile) -> tuple[float, float]:
    """
    Regroup gpu_time into T(q) = c_i2*q + c_i1.

    Returns:
        Tuple (c_i1 in seconds, c_i2 in seconds per bit).
    """
    mem_ratio = gpu.theta_mem / gpu.f_mem
    core_ratio = gpu.theta_core / gpu.f_core
    c_i2 = gpu.c1_slope * mem_ratio + gpu.c2_slope * core_ratio
    c_i1 = gpu.t0 + gpu.c1_intercept * mem_ratio + gpu.c2_intercept * core_ratio
    return c_i1, c_i2


def comp_energy(gpu: GpuProfile, q: float, h_steps: int) -> float:
    """Energy of h_steps local iterations at bit-width q (J)."""
    if h_steps < 1:
        raise ValueError(f"h_steps must be >= 1, got {h_steps}")
    return h_steps * gpu_power(gpu) * gpu_time(gpu, q)


def _spectral_efficiency(radio: RadioProfile, net: NetworkConfig) -> float:
    if radio.h <= 0:
        raise ZeroRateError("Channel gain is zero; device is unreachable")
    snr = radio.h * radio.p_cm / net.n0
    value = math.log1p(snr)
    if net.rate_log == "log2":
        value /= math.log(2.0)
    return value


def tx_rate(b: float, radio: RadioProfile, net: NetworkConfig) -> float:
    """Achievable uplink rate b*ln(1 + h*p/N0) (bit/s)."""
    if b <= 0:
        raise ValueError(f"Bandwidth must be > 0, got {b}")
    return b * _spectral_efficiency(radio, net)


def comm_time(b: float, radio: RadioProfile, net: NetworkConfig) -> float:
    """Time to upload d_g bits over bandwidth b (s)."""
    return net.d_g / tx_rate(b, radio, net)


def comm_energy(b: float, radio: RadioProfile, net: NetworkConfig) -> float:
    """Transmit energy p_cm * comm_time (J)."""
    return radio.p_cm * comm_time(b, radio, net)


def alpha1(radio: RadioProfile, net: NetworkConfig) -> float:
    """Constant alpha with comm_time(b) == alpha / b (s*Hz)."""
    return net.d_g / _spectral_efficiency(radio, net)


def c3_ratio(q: float) -> float:
    """Model footprint ratio of a q-bit model to full precision."""
    return q / FULL_PRECISION_BITS


def memory_feasible(device: DeviceProfile, q: float, rel_tol: float = 1e-9) -> bool:
    """Whether c3(q)*U_i <= C_i holds."""
    return c3_ratio(q) * device.model_size <= device.mem_capacity * (1.0 + rel_tol)


def max_feasible_bits(device: DeviceProfile, q_set: Iterable[int]) -> int:
    """
    Largest bit-width in q_set that fits the device memory.

    Raises:
        MemoryInfeasibleError: If no bit-width fits.
    """
    feasible = [q for q in q_set if memory_feasible(device, q)]
    if not feasible:
        raise MemoryInfeasibleError(f"Device {device.id}: no bit-width in {sorted(q_set)} fits memory")
    return max(feasible)


def dbm_to_watts(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


def mhz_to_hz(mhz: float) -> float:
    return mhz * 1e6


def mb_to_bits(mb: float) -> float:
    return mb * 8e6

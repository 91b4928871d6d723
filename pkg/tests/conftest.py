"""Shared fixtures for eefwq tests."""

import pytest
import yaml

from eefwq.convergence import ConvergenceCoeffs
from eefwq.models import DeviceProfile, GpuProfile, NetworkConfig, RadioProfile, dbm_to_watts, mb_to_bits
from eefwq.solver import Scenario

DEFAULT_COEFFS = ConvergenceCoeffs(a1=13.765, a2=1.023, a3=0.0435, eps=0.05, m_batch=32, s_scale=100.0)


@pytest.fixture(scope="session")
def default_strings():
    """Load strings from package defaults.yaml."""
    from importlib.resources import files

    _PKG = files("eefwq")
    defaults_text = _PKG.joinpath("defaults.yaml").read_text(encoding="utf-8")
    defaults = yaml.safe_load(defaults_text)
    return defaults["strings"]


def make_gpu(f_core=1.1e9, f_mem=1.5e9, t0=0.0):
    return GpuProfile(
        p_g0=3.0,
        zeta_mem=2e-9,
        zeta_core=4e-9,
        v_core=0.9,
        f_core=f_core,
        f_mem=f_mem,
        t0=t0,
        theta_mem=1e9,
        theta_core=2e9,
    )


def make_device(i, n, p_dbm=20.0, h=1e-3, f_core=1.1e9, f_mem=1.5e9, capacity_mb=1800.0, model_size_mb=1800.0):
    return DeviceProfile(
        id=i,
        pi_weight=1.0 / n,
        gpu=make_gpu(f_core, f_mem),
        radio=RadioProfile(p_cm=dbm_to_watts(p_dbm), h=h),
        mem_capacity=mb_to_bits(capacity_mb),
        model_size=mb_to_bits(model_size_mb),
    )


def make_net(b_max=1e8, d_g=1.92e9):
    return NetworkConfig(b_max=b_max, n0=dbm_to_watts(-174.0), d_g=d_g)


def make_scenario(devices=None, n=2, coeffs=DEFAULT_COEFFS, t_max=30000.0, b_max=1e8, q_set=(8, 16, 32)):
    """Small scenario; without devices, n devices with spread channels and clocks."""
    if devices is None:
        devices = [
            make_device(i, n, p_dbm=19.0 + i, h=1e-3 * (0.3 + 0.7 * i), f_core=1.05e9 + 5e7 * i)
            for i in range(n)
        ]
    return Scenario(devices=tuple(devices), net=make_net(b_max), coeffs=coeffs, t_max=t_max, q_set=q_set)


def write_yaml(path, data):
    with open(path, "w") as f:
        yaml.dump(data, f)

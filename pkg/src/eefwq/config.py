"""Configuration handling for eefwq."""

import copy
import os
from dataclasses import dataclass, field
from importlib.resources import files
from pathlib import Path
from typing import Any, Optional

import yaml

from eefwq.convergence import ConvergenceCoeffs
from eefwq.errors import ConfigError
from eefwq.flsim import DataSpec, SimConfig
from eefwq.harness import GenerationParams, ScenarioTemplate, StrategyKind, SweepSpec, build_scenario, gen_devices
from eefwq.models import DeviceProfile, GpuProfile, RadioProfile, dbm_to_watts, mb_to_bits, mhz_to_hz
from eefwq.results import config_digest
from eefwq.solver import Scenario, SolverSettings

_PKG = files("eefwq")

_DEVICE_FIELDS = ("p_cm_dbm", "channel_gain", "f_core_mhz", "f_mem_mhz", "p_g0_w", "zeta_mem", "zeta_core",
                  "v_core", "theta_mem", "theta_core", "capacity_mb", "model_size_mb")


@dataclass
class VerifyConfig:
    grid_h: int = 64
    grid_b: int = 10


@dataclass
class AppConfig:
    """Application configuration, SI units throughout."""
    template: ScenarioTemplate
    settings: SolverSettings
    simulation: SimConfig
    sweep: dict
    verify: VerifyConfig
    fit_targets: list[float]
    seed: int
    workers: int = 1
    devices: Optional[list[DeviceProfile]] = None
    strings: dict = field(default_factory=dict)
    digest: str = ""
    path: Optional[Path] = None
    raw: dict = field(default_factory=dict)

    def scenario(self, seed: Optional[int] = None) -> Scenario:
        """Explicit devices if configured, otherwise devices drawn with the given seed."""
        seed = self.seed if seed is None else seed
        if self.devices is not None:
            t = self.template
            return build_scenario(self.devices, t.network(), t.coeffs, t.t_max, t.q_set)
        return self.template.draw(seed)

    def sweep_spec(self, seed: Optional[int] = None, strategies: Optional[list[str]] = None) -> SweepSpec:
        names = strategies or self.sweep["strategies"]
        return SweepSpec(
            kind=self.sweep["kind"],
            values=tuple(self.sweep["values"]),
            repeats=self.sweep["repeats"],
            base=self.template,
            seed=self.seed if seed is None else seed,
            strategies=tuple(StrategyKind(s) for s in names),
            cross_check=self.sweep["cross_check"],
            cross_check_rounds=self.sweep["cross_check_rounds"],
        )


def _deep_merge(base: dict, override: dict) -> dict:
    """
    Deep-merge override into base (both dicts). Returns a new dict.
    Override values take precedence.
    """
    result = copy.deepcopy(base)
    for key, value in override.items():
        if key in result and isinstance(result[key], dict) and isinstance(value, dict):
            result[key] = _deep_merge(result[key], value)
        else:
            result[key] = copy.deepcopy(value)
    return result


def load_defaults() -> dict:
    return yaml.safe_load(_PKG.joinpath("defaults.yaml").read_text(encoding="utf-8")) or {}


def _require(section: dict, key: str, path: str, kind: type = float) -> Any:
    """Fetch section[key] converted to kind; ConfigError names the dotted path."""
    if not isinstance(section, dict) or section.get(key) is None:
        raise ConfigError(f"Missing required field '{path}.{key}' in config")
    value = section[key]
    try:
        if kind is bool:
            if not isinstance(value, bool):
                raise TypeError
            return value
        if kind is list:
            if not isinstance(value, list) or not value:
                raise TypeError
            return value
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"Invalid value for '{path}.{key}': {value!r}")


def _section(data: dict, name: str) -> dict:
    section = data.get(name)
    if not isinstance(section, dict):
        raise ConfigError(f"Missing '{name}' section in config")
    return section


def _build(path: str, factory, **kwargs):
    """Construct a model object, re-raising validation errors with the config path."""
    try:
        return factory(**kwargs)
    except ValueError as e:
        raise ConfigError(f"Invalid '{path}': {e}")


def _parse_generation(gen: dict) -> GenerationParams:
    p = "devices.generate"
    return _build(p, GenerationParams,
                  p_cm_dbm=tuple(float(x) for x in _require(gen, "p_cm_dbm", p, list)),
                  path_loss=_require(gen, "path_loss", p),
                  f_core_mhz=tuple(float(x) for x in _require(gen, "f_core_mhz", p, list)),
                  f_mem_mhz=tuple(float(x) for x in _require(gen, "f_mem_mhz", p, list)),
                  p_g0=_require(gen, "p_g0_w", p),
                  zeta_mem=_require(gen, "zeta_mem", p),
                  zeta_core=_require(gen, "zeta_core", p),
                  v_core=_require(gen, "v_core", p),
                  t0=_require(gen, "t0_s", p),
                  theta_mem=_require(gen, "theta_mem", p),
                  theta_core=_require(gen, "theta_core", p),
                  min_capacity_mb=_require(gen, "min_capacity_mb", p),
                  group_offsets=tuple(float(x) for x in _require(gen, "group_offsets_mb", p, list)),
                  model_size_mb=_require(gen, "model_size_mb", p))


def _parse_devices(items: list) -> list[DeviceProfile]:
    if not items:
        raise ConfigError("Config 'devices' list is empty")
    devices = []
    for i, item in enumerate(items):
        p = f"devices[{i}]"
        values = {name: _require(item, name, p) for name in _DEVICE_FIELDS}
        gpu = _build(p, GpuProfile,
                     p_g0=values["p_g0_w"], zeta_mem=values["zeta_mem"], zeta_core=values["zeta_core"],
                     v_core=values["v_core"], f_core=mhz_to_hz(values["f_core_mhz"]),
                     f_mem=mhz_to_hz(values["f_mem_mhz"]), t0=float(item.get("t0_s", 0.0)),
                     theta_mem=values["theta_mem"], theta_core=values["theta_core"])
        radio = _build(p, RadioProfile, p_cm=dbm_to_watts(values["p_cm_dbm"]), h=values["channel_gain"])
        devices.append(_build(p, DeviceProfile,
                              id=item.get("id", i),
                              pi_weight=float(item.get("pi_weight", 1.0 / len(items))),
                              gpu=gpu, radio=radio,
                              mem_capacity=mb_to_bits(values["capacity_mb"]),
                              model_size=mb_to_bits(values["model_size_mb"])))
    return devices


def _parse_simulation(sim: dict, seed: int, template: ScenarioTemplate) -> SimConfig:
    p = "simulation"
    data = _section(sim, "data") if "data" in sim else {}
    n = _require(sim, "n_devices", p, int)
    devices = net = None
    if sim.get("energy", False):
        devices = tuple(gen_devices(n, template.heterogeneity, seed, template.generation))
        net = template.network()
    spec = _build(f"{p}.data", DataSpec,
                  kind=str(data.get("kind", "synthetic")),
                  n_samples=int(data.get("n_samples", 2000)),
                  dim=int(data.get("dim", 20)),
                  n_classes=int(data.get("n_classes", 10)),
                  separation=float(data.get("separation", 1.0)),
                  images=data.get("images"),
                  labels=data.get("labels"))
    return _build(p, SimConfig,
                  n_devices=n,
                  h_steps=_require(sim, "h_steps", p, int),
                  rounds=_require(sim, "rounds", p, int),
                  batch=_require(sim, "batch", p, int),
                  lr=_require(sim, "lr", p),
                  q_per_device=tuple(int(q) for q in _require(sim, "bits", p, list)),
                  seed=seed,
                  data=spec,
                  label_skew=_require(sim, "label_skew", p, int),
                  model=str(sim.get("model", "logistic")),
                  hidden=int(sim.get("hidden", 32)),
                  l2=float(sim.get("l2", 0.0)),
                  bypass_full_precision=bool(sim.get("bypass_full_precision", True)),
                  test_fraction=float(sim.get("test_fraction", 0.2)),
                  devices=devices,
                  net=net)


def _parse_sweep(sweep: dict) -> dict:
    p = "sweep"
    strategies = [str(s) for s in _require(sweep, "strategies", p, list)]
    for name in strategies:
        try:
            StrategyKind(name)
        except ValueError:
            raise ConfigError(f"Unknown strategy '{name}' in 'sweep.strategies'")
    return {
        "kind": str(_require(sweep, "kind", p, str)),
        "values": [float(v) for v in _require(sweep, "values", p, list)],
        "repeats": _require(sweep, "repeats", p, int),
        "strategies": strategies,
        "cross_check": bool(sweep.get("cross_check", False)),
        "cross_check_rounds": int(sweep.get("cross_check_rounds", 20)),
    }


def load_config(config_path: Optional[str] = None, seed: Optional[int] = None) -> AppConfig:
    """
    Load configuration from a YAML file.

    Loads defaults from defaults.yaml first, then merges the user config on top.
    Units are converted to SI here. EEFWQ_SEED overrides the configured seed
    and EEFWQ_WORKERS sets the sweep worker count; an explicit seed argument
    wins over both.

    Args:
        config_path: Path to config file. Without one, the shipped defaults are used.
        seed: Root seed overriding the environment and the config.

    Returns:
        AppConfig object with loaded configuration.

    Raises:
        FileNotFoundError: If config file doesn't exist.
        ConfigError: If a field is missing or invalid; the message names it.
    """
    defaults = load_defaults()

    raw_bytes = b""
    data: dict = {}
    resolved = None
    if config_path is not None:
        resolved = Path(config_path)
        if not resolved.exists():
            raise FileNotFoundError(f"Config file not found: {resolved}")
        raw_bytes = resolved.read_bytes()
        try:
            data = yaml.safe_load(raw_bytes.decode("utf-8")) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Config file {resolved} is not valid YAML: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {resolved} must contain a mapping")

    # Merge: user config overrides defaults
    merged = _deep_merge(defaults, data)

    if seed is None:
        seed = int(os.environ.get("EEFWQ_SEED", merged.get("seed", 0)))
    try:
        workers = int(os.environ.get("EEFWQ_WORKERS", "1"))
    except ValueError:
        raise ConfigError(f"EEFWQ_WORKERS must be an integer, got {os.environ['EEFWQ_WORKERS']!r}")

    net = _section(merged, "network")
    co = _section(merged, "coeffs")
    sc = _section(merged, "scenario")
    coeffs = _build("coeffs", ConvergenceCoeffs,
                    a1=_require(co, "a1", "coeffs"),
                    a2=_require(co, "a2", "coeffs"),
                    a3=_require(co, "a3", "coeffs"),
                    eps=_require(co, "eps", "coeffs"),
                    m_batch=_require(co, "m_batch", "coeffs", int),
                    s_scale=_require(co, "s_scale", "coeffs"))

    devices_section = merged.get("devices")
    explicit = None
    if isinstance(devices_section, list):
        explicit = _parse_devices(devices_section)
        gen_section = defaults["devices"]["generate"]
    elif isinstance(devices_section, dict) and "list" in devices_section:
        explicit = _parse_devices(devices_section["list"])
        gen_section = devices_section.get("generate", defaults["devices"]["generate"])
    elif isinstance(devices_section, dict) and isinstance(devices_section.get("generate"), dict):
        gen_section = devices_section["generate"]
    else:
        raise ConfigError("Missing 'devices' section in config")

    template = _build("network", ScenarioTemplate,
                      n_devices=len(explicit) if explicit else _require(gen_section, "n", "devices.generate", int),
                      heterogeneity=_require(gen_section, "heterogeneity", "devices.generate"),
                      b_max=mhz_to_hz(_require(net, "bandwidth_mhz", "network")),
                      n0=dbm_to_watts(_require(net, "noise_dbm", "network")),
                      d_g=_require(net, "payload_bits", "network"),
                      coeffs=coeffs,
                      t_max=_require(sc, "t_max_s", "scenario"),
                      q_set=tuple(int(q) for q in _require(sc, "q_set", "scenario", list)),
                      rate_log=str(net.get("rate_log", "ln")),
                      generation=_parse_generation(gen_section))

    solver = _section(merged, "solver")
    settings = _build("solver", SolverSettings,
                      iota1=_require(solver, "iota1", "solver"),
                      iota2=_require(solver, "iota2", "solver"),
                      rel_tol=_require(solver, "rel_tol", "solver"),
                      obj_tol=_require(solver, "obj_tol", "solver"),
                      max_bisect=_require(solver, "max_bisect", "solver", int),
                      max_outer=_require(solver, "max_outer", "solver", int),
                      h_cap=_require(solver, "h_cap", "solver"),
                      bandwidth_rule=str(_require(solver, "bandwidth_rule", "solver", str)),
                      refine=bool(solver.get("refine", True)))

    verify = _section(merged, "verify")

    # Merge strings: defaults + user overrides
    strings = _deep_merge(defaults.get("strings", {}), data.get("strings", {}) or {})

    return AppConfig(
        template=template,
        settings=settings,
        simulation=_parse_simulation(_section(merged, "simulation"), seed, template),
        sweep=_parse_sweep(_section(merged, "sweep")),
        verify=VerifyConfig(grid_h=_require(verify, "grid_h", "verify", int),
                            grid_b=_require(verify, "grid_b", "verify", int)),
        fit_targets=[float(t) for t in _require(_section(merged, "fit"), "targets", "fit", list)],
        seed=seed,
        workers=max(1, workers),
        devices=explicit,
        strings=strings,
        digest=config_digest(raw_bytes),
        path=resolved,
        raw=merged,
    )

"""Energy-minimising allocation of local steps, bit-widths and bandwidth.

The relaxed problem alternates between two subproblems:

* H-subproblem: eps_q is tightened to its minimum for the current bit-widths
  and H is the positive stationary point of the convex round-energy function
  Psi(H), clipped to the deadline-feasible interval.
* (q, B)-subproblem: bit-widths in log2 space (q~ = log2 q) come from the
  stationarity condition with a bisection on the quantization-error
  multiplier; bandwidth comes from the square-root KKT rule with a bisection
  on the bandwidth multiplier and deadline-driven floors.

Results are rounded to an integer H and bit-widths from the admissible set,
and the bandwidth is re-solved for the rounded point.
"""

import itertools
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq

from eefwq.convergence import ConvergenceCoeffs, error_bound, quant_error_term, rounds_required
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
    NetworkConfig,
    alpha1,
    c3_ratio,
    gpu_power,
    linearize_gpu_time,
    max_feasible_bits,
    memory_feasible,
)

LN2 = math.log(2.0)
DEFAULT_Q_SET = (8, 16, 32)


@dataclass(frozen=True)
class SolverSettings:
    """Tolerances and caps of the solver."""
    iota1: float = 1e-8
    iota2: float = 1e-8
    rel_tol: float = 1e-6
    obj_tol: float = 1e-6
    max_bisect: int = 200
    max_outer: int = 100
    h_cap: float = 1e4
    bandwidth_rule: str = "kkt"
    refine: bool = True

    def __post_init__(self):
        if self.bandwidth_rule not in ("kkt", "linear"):
            raise ValueError(f"bandwidth_rule must be 'kkt' or 'linear', got {self.bandwidth_rule!r}")


DEFAULT_SETTINGS = SolverSettings()


class _DeviceTerms:
    """Per-device constants as arrays, in scenario order."""

    def __init__(self, devices: Sequence[DeviceProfile], net: NetworkConfig, q_set: Sequence[int]):
        self.pi = np.array([d.pi_weight for d in devices])
        self.p_cp = np.array([gpu_power(d.gpu) for d in devices])
        lin = [linearize_gpu_time(d.gpu) for d in devices]
        self.c1 = np.array([c for c, _ in lin])
        self.c2 = np.array([c for _, c in lin])
        self.p_cm = np.array([d.radio.p_cm for d in devices])
        self.alpha = np.array([alpha1(d.radio, net) for d in devices])
        capacity_bits = np.array([32.0 * d.mem_capacity / d.model_size for d in devices])
        self.qt_min = math.log2(min(q_set))
        self.qt_max = np.minimum(math.log2(max(q_set)), np.log2(capacity_bits))

    def t_cp(self, q) -> np.ndarray:
        return self.c2 * np.asarray(q, dtype=np.float64) + self.c1


@dataclass(frozen=True)
class Scenario:
    """
    One instance of the energy-minimisation problem.

    Raises (on construction):
        ValueError: Structural problems (no devices, weights not summing to 1).
        DeadlineInfeasibleError: t_max <= 0.
        MemoryInfeasibleError: A device fits no bit-width of q_set.
    """
    devices: tuple[DeviceProfile, ...]
    net: NetworkConfig
    coeffs: ConvergenceCoeffs
    t_max: float
    q_set: tuple[int, ...] = DEFAULT_Q_SET

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        object.__setattr__(self, "q_set", tuple(sorted(int(q) for q in self.q_set)))
        if not self.devices:
            raise ValueError("Scenario needs at least one device")
        if not self.q_set or self.q_set[0] < 2 or self.q_set[-1] > 32:
            raise ValueError(f"q_set must be non-empty within [2, 32], got {self.q_set}")
        total = sum(d.pi_weight for d in self.devices)
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"Device weights must sum to 1, got {total:.8f}")
        if self.t_max <= 0:
            raise DeadlineInfeasibleError(f"Deadline must be positive, got {self.t_max}")
        for device in self.devices:
            max_feasible_bits(device, self.q_set)

    @property
    def n(self) -> int:
        return len(self.devices)

    @cached_property
    def terms(self) -> _DeviceTerms:
        return _DeviceTerms(self.devices, self.net, self.q_set)

    def max_bits(self) -> list[int]:
        return [max_feasible_bits(d, self.q_set) for d in self.devices]


@dataclass
class DeviceEnergy:
    """Totals over the whole training (energies) and per-round times of one device."""
    comp_energy: float
    comm_energy: float
    comp_time: float
    comm_time: float


@dataclass
class FeasibilityReport:
    """Signed slack per constraint; negative means violated."""
    slacks: dict[str, float]
    scales: dict[str, float]
    rel_tol: float = 1e-6

    def violated(self) -> list[str]:
        return [name for name, slack in self.slacks.items() if slack < -self.rel_tol * self.scales[name]]

    @property
    def feasible(self) -> bool:
        return not self.violated()

    def first_violation(self) -> Optional[str]:
        names = self.violated()
        return names[0] if names else None


@dataclass
class Allocation:
    """Solver output. Energies in J, bandwidth in Hz, times in s."""
    h: float
    eps_q: float
    q: list
    b: np.ndarray
    k_rounds: float
    objective: float
    per_device: list[DeviceEnergy]
    report: Optional[FeasibilityReport] = None
    omega: Optional[float] = None
    converged: bool = True
    iterations: int = 0
    history: list[float] = field(default_factory=list)
    relaxed: dict = field(default_factory=dict)
    stop_reason: str = ""

    @property
    def k_ceil(self) -> int:
        return int(math.ceil(self.k_rounds - 1e-9))


@dataclass
class QuantSolution:
    q_tilde: np.ndarray
    mu1: float
    mu2: np.ndarray
    phi: float
    stationarity: np.ndarray
    deadline_slack: np.ndarray


@dataclass
class BandwidthSolution:
    b: np.ndarray
    omega: float
    b_min: np.ndarray


# --- objective and constraints -------------------------------------------------


def objective_value(scenario: Scenario, h: float, eps_q: float, q, b) -> float:
    """K(H, eps_q) * sum_i (p_cm,i alpha_i / b_i + H p_cp,i (c_i2 q_i + c_i1))."""
    t = scenario.terms
    k = rounds_required(h, eps_q, scenario.coeffs)
    b = np.asarray(b, dtype=np.float64)
    per_round = np.sum(t.p_cm * t.alpha / b + h * t.p_cp * t.t_cp(q))
    return float(k * per_round)


def objective(scenario: Scenario, allocation: Allocation) -> float:
    """Total training energy of an allocation (J)."""
    return objective_value(scenario, allocation.h, allocation.eps_q, allocation.q, allocation.b)


def eps_q_min(q, coeffs: ConvergenceCoeffs, devices: Sequence[DeviceProfile]) -> float:
    """Smallest admissible eps_q for bit-widths q (real values allowed)."""
    return quant_error_term([d.pi_weight for d in devices], [float(x) for x in q], coeffs)


def check_feasible(scenario: Scenario, allocation: Allocation, rel_tol: float = 1e-6) -> FeasibilityReport:
    """
    Evaluate the memory, quantization-error, convergence, deadline and
    bandwidth constraints of an allocation.
    """
    t = scenario.terms
    coeffs = scenario.coeffs
    q = np.asarray(allocation.q, dtype=np.float64)
    b = np.asarray(allocation.b, dtype=np.float64)
    caps = np.array([d.mem_capacity for d in scenario.devices])
    sizes = np.array([d.model_size for d in scenario.devices])

    memory = caps - np.array([c3_ratio(x) for x in q]) * sizes
    k = allocation.k_rounds
    round_time = allocation.h * t.t_cp(q) + t.alpha / b

    slacks = {
        "memory": float(np.min(memory / caps)),
        "quant_error": allocation.eps_q - eps_q_min(q, coeffs, scenario.devices),
        "convergence": coeffs.eps - error_bound(allocation.h, k, allocation.eps_q, coeffs),
        "deadline": scenario.t_max - k * float(np.max(round_time)),
        "bandwidth": scenario.net.b_max - float(np.sum(b)),
    }
    scales = {
        "memory": 1.0,
        "quant_error": coeffs.eps,
        "convergence": coeffs.eps,
        "deadline": scenario.t_max,
        "bandwidth": scenario.net.b_max,
    }
    return FeasibilityReport(slacks=slacks, scales=scales, rel_tol=rel_tol)


# --- H-subproblem --------------------------------------------------------------


def _stationary_h(e_cm: float, e_cp: float, a1: float, a2: float) -> float:
    """Positive root of 2 a1 e_cp H^2 + a1 e_cm H - a2 e_cm = 0 (rationalised form)."""
    if e_cm <= 0 or a2 <= 0:
        return 0.0
    if a1 <= 0:
        return math.inf
    return 2.0 * a2 * e_cm / (a1 * e_cm + math.sqrt((a1 * e_cm) ** 2 + 8.0 * a1 * a2 * e_cp * e_cm))


def _psi_derivative(h: float, e_cm: float, e_cp: float, a1: float, a2: float) -> float:
    """dPsi/dH up to the positive factor 1/(M (eps - eps_q)^2)."""
    return 2 * a1 ** 2 * h * e_cp + a1 ** 2 * e_cm + 2 * a1 * a2 * e_cp - a2 ** 2 * e_cm / h ** 2


def psi_minimizer_numeric(e_cm: float, e_cp: float, coeffs: ConvergenceCoeffs) -> float:
    """Stationary point of Psi found by bracketed root finding on dPsi/dH."""
    a1, a2 = coeffs.a1, coeffs.a2
    if e_cm <= 0 or a2 <= 0:
        return 0.0
    lo, hi = 1e-12, 1.0
    while _psi_derivative(lo, e_cm, e_cp, a1, a2) > 0:
        lo /= 10.0
    while _psi_derivative(hi, e_cm, e_cp, a1, a2) < 0:
        hi *= 2.0
    return brentq(_psi_derivative, lo, hi, args=(e_cm, e_cp, a1, a2), xtol=1e-300, rtol=4 * np.finfo(float).eps,
                  maxiter=500)


def cardano_h(e_cm: float, e_cp: float, coeffs: ConvergenceCoeffs,
              h_min: Optional[float] = None, h_max: Optional[float] = None) -> float:
    """
    Minimiser of Psi(H) = (a1 H + a2)^2 (e_cm + H e_cp) / (M H (eps - eps_q)^2).

    Solves the stationarity cubic H^3 + alpha H^2 + beta = 0 with
    alpha = (a1 e_cm + 2 a2 e_cp)/(2 a1 e_cp) and beta = -a2^2 e_cm/(2 a1^2 e_cp)
    by Cardano's method (trigonometric branch when all three roots are real),
    takes the positive root and clips it to [h_min, h_max] when given.

    With e_cm == 0, Psi is increasing and the result is 0 (or h_min).
    """
    if e_cp <= 0:
        raise ValueError(f"e_cp must be > 0, got {e_cp}")
    if e_cm < 0:
        raise ValueError(f"e_cm must be >= 0, got {e_cm}")
    a1, a2 = coeffs.a1, coeffs.a2
    if a1 <= 0:
        raise ValueError("cardano_h needs a1 > 0")

    if e_cm == 0 or a2 == 0:
        root = 0.0
    else:
        alpha = (a1 * e_cm + 2 * a2 * e_cp) / (2 * a1 * e_cp)
        beta = -a2 ** 2 * e_cm / (2 * a1 ** 2 * e_cp)
        # Depressed cubic t^3 + p t + r = 0 with H = t - alpha/3.
        p = -alpha ** 2 / 3.0
        r = 2 * alpha ** 3 / 27.0 + beta
        disc = alpha ** 3 * beta / 27.0 + beta ** 2 / 4.0
        if disc < 0:
            arg = np.clip(3 * r / (2 * p) * math.sqrt(-3 / p), -1.0, 1.0)
            t = 2 * math.sqrt(-p / 3) * math.cos(math.acos(arg) / 3.0)
        else:
            sq = math.sqrt(disc)
            t = float(np.cbrt(-r / 2 + sq) + np.cbrt(-r / 2 - sq))
        root = t - alpha / 3.0
        # Newton polish on the cubic, then guard against a wrong branch.
        for _ in range(3):
            f = root ** 3 + alpha * root ** 2 + beta
            df = 3 * root ** 2 + 2 * alpha * root
            if df == 0:
                break
            root -= f / df
        reference = _stationary_h(e_cm, e_cp, a1, a2)
        if not (math.isfinite(root) and root > 0) or abs(root - reference) > 1e-9 * reference:
            root = psi_minimizer_numeric(e_cm, e_cp, coeffs)

    if h_min is not None:
        root = max(root, h_min)
    if h_max is not None:
        root = min(root, h_max)
    return root


def h_bounds(scenario: Scenario, q, b, eps_q: float,
             settings: SolverSettings = DEFAULT_SETTINGS) -> tuple[float, float]:
    """
    Interval of H satisfying every device's deadline for fixed (q, b, eps_q).

    rho_i(H) = (a1 H + a2)^2 (T_cm,i/H + T_cp,i) must stay below
    M (eps - eps_q)^2 t_max. Each rho_i is convex, so its feasible set is an
    interval found by brentq on both sides of its minimiser. The result is the
    intersection over devices, clipped to [1, h_cap].

    Raises:
        DeadlineInfeasibleError: If the intersection is empty.
    """
    coeffs = scenario.coeffs
    t = scenario.terms
    gap = coeffs.eps - eps_q
    if gap <= 0:
        rounds_required(1.0, eps_q, coeffs)
    threshold = coeffs.m_batch * gap ** 2 * scenario.t_max
    t_cp = t.t_cp(q)
    t_cm = t.alpha / np.asarray(b, dtype=np.float64)
    a1, a2 = coeffs.a1, coeffs.a2
    cap = settings.h_cap

    lo_all, hi_all = 1.0, cap
    for i, device in enumerate(scenario.devices):
        def excess(h, i=i):
            return (a1 * h + a2) ** 2 * (t_cm[i] / h + t_cp[i]) - threshold

        h_star = min(max(_stationary_h(t_cm[i], t_cp[i], a1, a2), 1.0), cap)
        lowest = excess(h_star)
        if lowest > settings.rel_tol * threshold:
            raise DeadlineInfeasibleError(
                f"Device {device.id}: no H meets the deadline (round-time floor exceeds t_max)")
        if lowest >= 0:
            lo_i = hi_i = h_star
        else:
            lo_i = 1.0 if excess(1.0) <= 0 else brentq(excess, 1.0, h_star, xtol=1e-12)
            hi_i = cap if excess(cap) <= 0 else brentq(excess, h_star, cap, xtol=1e-12)
        lo_all = max(lo_all, lo_i)
        hi_all = min(hi_all, hi_i)

    if lo_all > hi_all * (1 + 1e-12):
        raise DeadlineInfeasibleError("Per-device deadline intervals for H do not intersect")
    return lo_all, max(lo_all, hi_all)


def solve_h(scenario: Scenario, q, b, settings: SolverSettings = DEFAULT_SETTINGS) -> tuple[float, float]:
    """
    Optimal (H, eps_q) for fixed bit-widths and bandwidth.

    eps_q is set to its minimum for q; H is the Cardano stationary point
    clipped to the deadline interval.
    """
    t = scenario.terms
    eps_q = eps_q_min(q, scenario.coeffs, scenario.devices)
    h_lo, h_hi = h_bounds(scenario, q, b, eps_q, settings)
    e_cm = float(np.sum(t.p_cm * t.alpha / np.asarray(b, dtype=np.float64)))
    e_cp = float(np.sum(t.p_cp * t.t_cp(q)))
    return cardano_h(e_cm, e_cp, scenario.coeffs, h_lo, h_hi), eps_q


# --- (q, B)-subproblem ---------------------------------------------------------


def _qtilde_from_lambda(lam) -> np.ndarray:
    """Root x > 1 of x^2 - (2 + lam) x + 1 = 0, mapped to q~ = log2(log2 x)."""
    lam = np.asarray(lam, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        x_minus_1 = (lam + np.sqrt(lam * lam + 4.0 * lam)) / 2.0
        log2_x = np.where(np.isinf(lam), np.inf, np.log1p(x_minus_1) / LN2)
        return np.log2(log2_x)


def _stationarity_lambda(mu1: float, mu2, pi, p_cp, c2, coeffs: ConvergenceCoeffs, r_total: float):
    with np.errstate(divide="ignore"):
        return LN2 * mu1 * coeffs.a3 * pi ** 2 * coeffs.s_scale / (r_total * c2 * (p_cp + mu2))


def stationarity_qtilde(mu1: float, mu2_i: float, device: DeviceProfile, coeffs: ConvergenceCoeffs,
                        r_total: float) -> float:
    """
    Unclipped q~ solving the bit-width stationarity condition for one device.

    R c2 (p_cp + mu2) = ln2 mu1 a3 pi^2 s x/(x - 1)^2 with x = 2^(2^q~), i.e.
    x^2 - (2 + lambda) x + 1 = 0 with
    lambda = ln2 mu1 a3 pi^2 s / (R c2 (p_cp + mu2)).

    Raises:
        InvalidMultiplierError: If lambda <= 0.
    """
    if mu2_i < 0:
        raise InvalidMultiplierError(f"mu2 must be >= 0, got {mu2_i}")
    _, c2 = linearize_gpu_time(device.gpu)
    lam = float(_stationarity_lambda(mu1, mu2_i, device.pi_weight, gpu_power(device.gpu), c2, coeffs, r_total))
    if not lam > 0:
        raise InvalidMultiplierError(f"Stationarity parameter must be positive, got {lam}")
    return float(_qtilde_from_lambda(lam))


def stationarity_residual(q_tilde: float, mu1: float, mu2_i: float, device: DeviceProfile,
                          coeffs: ConvergenceCoeffs, r_total: float) -> float:
    """R c2 (p_cp + mu2) - ln2 mu1 a3 pi^2 s x/(x - 1)^2, increasing in q~."""
    _, c2 = linearize_gpu_time(device.gpu)
    y = 2.0 ** q_tilde * LN2
    weight = math.exp(y) / math.expm1(y) ** 2
    return (r_total * c2 * (gpu_power(device.gpu) + mu2_i)
            - LN2 * mu1 * coeffs.a3 * device.pi_weight ** 2 * coeffs.s_scale * weight)


def stationarity_qtilde_numeric(mu1: float, mu2_i: float, device: DeviceProfile, coeffs: ConvergenceCoeffs,
                                r_total: float) -> float:
    """Bracketed root of stationarity_residual; the reference for stationarity_qtilde."""
    lo, hi = -40.0, 9.9
    args = (mu1, mu2_i, device, coeffs, r_total)
    if stationarity_residual(lo, *args) > 0 or stationarity_residual(hi, *args) < 0:
        raise InvalidMultiplierError("Stationarity root lies outside the supported q~ range")
    return brentq(stationarity_residual, lo, hi, args=args, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=500)


def _phi(scenario: Scenario, q_tilde: np.ndarray) -> float:
    return eps_q_min(np.exp2(q_tilde), scenario.coeffs, scenario.devices)


def solve_q_given_b(scenario: Scenario, h: float, eps_q: float, b_prev,
                    settings: SolverSettings = DEFAULT_SETTINGS) -> QuantSolution:
    """
    Bit-widths (log2 space) minimising compute energy for fixed H, eps_q and bandwidth.

    Bisection on mu1 makes phi(q~) = eps_q; each q~_i is the stationarity value
    clipped to [q~_min, q~_max,i], where q~_max,i also reflects the device's
    deadline with b_prev. Devices pinned by their deadline get the mu2_i that
    restores stationarity.

    Raises:
        DeadlineInfeasibleError: If even the smallest bit-width misses the deadline.
        QuantizationErrorInfeasibleError: If the largest admissible bit-widths still exceed eps_q.
    """
    t = scenario.terms
    coeffs = scenario.coeffs
    k = rounds_required(h, eps_q, coeffs)
    r_total = h * k
    b_prev = np.asarray(b_prev, dtype=np.float64)

    # Deadline: R (c2 2^q~ + c1) <= t_max - K alpha / b.
    budget = (scenario.t_max - k * t.alpha / b_prev) / r_total - t.c1
    with np.errstate(divide="ignore", invalid="ignore"):
        deadline_q = np.where(t.c2 > 0, budget / t.c2, np.where(budget >= 0, np.inf, -np.inf))
    if np.any(deadline_q < 2.0 ** t.qt_min * (1 - 1e-12)):
        raise DeadlineInfeasibleError("Smallest bit-width misses the deadline with the current bandwidth")
    with np.errstate(divide="ignore"):
        deadline_qt = np.log2(deadline_q)
    upper = np.minimum(t.qt_max, deadline_qt)
    if np.any(upper < t.qt_min):
        raise MemoryInfeasibleError("A device cannot hold the smallest bit-width")
    lower = np.full(scenario.n, t.qt_min)

    if _phi(scenario, upper) > eps_q * (1 + settings.rel_tol):
        raise QuantizationErrorInfeasibleError(
            f"Quantization error at the largest bit-widths exceeds eps_q = {eps_q:.6g}")

    def q_at(mu: float) -> np.ndarray:
        lam = _stationarity_lambda(mu, 0.0, t.pi, t.p_cp, t.c2, coeffs, r_total)
        return np.clip(_qtilde_from_lambda(lam), lower, upper)

    mu1 = 0.0
    q_tilde = lower.copy()
    if _phi(scenario, upper) > eps_q:
        # Accepted within rel_tol: every device sits at its cap.
        hi = 1.0
        for _ in range(settings.max_bisect):
            if np.all(q_at(hi) >= upper):
                break
            hi *= 2.0
        mu1 = hi
        q_tilde = upper.copy()
    elif _phi(scenario, lower) > eps_q:
        lo, hi = 1.0, 1.0
        for _ in range(settings.max_bisect):
            if _phi(scenario, q_at(hi)) <= eps_q:
                break
            lo, hi = hi, hi * 2.0
        else:
            raise QuantizationErrorInfeasibleError(f"No multiplier up to {hi:.3g} meets eps_q = {eps_q:.6g}")
        if lo == hi:
            while _phi(scenario, q_at(lo)) <= eps_q and lo > 1e-300:
                hi, lo = lo, lo / 2.0
        for _ in range(settings.max_bisect):
            if hi / lo - 1.0 <= min(settings.iota1, 1e-13):
                break
            mid = math.sqrt(lo * hi)
            if _phi(scenario, q_at(mid)) > eps_q:
                lo = mid
            else:
                hi = mid
        mu1 = hi
        q_tilde = q_at(hi)

    # Multipliers of binding deadline caps and stationarity residuals.
    x_term = np.exp(np.exp2(q_tilde) * LN2) / np.expm1(np.exp2(q_tilde) * LN2) ** 2
    pull = LN2 * mu1 * coeffs.a3 * t.pi ** 2 * coeffs.s_scale * x_term
    pinned_by_deadline = (deadline_qt < t.qt_max) & np.isclose(q_tilde, deadline_qt, rtol=0, atol=1e-12)
    with np.errstate(divide="ignore", invalid="ignore"):
        mu2 = np.where(pinned_by_deadline & (t.c2 > 0), np.maximum(pull / (r_total * t.c2) - t.p_cp, 0.0), 0.0)
    interior = (q_tilde > lower + 1e-12) & (q_tilde < upper - 1e-12)
    scale = r_total * t.c2 * t.p_cp
    residual = np.where(interior, (r_total * t.c2 * (t.p_cp + mu2) - pull) / np.where(scale > 0, scale, 1.0), 0.0)
    slack = scenario.t_max - k * t.alpha / b_prev - r_total * t.t_cp(np.exp2(q_tilde))

    return QuantSolution(q_tilde=q_tilde, mu1=mu1, mu2=mu2, phi=_phi(scenario, q_tilde),
                         stationarity=residual, deadline_slack=slack)


def solve_b_given_q(scenario: Scenario, h: float, eps_q: float, q_tilde,
                    settings: SolverSettings = DEFAULT_SETTINGS) -> BandwidthSolution:
    """
    Bandwidth minimising communication energy for fixed H, eps_q and q~.

    b_i(omega) = sqrt(K p_cm,i alpha_i / omega) ("kkt" rule; "linear" uses
    K p_cm,i alpha_i / omega), floored at b_min,i = K alpha_i/(t_max - R T_cp,i),
    with omega found by bisection so the shares sum to b_max.

    Raises:
        DeadlineInfeasibleError: If computation alone exceeds the deadline.
        BandwidthInfeasibleError: If the floors exceed b_max.
    """
    t = scenario.terms
    b_max = scenario.net.b_max
    k = rounds_required(h, eps_q, scenario.coeffs)
    r_total = h * k
    remaining = scenario.t_max - r_total * t.t_cp(np.exp2(np.asarray(q_tilde, dtype=np.float64)))
    if np.any(remaining <= 0):
        raise DeadlineInfeasibleError("Local computation alone exceeds the deadline")
    b_min = k * t.alpha / remaining
    floor_total = float(np.sum(b_min))
    if floor_total > b_max * (1 + settings.rel_tol):
        raise BandwidthInfeasibleError(
            f"Deadline-driven bandwidth floors need {floor_total:.6g} Hz > b_max = {b_max:.6g} Hz")
    if floor_total >= b_max:
        return BandwidthSolution(b=b_min, omega=math.inf, b_min=b_min)

    weights = k * t.p_cm * t.alpha
    if settings.bandwidth_rule == "kkt":
        def share(omega):
            return np.sqrt(weights / omega)
        omega0 = (np.sum(np.sqrt(weights)) / b_max) ** 2
    else:
        def share(omega):
            return weights / omega
        omega0 = np.sum(weights) / b_max

    def total(omega):
        return float(np.sum(np.maximum(b_min, share(omega))))

    lo, hi = omega0, omega0
    while total(hi) > b_max:
        lo, hi = hi, hi * 2.0
    for _ in range(settings.max_bisect):
        if hi / lo - 1.0 <= 1e-13:
            break
        mid = math.sqrt(lo * hi)
        if total(mid) > b_max:
            lo = mid
        else:
            hi = mid

    b = np.maximum(b_min, share(hi))
    active = share(hi) > b_min
    leftover = b_max - float(np.sum(b))
    if leftover > 0 and np.any(active):
        b[active] += leftover * b[active] / np.sum(b[active])
    return BandwidthSolution(b=b, omega=float(hi), b_min=b_min)


def bandwidth_kkt_residuals(scenario: Scenario, h: float, eps_q: float, sol: BandwidthSolution) -> dict:
    """Relative stationarity residuals of active shares and bandwidth slackness."""
    t = scenario.terms
    k = rounds_required(h, eps_q, scenario.coeffs)
    active = sol.b > sol.b_min * (1 + 1e-9)
    if not math.isfinite(sol.omega):
        return {"stationarity": [0.0] * scenario.n, "slackness": 0.0}
    gradient = k * t.p_cm * t.alpha / sol.b ** 2
    residual = np.where(active, (sol.omega - gradient) / sol.omega, 0.0)
    slackness = sol.omega * (scenario.net.b_max - float(np.sum(sol.b))) / scenario.net.b_max
    return {"stationarity": residual.tolist(), "slackness": slackness}


# --- allocations, rounding and the outer loop ---------------------------------


def build_allocation(scenario: Scenario, h: float, eps_q: float, q, b, **extra) -> Allocation:
    """Assemble an Allocation with its energy breakdown and feasibility report."""
    t = scenario.terms
    q = list(q)
    b = np.asarray(b, dtype=np.float64)
    k = rounds_required(h, eps_q, scenario.coeffs)
    t_cp = t.t_cp(q)
    t_cm = t.alpha / b
    per_device = [
        DeviceEnergy(
            comp_energy=float(k * h * t.p_cp[i] * t_cp[i]),
            comm_energy=float(k * t.p_cm[i] * t_cm[i]),
            comp_time=float(h * t_cp[i]),
            comm_time=float(t_cm[i]),
        )
        for i in range(scenario.n)
    ]
    allocation = Allocation(
        h=h, eps_q=eps_q, q=q, b=b, k_rounds=k,
        objective=objective_value(scenario, h, eps_q, q, b),
        per_device=per_device, **extra,
    )
    allocation.report = check_feasible(scenario, allocation)
    return allocation


def round_bits(q_tilde, q_set: Sequence[int]) -> list[int]:
    """
    Map relaxed log2 bit-widths to members of q_set.

    q^ = nearest integer of q~ (halves round up), then the member of q_set
    closest to 2^q^ in log2 distance (ties go to the larger width).
    """
    options = sorted(q_set)
    logs = np.log2(options)
    out = []
    for value in np.atleast_1d(np.asarray(q_tilde, dtype=np.float64)):
        target = math.floor(value + 0.5)
        dist = np.abs(logs - target)
        best = max(j for j in range(len(options)) if dist[j] <= dist.min() + 1e-12)
        out.append(options[best])
    return out


def _uniform_b(scenario: Scenario) -> np.ndarray:
    return np.full(scenario.n, scenario.net.b_max / scenario.n)


def _balanced_b(scenario: Scenario) -> np.ndarray:
    alpha = scenario.terms.alpha
    return scenario.net.b_max * alpha / np.sum(alpha)


def optimize_fixed_q(scenario: Scenario, q: Sequence[int],
                     settings: SolverSettings = DEFAULT_SETTINGS) -> Allocation:
    """
    Optimise H, eps_q and bandwidth for fixed integer bit-widths.

    Raises:
        InfeasibleError: If no integer H and bandwidth meet the constraints.
    """
    q = [int(x) for x in q]
    for device, bits in zip(scenario.devices, q):
        if not memory_feasible(device, bits):
            raise MemoryInfeasibleError(f"Device {device.id}: {bits} bits exceed its memory")
    eps_q = eps_q_min(q, scenario.coeffs, scenario.devices)
    q_tilde = np.log2(q)

    b = None
    first_error: Optional[InfeasibleError] = None
    for start in (_uniform_b(scenario), _balanced_b(scenario)):
        try:
            h, _ = solve_h(scenario, q, start, settings)
            b = solve_b_given_q(scenario, h, eps_q, q_tilde, settings).b
            break
        except InfeasibleError as e:
            first_error = first_error or e
    if b is None:
        raise first_error

    previous = objective_value(scenario, h, eps_q, q, b)
    for _ in range(settings.max_outer):
        h_new, _ = solve_h(scenario, q, b, settings)
        b_new = solve_b_given_q(scenario, h_new, eps_q, q_tilde, settings).b
        value = objective_value(scenario, h_new, eps_q, q, b_new)
        if value > previous:
            break
        h, b = h_new, b_new
        if previous - value <= settings.obj_tol * previous:
            break
        previous = value

    best = None
    base = max(1, math.floor(h))
    candidates = sorted({max(1, base + d) for d in (0, 1, -1, 2, -2, 3, -3)}, key=lambda x: (abs(x - h), x))
    for h_int in candidates:
        try:
            sol = solve_b_given_q(scenario, h_int, eps_q, q_tilde, settings)
        except InfeasibleError:
            continue
        value = objective_value(scenario, h_int, eps_q, q, sol.b)
        if best is None or value < best[0]:
            best = (value, h_int, sol)
    if best is None:
        raise DeadlineInfeasibleError(f"No integer H near {h:.4g} meets the deadline for bits {q}")
    _, h_int, sol = best
    return build_allocation(scenario, h_int, eps_q, q, sol.b, omega=sol.omega)


def _alternate(scenario: Scenario, q_bits, b, settings: SolverSettings) -> dict:
    """
    Relaxed alternating minimisation from (q_bits, b).

    The history is non-increasing: a step that raises the objective is
    discarded and the loop stops with converged False and stop_reason
    "objective_increase". Other reasons are "tolerance" and "max_outer".
    """
    q_bits = np.asarray(q_bits, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    history: list[float] = []
    state = None
    converged = False
    stop_reason = "max_outer"
    iterations = 0
    for iterations in range(1, settings.max_outer + 1):
        h, eps_q = solve_h(scenario, q_bits, b, settings)
        qs = solve_q_given_b(scenario, h, eps_q, b, settings)
        bs = solve_b_given_q(scenario, h, eps_q, qs.q_tilde, settings)
        value = objective_value(scenario, h, eps_q, np.exp2(qs.q_tilde), bs.b)
        if history and value > history[-1]:
            stop_reason = "objective_increase"
            break
        history.append(value)
        state = {"h": h, "eps_q": eps_q, "quant": qs, "band": bs}
        q_bits, b = np.exp2(qs.q_tilde), bs.b
        if len(history) > 1 and history[-2] - value <= settings.obj_tol * history[-2]:
            converged = True
            stop_reason = "tolerance"
            break
    state = dict(state or {})
    state.update(history=history, converged=converged, iterations=iterations, stop_reason=stop_reason)
    return state


def _relaxed_record(scenario: Scenario, state: dict) -> dict:
    if "quant" not in state:
        return {}
    qs: QuantSolution = state["quant"]
    bs: BandwidthSolution = state["band"]
    band = bandwidth_kkt_residuals(scenario, state["h"], state["eps_q"], bs)
    return {
        "h": state["h"],
        "eps_q": state["eps_q"],
        "q_tilde": qs.q_tilde.tolist(),
        "b": bs.b.tolist(),
        "mu1": qs.mu1,
        "mu2": qs.mu2.tolist(),
        "omega": bs.omega,
        "phi": qs.phi,
        "q_stationarity": qs.stationarity.tolist(),
        "b_stationarity": band["stationarity"],
        "slackness_quant": qs.mu1 * (state["eps_q"] - qs.phi) / scenario.coeffs.eps,
        "slackness_deadline": (qs.mu2 * qs.deadline_slack / scenario.t_max).tolist(),
        "slackness_bandwidth": band["slackness"],
    }


def iterate(scenario: Scenario, init: Optional[Allocation] = None,
            settings: SolverSettings = DEFAULT_SETTINGS) -> Allocation:
    """
    Solve the full problem by alternating minimisation and rounding.

    The alternation starts from the largest memory-feasible bit-widths with an
    even bandwidth split (or from init). Uniform starts for every member of
    q_set are explored as well; each relaxed result is rounded and polished
    with optimize_fixed_q, and the best point is refined by single-device
    bit-width moves that strictly lower the objective.

    Raises:
        InfeasibleError: If no start yields a feasible allocation; the error
            names the violated constraint of the primary start.
    """
    max_bits = scenario.max_bits()
    if init is not None:
        primary = (list(init.q), np.asarray(init.b, dtype=np.float64))
    else:
        primary = (max_bits, _uniform_b(scenario))
    starts = [primary]
    for bits in scenario.q_set:
        starts.append(([min(bits, m) for m in max_bits], _uniform_b(scenario)))

    cache: dict[tuple, Optional[Allocation]] = {}
    first_error: Optional[InfeasibleError] = None

    def evaluate(bits) -> Optional[Allocation]:
        nonlocal first_error
        key = tuple(int(x) for x in bits)
        if key not in cache:
            try:
                cache[key] = optimize_fixed_q(scenario, key, settings)
            except InfeasibleError as e:
                first_error = first_error or e
                cache[key] = None
        return cache[key]

    primary_state: dict = {}
    seen = set()
    for index, (bits, b0) in enumerate(starts):
        key = (tuple(int(x) for x in bits), tuple(np.round(b0, 6)))
        if key in seen:
            continue
        seen.add(key)
        try:
            state = _alternate(scenario, bits, b0, settings)
        except InfeasibleError as e:
            first_error = first_error or e
            state = {}
        if index == 0:
            primary_state = state
        if "quant" in state:
            rounded = round_bits(state["quant"].q_tilde, scenario.q_set)
            evaluate([min(r, m) for r, m in zip(rounded, max_bits)])
        evaluate(bits)

    feasible = [a for a in cache.values() if a is not None]
    if not feasible:
        raise first_error or InfeasibleError("No feasible allocation found")
    best = min(feasible, key=lambda a: a.objective)

    if settings.refine:
        for _ in range(4 * scenario.n * len(scenario.q_set)):
            move = None
            for i in range(scenario.n):
                for bits in scenario.q_set:
                    if bits == best.q[i] or not memory_feasible(scenario.devices[i], bits):
                        continue
                    candidate = evaluate(best.q[:i] + [bits] + best.q[i + 1:])
                    if candidate is not None and candidate.objective < best.objective * (1 - 1e-12):
                        if move is None or candidate.objective < move.objective:
                            move = candidate
            if move is None:
                break
            best = move

    result = build_allocation(scenario, best.h, best.eps_q, best.q, best.b, omega=best.omega)
    result.history = list(primary_state.get("history", []))
    result.converged = bool(primary_state.get("converged", False))
    result.iterations = int(primary_state.get("iterations", 0))
    result.stop_reason = str(primary_state.get("stop_reason", ""))
    result.relaxed = _relaxed_record(scenario, primary_state)
    return result


def _compositions(total: int, parts: int):
    """All tuples of positive integers of length parts summing to total."""
    for bars in itertools.combinations(range(1, total), parts - 1):
        edges = (0,) + bars + (total,)
        yield tuple(edges[j + 1] - edges[j] for j in range(parts))


def brute_force(scenario: Scenario, h_range: Sequence[int] = range(1, 65), q_set: Optional[Sequence[int]] = None,
                b_resolution: int = 10, settings: SolverSettings = DEFAULT_SETTINGS) -> Optional[Allocation]:
    """
    Exhaustive search over integer H, bit-widths and a bandwidth simplex grid.

    For every (H, q) the closed-form bandwidth is evaluated alongside the grid.
    Returns None when nothing is feasible. Intended for up to four devices.
    """
    if scenario.n > 4:
        raise ValueError("brute_force supports at most 4 devices")
    t = scenario.terms
    options = sorted(q_set) if q_set is not None else list(scenario.q_set)
    b_max = scenario.net.b_max
    if scenario.n == 1:
        grid = np.array([[b_max]])
    else:
        grid = np.array(list(_compositions(b_resolution, scenario.n)), dtype=np.float64) * b_max / b_resolution

    best = None
    for bits in itertools.product(options, repeat=scenario.n):
        if not all(memory_feasible(d, x) for d, x in zip(scenario.devices, bits)):
            continue
        eps_q = eps_q_min(bits, scenario.coeffs, scenario.devices)
        if eps_q >= scenario.coeffs.eps:
            continue
        t_cp = t.t_cp(bits)
        for h in h_range:
            k = rounds_required(h, eps_q, scenario.coeffs)
            candidates = [grid]
            try:
                candidates.append(solve_b_given_q(scenario, h, eps_q, np.log2(bits), settings).b[None, :])
            except InfeasibleError:
                pass
            b = np.vstack(candidates)
            round_time = h * t_cp + t.alpha / b
            ok = np.all(k * round_time <= scenario.t_max * (1 + settings.rel_tol), axis=1)
            if not np.any(ok):
                continue
            values = k * np.sum(t.p_cm * t.alpha / b + h * t.p_cp * t_cp, axis=1)
            values[~ok] = np.inf
            j = int(np.argmin(values))
            if best is None or values[j] < best[0]:
                best = (float(values[j]), h, list(bits), eps_q, b[j].copy())

    if best is None:
        return None
    _, h, bits, eps_q, b = best
    return build_allocation(scenario, h, eps_q, bits, b)

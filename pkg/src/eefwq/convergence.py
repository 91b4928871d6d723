"""Convergence bound, required round count and coefficient fitting.

Canonical coefficient triple used everywhere: a1 multiplies H, a2 is the
constant and a3 weights the quantization error. Round counts K are real-valued
here; callers ceil them when simulating or reporting.

Iterations vs rounds: the raw bound counts local iterations R, the optimizer
counts communication rounds K, and R = H*K (see total_iterations).
"""

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy.optimize import nnls

from eefwq.errors import ConvergenceInfeasibleError, UnderdeterminedFitError


@dataclass(frozen=True)
class ConvergenceCoeffs:
    a1: float
    a2: float
    a3: float
    eps: float
    m_batch: int
    s_scale: float

    def __post_init__(self):
        for name in ("a1", "a2", "a3"):
            if getattr(self, name) < 0:
                raise ValueError(f"ConvergenceCoeffs.{name} must be >= 0")
        if self.a1 + self.a2 <= 0:
            raise ValueError("ConvergenceCoeffs.a1 + a2 must be > 0")
        if self.eps <= 0:
            raise ValueError("ConvergenceCoeffs.eps must be > 0")
        if self.m_batch < 1:
            raise ValueError("ConvergenceCoeffs.m_batch must be >= 1")
        if self.s_scale <= 0:
            raise ValueError("ConvergenceCoeffs.s_scale must be > 0")


@dataclass(frozen=True)
class TheoryParams:
    """Constants of the raw bound; only bound_value uses them."""
    lipschitz_l: float
    grad_second_moment_g: float
    variances: tuple[float, ...]
    f_init: float
    f_star: float
    dim_d: int

    def __post_init__(self):
        if min((self.lipschitz_l, self.grad_second_moment_g, self.dim_d, *self.variances), default=0) < 0:
            raise ValueError("TheoryParams entries must be >= 0")
        if self.f_init < self.f_star:
            raise ValueError("TheoryParams.f_init must be >= f_star")


class TraceLike(Protocol):
    """What fit_coeffs needs from a training trace."""
    h_steps: int
    batch: int
    bits: Sequence[Optional[int]]
    pi_weights: Sequence[float]
    grad_norm_sq: Sequence[float]


@dataclass
class FitResult:
    coeffs: ConvergenceCoeffs
    residual: float
    r_squared: float
    n_rows: int
    rows: list[dict] = field(default_factory=list)


def total_iterations(h: int, k: float) -> float:
    """Total local iterations R = H*K."""
    return h * k


def noise_terms(bits: Sequence[Optional[float]], s_scale: float) -> np.ndarray:
    """
    Per-device quantization noise s/(2^q - 1).

    Accepts real bit-widths (for the relaxed solver); None means unquantized
    and contributes zero.
    """
    out = np.zeros(len(bits))
    for i, q in enumerate(bits):
        if q is not None:
            out[i] = s_scale / math.expm1(q * math.log(2.0))
    return out


def bound_value(k_rounds: float, h: int, theory: TheoryParams, m_batch: int,
                pi_weights: Sequence[float], bits: Sequence[Optional[int]], s_scale: float) -> float:
    """
    Evaluate the raw average-squared-gradient bound after R = H*K iterations.

        4(F(w0) - F*)/sqrt(M R) + 6 H L tau/sqrt(M R) + sqrt(d) L G sum pi_i^2 delta_i

    with tau = sum pi_i^2 tau_i^2.
    """
    if k_rounds <= 0 or h < 1:
        raise ValueError("bound_value needs k_rounds > 0 and h >= 1")
    pi = np.asarray(pi_weights, dtype=np.float64)
    if len(theory.variances) != len(pi) or len(bits) != len(pi):
        raise ValueError("variances, bits and pi_weights must have one entry per device")
    r_total = total_iterations(h, k_rounds)
    root = math.sqrt(m_batch * r_total)
    tau = float(np.sum(pi ** 2 * np.asarray(theory.variances) ** 2))
    deltas = noise_terms(bits, s_scale)
    floor = math.sqrt(theory.dim_d) * theory.lipschitz_l * theory.grad_second_moment_g * float(np.sum(pi ** 2 * deltas))
    return 4.0 * (theory.f_init - theory.f_star) / root + 6.0 * h * theory.lipschitz_l * tau / root + floor


def rounds_required(h: float, eps_q: float, coeffs: ConvergenceCoeffs) -> float:
    """
    Communication rounds K = (a1 H + a2)^2 / (M H (eps - eps_q)^2).

    Raises:
        ConvergenceInfeasibleError: If eps_q >= eps.
    """
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    if eps_q < 0:
        raise ValueError(f"eps_q must be >= 0, got {eps_q}")
    gap = coeffs.eps - eps_q
    if gap <= 0:
        raise ConvergenceInfeasibleError(
            f"Quantization error {eps_q:.6g} leaves no room below target {coeffs.eps:.6g}")
    return (coeffs.a1 * h + coeffs.a2) ** 2 / (coeffs.m_batch * h * gap ** 2)


def error_bound(h: float, k: float, eps_q: float, coeffs: ConvergenceCoeffs) -> float:
    """Left-hand side (a1 H + a2)/sqrt(M H K) + eps_q of the convergence constraint."""
    return (coeffs.a1 * h + coeffs.a2) / math.sqrt(coeffs.m_batch * h * k) + eps_q


def optimal_h_unconstrained(coeffs: ConvergenceCoeffs) -> float:
    """Minimiser a2/a1 of K(H) for fixed eps_q."""
    return coeffs.a2 / coeffs.a1


def quant_error_term(pi_weights: Sequence[float], bits: Sequence[Optional[float]], coeffs: ConvergenceCoeffs) -> float:
    """Average quantization error a3 * sum pi_i^2 * s/(2^q_i - 1)."""
    pi = np.asarray(pi_weights, dtype=np.float64)
    if len(bits) != len(pi):
        raise ValueError("bits and pi_weights must have one entry per device")
    return coeffs.a3 * float(np.sum(pi ** 2 * noise_terms(bits, coeffs.s_scale)))


def _crossing_round(series: np.ndarray, target: float) -> Optional[float]:
    """First (linearly interpolated) round at which series drops to target; rounds are 1-based."""
    below = np.nonzero(series <= target)[0]
    if below.size == 0:
        return None
    k = int(below[0])
    if k == 0:
        return 1.0
    prev, cur = series[k - 1], series[k]
    return k + (prev - target) / (prev - cur)


def fit_coeffs(traces: Sequence[TraceLike], targets: Sequence[float], eps: float,
               s_scale: float, m_batch: Optional[int] = None) -> FitResult:
    """
    Fit (a1, a2, a3) by non-negative least squares.

    Each (trace, target) pair where the trace reaches the target contributes one
    row: target ~ (a1 H + a2)/sqrt(M H K) + a3 sum pi_i^2 delta_i, with K the
    round at which the trace first drops below the target.

    Args:
        traces: Traces with h_steps, batch, bits, pi_weights and grad_norm_sq.
        targets: Gradient-norm levels defining K.
        eps: Target accuracy stored in the returned coefficients.
        s_scale: Weight-magnitude constant used for delta_i.
        m_batch: Batch size; defaults to the traces' batch.

    Raises:
        UnderdeterminedFitError: Fewer than three distinct settings, or a
            rank-deficient design.
    """
    settings = {(t.h_steps, tuple(t.bits)) for t in traces}
    if len(settings) < 3:
        raise UnderdeterminedFitError(
            f"Need at least 3 traces with distinct (H, bits) settings, got {len(settings)}")

    design, observed, rows = [], [], []
    for trace in traces:
        batch = m_batch if m_batch is not None else trace.batch
        series = np.asarray(trace.grad_norm_sq, dtype=np.float64)
        pi = np.asarray(trace.pi_weights, dtype=np.float64)
        x3 = float(np.sum(pi ** 2 * noise_terms(trace.bits, s_scale)))
        for target in targets:
            k = _crossing_round(series, target)
            if k is None:
                continue
            root = math.sqrt(batch * trace.h_steps * k)
            design.append([trace.h_steps / root, 1.0 / root, x3])
            observed.append(target)
            rows.append({"h": trace.h_steps, "bits": list(trace.bits), "target": target, "k_measured": k})

    a = np.asarray(design, dtype=np.float64).reshape(-1, 3)
    y = np.asarray(observed, dtype=np.float64)
    if a.shape[0] < 3 or np.linalg.matrix_rank(a) < 3:
        raise UnderdeterminedFitError("Design matrix is rank deficient; vary H and bit-widths")

    # Column scaling keeps nnls well conditioned when x3 is tiny.
    norms = np.linalg.norm(a, axis=0)
    solution, _ = nnls(a / norms, y)
    solution = solution / norms
    if solution[0] + solution[1] <= 0:
        raise UnderdeterminedFitError("Fit drove both a1 and a2 to zero; the traces carry no rate information")

    fitted = a @ solution
    ss_res = float(np.sum((y - fitted) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    coeffs = ConvergenceCoeffs(
        a1=float(solution[0]),
        a2=float(solution[1]),
        a3=float(solution[2]),
        eps=eps,
        m_batch=int(m_batch if m_batch is not None else traces[0].batch),
        s_scale=s_scale,
    )
    return FitResult(coeffs=coeffs, residual=math.sqrt(ss_res), r_squared=r_squared, n_rows=len(y), rows=rows)

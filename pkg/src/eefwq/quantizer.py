"""Stochastic-rounding weight quantizer on a signed fixed-point grid."""

import math
from dataclasses import dataclass

import numpy as np

from eefwq.errors import InvalidBitWidthError, InvalidInputError, InvalidScaleError, OutOfRangeError

MIN_BITS = 2
MAX_BITS = 32

# Relative distance (in float64 ulps) below which a value counts as sitting on a grid point.
_SNAP_TOL = 64 * np.finfo(np.float64).eps


@dataclass(frozen=True)
class QuantScheme:
    """
    Signed q-bit level grid {-I_A, ..., -I_1, 0, I_1, ..., I_A} with I_a = a / A.

    The executable grid spans [-1, 1] with spacing 1/A, A = 2^(q-1) - 1. The
    noise accounting used by the optimizer keeps the resolution 1/(2^q - 1).
    """
    bits: int

    @property
    def num_pos_levels(self) -> int:
        return 2 ** (self.bits - 1) - 1

    @property
    def grid_resolution(self) -> float:
        return 1.0 / self.num_pos_levels

    @property
    def noise_resolution(self) -> float:
        """Level spacing 1/(2^q - 1) used in noise accounting, finer than grid_resolution."""
        return 1.0 / (2 ** self.bits - 1)

    def levels(self) -> np.ndarray:
        """All signed levels in ascending order (only sensible for small q)."""
        a = np.arange(-self.num_pos_levels, self.num_pos_levels + 1, dtype=np.float64)
        return a / self.num_pos_levels


@dataclass
class QuantizedVector:
    """Quantized values (already multiplied back by the scale)."""
    values: np.ndarray
    scale: float
    scheme: QuantScheme

    def normalized_levels(self) -> np.ndarray:
        """Integer level indices a (signed), values == scale * a / A."""
        return np.rint(self.values / self.scale * self.scheme.num_pos_levels).astype(np.int64)


def make_scheme(q: int) -> QuantScheme:
    """
    Build the level grid for a q-bit signed representation.

    Raises:
        InvalidBitWidthError: If q is not an integer in [2, 32].
    """
    if isinstance(q, bool) or int(q) != q:
        raise InvalidBitWidthError(f"Bit-width must be an integer, got {q!r}")
    q = int(q)
    if q < MIN_BITS or q > MAX_BITS:
        raise InvalidBitWidthError(f"Bit-width must be in [{MIN_BITS}, {MAX_BITS}], got {q}")
    return QuantScheme(bits=q)


def _split_levels(u: np.ndarray, num_levels: int) -> tuple[np.ndarray, np.ndarray]:
    """Split normalised magnitudes u*A into lower level index and upper-level probability."""
    nearest = np.rint(u)
    on_grid = np.abs(u - nearest) <= _SNAP_TOL * np.maximum(1.0, nearest)
    u = np.where(on_grid, nearest, u)
    lower = np.minimum(np.floor(u), num_levels)
    prob_up = np.where(on_grid, 0.0, u - lower)
    return lower, prob_up


def quantize_value(w: float, s: float, scheme: QuantScheme, rng: np.random.Generator) -> float:
    """
    Stochastically round one value onto the scaled level grid.

    Returns s*sign(w)*I_{a+1} with probability (|w|/s - I_a)/Delta_grid and
    s*sign(w)*I_a otherwise, so the expectation equals w. Values already on the
    grid are returned unchanged without consuming randomness.

    Raises:
        InvalidScaleError: If s <= 0.
        OutOfRangeError: If |w| > s.
    """
    if not s > 0:
        raise InvalidScaleError(f"Scale must be positive, got {s}")
    if not math.isfinite(w):
        raise InvalidInputError(f"Value must be finite, got {w}")
    if abs(w) > s:
        raise OutOfRangeError(f"|w| = {abs(w)} exceeds scale {s}")

    num_levels = scheme.num_pos_levels
    lower, prob_up = _split_levels(np.asarray(abs(w) / s * num_levels), num_levels)
    level = float(lower)
    if prob_up > 0.0 and rng.random() < prob_up:
        level += 1.0
    return math.copysign(level / num_levels * s, w) if level else 0.0


def quantize_vector(w, scheme: QuantScheme, rng: np.random.Generator) -> QuantizedVector:
    """
    Quantize every coordinate of w independently with scale s = ||w||_inf.

    Works on arrays of any shape (one scale per array). An all-zero input gets
    scale 1 and an all-zero output.

    Raises:
        InvalidInputError: If w is empty or has non-finite entries.
    """
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise InvalidInputError("Cannot quantize an empty vector")
    if not np.all(np.isfinite(w)):
        raise InvalidInputError("Vector contains non-finite entries")

    scale = float(np.max(np.abs(w)))
    if scale == 0.0:
        return QuantizedVector(values=np.zeros_like(w), scale=1.0, scheme=scheme)

    num_levels = scheme.num_pos_levels
    lower, prob_up = _split_levels(np.abs(w) / scale * num_levels, num_levels)
    random_mask = prob_up > 0.0
    levels = lower.copy()
    if np.any(random_mask):
        draws = rng.random(int(np.count_nonzero(random_mask)))
        levels[random_mask] += (draws < prob_up[random_mask]).astype(np.float64)

    values = np.sign(w) * (levels / num_levels) * scale
    values[levels == 0] = 0.0
    return QuantizedVector(values=values, scale=scale, scheme=scheme)


def quant_noise(scheme: QuantScheme, s: float) -> float:
    """Quantization noise delta = s / (2^q - 1) used by the convergence bound."""
    if not s > 0:
        raise InvalidScaleError(f"Scale must be positive, got {s}")
    return s * scheme.noise_resolution

"""Tests for quantizer.py."""

import numpy as np
import pytest

from eefwq.errors import InvalidBitWidthError, InvalidInputError, InvalidScaleError, OutOfRangeError
from eefwq.quantizer import make_scheme, quant_noise, quantize_value, quantize_vector


class TestMakeScheme:
    def test_levels_q2(self):
        scheme = make_scheme(2)
        assert scheme.num_pos_levels == 1
        np.testing.assert_array_equal(scheme.levels(), [-1.0, 0.0, 1.0])

    def test_resolutions(self):
        scheme = make_scheme(8)
        assert scheme.num_pos_levels == 127
        assert scheme.grid_resolution == pytest.approx(1 / 127)
        assert scheme.noise_resolution == pytest.approx(1 / 255)

    @pytest.mark.parametrize("q", [1, 33, 0, -4])
    def test_out_of_range(self, q):
        with pytest.raises(InvalidBitWidthError):
            make_scheme(q)

    def test_non_integer(self):
        with pytest.raises(InvalidBitWidthError):
            make_scheme(7.5)


class TestQuantizeValue:
    def test_grid_point_unchanged_without_randomness(self):
        scheme = make_scheme(4)
        rng = np.random.default_rng(0)
        state = rng.bit_generator.state
        assert quantize_value(3 / 7, 1.0, scheme, rng) == pytest.approx(3 / 7)
        assert rng.bit_generator.state == state

    def test_zero(self):
        assert quantize_value(0.0, 2.0, make_scheme(8), np.random.default_rng(0)) == 0.0

    def test_two_outcomes(self):
        scheme = make_scheme(3)  # levels k/3
        rng = np.random.default_rng(1)
        draws = {quantize_value(0.5, 1.0, scheme, rng) for _ in range(200)}
        assert {round(v, 12) for v in draws} == {round(1 / 3, 12), round(2 / 3, 12)}

    def test_negative_mirrors(self):
        rng = np.random.default_rng(2)
        values = [quantize_value(-0.4, 1.0, make_scheme(4), rng) for _ in range(100)]
        assert all(v <= 0 for v in values)

    def test_out_of_range(self):
        with pytest.raises(OutOfRangeError):
            quantize_value(1.5, 1.0, make_scheme(8), np.random.default_rng(0))

    @pytest.mark.parametrize("s", [0.0, -1.0])
    def test_bad_scale(self, s):
        with pytest.raises(InvalidScaleError):
            quantize_value(0.0, s, make_scheme(8), np.random.default_rng(0))

    def test_unbiased(self):
        rng = np.random.default_rng(123)
        n = 100_000
        for _ in range(100):
            q = int(rng.integers(2, 9))
            s = float(rng.uniform(0.1, 10.0))
            w = float(rng.uniform(-s, s))
            scheme = make_scheme(q)
            # trailing entry pins the per-vector scale to s
            values = quantize_vector(np.append(np.full(n, w), s), scheme, rng).values[:n]
            delta = s * scheme.grid_resolution
            frac = abs(w) / delta - np.floor(abs(w) / delta)
            se = delta * np.sqrt(frac * (1 - frac) / n)
            assert abs(values.mean() - w) <= 4 * se + 1e-9 * s, (q, s, w)

    def test_unbiased_against_fixed_scale(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            q = int(rng.integers(2, 9))
            s = float(rng.uniform(0.5, 5.0))
            w = float(rng.uniform(-s, s))
            scheme = make_scheme(q)
            n = 5_000
            values = np.array([quantize_value(w, s, scheme, rng) for _ in range(n)])
            delta = s * scheme.grid_resolution
            u = abs(w) / delta
            p = u - np.floor(u)
            se = delta * np.sqrt(max(p * (1 - p), 1e-12) / n)
            assert abs(values.mean() - w) <= 4 * se + 1e-12


class TestQuantizeVector:
    def test_scale_is_inf_norm(self):
        result = quantize_vector([0.5, -2.0, 1.0], make_scheme(8), np.random.default_rng(0))
        assert result.scale == 2.0
        assert result.values[1] == -2.0

    def test_extreme_maps_to_itself(self):
        result = quantize_vector([2.0], make_scheme(4), np.random.default_rng(0))
        assert result.values[0] == 2.0

    def test_all_zero(self):
        result = quantize_vector(np.zeros(5), make_scheme(8), np.random.default_rng(0))
        assert result.scale == 1.0
        assert np.all(result.values == 0.0)

    def test_bounded_error(self):
        rng = np.random.default_rng(11)
        for q in (2, 4, 8, 16):
            w = rng.uniform(-3.0, 3.0, size=25_000)
            result = quantize_vector(w, make_scheme(q), rng)
            bound = result.scale * make_scheme(q).grid_resolution
            assert np.all(np.abs(result.values - w) <= bound * (1 + 1e-12))

    def test_values_on_grid(self):
        rng = np.random.default_rng(3)
        scheme = make_scheme(3)
        result = quantize_vector(rng.normal(size=200), scheme, rng)
        levels = result.values / result.scale * scheme.num_pos_levels
        np.testing.assert_allclose(levels, np.rint(levels), atol=1e-9)
        np.testing.assert_array_equal(result.normalized_levels(), np.rint(levels))

    def test_keeps_shape(self):
        w = np.arange(12.0).reshape(3, 4) - 6
        assert quantize_vector(w, make_scheme(8), np.random.default_rng(0)).values.shape == (3, 4)

    def test_empty(self):
        with pytest.raises(InvalidInputError):
            quantize_vector([], make_scheme(8), np.random.default_rng(0))

    def test_non_finite(self):
        with pytest.raises(InvalidInputError):
            quantize_vector([1.0, np.nan], make_scheme(8), np.random.default_rng(0))

    def test_same_seed_same_output(self):
        w = np.linspace(-1, 1, 101)
        a = quantize_vector(w, make_scheme(4), np.random.default_rng(5)).values
        b = quantize_vector(w, make_scheme(4), np.random.default_rng(5)).values
        np.testing.assert_array_equal(a, b)


class TestQuantNoise:
    def test_value(self):
        assert quant_noise(make_scheme(8), 2.0) == pytest.approx(2.0 / 255)

    def test_decreasing_in_bits(self):
        assert quant_noise(make_scheme(4), 1.0) > quant_noise(make_scheme(8), 1.0) > quant_noise(make_scheme(16), 1.0)

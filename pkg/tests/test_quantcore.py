import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import integrate

from seriex.quantcore import (
    LAPLACE_CLIP, QuantizationError, QuantScheme, compute_clip, digit_offset, expand_tensor, laplace_clip_constant,
    laplace_quant_mse, parallel_digits, quantize_once, reconstruct, residual_bound, round_digits, scale_ratios,
)
from seriex.tensorio import int_range

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
matrices = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=6), elements=finite)


def test_quantize_once_exact_digits():
    m = np.array([[7, -7], [3, 0]]) * 0.1
    term, bias, corr, res = quantize_once(m, QuantScheme(bits=4))
    assert np.allclose(term.scale, [0.1])
    assert np.array_equal(term.digits, [[7, -7], [3, 0]])
    assert corr is None and np.all(bias == 0)
    assert np.abs(res).max() < 1e-15


def test_quantize_once_zero_tensor_uses_zero_scale():
    term, _, _, res = quantize_once(np.zeros((2, 3)), QuantScheme(bits=2))
    assert term.scale[0] == 0 and not term.digits.any() and not res.any()


def test_quantize_once_residual_within_offset_times_scale():
    rng = np.random.default_rng(3)
    for bits in (2, 4, 8):
        m = rng.standard_normal((20, 30))
        term, _, _, res = quantize_once(m, QuantScheme(bits=bits))
        assert np.abs(res).max() <= digit_offset(bits) * term.scale[0] * (1 + 1e-12)


def test_asymmetric_bias_is_range_midpoint():
    m = np.array([1.0, 2.0, 5.0])
    term, bias, _, res = quantize_once(m, QuantScheme(bits=4, symmetric=False))
    assert bias[0] == 3.0
    assert term.scale[0] == pytest.approx(4.0 / 14)


def test_saturated_correction_holds_clipped_excess():
    m = np.array([-10.0, -1.0, 0.5, 1.0, 30.0])
    s = QuantScheme(bits=4, saturated=True, clip_mode="fixed", clip=(-2.0, 2.0))
    term, _, corr, res = quantize_once(m, s)
    assert np.array_equal(corr.to_dense(), [-8.0, 0, 0, 0, 28.0])
    assert np.allclose(corr.to_dense() + term.scale[0] * term.digits + res, m)


def test_scheme_validation_and_parse():
    with pytest.raises(ValueError):
        QuantScheme(bits=3)
    with pytest.raises(ValueError):
        QuantScheme(saturated=True)  # needs a clip mode
    with pytest.raises(ValueError):
        QuantScheme(saturated=True, clip_mode="fixed", clip=(1.0, -1.0))
    s = QuantScheme.parse("asym-sat", 2, "fixed:-1,3")
    assert (s.symmetric, s.saturated, s.clip) == (False, True, (-1.0, 3.0))
    assert s.name == "asym-sat"
    assert QuantScheme.from_dict(s.to_dict()) == s
    with pytest.raises(ValueError):
        QuantScheme.parse("sym-maybe")


def test_nonfinite_input_rejected():
    with pytest.raises(QuantizationError):
        expand_tensor(np.array([1.0, np.nan]), QuantScheme(), 2)


def test_round_digits_tie_point():
    c = digit_offset(4)
    assert c == 8 / 15
    assert round_digits(1 - c + 1e-12, 4) == 1
    assert round_digits(1 - c - 1e-12, 4) == 0
    assert round_digits(-c - 1e-12, 4) == -1


@pytest.mark.parametrize("bits", [2, 4, 8])
@given(data=st.data())
def test_residual_bound_property(bits, data):
    m = data.draw(matrices)
    n = data.draw(st.integers(1, 6))
    e = expand_tensor(m, QuantScheme(bits=bits), n)
    err = np.abs(m - reconstruct(e)).max()
    assert err <= residual_bound(e.base_scale, bits, n)[0] * (1 + 1e-9) + 1e-300


@pytest.mark.parametrize("scheme", ["sym-nonsat", "asym-nonsat", "sym-sat", "asym-sat"])
def test_every_scheme_per_channel_meets_bound(scheme):
    rng = np.random.default_rng(11)
    m = rng.laplace(size=(8, 40)) * rng.uniform(0.1, 5, (8, 1))
    for bits in (2, 4, 8):
        s = QuantScheme.parse(scheme, bits, granularity="per-channel", axis=0)
        for n in range(1, 5):
            e = expand_tensor(m, s, n)
            err = np.abs(m - reconstruct(e)).max(axis=1)
            assert np.all(err <= residual_bound(e.base_scale, bits, n) * (1 + 1e-9))


@given(matrices, st.sampled_from([2, 4, 8]))
def test_scale_ladder_is_exact(m, bits):
    e = expand_tensor(m, QuantScheme(bits=bits, symmetric=False), 5)
    for r in scale_ratios(e):
        assert np.all(r == 2.0 ** bits)


@given(matrices, st.sampled_from([2, 4, 8]), st.integers(1, 5))
def test_digits_stay_in_range(m, bits, n):
    lo, hi = int_range(bits)
    e = expand_tensor(m, QuantScheme(bits=bits), n)
    for t in e.terms:
        assert t.digits.dtype == np.int8
        assert t.digits.min() >= lo and t.digits.max() <= hi


def test_per_axis_channel_expansion_matches_slices():
    rng = np.random.default_rng(5)
    m = rng.standard_normal((3, 4, 5))
    s = QuantScheme(bits=4, granularity="per-channel", axis=1)
    e = expand_tensor(m, s, 3)
    for c in range(4):
        ec = expand_tensor(m[:, c, :], QuantScheme(bits=4), 3)
        for t, tc in zip(e.terms, ec.terms):
            assert t.scale[c] == tc.scale[0]
            assert np.array_equal(t.digits[:, c, :], tc.digits)


@pytest.mark.parametrize("bits,k", [(2, 2), (2, 3), (4, 2), (4, 3)])
def test_parallel_digits_match_sequential(bits, k):
    rng = np.random.default_rng(bits * 10 + k)
    m = rng.uniform(-1, 1, 4000)
    s1 = np.abs(m).max() / ((1 << (bits - 1)) - 1)
    e = expand_tensor(m, QuantScheme(bits=bits), k)
    assert np.array_equal(parallel_digits(m, s1, bits, k), e.terms[k - 1].digits)


def test_parallel_digits_preconditions():
    with pytest.raises(QuantizationError):
        parallel_digits(np.ones(3), 1.0, 4, 1)
    with pytest.raises(QuantizationError):
        parallel_digits(np.ones(3), 0.0, 4, 2)


def _mse_by_quadrature(alpha, bits):
    """E[(x - Q(x))^2] for x ~ Laplace(0, 1), integrating the quantizer as implemented."""
    L = (1 << (bits - 1)) - 1
    s = alpha / L
    c = digit_offset(bits)

    def sq_err(x):
        q = np.floor(np.clip(x, -alpha, alpha) / s + c) * s
        return (x - q) ** 2 * 0.5 * np.exp(-abs(x))

    edges = sorted({-alpha - 60, -alpha, alpha, alpha + 60, 0.0}
                   | {s * (j - c) for j in range(-L + 1, L + 1)})
    return sum(integrate.quad(sq_err, a, b, epsabs=1e-14)[0] for a, b in zip(edges[:-1], edges[1:]))


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_laplace_mse_closed_form_matches_quadrature(bits):
    for alpha in (0.5, 2.0, 6.0):
        assert laplace_quant_mse(alpha, bits) == pytest.approx(_mse_by_quadrature(alpha, bits), rel=1e-7)


@pytest.mark.parametrize("bits", [2, 4, 8])
def test_laplace_constants_are_minimisers(bits):
    assert laplace_clip_constant(bits) == pytest.approx(LAPLACE_CLIP[bits], rel=1e-6)


def test_compute_clip_laplace_and_fixed():
    x = np.random.default_rng(0).laplace(2.0, 0.5, 200_000)
    lo, hi = compute_clip(x, QuantScheme(bits=4, symmetric=False, saturated=True, clip_mode="laplace"))
    assert (hi - lo) / 2 == pytest.approx(LAPLACE_CLIP[4] * 0.5, rel=0.01)
    assert (hi + lo) / 2 == pytest.approx(2.0, abs=0.01)
    lo, hi = compute_clip(x, QuantScheme(bits=4, saturated=True, clip_mode="laplace"))
    assert lo == -hi
    assert compute_clip(x, QuantScheme(saturated=True, clip_mode="fixed", clip=(-1, 2))) == (-1.0, 2.0)
    with pytest.raises(QuantizationError):
        compute_clip(x, QuantScheme())
    with pytest.raises(QuantizationError):
        compute_clip([], QuantScheme(saturated=True, clip_mode="laplace"))


def test_truncated_and_reshaped():
    m = np.random.default_rng(2).standard_normal((4, 6))
    e = expand_tensor(m, QuantScheme(bits=4, granularity="per-channel"), 4)
    t = e.truncated(2)
    assert t.n_terms == 2 and t.residual_norms == e.residual_norms[:2]
    r = e.reshaped((4, 2, 3))
    assert np.array_equal(reconstruct(r).reshape(4, 6), reconstruct(e))
    with pytest.raises(ValueError):
        e.truncated(5)
    with pytest.raises(ValueError):
        e.reshaped((2, 12))

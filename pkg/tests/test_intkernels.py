import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seriex.intkernels import (
    GridMask, LatticeAccumulator, LatticeValue, OpCounter, OverflowGuardError, dense_ones_reference,
    expanded_matmul, int_gemm, lattice_sum, ones_multiply, pair_product, plan_lattice_bound, reduce_pairs,
    sparse_correction_multiply, weight_indices, activation_indices,
)
from seriex.quantcore import QuantScheme, expand_tensor, reconstruct
from seriex.tensorio import SparseCorrection, int_range, pack_int


def _digits(rng, bits, shape):
    lo, hi = int_range(bits)
    return rng.integers(lo, hi + 1, shape).astype(np.int8)


def test_int_gemm_packed_and_plain_operands():
    rng = np.random.default_rng(0)
    w = _digits(rng, 4, (5, 7))
    a = _digits(rng, 2, (7, 3))
    want = w.astype(np.float64) @ a.astype(np.float64)
    assert np.array_equal(int_gemm(pack_int(w, 4), pack_int(a, 2)).acc, want)
    assert np.array_equal(int_gemm(w, a).acc, want)
    with pytest.raises(ValueError):
        int_gemm(w, w)


def test_ones_multiply_examples():
    m = np.array([[1, 2], [3, 4]])
    assert np.array_equal(ones_multiply(m, "right"), [[3, 3], [7, 7]])
    assert np.array_equal(ones_multiply(m, "left"), [[4, 6], [4, 6]])
    assert ones_multiply(m, "right", n=5).shape == (2, 5)
    with pytest.raises(ValueError):
        ones_multiply(m, "up")


@pytest.mark.parametrize("side", ["left", "right"])
def test_ones_multiply_matches_dense_and_costs(side):
    rng = np.random.default_rng(1)
    for _ in range(10):
        r, c = rng.integers(1, 12, 2)
        m = rng.integers(-50, 50, (r, c))
        assert np.array_equal(ones_multiply(m, side), dense_ones_reference(m, side))
    fast, dense = OpCounter(), OpCounter()
    ones_multiply(np.ones((8, 8)), side, counter=fast)
    dense_ones_reference(np.ones((8, 8)), side, counter=dense)
    assert (fast.madds, dense.madds) == (64, 512)


def test_sparse_correction_multiply_matches_dense():
    rng = np.random.default_rng(2)
    d = np.where(rng.random((6, 5)) < 0.2, rng.standard_normal((6, 5)), 0.0)
    s = SparseCorrection.from_dense(d)
    right = rng.standard_normal((5, 4))
    left = rng.standard_normal((3, 6))
    assert np.allclose(sparse_correction_multiply(s, right, "left"), d @ right, rtol=0, atol=1e-12)
    assert np.allclose(sparse_correction_multiply(s, left, "right"), left @ d, rtol=0, atol=1e-12)
    empty = SparseCorrection.empty((6, 5))
    assert not sparse_correction_multiply(empty, right, "left").any()


def _lattice_values(rng, n, shape=(4, 3)):
    unit = np.ldexp(rng.uniform(0.5, 1, (shape[0], 1)), -20)
    return [LatticeValue(rng.integers(-2**20, 2**20, shape), unit, int(rng.integers(0, 12))) for _ in range(n)]


def test_lattice_sum_is_order_independent():
    rng = np.random.default_rng(3)
    vals = _lattice_values(rng, 5)
    ref = lattice_sum(vals)
    for perm in itertools.permutations(vals):
        got = lattice_sum(list(perm))
        assert np.array_equal(got.acc, ref.acc) and got.shift == ref.shift


def test_lattice_sum_exact_against_python_ints():
    rng = np.random.default_rng(4)
    vals = _lattice_values(rng, 4)
    low = min(v.shift for v in vals)
    want = sum(v.acc.astype(object) * (1 << (v.shift - low)) for v in vals)
    assert (lattice_sum(vals).acc.astype(object) == want).all()


def test_lattice_guard_raises_instead_of_wrapping():
    big = LatticeValue(np.array([[2**40]]), np.ones((1, 1)), 25)
    small = LatticeValue(np.array([[1]]), np.ones((1, 1)), 0)
    with pytest.raises(OverflowGuardError):
        lattice_sum([big, small])
    with pytest.raises(OverflowGuardError):
        LatticeAccumulator((1, 1), 1.0, plan_bound=1 << 63)
    with pytest.raises(ValueError):
        lattice_sum([big, LatticeValue(np.array([[1]]), np.full((1, 1), 2.0), 0)])


def test_accumulator_independent_of_add_order():
    rng = np.random.default_rng(5)
    parts = [(rng.integers(-1000, 1000, (3, 3)), int(s)) for s in rng.integers(0, 30, 6)]
    results = set()
    for perm in itertools.permutations(parts):
        acc = LatticeAccumulator((3, 3), 1.0)
        for p, s in perm:
            acc.add(p, s)
        results.add(acc.acc.tobytes())
    assert len(results) == 1


def _expansions(rng, bits_w=4, bits_a=4, k=2, t=3, wscheme=None, ascheme=None, shape=(6, 9, 5)):
    r, inner, c = shape
    W = rng.laplace(size=(r, inner))
    A = rng.uniform(-1, 3, (inner, c))
    ws = wscheme or QuantScheme(bits=bits_w, saturated=True, clip_mode="laplace", granularity="per-channel")
    as_ = ascheme or QuantScheme(bits=bits_a, symmetric=False)
    return W, A, expand_tensor(W, ws, k), expand_tensor(A, as_, t)


@pytest.mark.parametrize("bits_w,bits_a", [(2, 2), (4, 4), (8, 8), (2, 8), (8, 4)])
def test_expanded_matmul_equals_product_of_reconstructions(bits_w, bits_a):
    rng = np.random.default_rng(bits_w * 16 + bits_a)
    _, _, we, ae = _expansions(rng, bits_w, bits_a)
    out, _ = expanded_matmul(we, ae, GridMask(a_sa=True))
    ref = reconstruct(we) @ reconstruct(ae)
    assert np.allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_all_scheme_combinations_through_the_grid():
    rng = np.random.default_rng(6)
    names = ["sym-nonsat", "asym-nonsat", "sym-sat", "asym-sat"]
    for wn, an in itertools.product(names, names):
        ws = QuantScheme.parse(wn, 4, granularity="per-channel")
        as_ = QuantScheme.parse(an, 4)
        _, _, we, ae = _expansions(rng, wscheme=ws, ascheme=as_)
        full = GridMask(w_sa=True, w_bias=True, a_bias=True, a_sa=True)
        out, _ = expanded_matmul(we, ae, full)
        assert np.allclose(out, reconstruct(we) @ reconstruct(ae), rtol=1e-12, atol=1e-12), (wn, an)


def test_pair_count_follows_mask():
    rng = np.random.default_rng(7)
    _, _, we, ae = _expansions(rng, k=2, t=3, shape=(6, 200, 5))
    assert we.saturation.nnz > 0
    assert weight_indices(we, GridMask()) == [-1, 1, 2]
    assert activation_indices(ae, GridMask()) == [0, 1, 2, 3]
    _, pairs = expanded_matmul(we, ae, GridMask())
    assert pairs == 3 * 4
    _, pairs = expanded_matmul(we, ae, GridMask(w_sa=False, w_bias=False, a_bias=False))
    assert pairs == 2 * 3


def test_threads_give_identical_bits():
    rng = np.random.default_rng(8)
    _, _, we, ae = _expansions(rng, k=3, t=4)
    a, _ = expanded_matmul(we, ae, threads=1)
    b, _ = expanded_matmul(we, ae, threads=4)
    assert a.tobytes() == b.tobytes()


def test_reduce_pairs_permutation_invariant():
    rng = np.random.default_rng(9)
    _, _, we, ae = _expansions(rng, k=2, t=2)
    prods = [pair_product(we, ae, i, j) for i in weight_indices(we, GridMask()) for j in activation_indices(ae, GridMask())]
    ref = reduce_pairs(prods).tobytes()
    for perm in itertools.islice(itertools.permutations(prods), 50):
        assert reduce_pairs(list(perm)).tobytes() == ref


def test_planning_guard_for_deep_8bit_grids():
    rng = np.random.default_rng(10)
    _, _, we, ae = _expansions(rng, 8, 8, k=4, t=5, shape=(3, 64, 2))
    assert plan_lattice_bound(we, ae, 64) >= 1 << 63
    with pytest.raises(OverflowGuardError):
        expanded_matmul(we, ae)


@given(st.integers(1, 64), st.integers(1, 64), st.integers(1, 64), st.sampled_from([2, 4, 8]),
       st.sampled_from([2, 4, 8]), st.integers(0, 2**32 - 1))
def test_int_gemm_property(m, k, n, bw, ba, seed):
    rng = np.random.default_rng(seed)
    w, a = _digits(rng, bw, (m, k)), _digits(rng, ba, (k, n))
    assert np.array_equal(int_gemm(pack_int(w, bw), pack_int(a, ba)).acc, w.astype(float) @ a.astype(float))

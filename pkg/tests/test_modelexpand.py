import itertools
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from seriex.intkernels import LatticeValue
from seriex.layerexpand import ExpansionPolicy, UnsupportedLayerError
from seriex.modelexpand import (
    ScaleVector, abelian_add, abelian_mul, abelian_mul_model, expand_model, expanded_equal, forward_expanded,
    fp_forward, load_expanded, save_expanded,
)
from seriex.quantcore import QuantScheme
from seriex.runtime.train import MLPSpec, init_params, to_manifest
from seriex.tensorio import LayerSpec, ModelManifest, Tensor


def _scaled_source(m: ModelManifest, u) -> ModelManifest:
    """The source model with weight and bias of parameterized layer l multiplied by u[l]."""
    tensors = dict(m.tensors)
    for f, pos in zip(u, m.parameterized()):
        for name in m.layers[pos].params.values():
            tensors[name] = Tensor.from_array(m.tensors[name].data * f)
    return ModelManifest(list(m.layers), dict(m.metadata), tensors)


def _single_linear(w, b=None):
    tensors = {"w": Tensor.from_array(np.asarray(w, dtype=np.float64))}
    params = {"weight": "w"}
    if b is not None:
        tensors["b"] = Tensor.from_array(np.asarray(b, dtype=np.float64))
        params["bias"] = "b"
    return ModelManifest([LayerSpec("linear", params)], {"input_shape": [np.shape(w)[1]]}, tensors)


# ---------------------------------------------------------------- abelian_add

def test_add_single_output_is_identity(rng):
    x = rng.standard_normal((3, 4))
    assert np.array_equal(abelian_add([x]), x)
    assert np.array_equal(abelian_add([x, np.zeros((3, 4))]), x)


def test_add_permutations_bit_identical(rng):
    parts = [rng.standard_normal((5, 6)) * 10.0 ** e for e in (-8, 0, 3, 7)]
    ref = abelian_add(parts)
    for perm in itertools.permutations(range(4)):
        assert np.array_equal(abelian_add([parts[p] for p in perm]), ref)


def test_add_negation_cancels(rng):
    x = rng.standard_normal((4, 4))
    assert np.array_equal(abelian_add([x, -x]), np.zeros((4, 4)))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=6), st.floats(-100, 100))
def test_add_linear_in_weights(values, c):
    arrs = [np.full((2,), v) for v in values]
    got = abelian_add(arrs, [c] * len(arrs))
    want = c * sum(values)
    assert np.allclose(got, want, rtol=1e-10, atol=1e-10 * max(1.0, abs(c) * sum(map(abs, values))))


def test_add_lattice_values_exact_in_any_order(rng):
    unit = np.array([[0.37], [1.25]])
    vals = [LatticeValue(rng.integers(-2**40, 2**40, (2, 3)), unit, s) for s in (0, 4, 8, 0)]
    exact = sum(Fraction(int(v.acc[0, 0])) * 2 ** v.shift for v in vals) * Fraction(0.37)
    for perm in itertools.permutations(range(4)):
        for plan in ("flat", "tree"):
            out = abelian_add([vals[p] for p in perm], plan=plan)
            assert out[0, 0] == float(exact)


def test_add_rejects_bad_input(rng):
    with pytest.raises(ValueError):
        abelian_add([])
    with pytest.raises(ValueError):
        abelian_add([np.zeros(2), np.zeros(3)])
    with pytest.raises(ValueError):
        abelian_add([np.zeros(2)], plan="ring")
    with pytest.raises(ValueError):
        abelian_add([LatticeValue(np.zeros(2, dtype=np.int64), np.ones(2), 0)], [Fraction(1, 2)])


def test_replicated_float_group_is_exact(rng):
    x = rng.standard_normal((3, 3))
    for n in (1, 3, 7, 12, 36):
        assert np.array_equal(abelian_add([x] * n, [Fraction(1, n)] * n), x)


# ---------------------------------------------------------------- abelian_mul

def test_scale_vector_rules():
    with pytest.raises(ValueError):
        ScaleVector((1.0, 0.0))
    with pytest.raises(ValueError):
        ScaleVector((1.0,)) * ScaleVector((1.0, 2.0))
    assert (ScaleVector((2.0, 3.0)) * ScaleVector((0.5, 2.0))).u == (1.0, 6.0)


def test_mul_identity_and_composition(mlp):
    model, _, test = mlp
    em = expand_model(model, ExpansionPolicy())
    x = test.inputs(slice(0, 64))
    ref, _ = forward_expanded(em, x, logits=True)
    same, _ = forward_expanded(abelian_mul_model(ScaleVector.ones(3), em), x, logits=True)
    assert np.array_equal(ref, same)
    u, v = ScaleVector((2.0, 0.5, 4.0)), ScaleVector((0.25, 8.0, 0.5))
    twice = abelian_mul_model(v, abelian_mul_model(u, em))
    once = abelian_mul_model(u * v, em)
    assert np.array_equal(forward_expanded(twice, x, logits=True)[0], forward_expanded(once, x, logits=True)[0])
    with pytest.raises(ValueError):
        abelian_mul(ScaleVector((1.0,)), em.basis[0])


def test_mul_matches_scaling_the_source_model(mlp):
    model, _, test = mlp
    x = test.inputs(slice(0, 64))
    policy = ExpansionPolicy()
    em = expand_model(model, policy)
    for u in [(2.0, 0.5, 4.0), (0.125, 1.0, 16.0)]:
        # power-of-two factors: the scaled model expands to the same digits
        direct, _ = forward_expanded(expand_model(_scaled_source(model, u), policy), x, logits=True)
        via_mul, _ = forward_expanded(abelian_mul_model(ScaleVector(u), em), x, logits=True)
        assert np.abs(direct - via_mul).max() <= 1e-10 * np.abs(direct).max()


def test_mul_general_factor_on_single_layer(rng):
    w, b = rng.standard_normal((4, 5)), rng.standard_normal(4)
    em = expand_model(_single_linear(w, b), ExpansionPolicy(bits=8))
    x = rng.standard_normal((6, 5))
    ref, _ = forward_expanded(em, x)
    got, _ = forward_expanded(abelian_mul_model(ScaleVector((1.7,)), em), x)
    assert np.allclose(got, 1.7 * ref, rtol=1e-12, atol=1e-12)


def test_mul_positive_scale_keeps_argmax(mlp):
    model, _, test = mlp
    em = expand_model(model, ExpansionPolicy())
    x = test.inputs(slice(0, 256))
    a = np.argmax(forward_expanded(em, x, logits=True)[0], axis=1)
    b = np.argmax(forward_expanded(abelian_mul_model(ScaleVector((1.0, 1.0, 3.3)), em), x, logits=True)[0], axis=1)
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- models

def test_non_matmul_layers_replicate_exactly(rng):
    arch = MLPSpec((3, 4, 2))
    model = to_manifest(arch, init_params(arch, 0))
    em = expand_model(model, ExpansionPolicy())
    assert em.n_basis > 1
    x = rng.standard_normal((5, 3))
    _, diag = forward_expanded(em, x, capture=True)
    # relu and softmax of the reduced input, applied once in float, match the replicated reduce
    acts = diag["activations"]
    assert np.array_equal(acts[1], np.maximum(acts[0], 0))
    z = acts[2] - acts[2].max(axis=1, keepdims=True)
    assert np.array_equal(acts[3], np.exp(z) / np.exp(z).sum(axis=1, keepdims=True))


def test_exact_single_linear_is_exact():
    # every weight row peaks at 7 quarter-steps; inputs span 0..14, a unit grid around the midpoint
    w = np.array([[7, -3], [2, -7], [-7, 5]]) * 0.25
    b = np.array([0.25, -1.0, 2.0])
    m = _single_linear(w, b)
    x = np.array([[0.0, 14.0], [7.0, 3.0]])
    p = ExpansionPolicy(bits=4, scheme_w=QuantScheme(bits=4, granularity="per-channel"), first_last_bits=None)
    y, _ = forward_expanded(expand_model(m, p), x)
    assert np.array_equal(y, x @ w.T + b)


def test_mlp_error_shrinks_with_more_terms(mlp):
    model, _, test = mlp
    x = test.inputs(slice(0, 128))
    ref, _ = fp_forward(model, x, logits=True)
    errs = []
    for k, t in [(1, 1), (2, 2), (3, 4), (4, 6)]:
        p = ExpansionPolicy(bits=4, weight_terms_max=k, activation_terms_max=t, first_last_bits=None,
                            activation_stop=False)
        y, _ = forward_expanded(expand_model(model, p), x, logits=True)
        errs.append(np.abs(y - ref).max())
    assert all(b < a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 1e-2


def test_reduce_plans_and_threads_agree(mlp, convnet):
    for model, data in ((mlp[0], mlp[2]), (convnet[0], convnet[2])):
        x = data.inputs(slice(0, 50))
        flat, _ = forward_expanded(expand_model(model, ExpansionPolicy()), x)
        tree, _ = forward_expanded(expand_model(model, ExpansionPolicy(), reduce_plan="tree"), x)
        threaded, _ = forward_expanded(expand_model(model, ExpansionPolicy()), x, threads=4)
        assert np.array_equal(flat, tree) and np.array_equal(flat, threaded)


def test_persistence_round_trip(tmp_path, mlp):
    model, _, test = mlp
    em = abelian_mul_model(ScaleVector((2.0, 1.0, 0.5)), expand_model(model, ExpansionPolicy(bits=2)))
    save_expanded(em, tmp_path / "em")
    back = load_expanded(tmp_path / "em")
    assert expanded_equal(em, back)
    x = test.inputs(slice(0, 32))
    assert np.array_equal(forward_expanded(em, x)[0], forward_expanded(back, x)[0])


def test_unsupported_layer_rejected():
    m = _single_linear(np.eye(2))
    m.layers.append(LayerSpec("maxpool"))
    with pytest.raises((UnsupportedLayerError, ValueError)):
        expand_model(m, ExpansionPolicy())


def test_w4a4_agrees_with_float_on_mlp(mlp):
    model, _, test = mlp
    em = expand_model(model, ExpansionPolicy(bits=4))
    x = test.inputs()
    fp = np.argmax(fp_forward(model, x, logits=True)[0], axis=1)
    ex = np.argmax(forward_expanded(em, x, logits=True)[0], axis=1)
    assert np.mean(fp == ex) >= 0.99


def test_batch_shape_checked(mlp):
    em = expand_model(mlp[0], ExpansionPolicy())
    with pytest.raises(ValueError):
        forward_expanded(em, np.zeros((2, 3)))

"""Expansion of a single linear or conv2d layer.

Weights are expanded once, per output channel, when the layer is converted.
Activations are expanded per batch at call time with a per-tensor scheme and
evaluated against the weight terms through :func:`intkernels.expanded_matmul`.
Conv layers go through the same matmul after patch extraction.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import ops
from .intkernels import GridMask, expanded_matmul
from .quantcore import QuantScheme, TensorExpansion, expand_tensor
from .tensorio import conv_out_hw

MATMUL_KINDS = ("linear", "conv2d")


class UnsupportedLayerError(ValueError):
    pass


def default_weight_scheme(bits: int) -> QuantScheme:
    return QuantScheme(bits=bits, symmetric=True, saturated=True, clip_mode="laplace",
                       granularity="per-channel", axis=0)


def default_activation_scheme(bits: int) -> QuantScheme:
    return QuantScheme(bits=bits, symmetric=False)


@dataclass(frozen=True)
class ExpansionPolicy:
    """Bit width, term caps and stopping thresholds for a layer or model.

    ``scheme_w`` / ``scheme_a`` default to per-channel symmetric Laplace-clipped
    weights and per-tensor asymmetric unclipped activations at ``bits``. Their
    bit width is overridden per layer (first/last layers use ``first_last_bits``).
    """

    bits: int = 4
    weight_terms_max: int = 2
    activation_terms_max: int = 4
    weight_stop_threshold: float = 1e-2
    activation_stop_threshold: float = 1e-4
    first_last_bits: int | None = 8
    scheme_w: QuantScheme | None = None
    scheme_a: QuantScheme | None = None
    grid_mask: GridMask = field(default_factory=GridMask)
    activation_stop: bool = True

    def __post_init__(self):
        if self.weight_terms_max < 1 or self.activation_terms_max < 1:
            raise ValueError("term caps must be >= 1")
        if self.weight_stop_threshold <= 0 or self.activation_stop_threshold <= 0:
            raise ValueError("stop thresholds must be positive")
        if self.scheme_w is None:
            object.__setattr__(self, "scheme_w", default_weight_scheme(self.bits))
        if self.scheme_a is None:
            object.__setattr__(self, "scheme_a", default_activation_scheme(self.bits))
        if self.scheme_w.granularity == "per-channel" and self.scheme_w.axis != 0:
            raise ValueError("per-channel weight schemes must use the output axis 0")
        if self.scheme_a.granularity != "per-tensor":
            raise ValueError("activation schemes are per-tensor")

    def weight_scheme(self, bits: int | None = None) -> QuantScheme:
        return self.scheme_w if bits is None else replace(self.scheme_w, bits=bits)

    def activation_scheme(self, bits: int | None = None) -> QuantScheme:
        return self.scheme_a if bits is None else replace(self.scheme_a, bits=bits)

    def to_dict(self) -> dict:
        return {
            "bits": self.bits,
            "weight_terms_max": self.weight_terms_max,
            "activation_terms_max": self.activation_terms_max,
            "weight_stop_threshold": self.weight_stop_threshold,
            "activation_stop_threshold": self.activation_stop_threshold,
            "first_last_bits": self.first_last_bits,
            "scheme_w": self.scheme_w.to_dict(),
            "scheme_a": self.scheme_a.to_dict(),
            "grid_mask": self.grid_mask.to_dict(),
            "activation_stop": self.activation_stop,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExpansionPolicy":
        d = dict(d)
        for key in ("scheme_w", "scheme_a"):
            if d.get(key) is not None:
                d[key] = QuantScheme.from_dict(d[key])
        if d.get("grid_mask") is not None:
            d["grid_mask"] = GridMask(**d["grid_mask"])
        return cls(**d)


def choose_weight_terms(scale_1: float, bits: int, policy: ExpansionPolicy) -> int:
    """Smallest n with ``scale_n * 2**bits < weight_stop_threshold``, clamped to [1, k]."""
    if scale_1 < 0:
        raise ValueError("scale_1 must be non-negative")
    if scale_1 == 0:
        return 1
    n = 1
    while n < policy.weight_terms_max and np.ldexp(scale_1, -bits * (n - 1) + bits) >= policy.weight_stop_threshold:
        n += 1
    return n


def _trim_zero_terms(e: TensorExpansion) -> TensorExpansion:
    n = e.n_terms
    while n > 1 and not np.any(e.terms[n - 1].digits):
        n -= 1
    return e.truncated(n)


@dataclass(frozen=True, eq=False)
class ExpandedLayer:
    """A linear or conv2d layer with expanded weights and a full-precision bias.

    ``weight_expansion`` keeps the source weight shape; conv weights are viewed
    as (O, C*kh*kw) at evaluation time.
    """

    kind: str
    weight_expansion: TensorExpansion
    bias_vector: np.ndarray | None
    activation_scheme: QuantScheme
    policy: ExpansionPolicy
    grid_mask: GridMask
    attrs: dict = field(default_factory=dict)

    @property
    def bits(self) -> int:
        return self.weight_expansion.scheme.bits

    @property
    def weight_terms(self) -> int:
        return self.weight_expansion.n_terms

    @property
    def out_features(self) -> int:
        return self.weight_expansion.source_shape[0]

    def weight_matrix_expansion(self) -> TensorExpansion:
        e = self.weight_expansion
        if self.kind == "conv2d":
            return e.reshaped((e.source_shape[0], int(np.prod(e.source_shape[1:]))))
        return e


def expand_layer_weights(kind: str, weight, bias, policy: ExpansionPolicy, *, attrs: dict | None = None,
                         bits: int | None = None) -> ExpandedLayer:
    """Expand one layer's weights; ``bits`` overrides the policy bit width for this layer."""
    if kind not in MATMUL_KINDS:
        raise UnsupportedLayerError(f"cannot expand a {kind!r} layer")
    w = np.asarray(weight, dtype=np.float64)
    if w.ndim != (2 if kind == "linear" else 4):
        raise ValueError(f"{kind} weight has wrong rank {w.ndim}")
    scheme = policy.weight_scheme(bits)
    full = expand_tensor(w, scheme, policy.weight_terms_max)
    n = choose_weight_terms(float(np.max(full.base_scale)), scheme.bits, policy)
    we = _trim_zero_terms(full.truncated(n))
    b = None if bias is None else np.asarray(bias, dtype=np.float64).copy()
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")
    return ExpandedLayer(kind, we, b, policy.activation_scheme(scheme.bits), policy, policy.grid_mask,
                         dict(attrs or {}))


def lower_input(el: ExpandedLayer, x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """Input batch -> the right-hand matmul operand plus what is needed to restore the output shape."""
    x = np.asarray(x, dtype=np.float64)
    if el.kind == "linear":
        inner = el.weight_expansion.source_shape[1]
        if x.ndim != 2 or x.shape[1] != inner:
            raise ValueError(f"linear input {x.shape} does not match weight {el.weight_expansion.source_shape}")
        return x.T, (x.shape[0],)
    _, c, kh, kw = el.weight_expansion.source_shape
    if x.ndim != 4 or x.shape[1] != c:
        raise ValueError(f"conv2d input {x.shape} does not match weight {el.weight_expansion.source_shape}")
    stride, padding = int(el.attrs.get("stride", 1)), int(el.attrs.get("padding", 0))
    ho, wo = conv_out_hw(x.shape[2], x.shape[3], kh, kw, stride, padding)
    return ops.im2col(x, kh, kw, stride, padding), (x.shape[0], ho, wo)


def restore_output(el: ExpandedLayer, y: np.ndarray, layout: tuple) -> np.ndarray:
    if el.kind == "linear":
        out = y.T
        return out + el.bias_vector if el.bias_vector is not None else out
    out = ops.cols_to_output(y, *layout)
    return out + el.bias_vector[None, :, None, None] if el.bias_vector is not None else out


def stop_terms(ae: TensorExpansion, threshold: float) -> int:
    """Smallest n whose residual max-norm is below ``threshold``; n_terms if none is."""
    for n, r in enumerate(ae.residual_norms, start=1):
        if r < threshold:
            return n
    return ae.n_terms


def expand_activation(el: ExpandedLayer, a_mat: np.ndarray, t_terms: int) -> tuple[TensorExpansion, dict]:
    """Expand a lowered activation matrix, applying the stopping rule when enabled."""
    ae = expand_tensor(a_mat, el.activation_scheme, t_terms)
    used = stop_terms(ae, el.policy.activation_stop_threshold) if el.policy.activation_stop else t_terms
    ae = ae.truncated(used)
    info = {
        "activation_terms": used,
        "activation_terms_requested": t_terms,
        "activation_residual": ae.residual_norms[-1],
        "stop_rule_truncated": bool(ae.residual_norms[-1] >= el.policy.activation_stop_threshold),
    }
    return ae, info


def forward_expanded_layer(el: ExpandedLayer, a, t_terms: int, threads: int = 1) -> tuple[np.ndarray, dict]:
    """Evaluate the layer on a float batch using ``t_terms`` activation terms at most."""
    if not 1 <= t_terms <= el.policy.activation_terms_max:
        raise ValueError(f"t_terms must be in 1..{el.policy.activation_terms_max}")
    a_mat, layout = lower_input(el, a)
    ae, info = expand_activation(el, a_mat, t_terms)
    y, pairs = expanded_matmul(el.weight_matrix_expansion(), ae, el.grid_mask, threads=threads)
    info.update(weight_terms=el.weight_terms, pair_count=pairs, digit_pairs=el.weight_terms * ae.n_terms)
    return restore_output(el, y, layout), info


__all__ = [
    "ExpansionPolicy", "ExpandedLayer", "UnsupportedLayerError", "choose_weight_terms", "expand_layer_weights",
    "forward_expanded_layer", "expand_activation", "lower_input", "restore_output", "stop_terms",
    "default_weight_scheme", "default_activation_scheme",
]

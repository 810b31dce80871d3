"""Integer kernels and the expanded tensor product.

``expanded_matmul`` evaluates ``W @ A`` from two expansions as a grid of
term pairs. Index ``-1`` is the sparse clip correction, ``0`` the bias
(all-ones) term, ``1..n`` the digit ladder. Digit x digit pairs are exact
int64 GEMMs shifted onto one common lattice, so their reduction is
order-independent; the remaining pairs are float and summed in canonical
(i, j) order.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import kernels
from .quantcore import TensorExpansion
from .tensorio import PackedIntMatrix, SparseCorrection

INT64_LIMIT = 1 << 63


class OverflowGuardError(ArithmeticError):
    """A planned integer accumulation could exceed int64."""


@dataclass
class OpCounter:
    """Scalar multiply-add tally for cost instrumentation."""

    madds: int = 0


@dataclass(frozen=True, eq=False)
class IntGemmResult:
    acc: np.ndarray

    @property
    def rows(self) -> int:
        return self.acc.shape[0]

    @property
    def cols(self) -> int:
        return self.acc.shape[1]


def _int_operand(x) -> tuple[np.ndarray, int]:
    if isinstance(x, PackedIntMatrix):
        d = x.unpack()
        return d.reshape(x.rows, x.cols) if d.ndim != 2 else d, x.bits
    arr = np.asarray(x)
    if arr.ndim != 2:
        raise ValueError("int_gemm operands must be matrices")
    if arr.dtype != np.int8:
        if arr.size and (arr.min() < -128 or arr.max() > 127):
            raise ValueError("operand values exceed int8")
        arr = arr.astype(np.int8)
    return arr, 8


def gemm_bound(bits_w: int, bits_a: int, inner: int) -> int:
    """Largest possible |entry| of a digit GEMM."""
    return (1 << (bits_w - 1)) * (1 << (bits_a - 1)) * inner


def int_gemm(w, a) -> IntGemmResult:
    """Exact integer product of two packed (or int8) digit matrices."""
    wd, bw = _int_operand(w)
    ad, ba = _int_operand(a)
    if wd.shape[1] != ad.shape[0]:
        raise ValueError(f"inner dimensions differ: {wd.shape} x {ad.shape}")
    if gemm_bound(bw, ba, wd.shape[1]) >= INT64_LIMIT:
        raise OverflowGuardError("digit GEMM could overflow int64")
    return IntGemmResult(kernels.gemm_i8(np.ascontiguousarray(wd), np.ascontiguousarray(ad)))


def ones_multiply(m, side: str = "right", n: int | None = None, counter: OpCounter | None = None) -> np.ndarray:
    """``m @ ones`` (side='right') or ``ones @ m`` (side='left') without forming ``ones``.

    The ones matrix is square by default (``m @ 1^T 1``); ``n`` sets its free
    extent. Cost is one pass of row (column) sums.
    """
    arr = m.acc if isinstance(m, IntGemmResult) else np.asarray(m)
    if arr.ndim != 2:
        raise ValueError("ones_multiply needs a matrix")
    r, c = arr.shape
    if side == "right":
        sums = arr.sum(axis=1)
        width = c if n is None else n
        out = np.broadcast_to(sums[:, None], (r, width))
    elif side == "left":
        sums = arr.sum(axis=0)
        height = r if n is None else n
        out = np.broadcast_to(sums[None, :], (height, c))
    else:
        raise ValueError("side must be 'left' or 'right'")
    if counter is not None:
        counter.madds += r * c
    return np.array(out)


def dense_ones_reference(m, side: str = "right", counter: OpCounter | None = None) -> np.ndarray:
    """Triple-loop product with a materialised ones matrix; counts every multiply-add."""
    arr = np.asarray(m, dtype=np.float64)
    r, c = arr.shape
    if side == "right":
        ones = np.ones((c, c))
        out = np.zeros((r, c))
        for i in range(r):
            for j in range(c):
                out[i, j] = float(arr[i, :] @ ones[:, j])
        if counter is not None:
            counter.madds += r * c * c
    else:
        ones = np.ones((r, r))
        out = np.zeros((r, c))
        for i in range(r):
            for j in range(c):
                out[i, j] = float(ones[i, :] @ arr[:, j])
        if counter is not None:
            counter.madds += r * r * c
    return out


def sparse_correction_multiply(s: SparseCorrection, other, side: str = "left") -> np.ndarray:
    """``S @ other`` (side='left') or ``other @ S`` (side='right') touching only nonzeros of S."""
    if len(s.dense_shape) != 2:
        raise ValueError("sparse correction must be a matrix")
    o = np.asarray(other, dtype=np.float64)
    if o.ndim != 2:
        raise ValueError("other operand must be a matrix")
    r, c = s.dense_shape
    rows, cols = s.coords()
    if side == "left":
        if o.shape[0] != c:
            raise ValueError(f"shape mismatch: {s.dense_shape} x {o.shape}")
        out = np.zeros((r, o.shape[1]))
        np.add.at(out, rows, s.values[:, None] * o[cols, :])
    elif side == "right":
        if o.shape[1] != r:
            raise ValueError(f"shape mismatch: {o.shape} x {s.dense_shape}")
        out = np.zeros((o.shape[0], c))
        np.add.at(out.T, cols, s.values[:, None] * o[:, rows].T)
    else:
        raise ValueError("side must be 'left' or 'right'")
    return out


def _sparse_row_sums(s: SparseCorrection) -> np.ndarray:
    return np.bincount(s.coords()[0], weights=s.values, minlength=s.dense_shape[0])


def _sparse_col_sums(s: SparseCorrection) -> np.ndarray:
    return np.bincount(s.coords()[1], weights=s.values, minlength=s.dense_shape[1])


@dataclass(frozen=True, eq=False)
class LatticeValue:
    """``unit * 2**shift * acc`` with an exact int64 ``acc``.

    ``unit`` broadcasts against ``acc`` (per-row or per-column scale vectors).
    Values sharing a unit add exactly.
    """

    acc: np.ndarray
    unit: np.ndarray
    shift: int

    def to_float(self) -> np.ndarray:
        return np.ldexp(self.unit, self.shift) * self.acc.astype(np.float64)

    def negated(self) -> "LatticeValue":
        return LatticeValue(-self.acc, self.unit, self.shift)


def _max_abs(acc: np.ndarray) -> int:
    return int(np.abs(acc).max()) if acc.size else 0


class LatticeAccumulator:
    """int64 accumulator on the finest lattice of one (weight, activation) expansion pair.

    ``plan_bound`` is checked against int64 before any partial is added;
    partials are shifted by their lattice exponent and added, so any order of
    ``add`` calls produces the same integers.
    """

    def __init__(self, shape, unit, plan_bound: int | None = None):
        if plan_bound is not None and plan_bound >= INT64_LIMIT:
            raise OverflowGuardError(f"worst-case lattice magnitude 2^{math.log2(plan_bound):.1f} exceeds int64")
        self.acc = np.zeros(shape, dtype=np.int64)
        self.unit = np.asarray(unit, dtype=np.float64)

    def add(self, partial: np.ndarray, shift: int) -> None:
        self.acc += np.left_shift(partial, shift)

    def result(self) -> np.ndarray:
        return self.unit * self.acc.astype(np.float64)


def lattice_sum(values: list[LatticeValue]) -> LatticeValue:
    """Exact sum of lattice values with a common unit; raises instead of wrapping."""
    if not values:
        raise ValueError("nothing to sum")
    unit = values[0].unit
    for v in values[1:]:
        if v.unit.shape != unit.shape or v.unit.tobytes() != unit.tobytes():
            raise ValueError("lattice values do not share a unit")
    low = min(v.shift for v in values)
    bound = sum(_max_abs(v.acc) << (v.shift - low) for v in values)
    if bound >= INT64_LIMIT:
        raise OverflowGuardError("lattice sum could exceed int64")
    acc = np.zeros(np.broadcast_shapes(*(v.acc.shape for v in values)), dtype=np.int64)
    for v in values:
        acc += np.left_shift(v.acc, v.shift - low)
    return LatticeValue(acc, unit, low)


@dataclass(frozen=True)
class GridMask:
    """Which optional rows/columns of the term-pair grid are evaluated."""

    w_sa: bool = True
    w_bias: bool = True
    a_bias: bool = True
    a_sa: bool = False

    def to_dict(self) -> dict:
        return {"w_sa": self.w_sa, "w_bias": self.w_bias, "a_bias": self.a_bias, "a_sa": self.a_sa}


def weight_indices(we: TensorExpansion, mask: GridMask) -> list[int]:
    idx = []
    if we.saturation is not None and we.saturation.nnz and mask.w_sa:
        idx.append(-1)
    if we.nsy_present and mask.w_bias:
        idx.append(0)
    return idx + list(range(1, we.n_terms + 1))


def activation_indices(ae: TensorExpansion, mask: GridMask) -> list[int]:
    idx = []
    if ae.saturation is not None and ae.saturation.nnz and mask.a_sa:
        idx.append(-1)
    if ae.nsy_present and mask.a_bias:
        idx.append(0)
    return idx + list(range(1, ae.n_terms + 1))


def _row_scale(e: TensorExpansion, vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if e.scheme.granularity == "per-tensor":
        return v.reshape(1, 1)
    if e.scheme.axis != 0:
        raise ValueError("weight expansion must be per-tensor or per-channel on axis 0")
    return v.reshape(-1, 1)


def _col_scale(e: TensorExpansion, vec) -> np.ndarray:
    v = np.asarray(vec, dtype=np.float64)
    if e.scheme.granularity == "per-tensor":
        return v.reshape(1, 1)
    if e.scheme.axis != 1:
        raise ValueError("activation expansion must be per-tensor or per-channel on axis 1")
    return v.reshape(1, -1)


@dataclass(frozen=True, eq=False)
class PairProduct:
    """Contribution of term pair (i, j): a lattice value or a float matrix."""

    i: int
    j: int
    lattice: LatticeValue | None = None
    value: np.ndarray | None = None

    def to_float(self) -> np.ndarray:
        return self.lattice.to_float() if self.lattice is not None else self.value


def _weight_factor(we, i, w_scale):
    """Per-row factor and the 'digits' matrix for weight index i (float pairs only)."""
    if i == 0:
        return w_scale["bias"], None
    return w_scale["terms"][i - 1], we.terms[i - 1].digits


def pair_product(we: TensorExpansion, ae: TensorExpansion, i: int, j: int, unit=None,
                 w_scales: dict | None = None) -> PairProduct:
    """Evaluate one grid pair of ``W @ A``; both expansions are matrices."""
    rows, inner = we.source_shape
    cols = ae.source_shape[1]
    if w_scales is None:
        w_scales = {"bias": _row_scale(we, we.bias), "terms": [_row_scale(we, t.scale) for t in we.terms]}
    a_bias = _col_scale(ae, ae.bias)
    if i >= 1 and j >= 1:
        g = int_gemm(we.terms[i - 1].digits, ae.terms[j - 1].digits).acc
        shift = we.scheme.bits * (we.n_terms - i) + ae.scheme.bits * (ae.n_terms - j)
        if unit is None:
            unit = w_scales["terms"][-1] * _col_scale(ae, ae.terms[-1].scale)
        return PairProduct(i, j, lattice=LatticeValue(g, unit, shift))
    if i == -1:
        s = we.saturation
        if j >= 1:
            val = sparse_correction_multiply(s, ae.terms[j - 1].digits, "left") * _col_scale(ae, ae.terms[j - 1].scale)
        elif j == 0:
            val = _sparse_row_sums(s)[:, None] * a_bias * np.ones((1, cols))
        else:
            val = sparse_correction_multiply(s, ae.saturation.to_dense(), "left")
        return PairProduct(i, j, value=val)
    factor, digits = _weight_factor(we, i, w_scales)
    if j == -1:
        sa = ae.saturation
        if digits is None:
            val = factor * _sparse_col_sums(sa)[None, :] * np.ones((rows, 1))
        else:
            val = factor * sparse_correction_multiply(sa, digits, "right")
        return PairProduct(i, j, value=val)
    if j == 0:
        if digits is None:
            val = factor * a_bias * float(inner) * np.ones((rows, cols))
        else:
            val = (factor * ones_multiply(digits, "right", n=cols)) * a_bias
        return PairProduct(i, j, value=val)
    # i == 0, j >= 1
    col = ones_multiply(ae.terms[j - 1].digits, "left", n=rows)
    val = factor * (col * _col_scale(ae, ae.terms[j - 1].scale))
    return PairProduct(i, j, value=val)


def plan_lattice_bound(we: TensorExpansion, ae: TensorExpansion, inner: int) -> int:
    """Worst-case |acc| of the full digit grid on the finest lattice."""
    per_pair = gemm_bound(we.scheme.bits, ae.scheme.bits, inner)
    total = 0
    for i in range(1, we.n_terms + 1):
        for j in range(1, ae.n_terms + 1):
            total += per_pair << (we.scheme.bits * (we.n_terms - i) + ae.scheme.bits * (ae.n_terms - j))
    return total


def reduce_pairs(products: list[PairProduct]) -> np.ndarray:
    """Sum pair products: exact lattice part first, then float parts in (i, j) order."""
    lat = [p.lattice for p in products if p.lattice is not None]
    floats = sorted((p for p in products if p.lattice is None), key=lambda p: (p.i, p.j))
    out = lattice_sum(lat).to_float() if lat else None
    for p in floats:
        out = p.value.copy() if out is None else out + p.value
    return out


def expanded_matmul(we: TensorExpansion, ae: TensorExpansion, mask: GridMask = GridMask(),
                    threads: int = 1) -> tuple[np.ndarray, int]:
    """``W @ A`` from expansions; returns the float64 result and the number of pairs evaluated."""
    if len(we.source_shape) != 2 or len(ae.source_shape) != 2:
        raise ValueError("expanded_matmul needs matrix expansions")
    rows, inner = we.source_shape
    if ae.source_shape[0] != inner:
        raise ValueError(f"inner dimensions differ: {we.source_shape} x {ae.source_shape}")
    cols = ae.source_shape[1]
    w_scales = {"bias": _row_scale(we, we.bias), "terms": [_row_scale(we, t.scale) for t in we.terms]}
    unit = w_scales["terms"][-1] * _col_scale(ae, ae.terms[-1].scale)
    acc = LatticeAccumulator((rows, cols), unit, plan_lattice_bound(we, ae, inner))
    pairs = [(i, j) for i in weight_indices(we, mask) for j in activation_indices(ae, mask)]

    def run(ij):
        return pair_product(we, ae, ij[0], ij[1], unit=unit, w_scales=w_scales)

    if threads > 1 and len(pairs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            products = list(pool.map(run, pairs))
    else:
        products = [run(ij) for ij in pairs]
    for p in products:
        if p.lattice is not None:
            acc.add(p.lattice.acc, p.lattice.shift)
    out = acc.result()
    for p in sorted((p for p in products if p.lattice is None), key=lambda p: (p.i, p.j)):
        out = out + p.value
    return np.broadcast_to(out, (rows, cols)).copy(), len(pairs)


__all__ = [
    "OverflowGuardError", "OpCounter", "IntGemmResult", "int_gemm", "ones_multiply", "dense_ones_reference",
    "sparse_correction_multiply", "LatticeValue", "LatticeAccumulator", "lattice_sum", "GridMask",
    "PairProduct", "pair_product", "reduce_pairs", "expanded_matmul", "weight_indices", "activation_indices",
    "plan_lattice_bound",
]

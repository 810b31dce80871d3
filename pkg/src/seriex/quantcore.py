"""Residual low-bit expansion of float tensors.

A tensor ``M`` is written as

    M = M_sa + bias * ones + sum_i scale_i * D_i

where ``M_sa`` is the sparse excess removed by clipping, ``D_i`` are X-bit
signed digit tensors, and ``scale_i = 2**X * scale_{i+1}`` exactly. Term 1 is
an ordinary single-step quantization; later terms quantize the running
residual on the imposed ladder ``scale_1 * 2**(-X*(i-1))``.

Digits come from :func:`round_digits`, a floor with a bit-width dependent
offset. With X-bit two's-complement digits and ratio 2**X it keeps every
residual inside the range later terms can still cover, so the residual after
n terms is at most ``digit_offset(X) * scale_n``.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .tensorio import SparseCorrection, int_range

BITS = (2, 4, 8)
CLIP_MODES = ("none", "laplace", "fixed")

# argmin_alpha E[(x - Q_alpha(x))^2], x ~ Laplace(0, 1), Q_alpha the saturated
# symmetric X-bit quantizer of this module; regenerate with laplace_clip_constant.
LAPLACE_CLIP = {
    2: 1.8022284659482142,
    4: 4.808901986737693,
    8: 9.882610556482351,
}


class QuantizationError(ValueError):
    pass


def digit_offset(bits: int) -> float:
    """Tie point of :func:`round_digits`: 2**(X-1) / (2**X - 1)."""
    return (1 << (bits - 1)) / ((1 << bits) - 1)


def round_digits(y, bits: int) -> np.ndarray:
    """floor(y + digit_offset(bits)), the single rounding used for every digit."""
    return np.floor(np.asarray(y, dtype=np.float64) + digit_offset(bits))


def qmax(bits: int) -> int:
    return (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QuantScheme:
    bits: int = 4
    symmetric: bool = True
    saturated: bool = False
    clip_mode: str = "none"
    clip: tuple[float, float] | None = None
    granularity: str = "per-tensor"
    axis: int = 0

    def __post_init__(self):
        if self.bits not in BITS:
            raise ValueError(f"bits must be one of {BITS}")
        if self.clip_mode not in CLIP_MODES:
            raise ValueError(f"clip_mode must be one of {CLIP_MODES}")
        if (self.clip_mode == "none") == self.saturated:
            raise ValueError("clip_mode 'none' exactly when the scheme is non-saturated")
        if self.clip_mode == "fixed":
            if self.clip is None or not self.clip[0] < self.clip[1]:
                raise ValueError("fixed clip needs clip_lo < clip_hi")
        if self.granularity not in ("per-tensor", "per-channel"):
            raise ValueError("granularity is 'per-tensor' or 'per-channel'")

    @classmethod
    def parse(cls, name: str, bits: int = 4, clip: str = "laplace", **kw) -> "QuantScheme":
        """Build from the CLI spelling: ``sym-nonsat``, ``asym-sat``, ...

        ``clip`` is ``laplace`` or ``fixed:<lo>,<hi>`` and only matters when saturated.
        """
        try:
            sym, sat = name.split("-")
        except ValueError:
            raise ValueError(f"bad scheme {name!r}") from None
        if sym not in ("sym", "asym") or sat not in ("sat", "nonsat"):
            raise ValueError(f"bad scheme {name!r}")
        saturated = sat == "sat"
        mode, bounds = "none", None
        if saturated:
            if clip == "laplace":
                mode = "laplace"
            elif clip.startswith("fixed:"):
                lo, hi = (float(v) for v in clip[6:].split(","))
                mode, bounds = "fixed", (lo, hi)
            else:
                raise ValueError(f"bad clip {clip!r}")
        return cls(bits=bits, symmetric=sym == "sym", saturated=saturated, clip_mode=mode, clip=bounds, **kw)

    @property
    def name(self) -> str:
        return ("sym" if self.symmetric else "asym") + ("-sat" if self.saturated else "-nonsat")

    def to_dict(self) -> dict:
        return {"bits": self.bits, "symmetric": self.symmetric, "saturated": self.saturated,
                "clip_mode": self.clip_mode, "clip": list(self.clip) if self.clip else None,
                "granularity": self.granularity, "axis": self.axis}

    @classmethod
    def from_dict(cls, d: dict) -> "QuantScheme":
        d = dict(d)
        if d.get("clip") is not None:
            d["clip"] = tuple(d["clip"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ExpansionTerm:
    """One rung of the ladder: per-channel ``scale`` (shape (C,)) and int8 ``digits``."""

    scale: np.ndarray
    digits: np.ndarray


@dataclass(frozen=True, eq=False)
class TensorExpansion:
    saturation: SparseCorrection | None
    bias: np.ndarray
    nsy_present: bool
    terms: tuple[ExpansionTerm, ...]
    scheme: QuantScheme
    source_shape: tuple[int, ...]
    residual_norms: tuple[float, ...] = ()

    @property
    def n_terms(self) -> int:
        return len(self.terms)

    @property
    def base_scale(self) -> np.ndarray:
        return self.terms[0].scale

    def scale_shape(self) -> tuple[int, ...]:
        """Shape that broadcasts a per-channel vector against the source tensor."""
        if self.scheme.granularity == "per-tensor":
            return (1,) * len(self.source_shape)
        shape = [1] * len(self.source_shape)
        shape[self.scheme.axis] = self.source_shape[self.scheme.axis]
        return tuple(shape)

    def broadcast(self, vec) -> np.ndarray:
        return np.asarray(vec, dtype=np.float64).reshape(self.scale_shape())

    def truncated(self, n: int) -> "TensorExpansion":
        if not 1 <= n <= self.n_terms:
            raise ValueError(f"cannot keep {n} of {self.n_terms} terms")
        return replace(self, terms=self.terms[:n], residual_norms=self.residual_norms[:n])

    def reshaped(self, shape) -> "TensorExpansion":
        """Same expansion viewed with a new source shape; the channel axis must stay leading."""
        shape = tuple(int(s) for s in shape)
        if self.scheme.granularity == "per-channel" and (self.scheme.axis != 0 or shape[0] != self.source_shape[0]):
            raise ValueError("reshape must keep the channel axis leading")
        sat = self.saturation.reshaped(shape) if self.saturation is not None else None
        terms = tuple(ExpansionTerm(t.scale, t.digits.reshape(shape)) for t in self.terms)
        return replace(self, saturation=sat, terms=terms, source_shape=shape)


def _to_rows(m: np.ndarray, scheme: QuantScheme) -> np.ndarray:
    if scheme.granularity == "per-tensor":
        return m.reshape(1, -1)
    if not 0 <= scheme.axis < m.ndim:
        raise QuantizationError(f"channel axis {scheme.axis} invalid for shape {m.shape}")
    return np.moveaxis(m, scheme.axis, 0).reshape(m.shape[scheme.axis], -1)


def _from_rows(rows: np.ndarray, shape, scheme: QuantScheme) -> np.ndarray:
    if scheme.granularity == "per-tensor":
        return rows.reshape(shape)
    moved = list(shape)
    moved.insert(0, moved.pop(scheme.axis))
    return np.moveaxis(rows.reshape(moved), 0, scheme.axis)


def _as_float(m) -> np.ndarray:
    arr = np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise QuantizationError("input contains non-finite values")
    return arr


def compute_clip(samples, scheme: QuantScheme) -> tuple[float, float]:
    """Clip bounds for a saturated scheme.

    Laplace mode estimates ``b = mean|x - median(x)|`` and returns
    ``(-c*b, c*b)`` (symmetric) or ``median -/+ c*b`` (asymmetric), with
    ``c = LAPLACE_CLIP[bits]``.
    """
    x = _as_float(samples).ravel()
    if x.size == 0:
        raise QuantizationError("cannot compute a clip from no samples")
    if not scheme.saturated:
        raise QuantizationError("clip requested for a non-saturated scheme")
    if scheme.clip_mode == "fixed":
        return float(scheme.clip[0]), float(scheme.clip[1])
    med = float(np.median(x))
    b = float(np.mean(np.abs(x - med)))
    c = LAPLACE_CLIP[scheme.bits] * b
    if scheme.symmetric:
        return -c, c
    return med - c, med + c


def _row_clips(rows: np.ndarray, scheme: QuantScheme) -> tuple[np.ndarray, np.ndarray]:
    pairs = [compute_clip(r, scheme) for r in rows]
    return np.array([p[0] for p in pairs]), np.array([p[1] for p in pairs])


def _coerce_clip(clip, n_rows: int) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = clip
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n_rows,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (n_rows,)).copy()
    if np.any(lo > hi):
        raise QuantizationError("clip lower bound above upper bound")
    return lo, hi


def _ladder_step(residual: np.ndarray, scale: np.ndarray, bits: int) -> np.ndarray:
    """Digits of ``residual`` at per-row ``scale``; zero-scale rows give zero digits."""
    s = scale[:, None]
    y = np.divide(residual, s, out=np.zeros_like(residual), where=s != 0)
    lo, hi = int_range(bits)
    return np.clip(round_digits(y, bits), lo, hi).astype(np.int8)


def _quantize_rows(rows, scheme, clip):
    n = rows.shape[0]
    L = qmax(scheme.bits)
    if scheme.saturated:
        lo, hi = _coerce_clip(clip, n) if clip is not None else _row_clips(rows, scheme)
        clipped = np.clip(rows, lo[:, None], hi[:, None])
    else:
        clipped = rows
        if rows.shape[1]:
            lo, hi = rows.min(axis=1), rows.max(axis=1)
        else:
            lo = hi = np.zeros(n)
    if scheme.symmetric:
        bias = np.zeros(n)
        amax = np.abs(clipped).max(axis=1) if rows.shape[1] else np.zeros(n)
        scale = amax / L
    else:
        bias = (hi - lo) / 2 + lo
        scale = (hi - lo) / (2 * L)
    digits = _ladder_step(clipped - bias[:, None], scale, scheme.bits)
    return scale, bias, digits, clipped


def quantize_once(m, scheme: QuantScheme, clip=None):
    """Single-step quantization of ``m``.

    Returns ``(term, bias, correction, residual)``; ``correction`` is None for
    non-saturated schemes, ``bias`` has one entry per channel (zeros when
    symmetric) and ``residual = m - reconstruction``.
    """
    m = _as_float(m)
    if clip is not None and not scheme.saturated:
        raise QuantizationError("clip given for a non-saturated scheme")
    rows = _to_rows(m, scheme)
    scale, bias, digits, clipped = _quantize_rows(rows, scheme, clip)
    correction = None
    corr_rows = 0.0
    if scheme.saturated:
        corr_rows = rows - clipped
        correction = SparseCorrection.from_dense(_from_rows(corr_rows, m.shape, scheme))
    recon = corr_rows + bias[:, None] + scale[:, None] * digits
    residual = _from_rows(rows - recon, m.shape, scheme)
    term = ExpansionTerm(scale, _from_rows(digits, m.shape, scheme))
    return term, bias, correction, residual


def expand_tensor(m, scheme: QuantScheme, n_terms: int) -> TensorExpansion:
    """Expand ``m`` into ``n_terms`` ladder terms (plus bias and clip correction)."""
    if n_terms < 1:
        raise QuantizationError("n_terms must be >= 1")
    m = _as_float(m)
    term, bias, correction, residual = quantize_once(m, scheme)
    s1 = term.scale
    rows = _to_rows(residual, scheme).copy()
    terms = [term]
    norms = [float(np.abs(rows).max()) if rows.size else 0.0]
    for i in range(1, n_terms):
        s = np.ldexp(s1, -scheme.bits * i)
        digits = _ladder_step(rows, s, scheme.bits)
        rows -= s[:, None] * digits
        terms.append(ExpansionTerm(s, _from_rows(digits, m.shape, scheme)))
        norms.append(float(np.abs(rows).max()) if rows.size else 0.0)
    return TensorExpansion(
        saturation=correction,
        bias=bias,
        nsy_present=not scheme.symmetric,
        terms=tuple(terms),
        scheme=scheme,
        source_shape=tuple(m.shape),
        residual_norms=tuple(norms),
    )


def ladder_value(e: TensorExpansion) -> np.ndarray:
    """sum_i scale_i * D_i in float64.

    When the combined integer fits in 53 bits it is formed exactly on the finest
    lattice and scaled once.
    """
    if not e.terms:
        return np.zeros(e.source_shape)
    X, n = e.scheme.bits, e.n_terms
    if X * n <= 53:
        acc = np.zeros(e.source_shape, dtype=np.int64)
        for t in e.terms:
            acc = (acc << X) + t.digits.astype(np.int64)
        return e.broadcast(e.terms[-1].scale) * acc.astype(np.float64)
    out = np.zeros(e.source_shape)
    for t in reversed(e.terms):
        out += e.broadcast(t.scale) * t.digits
    return out


def reconstruct(e: TensorExpansion) -> np.ndarray:
    out = ladder_value(e)
    if e.nsy_present:
        out = out + e.broadcast(e.bias)
    if e.saturation is not None:
        out = out + e.saturation.to_dense()
    return out


def parallel_digits(m, scale_1, bits: int, k: int) -> np.ndarray:
    """Digits of term ``k`` straight from ``m``, without terms 2..k-1.

    ``D_k = R(m / scale_k) - 2**X * R(m / scale_{k-1})`` with ``R`` the module
    rounding; ``m`` must already be reduced to the symmetric non-saturated case.
    """
    if k < 2:
        raise QuantizationError("parallel digits start at term 2")
    s1 = np.asarray(scale_1, dtype=np.float64)
    if np.any(s1 <= 0):
        raise QuantizationError("scale_1 must be positive")
    m = _as_float(m)
    fine = round_digits(m / np.ldexp(s1, -bits * (k - 1)), bits)
    coarse = round_digits(m / np.ldexp(s1, -bits * (k - 2)), bits)
    return (fine - coarse * (1 << bits)).astype(np.int64)


def residual_bound(scale_1, bits: int, n_terms: int):
    """Tested bound on ||M - reconstruct||_inf after n terms: 2 * scale_1 * 2**(-X(n-1))."""
    return 2.0 * np.ldexp(np.asarray(scale_1, dtype=np.float64), -bits * (n_terms - 1))


def laplace_quant_mse(alpha: float, bits: int) -> float:
    """Expected squared error of the saturated symmetric quantizer on Laplace(0, 1)."""
    L = qmax(bits)
    c = digit_offset(bits)
    step = alpha / L

    def prim(x, q):  # antiderivative of (x - q)^2 e^{-x}
        return -np.exp(-x) * ((x - q) ** 2 + 2 * (x - q) + 2)

    total = 0.0
    # x >= 0 maps to level k on [(k - c) step, (k + 1 - c) step); x <= 0 mirrors with c -> 1 - c
    for off in (1 - c, c):
        lo = 0.0
        for k in range(L + 1):
            hi = min((k + off) * step, alpha)
            total += prim(hi, k * step) - prim(lo, k * step)
            lo = hi
            if hi >= alpha:
                break
        total += -prim(alpha, alpha)
    return 0.5 * total


def laplace_clip_constant(bits: int) -> float:
    """Numerically minimise :func:`laplace_quant_mse`; source of ``LAPLACE_CLIP``."""
    from scipy.optimize import minimize_scalar

    grid = np.arange(0.05, 25.0, 0.01)
    vals = [laplace_quant_mse(a, bits) for a in grid]
    a0 = grid[int(np.argmin(vals))]
    res = minimize_scalar(lambda a: laplace_quant_mse(a, bits), bounds=(a0 - 0.02, a0 + 0.02),
                          method="bounded", options={"xatol": 1e-12})
    return float(res.x)


def expansions_equal(a: TensorExpansion, b: TensorExpansion) -> bool:
    """Bit-level equality of two expansions."""
    if (a.scheme, a.source_shape, a.nsy_present, a.n_terms) != (b.scheme, b.source_shape, b.nsy_present, b.n_terms):
        return False
    if (a.saturation is None) != (b.saturation is None):
        return False
    if a.saturation is not None and a.saturation != b.saturation:
        return False
    if a.bias.tobytes() != b.bias.tobytes():
        return False
    return all(ta.scale.tobytes() == tb.scale.tobytes() and np.array_equal(ta.digits, tb.digits)
               for ta, tb in zip(a.terms, b.terms))


def scale_ratios(e: TensorExpansion) -> list[np.ndarray]:
    return [a.scale / b.scale for a, b in zip(e.terms, e.terms[1:]) if np.all(b.scale > 0)]


__all__ = [
    "BITS", "LAPLACE_CLIP", "QuantScheme", "ExpansionTerm", "TensorExpansion", "QuantizationError",
    "compute_clip", "quantize_once", "expand_tensor", "parallel_digits", "reconstruct", "ladder_value",
    "round_digits", "digit_offset", "residual_bound", "laplace_quant_mse", "laplace_clip_constant",
    "expansions_equal",
]


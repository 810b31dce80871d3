"""Whole-model expansion into a grid of basis models.

Every basis model has the source model's layer structure. At a linear or conv
layer, basis model ``(i, j)`` computes the product of weight term ``i`` and
activation term ``j`` (``-1`` is the clip correction, ``0`` the zero-point
term). After every layer the basis outputs are reduced with
:func:`abelian_add` and the sum is fed to every basis model as its next input.
Layers without weights are replicated into all ``N`` basis models and each
copy is weighted ``1/N``; layer biases are treated the same way, so they
enter the sum exactly once.

The reduce is order independent: lattice partials sharing a unit are summed as
exact integers, and float partials are grouped by identity (their weights
summed as fractions) and then added in an order fixed by their contents.
"""
from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import ops
from .intkernels import (
    LatticeValue, OverflowGuardError, activation_indices, lattice_sum, pair_product, weight_indices,
)
from .layerexpand import (
    MATMUL_KINDS, ExpandedLayer, ExpansionPolicy, UnsupportedLayerError, expand_activation,
    expand_layer_weights, lower_input,
)
from .quantcore import ExpansionTerm, QuantScheme, TensorExpansion, expansions_equal
from .tensorio import (
    MANIFEST_NAME, LayerSpec, ManifestError, ModelManifest, SparseCorrection, Tensor, load_model, read_tensor,
    save_model, write_tensor,
)

REDUCE_PLANS = ("flat", "tree")


@dataclass(frozen=True)
class ScaleVector:
    """One positive factor per parameterized layer."""

    u: tuple[float, ...]

    def __post_init__(self):
        u = tuple(float(v) for v in self.u)
        if any(not v > 0 for v in u):
            raise ValueError("scale factors must be positive")
        object.__setattr__(self, "u", u)

    @classmethod
    def ones(cls, n: int) -> "ScaleVector":
        return cls((1.0,) * n)

    def __len__(self) -> int:
        return len(self.u)

    def __mul__(self, other: "ScaleVector") -> "ScaleVector":
        if len(other) != len(self):
            raise ValueError("scale vectors differ in length")
        return ScaleVector(tuple(a * b for a, b in zip(self.u, other.u)))


@dataclass(frozen=True, eq=False)
class BasisModel:
    """Term pair ``index`` evaluated through ``layers`` with per-layer factors ``scales``.

    ``layers`` holds ExpandedLayer entries for linear/conv layers and the
    source LayerSpec for the rest; basis models of one expansion share them.
    """

    index: tuple[int, int]
    layers: tuple
    scales: ScaleVector

    def param_positions(self) -> list[int]:
        return [p for p, l in enumerate(self.layers) if isinstance(l, ExpandedLayer)]

    def layer_factor(self, position: int) -> float:
        return self.scales.u[self.param_positions().index(position)]

    def effective_layer(self, position: int) -> ExpandedLayer:
        """Layer ``position`` with this model's factor folded into its scales (digits shared)."""
        return scale_layer(self.layers[position], self.layer_factor(position))


def scale_layer(el: ExpandedLayer, factor: float) -> ExpandedLayer:
    if factor == 1.0:
        return el
    e = el.weight_expansion
    terms = tuple(ExpansionTerm(t.scale * factor, t.digits) for t in e.terms)
    sat = e.saturation.scaled(factor) if e.saturation is not None else None
    we = TensorExpansion(sat, e.bias * factor, e.nsy_present, terms, e.scheme, e.source_shape,
                         tuple(r * factor for r in e.residual_norms))
    bias = el.bias_vector * factor if el.bias_vector is not None else None
    return ExpandedLayer(el.kind, we, bias, el.activation_scheme, el.policy, el.grid_mask, dict(el.attrs))


def abelian_mul(u: ScaleVector, m: BasisModel) -> BasisModel:
    """Scale layer ``l`` of ``m`` by ``u[l]``; digits are left untouched."""
    if len(u) != len(m.param_positions()):
        raise ValueError(f"scale vector has {len(u)} entries for {len(m.param_positions())} layers")
    return BasisModel(m.index, m.layers, m.scales * u)


def _as_fraction(s) -> Fraction:
    return s if isinstance(s, Fraction) else Fraction(s)


def _shape_of(x) -> tuple[int, ...]:
    if isinstance(x, LatticeValue):
        return np.broadcast_shapes(x.acc.shape, x.unit.shape)
    return np.shape(x)


def _unit_key(v: LatticeValue) -> tuple:
    return v.unit.shape, v.unit.tobytes()


def _tree_lattice_sum(values: list[LatticeValue]) -> LatticeValue:
    while len(values) > 1:
        nxt = [lattice_sum(values[k:k + 2]) for k in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            nxt.append(values[-1])
        values = nxt
    return values[0]


def abelian_add(outputs: list, scales: list | None = None, plan: str = "flat") -> np.ndarray:
    """``sum_i scales[i] * outputs[i]`` with a result independent of input order.

    Outputs are float arrays or LatticeValue objects. Lattice values need
    integer weights and are summed exactly per shared unit (``plan`` picks a
    flat or pairwise tree fold; both give the same integers). Float arrays are
    grouped by identity with their weights added as fractions, then summed in
    content order.
    """
    if not outputs:
        raise ValueError("nothing to add")
    if plan not in REDUCE_PLANS:
        raise ValueError(f"reduce plan must be one of {REDUCE_PLANS}")
    scales = [1] * len(outputs) if scales is None else list(scales)
    if len(scales) != len(outputs):
        raise ValueError("one scale per output")
    shape = _shape_of(outputs[0])
    for o in outputs[1:]:
        if _shape_of(o) != shape:
            raise ValueError(f"shape mismatch: {_shape_of(o)} vs {shape}")

    lattices: dict[tuple, list[LatticeValue]] = {}
    groups: dict[int, list] = {}
    for o, s in zip(outputs, scales):
        w = _as_fraction(s)
        if isinstance(o, LatticeValue):
            if w.denominator != 1:
                raise ValueError("lattice values take integer weights")
            lv = o if w == 1 else LatticeValue(o.acc * int(w.numerator), o.unit, o.shift)
            lattices.setdefault(_unit_key(lv), []).append(lv)
        else:
            entry = groups.setdefault(id(o), [o, Fraction(0)])
            entry[1] += w

    parts = []
    for key in sorted(lattices):
        vals = lattices[key]
        total = _tree_lattice_sum(vals) if plan == "tree" else lattice_sum(vals)
        parts.append(np.broadcast_to(total.to_float(), shape))
    for arr, w in groups.values():
        a = np.asarray(arr, dtype=np.float64)
        parts.append(np.broadcast_to(a if w == 1 else float(w) * a, shape))
    parts.sort(key=lambda p: np.ascontiguousarray(p).tobytes())
    out = np.zeros(shape)
    for p in parts:
        out = out + p
    return out


@dataclass(frozen=True, eq=False)
class ExpandedModel:
    source: ModelManifest
    layers: tuple
    policy: ExpansionPolicy
    basis: tuple[BasisModel, ...]
    weight_grid: tuple[int, ...]
    activation_grid: tuple[int, ...]
    reduce_plan: str = "flat"
    layer_bits: tuple[int, ...] = ()

    @property
    def n_basis(self) -> int:
        return len(self.basis)

    @property
    def replication_factor(self) -> Fraction:
        return Fraction(1, self.n_basis)

    @property
    def grid_shape(self) -> tuple[int, int]:
        return len(self.weight_grid), len(self.activation_grid)

    def expanded_layers(self) -> list[ExpandedLayer]:
        return [l for l in self.layers if isinstance(l, ExpandedLayer)]

    def term_counts(self) -> list[dict]:
        return [{"bits": l.bits, "weight_terms": l.weight_terms} for l in self.expanded_layers()]


def _activation_grid(layers, policy: ExpansionPolicy) -> tuple[int, ...]:
    mask = policy.grid_mask
    exp = [l for l in layers if isinstance(l, ExpandedLayer)]
    grid = []
    if mask.a_sa and any(l.activation_scheme.saturated for l in exp):
        grid.append(-1)
    if mask.a_bias and any(not l.activation_scheme.symmetric for l in exp):
        grid.append(0)
    return tuple(grid + list(range(1, policy.activation_terms_max + 1)))


def _build(source, layers, policy, plan, layer_bits, scales=None) -> ExpandedModel:
    exp = [l for l in layers if isinstance(l, ExpandedLayer)]
    wgrid = sorted({i for l in exp for i in weight_indices(l.weight_expansion, policy.grid_mask)}) or [1]
    agrid = _activation_grid(layers, policy)
    index = [(i, j) for i in wgrid for j in agrid]
    if scales is None:
        scales = [ScaleVector.ones(len(exp))] * len(index)
    basis = tuple(BasisModel(ij, tuple(layers), s) for ij, s in zip(index, scales))
    return ExpandedModel(source, tuple(layers), policy, basis, tuple(wgrid), agrid, plan, tuple(layer_bits))


def expand_model(m: ModelManifest, policy: ExpansionPolicy, reduce_plan: str = "flat") -> ExpandedModel:
    """Expand every linear/conv layer; the first and last use ``policy.first_last_bits``."""
    if reduce_plan not in REDUCE_PLANS:
        raise ValueError(f"reduce plan must be one of {REDUCE_PLANS}")
    for pos, layer in enumerate(m.layers):
        if layer.kind not in MATMUL_KINDS + ("relu", "flatten", "softmax"):
            raise UnsupportedLayerError(f"layer {pos}: unsupported kind {layer.kind!r}")
    m.validate()
    params = m.parameterized()
    edge = {params[0], params[-1]} if params else set()
    layers, bits = [], []
    for pos, layer in enumerate(m.layers):
        if layer.kind not in MATMUL_KINDS:
            layers.append(layer)
            continue
        b = policy.first_last_bits if (pos in edge and policy.first_last_bits is not None) else policy.bits
        layers.append(expand_layer_weights(layer.kind, m.param(layer, "weight"), m.param(layer, "bias"), policy,
                                           attrs=layer.attrs, bits=b))
        bits.append(b)
    return _build(m, layers, policy, reduce_plan, bits)


def abelian_mul_model(u: ScaleVector, em: ExpandedModel) -> ExpandedModel:
    """Apply ``u`` to every basis model of ``em``."""
    basis = tuple(abelian_mul(u, b) for b in em.basis)
    return ExpandedModel(em.source, em.layers, em.policy, basis, em.weight_grid, em.activation_grid,
                         em.reduce_plan, em.layer_bits)


def _replicated(layer: LayerSpec, x: np.ndarray) -> np.ndarray:
    if layer.kind == "relu":
        return ops.relu(x)
    if layer.kind == "flatten":
        return ops.flatten(x)
    if layer.kind == "softmax":
        return ops.softmax(x)
    raise UnsupportedLayerError(f"unsupported kind {layer.kind!r}")


def _restore(kind: str, y: np.ndarray, layout: tuple) -> np.ndarray:
    return y.T if kind == "linear" else ops.cols_to_output(y, *layout)


def _matmul_components(em: ExpandedModel, pos: int, ae: TensorExpansion, threads: int) -> list:
    mask = em.policy.grid_mask
    cache: dict[int, tuple] = {}

    def setup(el: ExpandedLayer):
        key = id(el)
        if key not in cache:
            we = el.weight_matrix_expansion()
            cache[key] = (we, set(weight_indices(we, mask)))
        return cache[key]

    a_idx = set(activation_indices(ae, mask))
    jobs = []
    for b in em.basis:
        el = b.layers[pos]
        we, w_idx = setup(el)
        i, j = b.index
        if i in w_idx and j in a_idx:
            jobs.append((we, i, j, b.layer_factor(pos)))

    def run(job):
        we, i, j, factor = job
        p = pair_product(we, ae, i, j)
        if p.lattice is not None:
            lv = p.lattice
            return lv if factor == 1.0 else LatticeValue(lv.acc, lv.unit * factor, lv.shift)
        return p.value if factor == 1.0 else p.value * factor

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


def forward_expanded(em: ExpandedModel, batch, *, logits: bool = False, capture: bool = False,
                     threads: int = 1) -> tuple[np.ndarray, dict]:
    """Layer-by-layer evaluation with a reduce after every layer.

    ``logits=True`` stops before a trailing softmax. ``capture=True`` adds every
    layer's reduced output to the diagnostics under ``activations``.
    """
    x = np.asarray(batch, dtype=np.float64)
    in_shape = tuple(em.source.metadata["input_shape"])
    if x.shape[1:] != in_shape:
        raise ValueError(f"batch shape {x.shape[1:]} does not match model input {in_shape}")
    n = em.n_basis
    weight = Fraction(1, n)
    layers = list(em.layers)
    if logits and layers and not isinstance(layers[-1], ExpandedLayer) and layers[-1].kind == "softmax":
        layers = layers[:-1]
    diag = {"layers": [], "activations": [], "timings": {"reduce_seconds": 0.0, "total_seconds": 0.0}}
    t_start = time.perf_counter()
    for pos, layer in enumerate(layers):
        if isinstance(layer, ExpandedLayer):
            a_mat, layout = lower_input(layer, x)
            ae, info = expand_activation(layer, a_mat, em.policy.activation_terms_max)
            comps = _matmul_components(em, pos, ae, threads)
            rows, cols = layer.weight_matrix_expansion().source_shape[0], a_mat.shape[1]
            t0 = time.perf_counter()
            if comps:
                comps = [c if isinstance(c, LatticeValue) else np.broadcast_to(c, (rows, cols)) for c in comps]
                y = abelian_add(comps, plan=em.reduce_plan)
            else:
                y = np.zeros((rows, cols))
            y = _restore(layer.kind, y, layout)
            biases = [b.layers[pos].bias_vector for b in em.basis]
            if biases[0] is not None:
                scaled = {}
                terms = []
                for b, bv in zip(em.basis, biases):
                    f = b.layer_factor(pos)
                    key = (id(bv), f)
                    if key not in scaled:
                        scaled[key] = bv if f == 1.0 else bv * f
                    terms.append(scaled[key])
                shape = (1, -1) if layer.kind == "linear" else (1, -1, 1, 1)
                y = y + abelian_add([t.reshape(shape) for t in terms], [weight] * n)
            dt = time.perf_counter() - t0
            diag["timings"]["reduce_seconds"] += dt
            diag["layers"].append({"position": pos, "kind": layer.kind, "bits": layer.bits,
                                   "weight_terms": layer.weight_terms, "pair_count": len(comps), **info})
            x = y
        else:
            t0 = time.perf_counter()
            fx = _replicated(layer, x)
            x = abelian_add([fx] * n, [weight] * n)
            diag["timings"]["reduce_seconds"] += time.perf_counter() - t0
        if capture:
            diag["activations"].append(x)
    diag["timings"]["total_seconds"] = time.perf_counter() - t_start
    return x, diag


def fp_forward(m: ModelManifest, batch, *, logits: bool = False, capture: bool = False):
    """Float64 reference forward of a source model; returns (output, per-layer outputs)."""
    x = np.asarray(batch, dtype=np.float64)
    layers = list(m.layers)
    if logits and layers and layers[-1].kind == "softmax":
        layers = layers[:-1]
    acts = []
    for layer in layers:
        if layer.kind == "linear":
            x = ops.linear(x, m.param(layer, "weight"), m.param(layer, "bias"))
        elif layer.kind == "conv2d":
            x = ops.conv2d(x, m.param(layer, "weight"), m.param(layer, "bias"),
                           int(layer.attrs.get("stride", 1)), int(layer.attrs.get("padding", 0)))
        else:
            x = _replicated(layer, x)
        if capture:
            acts.append(x)
    return x, acts


# ---------------------------------------------------------------- persistence

EXPANDED_FORMAT = "seriex-expanded"


def _save_expansion(e: TensorExpansion, prefix: str, tensors: dict) -> dict:
    terms = []
    for n, t in enumerate(e.terms):
        name = f"{prefix}.d{n + 1}"
        tensors[name] = Tensor.from_array(t.digits, f"int{e.scheme.bits}")
        terms.append({"scale": [float(s) for s in t.scale], "digits": name})
    doc = {
        "scheme": e.scheme.to_dict(),
        "source_shape": list(e.source_shape),
        "bias": [float(b) for b in e.bias],
        "nsy_present": e.nsy_present,
        "residual_norms": [float(r) for r in e.residual_norms],
        "terms": terms,
        "saturation": None,
    }
    if e.saturation is not None:
        if e.saturation.nnz and int(e.saturation.indices[-1]) >= 2 ** 31:
            raise ValueError("clip correction indices exceed int32")
        tensors[f"{prefix}.sa_idx"] = Tensor.from_array(e.saturation.indices.astype(np.int32), "int32")
        tensors[f"{prefix}.sa_val"] = Tensor.from_array(e.saturation.values, "float64")
        doc["saturation"] = {"indices": f"{prefix}.sa_idx", "values": f"{prefix}.sa_val"}
    return doc


def _load_expansion(doc: dict, tensors: dict) -> TensorExpansion:
    shape = tuple(doc["source_shape"])
    terms = tuple(ExpansionTerm(np.array(t["scale"], dtype=np.float64),
                                tensors[t["digits"]].data.astype(np.int8).reshape(shape)) for t in doc["terms"])
    sat = None
    if doc["saturation"] is not None:
        sat = SparseCorrection(tensors[doc["saturation"]["indices"]].data.astype(np.int64),
                               tensors[doc["saturation"]["values"]].data, shape)
    return TensorExpansion(sat, np.array(doc["bias"], dtype=np.float64), bool(doc["nsy_present"]), terms,
                           QuantScheme.from_dict(doc["scheme"]), shape, tuple(doc["residual_norms"]))


def save_expanded(em: ExpandedModel, directory) -> None:
    """Write ``em`` as manifest.json + SQTF blobs, with the source model under ``source/``."""
    d = Path(directory)
    (d / "blobs").mkdir(parents=True, exist_ok=True)
    tensors: dict[str, Tensor] = {}
    layers = []
    for pos, layer in enumerate(em.layers):
        if isinstance(layer, ExpandedLayer):
            entry = {"kind": layer.kind, "attrs": dict(layer.attrs), "bits": layer.bits,
                     "activation_scheme": layer.activation_scheme.to_dict(),
                     "weight": _save_expansion(layer.weight_expansion, f"l{pos}.w", tensors), "bias": None}
            if layer.bias_vector is not None:
                tensors[f"l{pos}.b"] = Tensor.from_array(layer.bias_vector, "float64")
                entry["bias"] = f"l{pos}.b"
        else:
            entry = layer.to_dict()
        layers.append(entry)
    blobs = {}
    for name in sorted(tensors):
        rel = f"blobs/{name}.sqtf"
        write_tensor(tensors[name], d / rel)
        blobs[name] = rel
    doc = {
        "format": EXPANDED_FORMAT,
        "version": 1,
        "policy": em.policy.to_dict(),
        "reduce_plan": em.reduce_plan,
        "layer_bits": list(em.layer_bits),
        "grid": {"weight": list(em.weight_grid), "activation": list(em.activation_grid)},
        "replication_factor": str(em.replication_factor),
        "basis_scales": [list(b.scales.u) for b in em.basis],
        "layers": layers,
        "tensor_blobs": blobs,
    }
    (d / MANIFEST_NAME).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    save_model(em.source, d / "source")


def is_expanded_dir(directory) -> bool:
    p = Path(directory) / MANIFEST_NAME
    try:
        return json.loads(p.read_text()).get("format") == EXPANDED_FORMAT
    except (OSError, ValueError):
        return False


def load_expanded(directory) -> ExpandedModel:
    d = Path(directory)
    doc = json.loads((d / MANIFEST_NAME).read_text())
    if doc.get("format") != EXPANDED_FORMAT:
        raise ManifestError(f"{d} is not an expanded model")
    tensors = {}
    for name, rel in doc["tensor_blobs"].items():
        if not (d / rel).exists():
            raise ManifestError(f"dangling reference: blob {name!r} missing at {rel}")
        tensors[name] = read_tensor(d / rel)
    policy = ExpansionPolicy.from_dict(doc["policy"])
    layers = []
    for entry in doc["layers"]:
        if "weight" in entry:
            we = _load_expansion(entry["weight"], tensors)
            bias = tensors[entry["bias"]].data.copy() if entry["bias"] is not None else None
            layers.append(ExpandedLayer(entry["kind"], we, bias, QuantScheme.from_dict(entry["activation_scheme"]),
                                        policy, policy.grid_mask, dict(entry["attrs"])))
        else:
            layers.append(LayerSpec.from_dict(entry))
    source = load_model(d / "source")
    scales = [ScaleVector(tuple(s)) for s in doc["basis_scales"]]
    em = _build(source, layers, policy, doc["reduce_plan"], doc["layer_bits"], scales)
    if [list(em.weight_grid), list(em.activation_grid)] != [doc["grid"]["weight"], doc["grid"]["activation"]]:
        raise ManifestError("stored grid does not match the expanded layers")
    if str(em.replication_factor) != doc["replication_factor"]:
        raise ManifestError("stored replication factor does not match the grid")
    return em


def expanded_equal(a: ExpandedModel, b: ExpandedModel) -> bool:
    """Bit-level equality of two expanded models (layers, grid, scale vectors, source)."""
    if (a.weight_grid, a.activation_grid, a.reduce_plan, a.layer_bits) != \
            (b.weight_grid, b.activation_grid, b.reduce_plan, b.layer_bits):
        return False
    if a.policy != b.policy or a.source != b.source or len(a.layers) != len(b.layers):
        return False
    if [x.scales.u for x in a.basis] != [y.scales.u for y in b.basis]:
        return False
    for la, lb in zip(a.layers, b.layers):
        if isinstance(la, ExpandedLayer) != isinstance(lb, ExpandedLayer):
            return False
        if not isinstance(la, ExpandedLayer):
            if la.to_dict() != lb.to_dict():
                return False
            continue
        if (la.kind, la.attrs, la.activation_scheme) != (lb.kind, lb.attrs, lb.activation_scheme):
            return False
        if (la.bias_vector is None) != (lb.bias_vector is None):
            return False
        if la.bias_vector is not None and la.bias_vector.tobytes() != lb.bias_vector.tobytes():
            return False
        if not expansions_equal(la.weight_expansion, lb.weight_expansion):
            return False
    return True


__all__ = [
    "ScaleVector", "BasisModel", "ExpandedModel", "abelian_add", "abelian_mul", "abelian_mul_model",
    "expand_model", "forward_expanded", "fp_forward", "scale_layer", "OverflowGuardError", "REDUCE_PLANS",
    "save_expanded", "load_expanded", "is_expanded_dir", "expanded_equal",
]

"""Fixture architectures and a small deterministic SGD trainer.

Models are built straight into ModelManifest form: linear/conv2d layers with
a ``weight`` and ``bias`` blob, relu between them and a trailing softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import ops
from ..tensorio import LayerSpec, ModelManifest, Tensor, conv_out_hw
from .data import Dataset, make_blobs, split_dataset


class TrainingDiverged(ArithmeticError):
    pass


@dataclass(frozen=True)
class MLPSpec:
    sizes: tuple[int, ...] = (2, 16, 16, 3)

    def describe(self) -> str:
        return "mlp(" + "-".join(str(s) for s in self.sizes) + ")"


@dataclass(frozen=True)
class SmallConvSpec:
    input_shape: tuple[int, int, int] = (1, 8, 8)
    channels: int = 4
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    classes: int = 3

    def describe(self) -> str:
        c, h, w = self.input_shape
        return f"smallconv({c}x{h}x{w}-c{self.channels}k{self.kernel}-{self.classes})"


def _layer_plan(arch) -> tuple[list[tuple], tuple[int, ...]]:
    """(kind, weight shape, attrs) per layer and the input shape."""
    if isinstance(arch, MLPSpec):
        if len(arch.sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        plan = []
        for n, (a, b) in enumerate(zip(arch.sizes[:-1], arch.sizes[1:])):
            plan.append(("linear", (b, a), {}))
            if n < len(arch.sizes) - 2:
                plan.append(("relu", None, {}))
        return plan, (arch.sizes[0],)
    if isinstance(arch, SmallConvSpec):
        c, h, w = arch.input_shape
        ho, wo = conv_out_hw(h, w, arch.kernel, arch.kernel, arch.stride, arch.padding)
        if ho < 1 or wo < 1:
            raise ValueError("kernel larger than input")
        attrs = {"stride": arch.stride, "padding": arch.padding}
        plan = [("conv2d", (arch.channels, c, arch.kernel, arch.kernel), attrs), ("relu", None, {}),
                ("flatten", None, {}), ("linear", (arch.classes, arch.channels * ho * wo), {})]
        return plan, tuple(arch.input_shape)
    raise ValueError(f"unknown architecture {arch!r}")


def init_params(arch, seed: int) -> list[tuple[np.ndarray, np.ndarray] | None]:
    rng = np.random.default_rng(seed)
    params = []
    for kind, wshape, _ in _layer_plan(arch)[0]:
        if wshape is None:
            params.append(None)
            continue
        fan_in = math.prod(wshape[1:])
        params.append((rng.standard_normal(wshape) * math.sqrt(2.0 / fan_in), np.zeros(wshape[0])))
    return params


def to_manifest(arch, params, metadata: dict | None = None) -> ModelManifest:
    plan, in_shape = _layer_plan(arch)
    layers, tensors = [], {}
    for n, ((kind, _, attrs), p) in enumerate(zip(plan, params)):
        if p is None:
            layers.append(LayerSpec(kind))
            continue
        w, b = p
        tensors[f"layer{n}.weight"] = Tensor.from_array(np.array(w, dtype=np.float64))
        tensors[f"layer{n}.bias"] = Tensor.from_array(np.array(b, dtype=np.float64))
        layers.append(LayerSpec(kind, {"weight": f"layer{n}.weight", "bias": f"layer{n}.bias"}, dict(attrs)))
    layers.append(LayerSpec("softmax"))
    meta = {"input_shape": list(in_shape), "arch": arch.describe()}
    meta.update(metadata or {})
    m = ModelManifest(layers, meta, tensors)
    m.validate()
    return m


def _col2im(dcols: np.ndarray, x_shape, kh, kw, stride, padding) -> np.ndarray:
    b, c, h, w = x_shape
    ho, wo = conv_out_hw(h, w, kh, kw, stride, padding)
    d = dcols.reshape(c, kh, kw, b, ho, wo)
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += d[:, i, j].transpose(1, 0, 2, 3)
    return out[:, :, padding:padding + h, padding:padding + w]


def _forward(plan, params, x):
    cache = []
    for (kind, _, attrs), p in zip(plan, params):
        if kind == "linear":
            cache.append(x)
            x = ops.linear(x, *p)
        elif kind == "conv2d":
            w = p[0]
            cols = ops.im2col(x, w.shape[2], w.shape[3], attrs["stride"], attrs["padding"])
            cache.append((x.shape, cols))
            x = ops.conv2d(x, w, p[1], attrs["stride"], attrs["padding"])
        elif kind == "relu":
            cache.append(x > 0)
            x = ops.relu(x)
        elif kind == "flatten":
            cache.append(x.shape)
            x = ops.flatten(x)
    return x, cache


def _backward(plan, params, cache, grad):
    grads = [None] * len(plan)
    for n in range(len(plan) - 1, -1, -1):
        kind, _, attrs = plan[n]
        if kind == "linear":
            x = cache[n]
            w = params[n][0]
            grads[n] = (grad.T @ x, grad.sum(axis=0))
            grad = grad @ w
        elif kind == "conv2d":
            x_shape, cols = cache[n]
            w = params[n][0]
            g2 = grad.transpose(1, 0, 2, 3).reshape(w.shape[0], -1)
            grads[n] = ((g2 @ cols.T).reshape(w.shape), g2.sum(axis=1))
            grad = _col2im(w.reshape(w.shape[0], -1).T @ g2, x_shape, w.shape[2], w.shape[3],
                           attrs["stride"], attrs["padding"])
        elif kind == "relu":
            grad = grad * cache[n]
        elif kind == "flatten":
            grad = grad.reshape(cache[n])
    return grads


def accuracy_of(plan, params, data: Dataset, batch: int = 256) -> float:
    if len(data) == 0:
        return float("nan")
    hits = 0
    for start in range(0, len(data), batch):
        logits, _ = _forward(plan, params, data.inputs(slice(start, start + batch)))
        hits += int(np.sum(np.argmax(logits, axis=1) == data.labels[start:start + batch]))
    return hits / len(data)


def train_fixture(arch, data: Dataset, epochs: int, seed: int, *, lr: float = 0.05, batch_size: int = 32,
                  test: Dataset | None = None) -> ModelManifest:
    """Plain minibatch SGD on softmax cross-entropy; bit-reproducible from ``seed``."""
    plan, in_shape = _layer_plan(arch)
    if tuple(data.sample_shape) != tuple(in_shape):
        raise ValueError(f"data samples {data.sample_shape} do not match architecture input {in_shape}")
    params = init_params(arch, seed)
    rng = np.random.default_rng(seed + 1)
    n = len(data)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            rows = order[start:start + batch_size]
            logits, cache = _forward(plan, params, data.inputs(rows))
            probs = ops.softmax(logits)
            loss = -np.mean(np.log(probs[np.arange(rows.size), data.labels[rows]] + 1e-300))
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} in epoch {epoch}")
            grad = probs
            grad[np.arange(rows.size), data.labels[rows]] -= 1.0
            grads = _backward(plan, params, cache, grad / rows.size)
            for k, g in enumerate(grads):
                if g is not None:
                    params[k] = (params[k][0] - lr * g[0], params[k][1] - lr * g[1])
    meta = {"seed": seed, "epochs": epochs, "train_accuracy": accuracy_of(plan, params, data)}
    if test is not None:
        meta["test_accuracy"] = accuracy_of(plan, params, test)
    return to_manifest(arch, params, meta)


def mlp_fixture(seed: int = 0, epochs: int = 50, classes: int = 3, samples: int = 3000):
    """Blob data (2-d, ``classes`` clusters) and an MLP 2-16-16-classes trained on it."""
    data = make_blobs(classes, 2, samples, seed)
    train, test = split_dataset(data, 1 / 3, seed)
    model = train_fixture(MLPSpec((2, 16, 16, classes)), train, epochs, seed, test=test)
    return model, train, test


def conv_fixture(seed: int = 0, epochs: int = 20, classes: int = 3, samples: int = 1500):
    """64-d blob data viewed as 1x8x8 images and a one-conv, one-linear network."""
    data = make_blobs(classes, 64, samples, seed).with_shape((1, 8, 8))
    train, test = split_dataset(data, 1 / 3, seed)
    model = train_fixture(SmallConvSpec(classes=classes), train, epochs, seed, lr=0.01, test=test)
    return model, train, test

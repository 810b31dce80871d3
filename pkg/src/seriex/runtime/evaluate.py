"""Accuracy and activation-difference reports for FP and expanded models."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from ..layerexpand import ExpansionPolicy
from ..modelexpand import ExpandedModel, expand_model, forward_expanded, fp_forward
from ..tensorio import ModelManifest
from .data import Dataset

EVAL_BATCH = 256
KNEE_THRESHOLD = 1e-4


class MonotonicityError(AssertionError):
    """A sweep's max difference failed to decrease; ``pair`` holds the two offending t values."""

    def __init__(self, pair, diffs):
        self.pair = pair
        super().__init__(f"max_diff not strictly decreasing between t={pair[0]} ({diffs[0]:.6g}) "
                         f"and t={pair[1]} ({diffs[1]:.6g})")


@dataclass
class EvalReport:
    model_id: str
    accuracy: float
    fp_accuracy: float
    samples: int
    policy: dict | None = None
    layer_max_diff: list[float] = field(default_factory=list)
    logit_max_diff: float | None = None
    term_counts: list[dict] = field(default_factory=list)
    pair_counts: list[int] = field(default_factory=list)
    activation_terms: int | None = None
    knee: bool = False
    timings: dict = field(default_factory=dict)

    @property
    def pair_total(self) -> int:
        return int(sum(self.pair_counts))

    def to_dict(self, timings: bool = True) -> dict:
        d = {
            "model_id": self.model_id,
            "accuracy": self.accuracy,
            "fp_accuracy": self.fp_accuracy,
            "samples": self.samples,
            "policy": self.policy,
            "layer_max_diff": list(self.layer_max_diff),
            "logit_max_diff": self.logit_max_diff,
            "term_counts": list(self.term_counts),
            "pair_counts": list(self.pair_counts),
            "pair_total": self.pair_total,
            "activation_terms": self.activation_terms,
            "knee": self.knee,
        }
        if timings:
            d["timings"] = dict(self.timings)
        return d


def _check_input(source: ModelManifest, data: Dataset) -> None:
    want = tuple(source.metadata["input_shape"])
    if tuple(data.sample_shape) != want:
        raise ValueError(f"dataset samples {data.sample_shape} do not match model input {want}")
    if len(data) == 0:
        raise ValueError("dataset is empty")


def predict(model, data: Dataset, threads: int = 1) -> np.ndarray:
    """Argmax predictions in fixed batches of EVAL_BATCH rows."""
    out = []
    for start in range(0, len(data), EVAL_BATCH):
        x = data.inputs(slice(start, start + EVAL_BATCH))
        if isinstance(model, ExpandedModel):
            y, _ = forward_expanded(model, x, logits=True, threads=threads)
        else:
            y, _ = fp_forward(model, x, logits=True)
        out.append(np.argmax(y, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model, data: Dataset, threads: int = 1) -> float:
    return float(np.mean(predict(model, data, threads) == data.labels))


def evaluate(model, data: Dataset, *, probe: np.ndarray | None = None, threads: int = 1,
             model_id: str | None = None) -> EvalReport:
    """Top-1 accuracy; for expanded models also per-layer max |FP - expanded| on a probe batch.

    The probe defaults to the first EVAL_BATCH samples of ``data``.
    """
    source = model.source if isinstance(model, ExpandedModel) else model
    _check_input(source, data)
    mid = model_id or str(source.metadata.get("arch", "model"))
    t0 = time.perf_counter()
    fp_acc = accuracy(source, data)
    t_fp = time.perf_counter() - t0
    if not isinstance(model, ExpandedModel):
        return EvalReport(mid, fp_acc, fp_acc, len(data), timings={"fp_seconds": t_fp})
    t0 = time.perf_counter()
    acc = accuracy(model, data, threads)
    t_exp = time.perf_counter() - t0
    x = data.inputs(slice(0, EVAL_BATCH)) if probe is None else probe
    ref_logits, ref_acts = fp_forward(source, x, logits=True, capture=True)
    logits, diag = forward_expanded(model, x, logits=True, capture=True, threads=threads)
    layer_diff = [float(np.max(np.abs(a - b))) for a, b in zip(ref_acts, diag["activations"])]
    return EvalReport(
        mid, acc, fp_acc, len(data),
        policy=model.policy.to_dict(),
        layer_max_diff=layer_diff,
        logit_max_diff=float(np.max(np.abs(logits - ref_logits))),
        term_counts=[{"position": l["position"], "bits": l["bits"], "weight_terms": l["weight_terms"],
                      "activation_terms": l["activation_terms"]} for l in diag["layers"]],
        pair_counts=[l["pair_count"] for l in diag["layers"]],
        activation_terms=model.policy.activation_terms_max,
        knee=bool(np.max(np.abs(logits - ref_logits)) < KNEE_THRESHOLD),
        timings={"fp_seconds": t_fp, "expanded_seconds": t_exp,
                 "probe_reduce_seconds": diag["timings"]["reduce_seconds"]},
    )


def sweep_expansions(model: ModelManifest, data: Dataset, policy: ExpansionPolicy, t_range, *,
                     check_monotone: bool = True, threads: int = 1) -> list[EvalReport]:
    """One report per activation term count t, with the stopping rule off so t is exact.

    ``knee`` marks the first t whose probe max difference is below KNEE_THRESHOLD.
    With ``check_monotone`` a MonotonicityError is raised unless the max
    difference strictly decreases along ``t_range``.
    """
    ts = list(t_range)
    if not ts:
        raise ValueError("t_range is empty")
    reports = []
    for t in ts:
        p = replace(policy, activation_terms_max=int(t), activation_stop=False)
        reports.append(evaluate(expand_model(model, p), data, threads=threads))
    seen_knee = False
    for r in reports:
        r.knee = not seen_knee and r.logit_max_diff < KNEE_THRESHOLD
        seen_knee = seen_knee or r.knee
    if check_monotone:
        monotone_violation(ts, reports, raise_error=True)
    return reports


def monotone_violation(ts, reports, raise_error: bool = False):
    """First adjacent pair of t values whose max difference did not decrease, or None."""
    for (t0, r0), (t1, r1) in zip(zip(ts, reports), zip(ts[1:], reports[1:])):
        if not r1.logit_max_diff < r0.logit_max_diff:
            if raise_error:
                raise MonotonicityError((t0, t1), (r0.logit_max_diff, r1.logit_max_diff))
            return t0, t1
    return None


def weight_vs_activation(model: ModelManifest, data: Dataset, policy: ExpansionPolicy, budget: int,
                         threads: int = 1) -> dict:
    """Accuracy of weight-only (k=budget, t=1) versus activation-only (k=1, t=budget) expansion.

    Both stopping rules are disabled so each side uses exactly ``budget`` terms.
    """
    only_w = replace(policy, weight_terms_max=budget, activation_terms_max=1,
                     weight_stop_threshold=float(np.finfo(np.float64).tiny), activation_stop=False)
    only_a = replace(policy, weight_terms_max=1, activation_terms_max=budget, activation_stop=False)
    acc_w = accuracy(expand_model(model, only_w), data, threads)
    acc_a = accuracy(expand_model(model, only_a), data, threads)
    return {"budget": budget, "only_weights": acc_w, "only_activations": acc_a,
            "activation_wins": bool(acc_a >= acc_w)}


__all__ = [
    "EvalReport", "MonotonicityError", "evaluate", "sweep_expansions", "weight_vs_activation", "predict",
    "accuracy", "monotone_violation", "EVAL_BATCH", "KNEE_THRESHOLD",
]

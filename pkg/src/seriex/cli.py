"""Command-line interface.

Reports go to stdout (or ``--out``) as JSON with ``"report_version": 1``;
wall-clock numbers live only under ``timings`` so reports can be diffed with
that key removed. Human-readable tables go to stderr.

Exit codes: 0 success, 2 I/O, 3 unsupported model, 4 data mismatch,
5 assertion failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import kernels
from .intkernels import GridMask, OverflowGuardError
from .layerexpand import ExpansionPolicy, UnsupportedLayerError
from .modelexpand import expand_model, is_expanded_dir, load_expanded, save_expanded
from .quantcore import QuantScheme, expand_tensor, reconstruct, residual_bound
from .runtime.data import DatasetError, load_dataset, save_csv, write_idx
from .runtime.evaluate import MonotonicityError, evaluate, monotone_violation, sweep_expansions
from .runtime.train import conv_fixture, mlp_fixture
from .tensorio import ManifestError, Tensor, TensorIOError, UnsupportedLayerKind, load_model, read_tensor, \
    save_model, write_tensor

REPORT_VERSION = 1

EXIT_OK, EXIT_IO, EXIT_UNSUPPORTED, EXIT_MISMATCH, EXIT_ASSERT = 0, 2, 3, 4, 5

DEFAULTS = {
    "bits": 4,
    "terms": 3,
    "weight_terms": 2,
    "act_terms": 4,
    "scheme": "sym-sat",
    "act_scheme": "asym-nonsat",
    "clip": "laplace",
    "first_last_bits": 8,
    "weight_stop_threshold": 1e-2,
    "act_stop_threshold": 1e-4,
    "act_stop": True,
    "grid_w_sa": True,
    "grid_w_bias": True,
    "grid_a_bias": True,
    "grid_a_sa": False,
    "reduce_plan": "flat",
    "seed": 0,
    "threads": 1,
    "t_range": "1..5",
    "probe": False,
    "no_assert": False,
    "arch": "mlp",
    "epochs": None,
}


class DataMismatch(Exception):
    pass


def _default_threads() -> int:
    env = os.environ.get("SERIEX_THREADS")
    try:
        return max(1, int(env)) if env else DEFAULTS["threads"]
    except ValueError:
        return DEFAULTS["threads"]


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults < SERIEX_THREADS < config file < flags."""
    cfg = dict(DEFAULTS)
    cfg["threads"] = _default_threads()
    if getattr(args, "config", None):
        p = Path(args.config)
        if not p.exists():
            raise FileNotFoundError(f"config not found: {p}")
        data = json.loads(p.read_text())
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(data)
    for key in DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    return cfg


def policy_from_config(cfg: dict) -> ExpansionPolicy:
    bits = int(cfg["bits"])
    w_scheme = QuantScheme.parse(cfg["scheme"], bits, cfg["clip"], granularity="per-channel", axis=0)
    a_scheme = QuantScheme.parse(cfg["act_scheme"], bits, cfg["clip"])
    mask = GridMask(bool(cfg["grid_w_sa"]), bool(cfg["grid_w_bias"]), bool(cfg["grid_a_bias"]),
                    bool(cfg["grid_a_sa"]))
    flb = cfg["first_last_bits"]
    return ExpansionPolicy(
        bits=bits, weight_terms_max=int(cfg["weight_terms"]), activation_terms_max=int(cfg["act_terms"]),
        weight_stop_threshold=float(cfg["weight_stop_threshold"]),
        activation_stop_threshold=float(cfg["act_stop_threshold"]),
        first_last_bits=None if flb in (None, 0) else int(flb),
        scheme_w=w_scheme, scheme_a=a_scheme, grid_mask=mask, activation_stop=bool(cfg["act_stop"]),
    )


def parse_t_range(text: str) -> list[int]:
    """``1..5`` or ``1,2,4``."""
    s = str(text).strip()
    if ".." in s:
        lo, hi = (int(v) for v in s.split(".."))
        ts = list(range(lo, hi + 1))
    else:
        ts = [int(v) for v in s.split(",") if v.strip()]
    if not ts or min(ts) < 1:
        raise ValueError(f"bad t range {text!r}")
    return ts


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps({"report_version": REPORT_VERSION, **doc}, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _table(rows: list[list], header: list[str]) -> None:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    for r in [header] + rows:
        print("  ".join(str(x).rjust(w) for x, w in zip(r, widths)), file=sys.stderr)


# ---------------------------------------------------------------- commands

def cmd_expand_tensor(args, cfg) -> int:
    path = Path(args.input)
    if not path.exists():
        raise FileNotFoundError(f"input not found: {path}")
    t = read_tensor(path)
    bits, n = int(cfg["bits"]), int(cfg["terms"])
    kw = {}
    if t.channel_axis is not None:
        kw = {"granularity": "per-channel", "axis": int(t.channel_axis)}
    scheme = QuantScheme.parse(cfg["scheme"], bits, cfg["clip"], **kw)
    m = np.asarray(t.data, dtype=np.float64)
    e = expand_tensor(m, scheme, n)
    err = np.abs(m - reconstruct(e))
    bound = residual_bound(e.base_scale, bits, n)
    per_channel_ok = _bound_ok(err, e, bound)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        for k, term in enumerate(e.terms, start=1):
            write_tensor(Tensor.from_array(term.digits, f"int{bits}", t.channel_axis), out / f"term{k}.sqtf")
    doc = {
        "command": "expand-tensor",
        "input": str(path),
        "shape": list(m.shape),
        "scheme": scheme.to_dict(),
        "terms": n,
        "scales": [[float(s) for s in term.scale] for term in e.terms],
        "residual_norms": list(e.residual_norms),
        "max_error": float(err.max()) if err.size else 0.0,
        "bound": float(np.max(bound)) if np.size(bound) else 0.0,
        "bound_ok": per_channel_ok,
        "clip_corrections": 0 if e.saturation is None else e.saturation.nnz,
    }
    _table([[k + 1, f"{np.max(term.scale):.6g}", f"{e.residual_norms[k]:.6g}"] for k, term in enumerate(e.terms)],
           ["term", "scale", "residual"])
    _emit(doc, getattr(args, "report", None))
    return EXIT_OK if per_channel_ok else EXIT_ASSERT


def _bound_ok(err: np.ndarray, e, bound) -> bool:
    if not err.size:
        return True
    return bool(np.all(err <= e.broadcast(bound) if np.ndim(bound) else err <= bound))


def cmd_quantize(args, cfg) -> int:
    model = load_model(args.model)
    policy = policy_from_config(cfg)
    em = expand_model(model, policy, cfg["reduce_plan"])
    save_expanded(em, args.out)
    layers = [{"position": p, "kind": l.kind, "bits": l.bits, "weight_terms": l.weight_terms}
              for p, l in enumerate(em.layers) if hasattr(l, "weight_expansion")]
    _table([[d["position"], d["kind"], d["bits"], d["weight_terms"]] for d in layers],
           ["layer", "kind", "bits", "weight_terms"])
    _emit({"command": "quantize", "output": str(args.out), "grid_shape": list(em.grid_shape),
           "basis_models": em.n_basis, "replication_factor": str(em.replication_factor),
           "policy": policy.to_dict(), "layers": layers}, args.report)
    return EXIT_OK


def _load_any(model_dir):
    if is_expanded_dir(model_dir):
        return load_expanded(model_dir)
    return load_model(model_dir)


def _load_data(args):
    ds = load_dataset(args.dataset, args.format, args.labels, args.num_classes)
    if len(ds) == 0:
        raise DataMismatch(f"dataset {args.dataset} is empty")
    return ds


def _fit_shape(ds, source):
    want = tuple(source.metadata["input_shape"])
    if tuple(ds.sample_shape) == want:
        return ds
    if int(np.prod(want)) == ds.features.shape[1]:
        return ds.with_shape(want)
    raise DataMismatch(f"dataset samples {ds.sample_shape} do not fit model input {want}")


def cmd_eval(args, cfg) -> int:
    model = _load_any(args.model)
    source = model.source if hasattr(model, "source") else model
    ds = _fit_shape(_load_data(args), source)
    r = evaluate(model, ds, threads=int(cfg["threads"]))
    doc = {"command": "eval", "model": str(args.model), "dataset": str(args.dataset), **r.to_dict()}
    doc["timings"] = doc.pop("timings")
    if not cfg["probe"]:
        doc.pop("layer_max_diff")
    print(f"accuracy {r.accuracy:.4f} (FP {r.fp_accuracy:.4f}) on {r.samples} samples", file=sys.stderr)
    _emit(doc, args.report)
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    model = load_model(args.model)
    ds = _fit_shape(_load_data(args), model)
    ts = parse_t_range(cfg["t_range"])
    policy = policy_from_config(cfg)
    reports = sweep_expansions(model, ds, policy, ts, check_monotone=False, threads=int(cfg["threads"]))
    rows = [[t, r.accuracy, r.logit_max_diff] for t, r in zip(ts, reports)]
    if args.plot_data:
        lines = ["t\taccuracy\tmax_diff"] + [f"{t}\t{a!r}\t{d!r}" for t, a, d in rows]
        Path(args.plot_data).write_text("\n".join(lines) + "\n")
    _table([[t, f"{a:.4f}", f"{d:.3e}", "knee" if r.knee else ""] for (t, a, d), r in zip(rows, reports)],
           ["t", "accuracy", "max_diff", ""])
    violation = monotone_violation(ts, reports)
    _emit({"command": "sweep", "model": str(args.model), "t_range": ts, "policy": policy.to_dict(),
           "monotone": violation is None, "violation": list(violation) if violation else None,
           "reports": [dict(t=t, **r.to_dict()) for t, r in zip(ts, reports)]}, args.report)
    if violation is not None and not cfg["no_assert"]:
        i = ts.index(violation[0])
        raise MonotonicityError(violation, (reports[i].logit_max_diff, reports[i + 1].logit_max_diff))
    return EXIT_OK


def cmd_make_fixture(args, cfg) -> int:
    seed = int(cfg["seed"])
    out = Path(args.out)
    if cfg["arch"] == "mlp":
        model, train, test = mlp_fixture(seed, **({"epochs": int(cfg["epochs"])} if cfg["epochs"] is not None else {}))
    else:
        model, train, test = conv_fixture(seed, **({"epochs": int(cfg["epochs"])} if cfg["epochs"] is not None else {}))
    save_model(model, out / "model")
    if cfg["arch"] == "mlp":
        save_csv(train, out / "train.csv")
        save_csv(test, out / "test.csv")
        files = ["train.csv", "test.csv"]
    else:
        write_idx(train, out / "train-images.idx")
        write_idx(test, out / "test-images.idx")
        files = ["train-images.idx", "train-labels.idx", "test-images.idx", "test-labels.idx"]
    _emit({"command": "make-fixture", "output": str(out), "arch": model.metadata["arch"], "seed": seed,
           "files": ["model"] + files, "train_accuracy": model.metadata["train_accuracy"],
           "test_accuracy": model.metadata["test_accuracy"]}, args.report)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _policy_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bits", type=int, choices=(2, 4, 8))
    p.add_argument("--weight-terms", dest="weight_terms", type=int)
    p.add_argument("--act-terms", dest="act_terms", type=int)
    p.add_argument("--scheme", help="weight scheme: sym-sat, sym-nonsat, asym-sat, asym-nonsat")
    p.add_argument("--act-scheme", dest="act_scheme", help="activation scheme (default asym-nonsat)")
    p.add_argument("--clip", help="laplace or fixed:<lo>,<hi>")
    p.add_argument("--first-last-bits", dest="first_last_bits", type=int, help="0 keeps the policy bits")
    p.add_argument("--reduce-plan", dest="reduce_plan", choices=("flat", "tree"))


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with default values for any flag")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker cap (default: $SERIEX_THREADS or 1)")
    p.add_argument("--report", help="write the JSON report here instead of stdout")


def _data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("dataset")
    p.add_argument("--format", choices=("csv", "idx"))
    p.add_argument("--labels", help="IDX labels file (default: 'images' -> 'labels' in the file name)")
    p.add_argument("--num-classes", dest="num_classes", type=int)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="seriex", description="Low-bit series-expansion quantization.")
    ap.add_argument("--version", action="version", version=f"seriex (kernels: {kernels.BACKEND})")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("expand-tensor", help="expand one SQTF tensor and check the residual bound")
    p.add_argument("input")
    p.add_argument("--bits", type=int, choices=(2, 4, 8))
    p.add_argument("--terms", type=int)
    p.add_argument("--scheme")
    p.add_argument("--clip")
    p.add_argument("--out", help="directory for the per-term digit tensors")
    _common(p)
    p.set_defaults(func=cmd_expand_tensor)

    p = sub.add_parser("quantize", help="expand a model directory")
    p.add_argument("model")
    p.add_argument("out")
    _policy_flags(p)
    _common(p)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="evaluate an FP or expanded model")
    p.add_argument("model")
    _data_flags(p)
    p.add_argument("--probe", action="store_true", help="include per-layer max differences")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="accuracy and max difference over activation term counts")
    p.add_argument("model")
    _data_flags(p)
    p.add_argument("--t-range", dest="t_range", help="e.g. 1..5 or 1,2,4")
    p.add_argument("--plot-data", dest="plot_data", help="TSV output: t, accuracy, max_diff")
    p.add_argument("--no-assert", dest="no_assert", action="store_true")
    _policy_flags(p)
    _common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("make-fixture", help="train a fixture model and write it with its data")
    p.add_argument("out")
    p.add_argument("--arch", choices=("mlp", "conv"))
    p.add_argument("--epochs", type=int)
    _common(p)
    p.set_defaults(func=cmd_make_fixture)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (UnsupportedLayerKind, UnsupportedLayerError) as exc:
        print(f"seriex: unsupported model: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (FileNotFoundError, TensorIOError, ManifestError, DatasetError, OSError, json.JSONDecodeError) as exc:
        print(f"seriex: {exc}", file=sys.stderr)
        return EXIT_IO
    except (MonotonicityError, OverflowGuardError) as exc:
        print(f"seriex: assertion failed: {exc}", file=sys.stderr)
        return EXIT_ASSERT
    except (DataMismatch, ValueError) as exc:
        print(f"seriex: data mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH


if __name__ == "__main__":
    sys.exit(main())

"""Command-line frontend.

Subcommands: calibrate, quantize, eval, bench, inspect.  Machine-readable
progress goes to stdout as JSON lines; diagnostics go to stderr.  Exit
codes: 0 success, 1 data/numeric error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import bench as bench_mod
from . import tensor_store
from .calibration import ActivationNorms, accumulate_norms, load_norms
from .errors import CmpqError, CmpqUsageError, ConfigError, NumericError, ShapeError
from .inference import dequantize_layer
from .layer import QuantizeConfig
from .pipeline import quantize_model

USAGE_EXIT = 2
DATA_EXIT = 1


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True) + "\n")


def _diag(msg: str) -> None:
    sys.stderr.write(f"cmpq: {msg}\n")


def _resolve_threads(value) -> int:
    if value is not None:
        return max(1, value)
    env = os.environ.get("CMPQ_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise CmpqUsageError(f"CMPQ_THREADS={env!r} is not an integer") from None
    return 1


def _strip_suffix(name: str, suffix: str) -> str:
    return name[: -len(suffix)] if name.endswith(suffix) else name


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_calibrate(args) -> int:
    if bool(args.acts) == bool(args.norms):
        _diag("exactly one of --acts / --norms is required")
        return USAGE_EXIT
    out_entries: dict[str, np.ndarray] = {}
    if args.acts:
        tensors = tensor_store.load_tensors(args.acts)
        for name, values in tensors.entries.items():
            layer = _strip_suffix(name, ".acts")
            if values.ndim != 2:
                raise ShapeError(f"activation tensor {name!r} must be 2-D")
            try:
                norms = accumulate_norms([values])
            except NumericError as exc:
                raise NumericError(f"tensor {name!r}: {exc}") from exc
            out_entries[f"{layer}.norms"] = norms.values.astype(np.float32)
            _emit({"layer": layer, "tokens": norms.token_count, "d_in": norms.d_in})
    else:
        tensors = tensor_store.load_tensors(args.norms)
        for name in tensors.entries:
            layer = _strip_suffix(name, ".norms")
            norms = load_norms(tensors, name)
            out_entries[f"{layer}.norms"] = norms.values.astype(np.float32)
            _emit({"layer": layer, "tokens": 0, "d_in": norms.d_in})
    if not out_entries:
        raise ConfigError("input file holds no tensors")
    tensor_store.write_tensors(args.out, out_entries)
    return 0


def _norms_for(weight_name: str, norm_set) -> ActivationNorms:
    for candidate in (f"{weight_name}.norms", weight_name):
        if candidate in norm_set.entries:
            return load_norms(norm_set, candidate)
    raise ConfigError(f"no activation norms supplied for layer {weight_name!r}")


def cmd_quantize(args) -> int:
    weights = tensor_store.load_tensors(args.weights)
    norm_set = tensor_store.load_tensors(args.norms)
    norms = {name: _norms_for(name, norm_set) for name in weights.entries}
    cfg = QuantizeConfig(
        budget=args.bits,
        ratio_act=args.ratio_act,
        ratio_q=args.ratio_q,
        denominator_variant=args.delta_variant,
    )
    container = quantize_model(weights, norms, cfg, threads=args.threads)
    tensor_store.write_container(args.out, container.layers, container.metadata)
    for layer in container.layers:
        _emit({"layer": layer.name, "d_in": layer.d_in, "d_out": layer.d_out, **layer.stats})
    return 0


def cmd_eval(args) -> int:
    container = tensor_store.read_container(args.cmpq)
    weights = tensor_store.load_tensors(args.weights)
    acts = tensor_store.load_tensors(args.acts) if args.acts else None
    for layer in container.layers:
        if layer.name not in weights.entries:
            raise ConfigError(f"weights file has no tensor {layer.name!r}")
        w = weights.entries[layer.name]
        if w.shape != (layer.d_in, layer.d_out):
            raise ShapeError(
                f"layer {layer.name!r}: weights are {w.shape}, "
                f"container says {(layer.d_in, layer.d_out)}"
            )
        row = {"layer": layer.name, **bench_mod.recon_error(w, layer)}
        if acts is not None:
            key = f"{layer.name}.acts"
            if key in acts.entries:
                x_val = acts.entries[key]
            elif len(acts.entries) == 1:
                x_val = next(iter(acts.entries.values()))
            else:
                raise ConfigError(f"activations file has no tensor {key!r}")
            row["output_rel_err"] = bench_mod.output_error(w, layer, x_val)
        _emit(row)
    return 0


def cmd_bench(args) -> int:
    report = bench_mod.run_suite(args.suite)
    report.write(args.out, fmt="csv")
    if args.json:
        report.write(args.json, fmt="json")
    _diag(f"suite {args.suite}: {len(report.rows)} rows -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    container = tensor_store.read_container(args.cmpq)
    meta = json.dumps(container.metadata, sort_keys=True)
    print(f"container: {args.cmpq}  layers: {len(container.layers)}")
    print(f"metadata: {meta}")
    header = (
        f"{'layer':<20} {'shape':>12} {'fp16':>5} {'2b':>6} {'3b':>6} {'4b':>6} "
        f"{'nnz':>8} {'s':>10} {'l':>10} {'nominal':>8} {'effective':>9}"
    )
    print(header)
    print("-" * len(header))
    for layer in container.layers:
        hist = layer.precision.histogram()
        thr = layer.precision.thresholds
        fmt_thr = lambda t: "-" if t is None else f"{t:.4g}"
        low = fmt_thr(thr.low if thr else None)
        high = fmt_thr(thr.high if thr else None)
        shape = f"{layer.d_in}x{layer.d_out}"
        print(
            f"{layer.name:<20} {shape:>12} {hist['fp16']:>5} "
            f"{hist['2bit']:>6} {hist['3bit']:>6} {hist['4bit']:>6} "
            f"{layer.outliers.nnz:>8} {low:>10} {high:>10} "
            f"{layer.stats.get('nominal_bits', float('nan')):>8.3f} "
            f"{layer.stats.get('effective_bits', float('nan')):>9.3f}"
        )
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cmpq",
        description="Weight-only quantization with fractional channel-wise bit budgets",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="turn activation dumps into norm vectors")
    p.add_argument("--acts", help="safetensors file with <layer>.acts matrices")
    p.add_argument("--norms", help="safetensors file with precomputed 1-D norms")
    p.add_argument("--out", required=True, help="output norms file (safetensors)")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("quantize", help="quantize a weights file into a CMPQ container")
    p.add_argument("--weights", required=True, help="safetensors weights file")
    p.add_argument("--norms", required=True, help="safetensors norms file")
    p.add_argument("--bits", type=float, required=True, help="average bit budget in [2, 4]")
    p.add_argument("--ratio-act", type=float, default=0.0045)
    p.add_argument("--ratio-q", type=float, default=0.0005)
    p.add_argument(
        "--delta-variant",
        choices=("paper", "conventional"),
        default="paper",
        help="uniform-grid denominator bookkeeping recorded in metadata",
    )
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="output container path")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("eval", help="measure reconstruction error of a container")
    p.add_argument("--cmpq", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--acts", help="optional activations for output error")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="run a named comparison suite")
    p.add_argument("--suite", required=True, choices=bench_mod.SUITES)
    p.add_argument("--out", required=True, help="CSV report path")
    p.add_argument("--json", help="optional JSON report path")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("inspect", help="print per-layer precision/outlier summary")
    p.add_argument("--cmpq", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else USAGE_EXIT

    # flags validate before any file is opened
    if args.command == "quantize":
        if not 2.0 <= args.bits <= 4.0:
            _diag(f"--bits {args.bits} outside [2, 4]")
            return USAGE_EXIT
        if args.ratio_act < 0 or args.ratio_q < 0 or args.ratio_act + args.ratio_q >= 1:
            _diag("outlier ratios must be nonnegative and sum below 1")
            return USAGE_EXIT
        try:
            args.threads = _resolve_threads(args.threads)
        except CmpqUsageError as exc:
            _diag(str(exc))
            return USAGE_EXIT

    try:
        return args.func(args)
    except CmpqUsageError as exc:
        _diag(str(exc))
        return USAGE_EXIT
    except CmpqError as exc:
        _diag(str(exc))
        return DATA_EXIT


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()

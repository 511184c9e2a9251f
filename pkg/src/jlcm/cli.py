"""Command-line front end.

Exit codes: 0 success, 1 usage error, 2 data error (unreadable or invalid
files), 3 numeric failure during optimization.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .clustering import ClusteringError, Method
from .learner import NumericError, Schedule, UpdateRule
from .model_io import ContainerError, load_calibration, load_container
from .packfmt import MAGIC, FormatError, deserialize_compressed, measure_footprint, serialize_compressed
from .pipeline import LayerError, RunConfig, compress_model, evaluate, run_report, write_report
from .planner import PlanError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
DEFAULT_EVAL_ROWS = 256


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="jlcm", description="Compress linear-layer stacks with learnable codebooks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("compress", help="compress a model container")
    c.add_argument("--model", required=True, type=Path)
    c.add_argument("--calib", type=Path, help="calibration inputs (required when optimizing)")
    c.add_argument("--alpha", required=True, type=float, help="target compression ratio")
    c.add_argument("--mode", default="auto", choices=["auto", "multi-scale", "multi-codebook"])
    c.add_argument("--clustering", default=Method.HIERARCHICAL.value, choices=[m.value for m in Method])
    c.add_argument("--optimize", default=True, type=_bool, metavar="BOOL")
    c.add_argument("--rule", default=UpdateRule.PROXIMAL.value, choices=[r.value for r in UpdateRule],
                   help="mapping update rule when optimizing")
    c.add_argument("--scale-method", default="std", choices=["std", "maxabs"])
    c.add_argument("--iters", default=Schedule.iterations, type=int)
    c.add_argument("--seed", default=12345, type=int)
    c.add_argument("--out", required=True, type=Path)
    c.add_argument("--report", type=Path)
    c.add_argument("--json", action="store_true")

    e = sub.add_parser("eval", help="compare a compressed model against the original")
    e.add_argument("--model", required=True, type=Path)
    e.add_argument("--compressed", required=True, type=Path, help="compressed file or model container")
    e.add_argument("--inputs", type=Path, help="evaluation inputs (calibration format)")
    e.add_argument("--seed", default=12345, type=int, help="seed for random inputs when --inputs is absent")
    e.add_argument("--json", action="store_true")

    f = sub.add_parser("footprint", help="memory footprint of a compressed model")
    f.add_argument("--compressed", required=True, type=Path)
    f.add_argument("--model", type=Path, help="original model, for the reference footprint")
    f.add_argument("--capacity", type=float, metavar="BYTES", help="device memory to check the fit against")
    f.add_argument("--json", action="store_true")

    i = sub.add_parser("inspect", help="dump per-layer structure and codebooks")
    i.add_argument("--compressed", required=True, type=Path)
    i.add_argument("--json", action="store_true")
    return p


def _load_any(path: Path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        return deserialize_compressed(path)
    return load_container(path)


def _eval_inputs(path: Path | None, width: int, seed: int) -> np.ndarray:
    if path is not None:
        return load_calibration(path, width).inputs
    return np.random.default_rng(seed).standard_normal((DEFAULT_EVAL_ROWS, width)).astype(np.float32)


def _emit(payload: dict, as_json: bool, lines: list[str]) -> None:
    if as_json:
        print(json.dumps(payload, indent=2))
    else:
        print("\n".join(lines))


def cmd_compress(args) -> int:
    if args.iters < 0:
        raise UsageError("--iters must be non-negative")
    model = load_container(args.model)
    calib = load_calibration(args.calib, model.layers[0].n_i) if args.calib else None
    if args.optimize and calib is None:
        raise UsageError("--optimize true needs --calib")
    cfg = RunConfig(
        alpha=args.alpha,
        mode=args.mode,
        clustering=Method(args.clustering),
        optimize=args.optimize,
        rule=UpdateRule(args.rule),
        schedule=Schedule(iterations=args.iters, seed=args.seed),
        seed=args.seed,
        scale_method=args.scale_method,
    )
    result = compress_model(model, calib, cfg)
    serialize_compressed(result.compressed, args.out)
    x = _eval_inputs(args.calib, model.layers[0].n_i, args.seed)
    metrics = evaluate(model, result.compressed, x, result.permutations)
    report = run_report(result, cfg, metrics)
    if args.report:
        write_report(report, args.report)
    fp = result.footprint
    lines = [f"wrote {args.out} ({len(result.compressed)} layers)",
             f"alpha achieved: {fp.alpha_achieved:.4f} (target {cfg.alpha})"]
    for l, (plan, mse) in enumerate(zip(result.plans, metrics["layer_weight_mse"])):
        lines.append(f"layer {l}: {plan.mode.value} codebook_size={plan.codebook_size} "
                     f"k={plan.num_codebooks} scales={plan.num_scales} weight_mse={mse:.6g}")
    lines.append(f"output mse: {metrics['output_mse']:.6g}")
    _emit(report, args.json, lines)
    return EXIT_OK


def cmd_eval(args) -> int:
    original = load_container(args.model)
    other = _load_any(args.compressed)
    if len(other.layers) != len(original.layers):
        raise ContainerError("models have different layer counts")
    x = _eval_inputs(args.inputs, original.layers[0].n_i, args.seed)
    metrics = evaluate(original, other, x)
    lines = [f"output_mse: {metrics['output_mse']:.6g}",
             f"max_abs_deviation: {metrics['max_abs_deviation']:.6g}"]
    if "top1_agreement" in metrics:
        lines.append(f"top1_agreement: {metrics['top1_agreement']:.4f}")
    lines += [f"layer {l} weight_mse: {v:.6g}" for l, v in enumerate(metrics["layer_weight_mse"])]
    _emit(metrics, args.json, lines)
    return EXIT_OK


def cmd_footprint(args) -> int:
    compressed = deserialize_compressed(args.compressed)
    original = load_container(args.model) if args.model else None
    fp = measure_footprint(compressed, original)
    d = fp.to_dict(args.capacity)
    lines = [f"M_W: {fp.m_w} bits", f"M_A: {fp.m_a} bits", f"M_ref: {fp.m_ref} bits",
             f"M: {fp.m} bits ({d['M_bytes']} bytes)", f"alpha achieved: {fp.alpha_achieved:.4f}",
             f"weight share: {fp.weight_share:.4f}"]
    for lf in fp.layers:
        lines.append(f"layer {lf.index}: weights {lf.weight_bits} bits, bias {lf.bias_bits} bits, "
                     f"alpha {lf.alpha:.4f}")
    if args.capacity is not None:
        lines.append(f"required alpha: {d['required_alpha']:.4f}")
        lines.append(f"fits: {str(d['fits']).lower()}")
    _emit(d, args.json, lines)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model = deserialize_compressed(args.compressed)
    layers, lines = [], []
    for l, layer in enumerate(model.layers):
        entry = {"layer": l, "mode": layer.mode.name.lower(), "n_o": layer.n_o, "n_i": layer.n_i,
                 "activation": layer.activation.name.lower(), "codebook_size": layer.codebook_size,
                 "num_codebooks": layer.num_codebooks, "num_scales": layer.num_scales,
                 "bits_per_index": layer.bits_per_index,
                 "codebooks": np.asarray(layer.codebooks, dtype=np.float64).tolist(),
                 "scales": [] if layer.scales is None else np.asarray(layer.scales, dtype=np.float64).tolist()}
        layers.append(entry)
        lines.append(f"layer {l}: {entry['mode']} {layer.n_o}x{layer.n_i} {entry['activation']} "
                     f"codebook_size={layer.codebook_size} k={layer.num_codebooks} "
                     f"scales={layer.num_scales} bits={layer.bits_per_index}")
        for g, book in enumerate(entry["codebooks"]):
            lines.append(f"  codebook {g}: " + " ".join(f"{v:.6g}" for v in book))
        if entry["scales"]:
            lines.append("  scales: " + " ".join(f"{v:.6g}" for v in entry["scales"]))
    _emit({"layers": layers}, args.json, lines)
    return EXIT_OK


COMMANDS = {"compress": cmd_compress, "eval": cmd_eval, "footprint": cmd_footprint, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, PlanError) as exc:
        parser.print_usage(sys.stderr)
        print(f"jlcm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"jlcm: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except LayerError as exc:
        if isinstance(exc.cause, NumericError):
            print(f"jlcm: numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"jlcm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ContainerError, FormatError, ClusteringError, OSError, ValueError) as exc:
        print(f"jlcm: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

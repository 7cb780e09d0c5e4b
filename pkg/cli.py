"""
Command-line entry point: `python cli.py <subcommand> [flags]`.

Subcommands: gen-model, gen-calib, rank, prune, quantize, oracle {cssp, bounds,
plossless}, report, verify. Exit status: 0 success, 1 invalid arguments,
2 runtime error, 3 verification failure.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from config_manager import ConfigManager
from data_models import ModelConfig, CalibBatch, PruneConfig, RunManifest, QuantPlan
from model_container import save_model, load_model
from moe_model import gen_model
from calibration import gen_synthetic, save_calibration, load_calibration, capture_layer_samples, capture_all_layers
from camera_rank import rank_micro_experts, rank_model, ranking_records
from camera_prune import prune_model, prune_layer_report
from camera_quant import quantize_model, quant_layer_report, measured_bitwidth, VARIANTS
from oracles import (
    cssp_bruteforce, greedy_error, svd_rank_k_error, sized_instance, run_bound_sweeps,
    p_lossless, lossless_table_rows, MAX_BRUTEFORCE_MICRO,
)
from reports import LayerReportCalculator, alpha_sweep, calibration_size_sweep
from report_exporter import ReportExporter
from verify_suite import run_verification
from utils import parse_float_list, parse_int_list, file_sha256

logger = logging.getLogger(__name__)

TOOL_VERSION = "0.1.0"
EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_VERIFICATION = 0, 1, 2, 3
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class CliUsageError(Exception):
    """Bad command line; mapped to exit status 1."""


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(f"{self.prog}: {message}")


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None,
                        help="Random seed. Can also be set via CAMERA_SEED environment variable.")
    common.add_argument("--threads", type=int, default=None,
                        help="Worker threads. Can also be set via CAMERA_THREADS environment variable.")
    common.add_argument("--log-level", dest="log_level", default=None,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging level (default INFO).")
    common.add_argument("--quiet", action="store_true", help="Only log warnings and hide progress bars.")

    calib = ArgumentParser(add_help=False)
    source = calib.add_mutually_exclusive_group(required=True)
    source.add_argument("--calib", type=str, help="Calibration batch (MCAM file holding tensor X).")
    source.add_argument("--synthetic", type=str, help="Synthetic batch spec 'n,d,seed[,scale]'.")

    parser = ArgumentParser(prog="camera", description="Micro-expert ranking, pruning and quantization for MoE layers.")
    sub = parser.add_subparsers(dest="command", metavar="subcommand")
    sub.required = True

    p = sub.add_parser("gen-model", parents=[common], help="Write a seeded random toy MoE model.")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--experts", type=int, default=8, help="Routed experts per layer.")
    p.add_argument("--shared", type=int, default=0, help="Shared experts per layer.")
    p.add_argument("--d-model", dest="d_model", type=int, default=64)
    p.add_argument("--d-ff", dest="d_ff", type=int, default=32)
    p.add_argument("--top-k", dest="top_k", type=int, default=2)
    p.add_argument("--spread", type=float, default=1.0, help="Log-normal spread of per-neuron weight scales.")
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("gen-calib", parents=[common], help="Write a seeded Gaussian calibration batch.")
    p.add_argument("--n", type=int, default=512)
    p.add_argument("--d-model", dest="d_model", type=int, required=True)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("rank", parents=[common, calib], help="Rank micro-experts by decoding-time energy.")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--layer", type=int, default=None, help="Rank one layer (default: every layer).")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", type=str, required=True)

    p = sub.add_parser("prune", parents=[common, calib], help="Remove the lowest-energy micro-experts.")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="Fraction of micro-experts to remove.")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--protect-shared", dest="protect_shared", action="store_true",
                   help="Never remove shared-expert micro-experts.")
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--report", type=str, default=None)

    p = sub.add_parser("quantize", parents=[common, calib], help="Mixed-precision micro-expert quantization.")
    p.add_argument("--model", type=str, required=True)
    p.add_argument("--bits", type=str, default=None, help="Three descending bit-widths, e.g. 3,2,1.")
    p.add_argument("--ratios", type=str, default=None, help="Three level ratios summing to 1.")
    p.add_argument("--group", dest="group_size", type=int, default=None)
    p.add_argument("--variant", choices=list(VARIANTS), default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--out", type=str, required=True)
    p.add_argument("--report", type=str, default=None)

    p = sub.add_parser("oracle", help="Exact reference computations.")
    oracle = p.add_subparsers(dest="oracle", metavar="oracle")
    oracle.required = True
    o = oracle.add_parser("cssp", parents=[common], help="Brute-force column subset selection on a random instance.")
    o.add_argument("--n", type=int, default=16, help="Tokens.")
    o.add_argument("--micro", type=int, default=10, help="Micro-experts N_e.")
    o.add_argument("--d", type=int, default=8, help="Output dimension.")
    o.add_argument("--keep", type=int, default=None, help="Columns kept (default N_e // 2).")
    o.add_argument("--out", type=str, default=None)
    o = oracle.add_parser("bounds", parents=[common], help="Lemma, theorem and sandwich sweeps.")
    o.add_argument("--trials", type=int, default=None)
    o.add_argument("--out", type=str, default=None)
    o = oracle.add_parser("plossless", parents=[common], help="Lossless-activation probability.")
    o.add_argument("--experts", type=int, default=None)
    o.add_argument("--activated", type=int, default=None)
    o.add_argument("--prune", type=float, default=0.25)
    o.add_argument("--table", action="store_true", help="Print the table for common MoE configurations.")
    o.add_argument("--out", type=str, default=None)

    p = sub.add_parser("report", parents=[common, calib], help="Diagnostic tables for a model pair.")
    p.add_argument("--model", type=str, required=True, help="Reference model.")
    p.add_argument("--compare", type=str, default=None, help="Compressed model compared against --model.")
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--drop-top", dest="drop_top", type=int, default=0)
    p.add_argument("--layers", type=str, default=None, help="Comma-separated layer indices (default all).")
    p.add_argument("--lambda", dest="lam", type=float, default=None, help="Pruning fraction used by the sweeps.")
    p.add_argument("--alpha-grid", dest="alpha_grid", type=str, default=None,
                   help="Comma-separated alphas; prune every layer at --lambda for each and tabulate the error.")
    p.add_argument("--calib-sizes", dest="calib_sizes", type=str, default=None,
                   help="Comma-separated token counts; compare retain sets ranked on calibration prefixes.")
    p.add_argument("--out-dir", dest="out_dir", type=str, required=True)

    p = sub.add_parser("verify", parents=[common], help="Run the self-check suite.")
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--report", type=str, default=None)

    return parser


def validate_run_params(args: argparse.Namespace) -> Tuple[bool, Optional[str], Optional[str]]:
    """
    Validate resolved parameters.

    Returns:
        tuple: (is_valid, error_message, error_type)
    """
    if args.threads < 1:
        return (False, f"--threads must be >= 1, got {args.threads}", "validation")
    lam = getattr(args, "lam", None)
    if lam is not None and not 0.0 <= lam < 1.0:
        return (False, f"--lambda must lie in [0, 1), got {lam}", "validation")
    alpha = getattr(args, "alpha", None)
    if alpha is not None and not 0.0 <= alpha <= 1.0:
        return (False, f"--alpha must lie in [0, 1], got {alpha}", "validation")
    group = getattr(args, "group_size", None)
    if group is not None and group < 1:
        return (False, f"--group must be >= 1, got {group}", "validation")
    trials = getattr(args, "trials", None)
    if trials is not None and trials < 1:
        return (False, f"--trials must be >= 1, got {trials}", "validation")
    if args.command == "gen-model":
        for flag, value in (("--layers", args.layers), ("--experts", args.experts),
                            ("--d-model", args.d_model), ("--d-ff", args.d_ff)):
            if value < 1:
                return (False, f"{flag} must be >= 1, got {value}", "validation")
        if args.shared < 0:
            return (False, f"--shared must be >= 0, got {args.shared}", "validation")
        if not 1 <= args.top_k <= args.experts:
            return (False, f"--top-k must lie in [1, --experts={args.experts}], got {args.top_k}", "validation")
        if args.spread < 0:
            return (False, f"--spread must be >= 0, got {args.spread}", "validation")
    if args.command == "gen-calib":
        if args.n < 1 or args.d_model < 1:
            return (False, f"--n and --d-model must be >= 1, got {args.n}, {args.d_model}", "validation")
    if args.command == "report":
        try:
            alphas = parse_float_list(args.alpha_grid) if args.alpha_grid else []
            sizes = parse_int_list(args.calib_sizes) if args.calib_sizes else []
        except ValueError as e:
            return (False, f"--alpha-grid/--calib-sizes: {e}", "validation")
        if any(not 0.0 <= a <= 1.0 for a in alphas):
            return (False, f"--alpha-grid entries must lie in [0, 1], got {args.alpha_grid}", "validation")
        if args.calib_sizes is not None and not sizes:
            return (False, "--calib-sizes needs at least one token count", "validation")
        if any(n < 1 for n in sizes):
            return (False, f"--calib-sizes entries must be >= 1, got {args.calib_sizes}", "validation")
    if args.command == "quantize":
        try:
            ratios = parse_float_list(args.ratios, 3)
            bits = parse_int_list(args.bits, 3)
        except ValueError as e:
            return (False, f"--ratios/--bits: {e}", "validation")
        if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            return (False, f"--ratios must be non-negative and sum to 1, got {args.ratios}", "validation")
        if any(b < 1 for b in bits) or not bits[0] >= bits[1] >= bits[2]:
            return (False, f"--bits must be descending positive integers, got {args.bits}", "validation")
    if args.command == "oracle" and args.oracle == "plossless":
        if not 0.0 <= args.prune < 1.0:
            return (False, f"--prune must lie in [0, 1), got {args.prune}", "validation")
        if not args.table and (args.experts is None or args.activated is None):
            return (False, "--experts and --activated are required unless --table is given", "validation")
    if args.command == "oracle" and args.oracle == "cssp":
        if args.n < 1 or args.d < 1:
            return (False, f"--n and --d must be >= 1, got {args.n}, {args.d}", "validation")
        if not 1 <= args.micro <= MAX_BRUTEFORCE_MICRO:
            return (False, f"--micro must lie in [1, {MAX_BRUTEFORCE_MICRO}], got {args.micro}", "validation")
        keep = args.keep if args.keep is not None else max(1, args.micro // 2)
        if not 1 <= keep <= args.micro:
            return (False, f"--keep must lie in [1, {args.micro}], got {keep}", "validation")
    return (True, None, None)


def resolve_params(args: argparse.Namespace, config: ConfigManager) -> argparse.Namespace:
    """Fill unset flags from environment, stored config and defaults."""
    args.seed = config.get("seed", args.seed)
    args.threads = config.get("threads", args.threads)
    args.log_level = config.get("log_level", args.log_level)
    if hasattr(args, "alpha"):
        args.alpha = config.get("alpha", args.alpha)
    if hasattr(args, "lam"):
        args.lam = config.get("lambda", args.lam)
    if args.command == "quantize":
        args.ratios = config.get("ratios", args.ratios)
        args.bits = config.get("bits", args.bits)
        args.group_size = config.get("group_size", args.group_size)
        args.variant = config.get("variant", args.variant)
    if hasattr(args, "trials"):
        args.trials = config.get("trials", args.trials)
    return args


def configure_logging(level: str, quiet: bool) -> None:
    logging.basicConfig(level=logging.WARNING if quiet else getattr(logging, level),
                        format=LOG_FORMAT, stream=sys.stderr, force=True)


def load_batch(args: argparse.Namespace, d_model: int) -> CalibBatch:
    if args.calib:
        return load_calibration(args.calib, d_model)
    spec = parse_float_list(args.synthetic)
    if len(spec) not in (3, 4) or any(v != int(v) for v in spec[:3]):
        raise CliUsageError(f"--synthetic expects 'n,d,seed[,scale]', got '{args.synthetic}'")
    n, d, seed = (int(v) for v in spec[:3])
    if d != d_model:
        raise CliUsageError(f"--synthetic d={d} does not match the model's d_model={d_model}")
    return gen_synthetic(n, d, seed, spec[3] if len(spec) == 4 else 1.0)


def manifest_path(out: str) -> str:
    return f"{out}.manifest.json"


def write_manifest(args: argparse.Namespace, out: str, inputs: Sequence[Optional[str]],
                   outputs: Sequence[Optional[str]], exporter: ReportExporter) -> None:
    parameters = {k: v for k, v in sorted(vars(args).items())
                  if k not in ("quiet", "log_level", "threads", "command")}
    manifest = RunManifest(
        subcommand=args.command if args.command != "oracle" else f"oracle {args.oracle}",
        parameters=parameters,
        tool_version=TOOL_VERSION,
        input_digests={path: file_sha256(path) for path in inputs if path},
        outputs=[path for path in outputs if path],
    )
    exporter.export_to_json(vars(manifest), manifest_path(out))


def show_progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def cmd_gen_model(args, exporter: ReportExporter) -> int:
    config = ModelConfig(n_layers=args.layers, n_experts=args.experts, n_shared=args.shared,
                         d_model=args.d_model, d_ff=args.d_ff, top_k=args.top_k)
    model = gen_model(config, args.seed, spread=args.spread)
    save_model(model, args.out, meta={"seed": args.seed, "spread": args.spread})
    write_manifest(args, args.out, [], [args.out], exporter)
    print(f"Wrote toy model {config.to_dict()} to {args.out}")
    return EXIT_OK


def cmd_gen_calib(args, exporter: ReportExporter) -> int:
    batch = gen_synthetic(args.n, args.d_model, args.seed, args.scale)
    save_calibration(args.out, batch, meta={"seed": args.seed, "scale": args.scale})
    write_manifest(args, args.out, [], [args.out], exporter)
    print(f"Wrote calibration batch ({batch.n} x {batch.d_model}) to {args.out}")
    return EXIT_OK


def cmd_rank(args, exporter: ReportExporter) -> int:
    model = load_model(args.model)
    batch = load_batch(args, model.config.d_model)
    layers = []
    if args.layer is not None:
        if not 0 <= args.layer < model.config.n_layers:
            raise CliUsageError(f"--layer must lie in [0, {model.config.n_layers}), got {args.layer}")
        samples = capture_layer_samples(model, batch, args.layer)
        ranked = [(args.layer, rank_micro_experts(model.layers[args.layer], samples, args.alpha, args.threads))]
    else:
        ranked = list(enumerate(rank_model(model, batch, args.alpha, args.threads)))
    for i, (ranking, scores) in ranked:
        layers.append({"layer": i, "n_micro": int(ranking.order.size),
                       "records": ranking_records(ranking, scores, model.layers[i])})
    exporter.export_to_json({"alpha": args.alpha, "layers": layers}, args.out)
    write_manifest(args, args.out, [args.model, args.calib], [args.out], exporter)
    print(f"Ranked {len(layers)} layer(s); wrote {args.out}")
    return EXIT_OK


def cmd_prune(args, exporter: ReportExporter) -> int:
    model = load_model(args.model)
    batch = load_batch(args, model.config.d_model)
    config = PruneConfig(lam=args.lam, alpha=args.alpha, protect_shared=args.protect_shared)
    calculator = LayerReportCalculator()
    layer_reports: List[Dict[str, Any]] = []

    def collect(i, layer, ranking, scores, retain):
        row = prune_layer_report(i, layer, retain, args.lam)
        row["per_expert"] = calculator.per_expert_prune_ratio(retain, layer)
        layer_reports.append(row)

    pruned = prune_model(model, batch, config, threads=args.threads, on_layer=collect,
                         show_progress=show_progress(args))
    save_model(pruned, args.out, meta={"lambda": args.lam, "alpha": args.alpha})
    if args.report:
        exporter.export_to_json({"lambda": args.lam, "alpha": args.alpha, "protect_shared": args.protect_shared,
                                 "layers": layer_reports}, args.report)
    write_manifest(args, args.out, [args.model, args.calib], [args.out, args.report], exporter)
    kept = sum(r["n_micro_after"] for r in layer_reports)
    total = sum(r["n_micro_before"] for r in layer_reports)
    print(f"Kept {kept} of {total} micro-experts; wrote {args.out}")
    return EXIT_OK


def cmd_quantize(args, exporter: ReportExporter) -> int:
    model = load_model(args.model)
    batch = load_batch(args, model.config.d_model)
    ratios = parse_float_list(args.ratios, 3)
    bits = parse_int_list(args.bits, 3)
    plans: Dict[int, QuantPlan] = {}

    def collect(i, layer, ranking, scores, plan):
        plans[i] = plan

    quantized = quantize_model(model, batch, ratios, bits, args.group_size, args.alpha, args.variant,
                               threads=args.threads, on_layer=collect, show_progress=show_progress(args))
    save_model(quantized, args.out, meta={"bits": bits, "ratios": ratios, "group_size": args.group_size,
                                          "variant": args.variant})
    layer_reports = [quant_layer_report(i, model.layers[i], plans[i], quantized.layers[i], args.variant)
                     for i in range(model.config.n_layers)]
    records = [qm for layer in quantized.layers for qm in layer.quant_records]
    summary = {
        "variant": args.variant,
        "average_bits": layer_reports[0]["average_bits"],
        "measured_bits": measured_bitwidth(records),
        "layers": layer_reports,
    }
    if args.report:
        exporter.export_to_json(summary, args.report)
    write_manifest(args, args.out, [args.model, args.calib], [args.out, args.report], exporter)
    print(f"Quantized at {summary['average_bits']:.4f} average bits "
          f"({summary['measured_bits']:.4f} measured); wrote {args.out}")
    return EXIT_OK


def cmd_oracle(args, exporter: ReportExporter) -> int:
    if args.oracle == "plossless":
        if args.table:
            rows = lossless_table_rows(args.prune)
            for row in rows:
                print(f"{row['model']:<18} {row['experts']:>7} {row['activated']:>8} {row['p_lossless']:.4f}")
            result: Any = rows
        else:
            probability, feasible = p_lossless(args.experts, args.activated, args.prune)
            print(f"{probability:.4f}")
            result = {"experts": args.experts, "activated": args.activated, "prune": args.prune,
                      "p_lossless": probability, "feasible": feasible}
    elif args.oracle == "cssp":
        rng = np.random.default_rng(args.seed)
        phi, W = sized_instance(rng, args.n, args.micro, args.d)
        keep = args.keep if args.keep is not None else max(1, args.micro // 2)
        subset, best = cssp_bruteforce(phi, W, keep, threads=args.threads)
        Y = phi @ W
        svd_error, _ = svd_rank_k_error(Y, min(keep, min(Y.shape)))
        result = {"n_micro": args.micro, "keep": keep, "best_subset": list(subset), "best_error": best,
                  "greedy_error": greedy_error(phi, W, keep), "svd_error": svd_error}
        print(f"best {best:.6g}  greedy {result['greedy_error']:.6g}  svd {svd_error:.6g}  subset {list(subset)}")
    else:
        result = run_bound_sweeps(args.trials, args.seed, threads=args.threads, show_progress=show_progress(args))
        for name in ("lemma", "theorem", "sandwich"):
            part = result[name]
            print(f"{name:<9} {part['trials']:>5} trials  {part['violations']} violations")
        if not result["passed"]:
            if args.out:
                exporter.export_to_json(result, args.out)
                write_manifest(args, args.out, [], [args.out], exporter)
            return EXIT_VERIFICATION
    if args.out:
        exporter.export_to_json(result, args.out)
        write_manifest(args, args.out, [], [args.out], exporter)
    return EXIT_OK


def cmd_report(args, exporter: ReportExporter) -> int:
    model = load_model(args.model)
    batch = load_batch(args, model.config.d_model)
    calculator = LayerReportCalculator()
    layers = (parse_int_list(args.layers) if args.layers else list(range(model.config.n_layers)))
    for i in layers:
        if not 0 <= i < model.config.n_layers:
            raise CliUsageError(f"--layers entry {i} out of range for {model.config.n_layers} layers")
    if args.calib_sizes and max(parse_int_list(args.calib_sizes)) > batch.n:
        raise CliUsageError(f"--calib-sizes entries must not exceed the {batch.n} calibration tokens")
    os.makedirs(args.out_dir, exist_ok=True)
    meta = {"model": args.model, "alpha": args.alpha, "seed": args.seed}
    outputs = []

    def emit_csv(name: str, rows: List[Dict[str, Any]], description: str) -> None:
        path = os.path.join(args.out_dir, name)
        if exporter.export_to_csv(rows, path, dict(meta, table=name, description=description)):
            outputs.append(path)

    rankings = rank_model(model, batch, args.alpha, args.threads)
    energy, rank_rows = [], []
    for i in layers:
        ranking, scores = rankings[i]
        distribution = calculator.energy_distribution(scores, args.drop_top)
        energy.append(dict(distribution, layer=i))
        rank_rows += [dict(row, layer=i) for row in calculator.rank_distribution_per_expert(ranking, model.layers[i])]
    emit_csv("energy_distribution.csv",
             [dict(row, layer=e["layer"]) for e in energy for row in calculator.energy_rows(e)],
             "micro-expert energies in descending order")
    emit_csv("rank_distribution.csv", rank_rows, "quartiles of global ranks per expert, raw and normalized")
    summary: Dict[str, Any] = {"energy_distribution": [{k: v for k, v in e.items() if k != "energies"}
                                                       for e in energy]}

    if args.alpha_grid or args.calib_sizes:
        samples = capture_all_layers(model, batch)
    if args.alpha_grid:
        alphas = parse_float_list(args.alpha_grid)
        sweep = [row for i in layers for row in alpha_sweep(model.layers[i], samples[i], alphas, args.lam)]
        emit_csv("alpha_sweep.csv", sweep, f"layer error and retain-set overlap over alpha at lambda={args.lam}")
        summary["alpha_sweep"] = sweep
    if args.calib_sizes:
        sizes = parse_int_list(args.calib_sizes)
        sweep = [row for i in layers
                 for row in calibration_size_sweep(model.layers[i], samples[i], sizes, args.lam, args.alpha)]
        emit_csv("calib_size_sweep.csv", sweep, "retain-set overlap with the largest calibration prefix")
        summary["calib_size_sweep"] = sweep

    if args.compare:
        other = load_model(args.compare)
        meta["compare"] = args.compare
        records = calculator.approx_error(model, other, batch, layers, threads=args.threads)
        emit_csv("approx_error.csv", calculator.approx_error_rows(records),
                 "layer output error against the reference on its own upstream states")
        ratio_rows = [dict(row, layer=i) for i in layers
                      for row in calculator.width_prune_ratio(model.layers[i], other.layers[i])]
        emit_csv("prune_ratio.csv", ratio_rows, "1 - kept / width per expert")
        lossless = [row for row in calculator.lossless_token_fraction(model, other, batch) if row["layer"] in layers]
        emit_csv("lossless_tokens.csv", lossless, "tokens whose routed experts survive compression")
        summary["approx_error"] = calculator.approx_error_rows(records)
        summary["lossless_tokens"] = lossless

    summary_path = os.path.join(args.out_dir, "report.json")
    exporter.export_to_json(summary, summary_path)
    outputs.append(summary_path)
    write_manifest(args, summary_path, [args.model, args.compare, args.calib], outputs, exporter)
    print(f"Wrote {len(outputs)} report files to {args.out_dir}")
    return EXIT_OK


def cmd_verify(args, exporter: ReportExporter) -> int:
    result = run_verification(args.seed, args.trials, threads=args.threads, show_progress=show_progress(args))
    for check in result["checks"]:
        print(f"{check['name']:<22} {'ok' if check['passed'] else 'FAILED'}")
    if args.report:
        exporter.export_to_json(result, args.report)
        write_manifest(args, args.report, [], [args.report], exporter)
    return EXIT_OK if result["passed"] else EXIT_VERIFICATION


COMMANDS = {
    "gen-model": cmd_gen_model,
    "gen-calib": cmd_gen_calib,
    "rank": cmd_rank,
    "prune": cmd_prune,
    "quantize": cmd_quantize,
    "oracle": cmd_oracle,
    "report": cmd_report,
    "verify": cmd_verify,
}


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv, execute the subcommand and return its exit status."""
    load_dotenv()  # Load environment variables from .env file
    try:
        args = build_parser().parse_args(argv)
        args = resolve_params(args, ConfigManager())
    except CliUsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except ValueError as e:
        print(f"Error: invalid configuration: {e}", file=sys.stderr)
        return EXIT_VALIDATION

    configure_logging(args.log_level, args.quiet)
    is_valid, message, _ = validate_run_params(args)
    if not is_valid:
        print(f"Error: {message}", file=sys.stderr)
        return EXIT_VALIDATION

    try:
        return COMMANDS[args.command](args, ReportExporter())
    except CliUsageError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as e:
        logger.debug("Command failed", exc_info=True)
        print(f"Error: {args.command} failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

"""Command-line entry point: gen, calibrate, quantize, eval, compare-metrics.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 runtime
invariant violation. Every written artifact embeds a run manifest (command,
config, seeds, input hashes, tool version); paths and wall-clock times are
left out so identical runs give identical bytes.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, formats, study, vit
from .calibration import open_cache, run_calibration
from .errors import FormatError, InvariantViolation, TwinQuantError
from .metrics import MetricKind
from .search import QuantReport, SearchConfig, SearchMode, quantize_model

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INVARIANT = 0, 1, 2, 3

# arguments that name files; kept out of the config snapshot, inputs are hashed instead
PATH_ARGS = {"config", "out", "model", "samples", "cache", "params", "data", "report", "timings"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def read_config(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment; keys use flag names with ``-`` or ``_``."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def run_manifest(command: str, args: argparse.Namespace, inputs: dict[str, str] | None = None,
                 seeds: dict | None = None) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k not in PATH_ARGS and k != "func"}
    return {
        "command": command,
        "config": config,
        "seeds": seeds or {},
        "inputs": {role: formats.sha256_file(p) for role, p in sorted((inputs or {}).items())},
        "tool_version": __version__,
    }


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        cfg = vit.ModelConfig(
            num_patches=args.num_patches, patch_dim=args.patch_dim, hidden=args.hidden, heads=args.heads,
            blocks=args.blocks, mlp_ratio=args.mlp_ratio, classes=args.classes, seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(f"invalid model config: {exc}") from None
    for name in ("train_epochs", "train_size", "calib_size", "eval_size"):
        if getattr(args, name) < (0 if name == "train_epochs" else 1):
            raise UsageError(f"--{name.replace('_', '-')} out of range")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seeds = {"model": args.seed, "data": args.data_seed}
    manifest = run_manifest("gen", args, seeds=seeds)
    model = vit.fit(vit.build_model(cfg), args.train_epochs, args.data_seed, args.train_size, args.lr, args.noise)
    formats.save_checkpoint(out / "model.tvit", model, manifest)
    splits = {"train": (args.train_size, vit.TRAIN_SPLIT), "calib": (args.calib_size, vit.CALIB_SPLIT),
              "eval": (args.eval_size, vit.EVAL_SPLIT)}
    data = {}
    for name, (n, split) in splits.items():
        data[name] = vit.make_dataset(cfg, n, args.data_seed, split, noise=args.noise)
        formats.save_dataset(out / f"{name}.tdat", *data[name], run_manifest={**manifest, "split": name})
    acc = vit.accuracy(model, *data["eval"])
    print(f"model hash   {formats.model_hash(model)}")
    print(f"FP accuracy  {acc:.4f} on {args.eval_size} eval samples")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    model = formats.load_checkpoint(args.model)
    x, _ = formats.load_dataset(args.samples)
    if args.num_samples is not None:
        if not 1 <= args.num_samples <= len(x):
            raise UsageError(f"--num-samples must be in [1, {len(x)}]")
        x = x[: args.num_samples]
    manifest = run_manifest("calibrate", args, {"model": args.model, "samples": args.samples})
    cache = run_calibration(model, x, args.out, manifest)
    print(f"cached {len(cache.layer_ids)} layers over {cache.num_samples} samples")
    return EXIT_OK


def cmd_quantize(args) -> int:
    model = formats.load_checkpoint(args.model)
    cache = open_cache(args.cache, model)
    overrides = {k: getattr(args, k) for k in ("alpha", "beta", "n", "rounds", "batch_size")
                 if getattr(args, k) is not None}
    if args.metric is not None:
        overrides["metric"] = MetricKind(args.metric)
    try:
        cfg = SearchConfig.for_mode(SearchMode(args.mode), args.k, **overrides)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    manifest = run_manifest("quantize", args, {"model": args.model, "cache": args.cache})
    manifest["model_hash"] = formats.model_hash(model)
    timings: dict = {}
    report, params = quantize_model(model, cache, cfg, run_manifest=manifest, timings=timings)
    Path(args.out).write_text(report.to_json())
    formats.save_params(args.params, params, manifest)
    if args.timings:
        Path(args.timings).write_text(json.dumps(timings, indent=2) + "\n")
    total = sum(timings.values())
    print(f"searched {len(model.layers)} layers, {len(params)} sites in {total:.1f}s "
          f"(mode={cfg.mode.value}, k={cfg.k}, metric={cfg.metric.value})")
    return EXIT_OK


def _score_summary(report: QuantReport) -> dict:
    by_class: dict[str, list[float]] = {}
    for s in report.sites.values():
        by_class.setdefault(s["act_class"], []).append(s["best_score"])
    return {
        c: {"sites": len(v), "min": min(v), "median": float(np.median(v)), "max": max(v)}
        for c, v in sorted(by_class.items())
    }


def cmd_eval(args) -> int:
    model = formats.load_checkpoint(args.model)
    x, y = formats.load_dataset(args.data)
    if y is None:
        raise FormatError(f"{args.data} has no labels")
    params: dict = {}
    if args.params:
        params, pman = formats.load_params(args.params)
        expected = pman.get("run", {}).get("model_hash")
        if expected is not None and expected != formats.model_hash(model):
            raise FormatError(f"{args.params} was searched for a different model")
        vit.check_params_map(model, params)
    fp = vit.accuracy(model, x, y)
    q = vit.accuracy(model, x, y, params)
    result = {"fp_accuracy": fp, "quant_accuracy": q, "accuracy_drop": fp - q,
              "samples": int(len(y)), "quantized_sites": len(params)}
    if args.report:
        result["score_summary"] = _score_summary(QuantReport.from_json(Path(args.report).read_text()))
    if not 0.0 <= q <= 1.0:
        raise InvariantViolation(f"accuracy {q} outside [0, 1]")
    print(f"FP accuracy     {fp:.4f}")
    print(f"quant accuracy  {q:.4f}  ({len(params)} sites quantized)")
    print(f"accuracy drop   {fp - q:+.4f}")
    for c, s in result.get("score_summary", {}).items():
        print(f"  {c:<13} {s['sites']:>3} sites  best score min {s['min']:.3e}  "
              f"median {s['median']:.3e}  max {s['max']:.3e}")
    if args.out:
        inputs = {"model": args.model, "data": args.data}
        if args.params:
            inputs["params"] = args.params
        result["manifest"] = run_manifest("eval", args, inputs)
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_compare_metrics(args) -> int:
    model = formats.load_checkpoint(args.model)
    cache = open_cache(args.cache, model)
    sites = None
    if args.layers:
        wanted = [s.strip() for s in args.layers.split(",") if s.strip()]
        sites = []
        for w in wanted:
            # a layer id selects both of its sites
            match = [s.id for s in model.sites if s.layer == w] or [model.site(w).id]
            sites.extend(m for m in match if m not in sites)
    if args.candidates < 1:
        raise UsageError("--candidates must be >= 1")
    result = study.compare_metrics(model, cache, sites, k=args.k, candidates=args.candidates)
    if args.format == "json":
        print(json.dumps(result["aggregate_spearman"], sort_keys=True))
    else:
        print(study.format_table(result))
    if args.out:
        result["manifest"] = run_manifest("compare-metrics", args, {"model": args.model, "cache": args.cache})
        Path(args.out).write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> Parser:
    p = Parser(prog="twinquant", description="Post-training quantization of a toy vision transformer.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=Parser, required=True)

    def command(name, func, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", help="key=value file overriding this command's defaults")
        sp.set_defaults(func=func)
        return sp

    d = vit.ModelConfig()
    g = command("gen", cmd_gen, "build and train the toy model, write checkpoint and datasets")
    g.add_argument("--num-patches", type=int, default=d.num_patches)
    g.add_argument("--patch-dim", type=int, default=d.patch_dim)
    g.add_argument("--hidden", type=int, default=d.hidden)
    g.add_argument("--heads", type=int, default=d.heads)
    g.add_argument("--blocks", type=int, default=d.blocks)
    g.add_argument("--mlp-ratio", type=int, default=d.mlp_ratio)
    g.add_argument("--classes", type=int, default=d.classes)
    g.add_argument("--seed", type=int, default=0, help="weight initialization seed")
    g.add_argument("--data-seed", type=int, default=0, help="synthetic data seed")
    g.add_argument("--train-epochs", type=int, default=30)
    g.add_argument("--train-size", type=int, default=4000, help="fresh samples drawn per epoch")
    g.add_argument("--lr", type=float, default=0.05)
    g.add_argument("--noise", type=float, default=1.5)
    g.add_argument("--calib-size", type=int, default=32)
    g.add_argument("--eval-size", type=int, default=10000)
    g.add_argument("--out", required=True, help="output directory")

    c = command("calibrate", cmd_calibrate, "cache FP layer outputs and gradient curvature")
    c.add_argument("--model", required=True)
    c.add_argument("--samples", required=True)
    c.add_argument("--num-samples", type=int, default=None, help="use only the first N samples")
    c.add_argument("--out", required=True)

    q = command("quantize", cmd_quantize, "search scaling factors for every site")
    q.add_argument("--model", required=True)
    q.add_argument("--cache", required=True)
    q.add_argument("--mode", choices=[m.value for m in SearchMode], default="ptq4vit")
    q.add_argument("--k", type=int, default=8)
    q.add_argument("--metric", choices=[m.value for m in MetricKind], default=None,
                   help="default: cosine for base, hessian for ptq4vit")
    q.add_argument("--alpha", type=float, default=None)
    q.add_argument("--beta", type=float, default=None)
    q.add_argument("--n", type=int, default=None)
    q.add_argument("--rounds", type=int, default=None)
    q.add_argument("--batch-size", type=int, default=None)
    q.add_argument("--out", required=True, help="report (JSON)")
    q.add_argument("--params", required=True, help="parameter map (binary)")
    q.add_argument("--timings", default=None, help="optional per-layer wall times (JSON)")

    e = command("eval", cmd_eval, "accuracy of the FP and quantized model")
    e.add_argument("--model", required=True)
    e.add_argument("--params", default=None, help="parameter map; omitted means nothing quantized")
    e.add_argument("--data", required=True)
    e.add_argument("--report", default=None, help="quantize report for a score summary")
    e.add_argument("--out", default=None)

    m = command("compare-metrics", cmd_compare_metrics, "rank-correlate distance metrics with true loss change")
    m.add_argument("--model", required=True)
    m.add_argument("--cache", required=True)
    m.add_argument("--layers", default=None, help="comma-separated site or layer ids (default: all sites)")
    m.add_argument("--candidates", type=int, default=20)
    m.add_argument("--k", type=int, default=8)
    m.add_argument("--format", choices=["table", "json"], default="table")
    m.add_argument("--out", default=None)
    return p


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    subs = parser._subparsers._group_actions[0].choices
    required = {name: [a for a in sp._actions if a.required] for name, sp in subs.items()}
    # first pass only locates the command and --config; required flags may come from the file
    for acts in required.values():
        for a in acts:
            a.required = False
    args = parser.parse_args(argv)
    sp = subs[args.command]
    typed = {}
    if args.config:
        values = read_config(args.config)
        known = {a.dest: a for a in sp._actions}
        unknown = sorted(set(values) - set(known) - {"help"})
        if unknown or "config" in values:
            raise UsageError(f"unknown config keys: {', '.join(unknown or ['config'])}")
        for key, raw in values.items():
            act = known[key]
            try:
                typed[key] = act.type(raw) if act.type else raw
            except ValueError:
                raise UsageError(f"config {key}: bad value {raw!r}") from None
            if act.choices is not None and typed[key] not in act.choices:
                raise UsageError(f"config {key}: {raw!r} not in {list(act.choices)}")
        sp.set_defaults(**typed)
    for a in required[args.command]:
        a.required = a.dest not in typed
    # command-line flags still win over the file
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        msg = str(exc)
        print(msg if "error:" in msg else f"error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except (TwinQuantError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

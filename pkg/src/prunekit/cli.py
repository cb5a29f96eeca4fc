"""Batch command line: gen, prune, eval, compare, report.

Exit codes: 0 ok, 1 usage or malformed input, 2 infeasible budget or shape
problem, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from prunekit import schemas
from prunekit.baselines import (
    STRATEGIES,
    compare_strategies,
    keep_count,
    rows_to_csv,
    synthetic_layer,
)
from prunekit.core import count_flops, forward, infer_shapes, load_model, load_tensor, save_model, save_tensor
from prunekit.errors import (
    CombinatorialGuardError,
    FormatError,
    InfeasibleBudgetError,
    NumericError,
    ShapeError,
    UnsupportedStructureError,
)
from prunekit.presets import PRESETS, build_model, make_inputs, preset_spec
from prunekit.pruner import PruneConfig, prune_model
from prunekit.reconstruction import relative_error
from prunekit.sampler import SAME_LAYER, SamplePlan, sample_layer

DEFAULT_SEED = 42
EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 1, 2, 3
log = logging.getLogger("prunekit")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"no such file: {path}")
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise FormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from None


def _dump(doc) -> str:
    return json.dumps(doc, indent=1, sort_keys=True) + "\n"


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _inputs(path, model) -> np.ndarray:
    if not Path(path).is_file():
        raise UsageError(f"no such file: {path}")
    x = load_tensor(path)
    if x.ndim != 4 or tuple(x.shape[1:]) != tuple(model.input_shape):
        raise ShapeError(f"data {tuple(x.shape)} does not match model input (N,) + {tuple(model.input_shape)}")
    return x


def _model(path):
    if not Path(path).exists():
        raise UsageError(f"no such model: {path}")
    return load_model(path)


def report_path(out) -> Path:
    """Reports sit next to the model directory so the directory holds only model files."""
    out = Path(out)
    return out.with_name(out.name + ".report.json")


def cmd_gen(args) -> int:
    if (args.preset is None) == (args.spec is None):
        raise UsageError("gen needs exactly one of --preset / --spec")
    spec = preset_spec(args.preset) if args.preset else read_json(args.spec)
    if not isinstance(spec, dict):
        raise FormatError("model spec must be a JSON object")
    seed = args.seed if args.seed is not None else int(spec.get("seed", DEFAULT_SEED))
    model = build_model(spec, seed=seed)
    save_model(model, args.out)
    summary = {"model": str(args.out), "input_shape": list(model.input_shape),
               "convs": model.conv_names(), "flops": count_flops(model).total}
    if args.data_out:
        save_tensor(args.data_out, make_inputs(model.input_shape, args.images, seed=seed + 1))
        summary["data"] = str(args.data_out)
    schemas.validate(summary, schemas.GEN_SUMMARY, "gen summary")
    sys.stdout.write(_dump(summary))
    return EXIT_OK


def load_config(path, seed) -> PruneConfig:
    d = read_json(path) if path else {}
    if not isinstance(d, dict):
        raise FormatError("config must be a JSON object")
    d.setdefault("seed", seed)
    return PruneConfig.from_dict(d)


def cmd_prune(args) -> int:
    model = _model(args.model)
    cfg = load_config(args.config, args.seed if args.seed is not None else DEFAULT_SEED)
    inputs = _inputs(args.data, model)
    t0 = time.perf_counter()
    pruned, report = prune_model(model, cfg, inputs)
    elapsed = time.perf_counter() - t0
    save_model(pruned, args.out)
    doc = report.to_dict()
    doc["config"] = cfg.to_dict()
    schemas.validate(doc, schemas.PRUNE_REPORT, "prune report")
    rpath = Path(args.report) if args.report else report_path(args.out)
    rpath.write_text(_dump(doc))
    print(f"speedup {report.speedup:.4f}x ({report.flops_before} -> {report.flops_after} MACs), "
          f"output relative MSE {report.output_rel_mse:.6g}, {elapsed:.2f}s; report: {rpath}")
    return EXIT_OK


def eval_metrics(model, inputs, reference=None, holdout: int = 0) -> dict:
    if holdout:
        inputs = inputs[-holdout:]
    flops = count_flops(model)
    shapes = infer_shapes(model)
    doc = {
        "images": int(inputs.shape[0]),
        "flops": flops.total,
        "per_node_flops": dict(flops.per_node),
        "shapes": {k: {"input": list(a), "output": list(b)} for k, (a, b) in shapes.items()},
    }
    if reference is not None:
        if tuple(reference.input_shape) != tuple(model.input_shape):
            raise ShapeError("reference and model input shapes differ")
        ref = forward(reference, inputs).astype(np.float64)
        out = forward(model, inputs).astype(np.float64)
        if ref.shape != out.shape:
            raise ShapeError(f"output shapes differ: {out.shape} vs reference {ref.shape}")
        doc["output_rel_mse"] = relative_error(ref, out)
        doc["reference_flops"] = count_flops(reference).total
        doc["speedup"] = doc["reference_flops"] / flops.total
    schemas.validate(doc, schemas.EVAL_METRICS, "eval metrics")
    return doc


def cmd_eval(args) -> int:
    model = _model(args.model)
    inputs = _inputs(args.data, model)
    reference = _model(args.reference) if args.reference else None
    doc = eval_metrics(model, inputs, reference, args.holdout)
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["node", "macs"])
        w.writerows(doc["per_node_flops"].items())
        _emit(buf.getvalue(), args.out)
    else:
        _emit(_dump(doc), args.out)
    return EXIT_OK


def parse_ratios(text) -> list:
    try:
        ratios = [float(r) for r in text.split(",") if r.strip()]
    except ValueError:
        raise UsageError(f"--ratios must be comma-separated numbers, got {text!r}") from None
    if not ratios or any(not 0 < r <= 1 for r in ratios):
        raise UsageError("--ratios entries must lie in (0, 1]")
    return ratios


def aggregate_rows(per_seed) -> list:
    """Mean relative MSE and wall time per (strategy, c') across seeds, in first-seen order."""
    acc = {}
    for rows in per_seed:
        for r in rows:
            key = (r.strategy, r.c, r.c_prime)
            acc.setdefault(key, []).append((r.relative_mse, r.wall_ms))
    return [{"strategy": s, "c": c, "c_prime": cp,
             "relative_mse": float(np.mean([v[0] for v in vals])),
             "wall_ms": float(np.mean([v[1] for v in vals]))}
            for (s, c, cp), vals in acc.items()]


def compare_table(ratios, seeds: int, seed: int, model=None, layer=None, inputs=None,
                  images: int = 64, samples_per_image: int = 10) -> list:
    per_seed = []
    for k in range(seeds):
        if model is None:
            syn = synthetic_layer(seed + k)
            samples, W = syn.samples, syn.weight
        else:
            plan = SamplePlan(images, samples_per_image, seed + k)
            samples = sample_layer(model, model, layer, inputs, plan, SAME_LAYER)
            W = model.conv(layer).weight
        c_primes = sorted({keep_count(samples.c, r) for r in ratios})
        per_seed.append(compare_strategies(samples, W, c_primes, STRATEGIES))
    rows = aggregate_rows(per_seed)
    schemas.validate(rows, schemas.COMPARE_ROWS, "compare table")
    return rows


def cmd_compare(args) -> int:
    ratios = parse_ratios(args.ratios)
    if args.seeds < 1:
        raise UsageError("--seeds must be at least 1")
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    if args.model:
        if not args.layer or not args.data:
            raise UsageError("compare on a model needs --layer and --data")
        model = _model(args.model)
        model.conv(args.layer)
        rows = compare_table(ratios, args.seeds, seed, model, args.layer, _inputs(args.data, model),
                             args.images, args.samples_per_image)
    else:
        rows = compare_table(ratios, args.seeds, seed)
    _emit(rows_to_csv(rows) if args.format == "csv" else _dump(rows), args.out)
    return EXIT_OK


REPORT_COLUMNS = ("name", "c", "c_prime", "lam", "mse_unpruned", "mse_masked", "mse_reconstructed",
                  "wall_time", "upstream")


def cmd_report(args) -> int:
    doc = read_json(args.report)
    schemas.validate(doc, schemas.PRUNE_REPORT, "prune report")
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(doc["layers"])
        _emit(buf.getvalue(), args.out)
    else:
        summary = {k: doc[k] for k in ("flops_before", "flops_after", "speedup", "output_rel_mse",
                                        "holdout_images")}
        summary["layers"] = [{k: layer[k] for k in REPORT_COLUMNS} for layer in doc["layers"]]
        _emit(_dump(summary), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prunekit", description="Channel pruning for small convolutional networks.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-layer progress to stderr")
    p.add_argument("--threads", type=int, default=None,
                   help="BLAS/worker cap (default: $PRUNEKIT_THREADS or 1)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    g = sub.add_parser("gen", help="write a toy model (and optionally a calibration batch)")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--spec", help="JSON architecture spec")
    g.add_argument("--out", required=True, help="model directory to write")
    g.add_argument("--seed", type=int, default=None, help=f"init seed (default: spec seed or {DEFAULT_SEED})")
    g.add_argument("--data-out", help="also write a random calibration batch (PKT1) here")
    g.add_argument("--images", type=int, default=256, help="images in the calibration batch")

    r = sub.add_parser("prune", help="prune a model to a speed-up budget")
    r.add_argument("--model", required=True)
    r.add_argument("--config", help="JSON file mapping onto PruneConfig")
    r.add_argument("--data", required=True, help="PKT1 calibration batch N x C x H x W")
    r.add_argument("--out", required=True, help="pruned model directory")
    r.add_argument("--report", help="report path (default: <out>.report.json)")
    r.add_argument("--seed", type=int, default=None, help=f"used when the config has none (default {DEFAULT_SEED})")

    e = sub.add_parser("eval", help="FLOPs, shapes and output error against a reference")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--reference", help="reference model directory")
    e.add_argument("--holdout", type=int, default=0, help="evaluate on the last K images only")
    e.add_argument("--format", choices=("json", "csv"), default="json")
    e.add_argument("--out", help="write here instead of stdout")

    c = sub.add_parser("compare", help="channel-selection strategies on one layer")
    c.add_argument("--model", help="model directory (omit for synthetic correlated-channel layers)")
    c.add_argument("--layer")
    c.add_argument("--data")
    c.add_argument("--ratios", default="0.25,0.5,0.75")
    c.add_argument("--seeds", type=int, default=50, help="instances (or sampling seeds) to average")
    c.add_argument("--seed", type=int, default=None, help=f"first seed (default {DEFAULT_SEED})")
    c.add_argument("--images", type=int, default=64)
    c.add_argument("--samples-per-image", type=int, default=10)
    c.add_argument("--format", choices=("json", "csv"), default="csv")
    c.add_argument("--out")

    t = sub.add_parser("report", help="summarise a prune report")
    t.add_argument("--report", required=True)
    t.add_argument("--format", choices=("json", "csv"), default="json")
    t.add_argument("--out")
    return p


COMMANDS = {"gen": cmd_gen, "prune": cmd_prune, "eval": cmd_eval, "compare": cmd_compare,
            "report": cmd_report}


def _threads(value) -> int:
    if value is None:
        env = os.environ.get("PRUNEKIT_THREADS")
        try:
            value = int(env) if env else 1
        except ValueError:
            raise UsageError(f"PRUNEKIT_THREADS must be an integer, got {env!r}") from None
    if value < 1:
        raise UsageError("--threads must be at least 1")
    return value


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with threadpool_limits(limits=_threads(args.threads)):
            return COMMANDS[args.command](args)
    except (UsageError, FormatError, KeyError, FileNotFoundError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"prunekit: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (InfeasibleBudgetError, ShapeError, UnsupportedStructureError, CombinatorialGuardError) as exc:
        print(f"prunekit: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"prunekit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

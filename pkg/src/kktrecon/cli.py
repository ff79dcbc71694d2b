"""Command line entry point: ``kktrecon {train,reconstruct,evaluate,experiment,grid,plot}``.

Every experiment field has a flag named ``--<section>-<field>`` (for example
``--data-per-class 10`` or ``--recon-lambda-min 0,0.01``).  Flags set the
starting spec and a ``--config`` file, when given, overrides them.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import io as kio
from .evaluator import match, ranked_pairs, render_pairs, scatter_csv
from .experiments import (DataSpec, EvalSpec, ExperimentSpec, ReconSpec, WORKERS_ENV, _search_csv,
                          default_workers, load_data, override, read_spec, recon_grid, run_experiment,
                          run_grid, spec_from_manifest)
from .mlp import init_params
from .plotting import emit_plot
from .reconstructor import ReconState, hyperparam_search
from .trainer import train

logger = logging.getLogger("kktrecon")

_TRAIN_FLAGS = ("learning_rate", "epochs", "weight_decay", "checkpoint_every", "seed", "margin_eps",
                "init_kind")


def _flag(section: str, name: str) -> str:
    return f"--{section}-{name.replace('_', '-')}"


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("experiment fields (a --config file overrides these)")
    for section, cls in (("data", DataSpec), ("recon", ReconSpec), ("eval", EvalSpec)):
        for f in fields(cls):
            g.add_argument(_flag(section, f.name), dest=f"{section}.{f.name}", default=None, metavar="V")
    for name in _TRAIN_FLAGS:
        g.add_argument(_flag("train", name), dest=f"train.{name}", default=None, metavar="V")
    g.add_argument("--model-hidden", dest="model.hidden", default=None, metavar="W1,W2")
    g.add_argument("--out-dir", default=None)
    g.add_argument("--run-id", default=None)
    p.add_argument("--config", type=Path, help="INI experiment file; its values win over flags")


def _spec_from_args(args) -> ExperimentSpec:
    spec = ExperimentSpec()
    for key, value in vars(args).items():
        if value is None or "." not in key:
            continue
        spec = override(spec, key, value)
    if args.out_dir is not None:
        spec.out_dir = args.out_dir
    if args.run_id is not None:
        spec.run_id = args.run_id
    if args.config is not None:
        if not args.config.exists():
            raise FileNotFoundError(f"config file {args.config} does not exist")
        spec = read_spec(args.config, spec)
    return spec


def _check_inputs(spec: ExperimentSpec) -> None:
    for path in (spec.data.path, spec.data.test_path):
        if spec.data.source != "synthetic" and path and not Path(path).exists():
            raise FileNotFoundError(f"data file {path} does not exist")
    if spec.data.source != "synthetic" and not spec.data.path:
        raise ValueError(f"data source {spec.data.source!r} needs --data-path")


def cmd_train(args) -> int:
    spec = _spec_from_args(args)
    _check_inputs(spec)
    train_set, test_set = load_data(spec.data)
    params = init_params(spec.train[0].init, [train_set.dims, *spec.hidden, train_set.class_count], spec.precision)
    out = spec.run_dir
    out.mkdir(parents=True, exist_ok=True)
    for k, stage in enumerate(spec.train):
        params, report = train(params, train_set, stage, test_set)
        report.write_csv(out / (f"train_report_{k + 1}.csv" if len(spec.train) > 1 else "train_report.csv"))
    kio.save_params(params, out / "checkpoint.bin")
    final = report.final
    print(json.dumps({"train_error": final.train_error, "test_error": final.test_error,
                      "kkt_residual": final.kkt_residual, "checkpoint": str(out / "checkpoint.bin")}))
    return 0


def cmd_reconstruct(args) -> int:
    spec = _spec_from_args(args)
    params = kio.load_params(args.checkpoint)
    n = args.n_train
    if n is None:
        n = spec.data.per_class * spec.data.class_count
    grid = recon_grid(spec.recon, n, params)
    results = hyperparam_search(params, grid, workers=args.workers or default_workers())
    out = spec.run_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "search.csv").write_text(_search_csv(results))
    best = next((r for r in results if not r.failed), None)
    if best is None:
        logger.error("every reconstruction run failed")
        return 1
    best.state.save(out / "recon_state.bin")
    print(json.dumps({"final_loss": best.state.final_loss, "state": str(out / "recon_state.bin")}))
    return 0


def cmd_evaluate(args) -> int:
    spec = _spec_from_args(args)
    _check_inputs(spec)
    train_set, _ = load_data(spec.data)
    params = kio.load_params(args.checkpoint) if args.checkpoint else None
    state = ReconState.load(args.state)
    report = match(train_set, state, params, spec.eval.metric or None, spec.eval.threshold)
    out = spec.run_dir
    out.mkdir(parents=True, exist_ok=True)
    report.write_csv(out / "match_report.csv")
    scatter = scatter_csv(report)
    (out / "scatter.csv").write_text(scatter)
    (out / "scatter.svg").write_text(emit_plot(scatter, report.threshold, spec.run_id,
                                               "SSIM" if report.metric == "ssim" else "-relative L2 error"))
    pairs = ranked_pairs(report, min(spec.eval.top_k, train_set.n), per_class=spec.eval.per_class)
    render_pairs(pairs, train_set, state.X, out / "ranked_pairs.png", threshold=report.threshold)
    print(json.dumps({"good_count": report.good_count, "metric": report.metric, "threshold": report.threshold}))
    return 0


def cmd_experiment(args) -> int:
    if args.manifest is not None:
        spec = spec_from_manifest(args.manifest)
        if args.out_dir is not None:
            spec.out_dir = args.out_dir
        if args.run_id is not None:
            spec.run_id = args.run_id
    else:
        spec = _spec_from_args(args)
    _check_inputs(spec)
    manifest = run_experiment(spec, workers=args.workers or default_workers())
    print(json.dumps({"run_dir": str(spec.run_dir), "status": manifest["status"], **manifest["summary"]}))
    return 0 if manifest["status"] == "ok" else 1


def _parse_assignment(text: str) -> tuple[str, list[str]]:
    key, sep, values = text.partition("=")
    if not sep or "." not in key:
        raise argparse.ArgumentTypeError(f"expected section.field=v1,v2 got {text!r}")
    return key.strip(), [v.strip() for v in values.split(",") if v.strip()]


def cmd_grid(args) -> int:
    spec = _spec_from_args(args)
    _check_inputs(spec)
    axes = dict(_parse_assignment(a) for a in args.axis or [])
    extra = []
    for cell in args.cell or []:
        assign = {}
        for part in cell.split(";"):
            key, vals = _parse_assignment(part)
            assign[key] = vals[0]
        extra.append(assign)
    rows = run_grid(spec, axes, extra, workers=args.workers)
    print(Path(spec.out_dir, spec.run_id, "summary.csv").read_text(), end="")
    return 0 if all(r["status"] == "ok" for r in rows) else 1


def cmd_plot(args) -> int:
    text = Path(args.scatter).read_text()
    svg = emit_plot(text, args.threshold, args.title, args.ylabel)
    if args.out is None:
        sys.stdout.write(svg)
    else:
        Path(args.out).write_text(svg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kktrecon", description="Train homogeneous classifiers and reconstruct their training data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write checkpoint.bin + train_report.csv")
    _add_spec_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="run the reconstruction grid on a checkpoint")
    _add_spec_flags(p)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--n-train", type=int, default=None, help="training-set size used to size m")
    p.add_argument("--workers", type=int, default=None, help=f"defaults to ${WORKERS_ENV} or 1")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="match a reconstruction against the training set")
    _add_spec_flags(p)
    p.add_argument("--state", required=True, type=Path)
    p.add_argument("--checkpoint", type=Path, default=None, help="needed for margins in the scatter")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="train, reconstruct, evaluate and write a manifest")
    _add_spec_flags(p)
    p.add_argument("--manifest", type=Path, default=None, help="rerun the spec recorded in a manifest")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("grid", help="run one experiment per grid cell")
    _add_spec_flags(p)
    p.add_argument("--axis", action="append", metavar="SECTION.FIELD=V1,V2",
                   help="grid axis, repeatable; e.g. data.class_count=2,3,4")
    p.add_argument("--cell", action="append", metavar="K=V;K=V",
                   help="extra cell outside the product, e.g. 'train.weight_decay=0;train.init_kind=small_first_layer'")
    p.add_argument("--workers", type=int, default=None, help=f"defaults to ${WORKERS_ENV} or 1")
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("plot", help="render a scatter CSV as SVG")
    p.add_argument("scatter", type=Path)
    p.add_argument("--out", type=Path, default=None)
    p.add_argument("--threshold", type=float, default=0.4)
    p.add_argument("--title", default="")
    p.add_argument("--ylabel", default="SSIM")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - surface as a non-zero exit
        logger.error("%s: %s", type(exc).__name__, exc)
        if args.verbose:
            raise
        return 1


if __name__ == "__main__":
    sys.exit(main())

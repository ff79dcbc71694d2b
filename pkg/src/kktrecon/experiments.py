"""End-to-end runs: train -> reconstruct -> evaluate -> persist.

An experiment is described by an INI file::

    [data]
    source = synthetic          # synthetic | cifar10 | cifar100
    class_count = 3
    per_class = 10
    dims = 200
    ...
    [model]
    hidden = 100                # comma-separated widths
    [train]
    learning_rate = 0.5
    epochs = 20000
    [train:2]                   # optional further stages, resumed from the previous one
    learning_rate = 2.0
    [recon]
    m_factor = 2
    lambda_min = 0, 0.01        # comma lists become a search grid
    [eval]
    threshold = 0.4
    [output]
    out_dir = runs
    run_id = demo

Every run directory gets a ``manifest.json`` echoing the spec, the seeds, the
stage outcomes and a SHA-256 of each artifact.
"""

from __future__ import annotations

import configparser
import copy
import csv
import hashlib
import io
import itertools
import json
import logging
import os
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io as kio
from .data import Dataset, SyntheticSpec, load_cifar10, load_cifar100, make_synthetic
from .evaluator import match, ranked_pairs, render_candidates, render_pairs, scatter_csv
from .mlp import InitScheme, init_params
from .plotting import emit_plot
from .reconstructor import ReconConfig, ReconState, hyperparam_search
from .trainer import TrainConfig, train

logger = logging.getLogger(__name__)

WORKERS_ENV = "KKTRECON_WORKERS"


@dataclass
class DataSpec:
    source: str = "synthetic"
    path: str = ""
    test_path: str = ""
    limit_per_class: int | None = None
    test_limit_per_class: int | None = None
    classes: list[int] | None = None
    class_count: int = 3
    per_class: int = 10
    test_per_class: int = 0
    dims: int = 20
    cluster_separation: float = 4.0
    noise_scale: float = 0.1
    seed: int = 0
    total: int | None = None


@dataclass
class ReconSpec:
    m: int | None = None
    m_factor: float = 2.0
    lambda_min: list[float] = field(default_factory=lambda: [0.0])
    init_scale: list[float] = field(default_factory=lambda: [0.1])
    lr_x: list[float] = field(default_factory=lambda: [0.01])
    lr_a: list[float] = field(default_factory=lambda: [0.01])
    momentum: list[float] = field(default_factory=lambda: [0.9])
    iterations: int = 1000
    seed: list[int] = field(default_factory=lambda: [0])
    relative_steps: bool = True
    scorer: str = "loss"


@dataclass
class EvalSpec:
    metric: str = ""
    threshold: float | None = None
    top_k: int = 10
    per_class: bool = True


@dataclass
class ExperimentSpec:
    data: DataSpec = field(default_factory=DataSpec)
    hidden: list[int] = field(default_factory=lambda: [100])
    precision: int = 64
    train: list[TrainConfig] = field(default_factory=lambda: [TrainConfig()])
    recon: ReconSpec = field(default_factory=ReconSpec)
    eval: EvalSpec = field(default_factory=EvalSpec)
    out_dir: str = "runs"
    run_id: str = "run"

    def to_dict(self) -> dict:
        return {
            "data": asdict(self.data),
            "hidden": list(self.hidden),
            "precision": self.precision,
            "train": [t.to_dict() for t in self.train],
            "recon": asdict(self.recon),
            "eval": asdict(self.eval),
            "out_dir": self.out_dir,
            "run_id": self.run_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(
            data=DataSpec(**d["data"]),
            hidden=list(d["hidden"]),
            precision=int(d.get("precision", 64)),
            train=[TrainConfig.from_dict(t) for t in d["train"]],
            recon=ReconSpec(**d["recon"]),
            eval=EvalSpec(**d["eval"]),
            out_dir=d.get("out_dir", "runs"),
            run_id=d.get("run_id", "run"),
        )

    def digest(self) -> str:
        body = self.to_dict()
        body.pop("out_dir")
        return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()

    @property
    def run_dir(self) -> Path:
        return Path(self.out_dir) / self.run_id


# -- spec files ---------------------------------------------------------------

def _parse_scalar(text: str, kind):
    text = text.strip()
    if kind is bool:
        return text.lower() in ("1", "true", "yes", "on")
    if text.lower() in ("none", ""):
        return None
    if kind is int:
        return int(float(text))
    if kind is float:
        return float(text)
    return text


def _field_kinds(cls) -> dict:
    kinds = {}
    for f in fields(cls):
        t = str(f.type)
        is_list = t.startswith("list")
        base = int if "int" in t else float if "float" in t else bool if "bool" in t else str
        kinds[f.name] = (base, is_list)
    return kinds


def _apply_section(obj, items: dict, section: str):
    kinds = _field_kinds(type(obj))
    for key, raw in items.items():
        if key not in kinds:
            raise ValueError(f"unknown key {key!r} in [{section}]")
        base, is_list = kinds[key]
        if is_list:
            value = [_parse_scalar(v, base) for v in raw.split(",") if v.strip()]
        else:
            value = _parse_scalar(raw, base)
        setattr(obj, key, value)


def _train_stage(items: dict, previous: TrainConfig | None) -> TrainConfig:
    items = dict(items)
    kind = items.pop("init_kind", None)
    init_seed = items.pop("init_seed", None)
    base = asdict(previous) if previous is not None else {}
    base.pop("init", None)
    for k, v in items.items():
        base[k] = v
    cfg = TrainConfig.from_dict(base)
    if previous is not None:
        cfg.init = previous.init
    if kind is not None or init_seed is not None:
        cfg.init = InitScheme(kind or cfg.init.kind, int(init_seed) if init_seed is not None else cfg.init.seed)
    return cfg


def spec_from_text(text: str, base: ExperimentSpec | None = None) -> ExperimentSpec:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(text)
    spec = copy.deepcopy(base) if base is not None else ExperimentSpec()
    for section in parser.sections():
        items = dict(parser[section])
        if section == "data":
            _apply_section(spec.data, items, section)
        elif section == "model":
            if "hidden" in items:
                spec.hidden = [int(v) for v in items.pop("hidden").split(",") if v.strip()]
            if "precision" in items:
                spec.precision = int(items.pop("precision"))
            if items:
                raise ValueError(f"unknown keys in [model]: {sorted(items)}")
        elif section == "train" or section.startswith("train:"):
            stage = 0 if section == "train" else int(section.split(":")[1]) - 1
            while len(spec.train) <= stage:
                spec.train.append(copy.deepcopy(spec.train[-1]))
            prev = spec.train[stage - 1] if stage else None
            own = spec.train[stage] if section == "train" else None
            spec.train[stage] = _train_stage(items, own if own is not None else prev)
        elif section == "recon":
            _apply_section(spec.recon, items, section)
        elif section == "eval":
            _apply_section(spec.eval, items, section)
        elif section == "output":
            for k, v in items.items():
                if k not in ("out_dir", "run_id"):
                    raise ValueError(f"unknown key {k!r} in [output]")
                setattr(spec, k, v)
        else:
            raise ValueError(f"unknown section [{section}]")
    return spec


def read_spec(path, base: ExperimentSpec | None = None) -> ExperimentSpec:
    return spec_from_text(Path(path).read_text(), base)


def spec_from_manifest(path) -> ExperimentSpec:
    return ExperimentSpec.from_dict(json.loads(Path(path).read_text())["spec"])


def override(spec: ExperimentSpec, key: str, value) -> ExperimentSpec:
    """Return a copy with a dotted key (``data.per_class``, ``train.weight_decay``) replaced.

    ``train.*`` keys apply to every training stage; ``train.init_kind`` swaps
    the initialization scheme.
    """
    spec = copy.deepcopy(spec)
    section, _, name = key.partition(".")
    if section == "data":
        _apply_section(spec.data, {name: str(value)}, "data")
    elif section == "train":
        for i, stage in enumerate(spec.train):
            if name == "init_kind":
                spec.train[i] = replace(stage, init=InitScheme(str(value), stage.init.seed))
            else:
                spec.train[i] = _train_stage({name: str(value)}, stage)
    elif section == "recon":
        _apply_section(spec.recon, {name: str(value)}, "recon")
    elif section == "eval":
        _apply_section(spec.eval, {name: str(value)}, "eval")
    elif section == "model" and name == "hidden":
        spec.hidden = [int(v) for v in str(value).replace(";", ",").split(",") if v.strip()]
    else:
        raise ValueError(f"cannot override {key!r}")
    return spec


# -- pipeline -----------------------------------------------------------------

def load_data(spec: DataSpec) -> tuple[Dataset, Dataset | None]:
    if spec.source == "synthetic":
        per_class = spec.per_class
        if spec.total is not None:
            per_class = spec.total // spec.class_count
        full = make_synthetic(SyntheticSpec(spec.class_count, per_class + spec.test_per_class, spec.dims,
                                            spec.cluster_separation, spec.noise_scale, spec.seed))
        pos = np.arange(full.n) % (per_class + spec.test_per_class)
        train_mask = pos < per_class
        train_set = Dataset(full.samples[train_mask], full.labels[train_mask], spec.class_count)
        test = None
        if spec.test_per_class:
            test = Dataset(full.samples[~train_mask], full.labels[~train_mask], spec.class_count)
        return train_set, test
    loaders = {"cifar10": load_cifar10, "cifar100": load_cifar100}
    if spec.source not in loaders:
        raise ValueError(f"unknown data source {spec.source!r}")
    limit = spec.limit_per_class
    if spec.total is not None and spec.classes:
        limit = spec.total // len(spec.classes)
    train_set = _select_classes(loaders[spec.source](spec.path, None if spec.classes else limit), spec.classes, limit)
    test = None
    if spec.test_path:
        test = _select_classes(loaders[spec.source](spec.test_path, None if spec.classes else spec.test_limit_per_class),
                               spec.classes, spec.test_limit_per_class)
    return train_set, test


def _select_classes(ds: Dataset, classes, limit) -> Dataset:
    """Keep the listed classes (relabelled 0..k-1), first ``limit`` of each in file order."""
    if not classes:
        return ds
    keep = []
    for c in classes:
        idx = np.flatnonzero(ds.labels == c)
        keep.append(idx if limit is None else idx[:limit])
    order = np.sort(np.concatenate(keep))
    remap = {c: i for i, c in enumerate(classes)}
    labels = np.array([remap[int(v)] for v in ds.labels[order]])
    return Dataset(ds.samples[order], labels, len(classes), ds.source)


def recon_grid(spec: ReconSpec, n: int, params) -> list[ReconConfig]:
    m = spec.m if spec.m is not None else max(1, int(round(spec.m_factor * n)))
    scale = 1.0
    if spec.relative_steps:
        scale = 1.0 / float(sum(np.vdot(w, w) for w in params.layer_weights))
    grid = []
    for lm, s, lx, la, mu, seed in itertools.product(spec.lambda_min, spec.init_scale, spec.lr_x, spec.lr_a,
                                                     spec.momentum, spec.seed):
        grid.append(ReconConfig(m=m, lambda_min=lm, init_scale=s, lr_x=lx * scale, lr_a=la * scale,
                                momentum=mu, iterations=spec.iterations, seed=int(seed), precision=params.precision))
    return grid


class GoodCountScorer:
    """Rank reconstructions by how many training samples they recover.

    Needs the training set, so it is only usable for controlled experiments.
    """

    def __init__(self, dataset: Dataset, metric: str | None = None, threshold: float | None = None):
        self.dataset = dataset
        self.metric = metric
        self.threshold = threshold

    def __call__(self, state) -> float:
        return float(match(self.dataset, state, None, self.metric, self.threshold).good_count)


def _scorer(spec: ExperimentSpec, dataset: Dataset):
    if spec.recon.scorer == "loss":
        return None
    if spec.recon.scorer == "good_count":
        return GoodCountScorer(dataset, spec.eval.metric or None, spec.eval.threshold)
    raise ValueError(f"unknown scorer {spec.recon.scorer!r}")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _search_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "lambda_min", "init_scale", "lr_x", "lr_a", "momentum", "seed", "score", "final_loss", "error"])
    for rank, r in enumerate(results):
        c = r.config
        loss = r.state.final_loss if r.state is not None else float("nan")
        w.writerow([rank, repr(c.lambda_min), repr(c.init_scale), repr(c.lr_x), repr(c.lr_a), repr(c.momentum),
                    c.seed, repr(float(r.score)), repr(float(loss)), r.error or ""])
    return buf.getvalue()


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def run_experiment(spec: ExperimentSpec, workers: int = 1, raise_on_error: bool = False) -> dict:
    """Run every stage and persist artifacts into ``spec.run_dir``.

    Returns the manifest dict.  A failed stage is recorded in the manifest
    (``status = "failed"``, ``failed_stage``) and later stages are skipped;
    artifacts already written are kept.
    """
    run_dir = spec.run_dir
    manifest_path = run_dir / "manifest.json"
    if manifest_path.exists():
        old = json.loads(manifest_path.read_text())
        if old.get("spec_digest") != spec.digest():
            raise FileExistsError(f"{run_dir} already holds a different run; choose another run_id")
    run_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "spec": spec.to_dict(),
        "spec_digest": spec.digest(),
        "seeds": {
            "data": spec.data.seed,
            "init": spec.train[0].init.seed,
            "recon": list(spec.recon.seed),
        },
        "stages": {},
        "artifacts": {},
        "status": "ok",
    }
    artifacts = {}

    def write(name, content):
        path = run_dir / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content)
        artifacts[name] = path

    ctx = {}
    stages = [
        ("data", _stage_data),
        ("train", _stage_train),
        ("reconstruct", _stage_reconstruct),
        ("evaluate", _stage_evaluate),
    ]
    try:
        for name, fn in stages:
            try:
                fn(spec, ctx, write, workers)
            except Exception as exc:  # noqa: BLE001 - recorded in the manifest
                manifest["stages"][name] = {"status": "failed", "error": f"{type(exc).__name__}: {exc}"}
                manifest["status"] = "failed"
                manifest["failed_stage"] = name
                logger.error("stage %s failed:\n%s", name, traceback.format_exc())
                if raise_on_error:
                    raise StageError(name, exc) from exc
                break
            manifest["stages"][name] = {"status": "ok"}
    finally:
        manifest["summary"] = ctx.get("summary", {})
        manifest["artifacts"] = {k: _sha256(p) for k, p in sorted(artifacts.items())}
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def _stage_data(spec, ctx, write, workers):
    ctx["train_set"], ctx["test_set"] = load_data(spec.data)


def _stage_train(spec, ctx, write, workers):
    ds = ctx["train_set"]
    dims = [ds.dims, *spec.hidden, ds.class_count]
    params = init_params(spec.train[0].init, dims, spec.precision)
    reports = []
    for stage in spec.train:
        params, report = train(params, ds, stage, ctx["test_set"])
        reports.append(report)
    ctx["params"] = params
    header = None
    lines = []
    offset = 0
    for k, rep in enumerate(reports):
        body = rep.to_csv().splitlines()
        header = "stage," + body[0]
        for row in body[1:]:
            cells = row.split(",")
            cells[0] = str(int(cells[0]) + offset)
            lines.append(f"{k + 1}," + ",".join(cells))
        offset += spec.train[k].epochs
    write("train_report.csv", "\n".join([header] + lines) + "\n")
    write("checkpoint.bin", kio.encode(params.layer_weights, kio.KIND_CHECKPOINT, params.precision))
    final = reports[-1].final
    ctx["summary"] = {
        "train_error": final.train_error,
        "test_error": final.test_error,
        "kkt_residual": final.kkt_residual,
        "min_margin": final.min_margin,
    }


def _stage_reconstruct(spec, ctx, write, workers):
    params, ds = ctx["params"], ctx["train_set"]
    grid = recon_grid(spec.recon, ds.n, params)
    scorer = _scorer(spec, ds)
    kwargs = {} if scorer is None else {"scorer": scorer}
    results = hyperparam_search(params, grid, workers=workers, **kwargs)
    write("search.csv", _search_csv(results))
    best = next((r for r in results if not r.failed), None)
    if best is None:
        raise RuntimeError("every reconstruction run failed: " + "; ".join(r.error for r in results))
    ctx["state"] = best.state
    best.state.save(spec.run_dir / "recon_state.bin")
    write("recon_state.bin", (spec.run_dir / "recon_state.bin").read_bytes())
    render_candidates(best.state.X, spec.run_dir / "candidates.png")
    write("candidates.png", (spec.run_dir / "candidates.png").read_bytes())
    ctx["summary"]["recon_final_loss"] = best.state.final_loss


def _stage_evaluate(spec, ctx, write, workers):
    ds, state, params = ctx["train_set"], ctx["state"], ctx["params"]
    report = match(ds, state, params, spec.eval.metric or None, spec.eval.threshold)
    write("match_report.csv", report.to_csv())
    scatter = scatter_csv(report)
    write("scatter.csv", scatter)
    ylabel = "SSIM" if report.metric == "ssim" else "-relative L2 error"
    write("scatter.svg", emit_plot(scatter, report.threshold, spec.run_id, ylabel))
    pairs = ranked_pairs(report, min(spec.eval.top_k, ds.n), per_class=spec.eval.per_class)
    render_pairs(pairs, ds, state.X, spec.run_dir / "ranked_pairs.png", threshold=report.threshold)
    write("ranked_pairs.png", (spec.run_dir / "ranked_pairs.png").read_bytes())
    ctx["summary"]["good_count"] = report.good_count
    ctx["summary"]["metric"] = report.metric
    ctx["summary"]["threshold"] = report.threshold


def verify_manifest(run_dir) -> dict[str, bool]:
    """Re-hash every artifact listed in ``manifest.json``."""
    run_dir = Path(run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text())
    return {name: _sha256(run_dir / name) == digest for name, digest in manifest["artifacts"].items()}


def load_state(path) -> ReconState:
    return ReconState.load(path)


# -- grids --------------------------------------------------------------------

SUMMARY_FIELDS = ("cell", "status", "train_error", "test_error", "good_count", "kkt_residual")


def _cell_name(assign: dict) -> str:
    return "_".join(f"{k.split('.')[-1]}={v}" for k, v in assign.items())


def grid_cells(base: ExperimentSpec, axes: dict, extra_cells: list[dict] | None = None):
    """Yield ``(assignment, spec)`` for the product of ``axes`` plus any extra cells.

    ``data.total`` fixes the training-set size; per-class counts become
    ``total // class_count``.
    """
    keys = list(axes)
    assignments = [dict(zip(keys, combo)) for combo in itertools.product(*(axes[k] for k in keys))]
    assignments += list(extra_cells or [])
    for assign in assignments:
        spec = base
        for k, v in assign.items():
            spec = override(spec, k, v)
        spec = copy.deepcopy(spec)
        spec.out_dir = str(Path(base.out_dir) / base.run_id)
        spec.run_id = _cell_name(assign) or "cell"
        yield assign, spec


def _run_cell(spec):
    try:
        return run_experiment(spec)
    except Exception as exc:  # noqa: BLE001 - a broken cell must not stop the grid
        return {"status": "failed", "failed_stage": "setup", "error": str(exc), "summary": {}}


def default_workers() -> int:
    return max(1, int(os.environ.get(WORKERS_ENV, "1")))


def run_grid(base: ExperimentSpec, axes: dict, extra_cells: list[dict] | None = None,
             workers: int | None = None) -> list[dict]:
    """Run one experiment per grid cell and write ``summary.csv`` plus ``plots/``.

    Cells run in parallel up to ``workers`` processes; a failed cell is a
    ``failed`` row and the grid carries on.
    """
    if not axes and not extra_cells:
        raise ValueError("grid needs at least one axis")
    workers = default_workers() if workers is None else workers
    cells = list(grid_cells(base, axes, extra_cells))
    specs = [s for _, s in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            manifests = list(pool.map(_run_cell, specs))
    else:
        manifests = [_run_cell(s) for s in specs]
    root = Path(base.out_dir) / base.run_id
    plots = root / "plots"
    plots.mkdir(parents=True, exist_ok=True)
    rows = []
    for (assign, spec), man in zip(cells, manifests):
        summ = man.get("summary", {})
        rows.append({
            "cell": spec.run_id,
            **{k: v for k, v in assign.items()},
            "status": man.get("status", "failed"),
            "train_error": summ.get("train_error", ""),
            "test_error": summ.get("test_error", ""),
            "good_count": summ.get("good_count", ""),
            "kkt_residual": summ.get("kkt_residual", ""),
        })
        svg = spec.run_dir / "scatter.svg"
        if svg.exists():
            (plots / f"{spec.run_id}.svg").write_bytes(svg.read_bytes())
    axis_keys = sorted({k for a, _ in cells for k in a})
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["cell", *axis_keys, *SUMMARY_FIELDS[1:]]
    w.writerow(header)
    for row in rows:
        w.writerow([_csv_value(row.get(h, "")) for h in header])
    (root / "summary.csv").write_text(buf.getvalue())
    return rows


def _csv_value(v):
    return repr(v) if isinstance(v, float) else v

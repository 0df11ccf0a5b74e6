"""Batch command-line front end.

Every subcommand reads one declarative document (YAML or JSON) given by
``--config``; relative paths inside it resolve against the document's
directory.  Outputs are staged in a sibling temporary directory and moved
into ``--out`` only when the command succeeds, so a failed run leaves no
partial artifacts.  Errors are reported as one JSON line on stderr::

    {"error": "ConfigError", "exit_code": 2, "field": "model.kind", "message": "..."}

Run configuration::

    dataset: data/manifest.csv           # required
    output: results                      # optional, --out wins
    grid: {v_high: 3.5, v_low: 2.0, n_points: 1000}
    features:                            # FeatureSpec records
      - {reduction: variance, transform: log10_abs, cycle_a: 100, cycle_b: 10}
    target_transform: log10
    threshold_fraction: 0.8
    include_censored: false
    model:
      kind: elastic_net                  # ols | elastic_net | fused_lasso
      grid: {lambda: [0.01, 0.1], alpha: [0.5, 1.0]}   # or "auto"
      options: {tolerance: 1.0e-8}
      one_se: false
    cv: {k: 5, seed: 0}
    splits:                              # optional; default: every cell trains
      train: [cell_000, ...]
      primary_test: [...]
      secondary_test: [...]
    diagnostics: {bins: auto, bootstrap: 200, level: 0.95, seed: 0}
    export_delta_q: true
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import yaml

from . import __version__
from .dataset import DEFAULT_THRESHOLD, label_dataset, load_dataset
from .diagnostics import (
    bootstrap_ci,
    compute_metrics,
    residual_diagnostics,
    write_diagnostics,
    write_metrics,
)
from .errors import ConfigError, CycleLifeError, DataError
from .features import (
    TARGET_TRANSFORMS,
    FeatureMatrix,
    FeatureSpec,
    VoltageGrid,
    assemble_feature_matrix,
    delta_q_matrix,
    standardize,
    write_delta_q,
    write_feature_matrix,
)
from .model_selection import PARAM_NAMES, Fitter, fit_final, grid_search_cv
from .solvers import LinearModel, lambda_max, load_model, predict, save_model
from .synth import SynthSpec, write_synth

RUN_KEYS = {
    "dataset", "output", "grid", "features", "target_transform", "threshold_fraction",
    "include_censored", "model", "cv", "splits", "diagnostics", "export_delta_q",
}
SPLIT_NAMES = ("train", "primary_test", "secondary_test")
AUTO_LAMBDA_STEPS = 20


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

def read_document(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", field="config") from exc
    try:
        doc = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: not valid {'JSON' if path.suffix == '.json' else 'YAML'}: {exc}",
                          field="config") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping", field="config")
    return doc


def _section(doc: dict, name: str, keys: set[str]) -> dict:
    sec = doc.get(name) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"{name} must be a mapping", field=name)
    unknown = sorted(set(sec) - keys)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}", field=f"{name}.{unknown[0]}")
    return sec


@dataclass
class RunConfig:
    dataset: Path
    grid: VoltageGrid = field(default_factory=VoltageGrid)
    features: list[FeatureSpec] = field(default_factory=lambda: [FeatureSpec()])
    target_transform: str = "log10"
    threshold_fraction: float = DEFAULT_THRESHOLD
    include_censored: bool = False
    model_kind: str = "elastic_net"
    model_grid: Any = "auto"
    model_options: dict = field(default_factory=dict)
    one_se: bool = False
    cv_k: int = 5
    cv_seed: int = 0
    splits: dict[str, list[str]] | None = None
    bins: int | str = "auto"
    bootstrap: int = 200
    level: float = 0.95
    bootstrap_seed: int = 0
    export_delta_q: bool = True
    output: Path | None = None
    dataset_ref: str | None = None

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        base = Path(base_dir)
        unknown = sorted(set(doc) - RUN_KEYS)
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}", field=unknown[0])
        if "dataset" not in doc:
            raise ConfigError("config must name a dataset manifest", field="dataset")
        dataset = base / str(doc["dataset"])
        if not dataset.is_file():
            raise ConfigError(f"dataset manifest not found: {dataset}", field="dataset")

        g = _section(doc, "grid", {"v_high", "v_low", "n_points"})
        try:
            grid = VoltageGrid(**g)
        except TypeError as exc:
            raise ConfigError(f"invalid grid: {exc}", field="grid") from exc

        feats = doc.get("features", [FeatureSpec().to_dict()])
        if not isinstance(feats, list) or not feats:
            raise ConfigError("features must be a non-empty list", field="features")
        specs = []
        for f in feats:
            if not isinstance(f, dict):
                raise ConfigError("each feature spec must be a mapping", field="features")
            specs.append(FeatureSpec.from_dict(f))

        tt = doc.get("target_transform", "log10")
        if tt not in TARGET_TRANSFORMS:
            raise ConfigError(f"unknown target transform {tt!r}", field="target_transform")

        model = _section(doc, "model", {"kind", "grid", "options", "one_se"})
        kind = model.get("kind", "elastic_net")
        if kind not in PARAM_NAMES:
            raise ConfigError(
                f"unknown model kind {kind!r}; expected one of {', '.join(PARAM_NAMES)}", field="model.kind"
            )
        options = model.get("options") or {}
        if not isinstance(options, dict):
            raise ConfigError("model.options must be a mapping", field="model.options")
        mgrid = model.get("grid", "auto" if kind != "ols" else [])
        if kind == "ols" and mgrid not in ([], {}, None, "auto"):
            raise ConfigError("ols takes no hyperparameter grid", field="model.grid")
        if kind != "ols" and isinstance(mgrid, dict):
            keys, want = sorted(mgrid), sorted(PARAM_NAMES[kind])
            if keys != want:
                raise ConfigError(f"grid keys {keys} do not match {kind} parameters {want}", field="model.grid")

        cv = _section(doc, "cv", {"k", "seed"})
        diag = _section(doc, "diagnostics", {"bins", "bootstrap", "level", "seed"})

        splits = doc.get("splits")
        if splits is not None:
            if not isinstance(splits, dict):
                raise ConfigError("splits must map split names to cell_id lists", field="splits")
            bad = sorted(set(splits) - set(SPLIT_NAMES))
            if bad:
                raise ConfigError(f"unknown split {bad[0]!r}; expected {', '.join(SPLIT_NAMES)}",
                                  field=f"splits.{bad[0]}")
            if not splits.get("train"):
                raise ConfigError("splits.train must list at least one cell", field="splits.train")
            splits = {k: [str(c) for c in splits[k]] for k in SPLIT_NAMES if k in splits}
            seen: dict[str, str] = {}
            for name, ids in splits.items():
                for cid in ids:
                    if cid in seen:
                        raise ConfigError(f"cell {cid} appears in both {seen[cid]} and {name}",
                                          field=f"splits.{name}")
                    seen[cid] = name

        out = doc.get("output")
        try:
            return cls(
                dataset=dataset,
                grid=grid,
                features=specs,
                target_transform=tt,
                threshold_fraction=float(doc.get("threshold_fraction", DEFAULT_THRESHOLD)),
                include_censored=bool(doc.get("include_censored", False)),
                model_kind=kind,
                model_grid=mgrid,
                model_options=dict(options),
                one_se=bool(model.get("one_se", False)),
                cv_k=int(cv.get("k", 5)),
                cv_seed=int(cv.get("seed", 0)),
                splits=splits,
                bins=diag.get("bins", "auto"),
                bootstrap=int(diag.get("bootstrap", 200)),
                level=float(diag.get("level", 0.95)),
                bootstrap_seed=int(diag.get("seed", cv.get("seed", 0))),
                export_delta_q=bool(doc.get("export_delta_q", True)),
                output=(base / str(out)) if out is not None else None,
                dataset_ref=str(doc["dataset"]),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid config value: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        return cls.from_dict(read_document(path), path.parent)

    def fitter(self) -> Fitter:
        try:
            return Fitter(self.model_kind, dict(self.model_options))
        except TypeError as exc:
            raise ConfigError(f"invalid model option: {exc}", field="model.options") from exc

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_ref or str(self.dataset),
            "grid": {"v_high": self.grid.v_high, "v_low": self.grid.v_low, "n_points": self.grid.n_points},
            "features": [f.to_dict() for f in self.features],
            "target_transform": self.target_transform,
            "threshold_fraction": self.threshold_fraction,
            "include_censored": self.include_censored,
            "model": {"kind": self.model_kind, "grid": self.model_grid, "options": self.model_options,
                      "one_se": self.one_se},
            "cv": {"k": self.cv_k, "seed": self.cv_seed},
            "splits": self.splits,
            "diagnostics": {"bins": self.bins, "bootstrap": self.bootstrap, "level": self.level,
                            "seed": self.bootstrap_seed},
        }


# ---------------------------------------------------------------------------
# Pipeline stages
# ---------------------------------------------------------------------------

@dataclass
class Prepared:
    fm: FeatureMatrix
    groups: dict[str, str]
    life: dict[str, float]
    split_of: dict[str, str]
    dataset: Any


def prepare(cfg: RunConfig) -> Prepared:
    dataset = load_dataset(cfg.dataset)
    labels = label_dataset(dataset, cfg.threshold_fraction)
    fm = assemble_feature_matrix(dataset, labels, cfg.features, cfg.grid, cfg.target_transform,
                                 include_censored=cfg.include_censored)
    if cfg.splits is None:
        split_of = {cid: "train" for cid in fm.rows}
    else:
        known = set(dataset.cell_ids)
        split_of = {}
        for name, ids in cfg.splits.items():
            missing = [c for c in ids if c not in known]
            if missing:
                raise ConfigError(f"split {name} names unknown cell(s): {', '.join(missing[:10])}",
                                  field=f"splits.{name}")
            split_of.update({c: name for c in ids})
    keep = [i for i, cid in enumerate(fm.rows) if cid in split_of]
    fm = fm.take(np.array(keep, dtype=int))
    if not any(split_of.get(c) == "train" for c in fm.rows):
        raise DataError("no uncensored cells in the training split")
    life = {cid: labels[cid].cycle_life for cid in fm.rows}
    return Prepared(fm, dataset.groups(), life, {c: split_of[c] for c in fm.rows}, dataset)


def split_rows(prep: Prepared, name: str) -> np.ndarray:
    return np.array([i for i, c in enumerate(prep.fm.rows) if prep.split_of[c] == name], dtype=int)


def auto_grid(cfg: RunConfig, train: FeatureMatrix) -> list[tuple]:
    """Deterministic default grid scaled by the training data."""
    std = standardize(train)
    if cfg.model_kind == "elastic_net":
        points = []
        for alpha in (0.1, 0.5, 1.0):
            top = lambda_max(std, alpha)
            for lam in top * np.logspace(0, -4, AUTO_LAMBDA_STEPS):
                points.append((float(lam), alpha))
        return points
    X = std.values - std.values.mean(axis=0)
    s = 2.0 * float(np.max(np.abs(X.T @ (std.target - std.target.mean()))))
    return [(s * a, s * b) for a in (0.0, 1e-3, 1e-2, 1e-1) for b in (1e-3, 1e-2, 1e-1, 1.0)]


def stage_featurize(cfg: RunConfig, prep: Prepared, stage: Path) -> list[str]:
    write_feature_matrix(prep.fm, stage / "feature_matrix.csv")
    files = ["feature_matrix.csv"]
    if cfg.export_delta_q:
        spec = cfg.features[0]
        ds = prep.dataset.subset(prep.fm.rows)
        ids, dq = delta_q_matrix(ds, cfg.grid, spec.cycle_a, spec.cycle_b)
        write_delta_q(ids, dq, cfg.grid, stage / "delta_q.csv")
        files.append("delta_q.csv")
    return files


def stage_cv(cfg: RunConfig, prep: Prepared, stage: Path, threads: int):
    train = prep.fm.take(split_rows(prep, "train"))
    fitter = cfg.fitter()
    grid = [] if fitter.kind == "ols" else cfg.model_grid
    if grid == "auto":
        grid = auto_grid(cfg, train)
    cv = grid_search_cv(train, prep.groups, grid, k=cfg.cv_k, seed=cfg.cv_seed, fitter=fitter,
                        one_se=cfg.one_se, threads=threads)
    cv.write_csv(stage / "cv_report.csv")
    return cv, ["cv_report.csv"]


def stage_train(cfg: RunConfig, prep: Prepared, cv, stage: Path) -> tuple[LinearModel, list[str]]:
    train = prep.fm.take(split_rows(prep, "train"))
    model = fit_final(train, cv, cfg.fitter())
    save_model(model, stage / "model.json")
    return model, ["model.json"]


def _split_order(prep: Prepared) -> list[str]:
    present = set(prep.split_of.values())
    return [s for s in SPLIT_NAMES if s in present]


def stage_predict(prep: Prepared, model: LinearModel, stage: Path):
    yhat = predict(model, prep.fm)
    with open(stage / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "split", "true_cycle_life", "predicted_cycle_life"])
        for split in _split_order(prep):
            for i in split_rows(prep, split):
                cid = prep.fm.rows[i]
                pred = float(prep.fm.inverse_target(np.array([yhat[i]]))[0])
                w.writerow([cid, split, repr(float(prep.life[cid])), repr(pred)])
    return yhat, ["predictions.csv"]


def _bins_for(cfg: RunConfig, n: int) -> int | None:
    if cfg.bins != "auto":
        return int(cfg.bins)
    if n < 25:
        return None
    return max(5, min(10, n // 5))


def stage_evaluate(cfg: RunConfig, prep: Prepared, model: LinearModel, yhat, stage: Path, threads: int):
    fm = prep.fm
    metrics = []
    for split in _split_order(prep):
        idx = split_rows(prep, split)
        if idx.size < 2:
            continue
        metrics.append((split, compute_metrics(fm.target[idx], yhat[idx], scale=fm.target_transform)))
        life = np.array([prep.life[fm.rows[i]] for i in idx])
        metrics.append((split, compute_metrics(life, fm.inverse_target(yhat[idx]), scale="cycles")))
    write_metrics(metrics, stage / "metrics.csv")

    tr = split_rows(prep, "train")
    resid = fm.target[tr] - yhat[tr]
    bins = _bins_for(cfg, tr.size)
    report = residual_diagnostics(resid, bins) if bins is not None else None
    cis = None
    if cfg.bootstrap > 0:
        fitter = cfg.fitter()
        point = tuple(model.fit_info.get("hyperparameters", {}).get(n) for n in fitter.param_names)
        cis = bootstrap_ci(fm.take(tr), fitter.at(point), prep.groups, B=cfg.bootstrap, level=cfg.level,
                           seed=cfg.bootstrap_seed, threads=threads)
    write_diagnostics(stage / "diagnostics.csv", resid, [fm.rows[i] for i in tr], report, cis, metrics)

    with open(stage / "parity.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "cell_id", "observed_cycle_life", "predicted_cycle_life",
                    "observed_target", "predicted_target"])
        for split in _split_order(prep):
            for i in split_rows(prep, split):
                cid = fm.rows[i]
                pred = float(fm.inverse_target(np.array([yhat[i]]))[0])
                w.writerow([split, cid, repr(float(prep.life[cid])), repr(pred),
                            repr(float(fm.target[i])), repr(float(yhat[i]))])

    slopes, _ = model.raw_coefficients()
    volts = fm.voltages
    with open(stage / "coefficient_profile.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "feature", "voltage", "coefficient", "raw_coefficient"])
        for j, name in enumerate(model.feature_names):
            v = repr(float(volts[j])) if volts is not None else ""
            w.writerow([j, name, v, repr(float(model.coefficients[j])), repr(float(slopes[j]))])

    summary = {
        "metrics": [{"split": s, **m.as_row()} for s, m in metrics],
        "residual_test": None if report is None else {
            "chi_square_statistic": report.chi_square_statistic,
            "chi_square_p": report.chi_square_p, "dof": report.dof, "bins": report.bins,
        },
        "coefficient_ci": None if cis is None else [
            {"feature": c.feature, "estimate": c.estimate, "lower": c.lower, "upper": c.upper}
            for c in cis
        ],
    }
    return summary, ["metrics.csv", "diagnostics.csv", "parity.csv", "coefficient_profile.csv"]


# ---------------------------------------------------------------------------
# Output staging
# ---------------------------------------------------------------------------

class Staging:
    """Temporary sibling of ``out`` whose files are moved in only on success."""

    def __init__(self, out: Path):
        self.out = out

    def __enter__(self) -> Path:
        self.out.parent.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=f".{self.out.name}.staging-", dir=self.out.parent))
        return self.dir

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                self.out.mkdir(parents=True, exist_ok=True)
                for root, _, files in os.walk(self.dir):
                    rel = Path(root).relative_to(self.dir)
                    (self.out / rel).mkdir(parents=True, exist_ok=True)
                    for f in files:
                        os.replace(Path(root) / f, self.out / rel / f)
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
        return False


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _load_run_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required", field="config")
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        cfg.cv_seed = cfg.bootstrap_seed = args.seed
    return cfg


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    if args.out:
        return Path(args.out)
    if cfg is not None and cfg.output is not None:
        return cfg.output
    raise ConfigError("no output directory: pass --out or set 'output' in the config", field="out")


def _model_path(args, out: Path) -> Path:
    path = Path(args.model) if getattr(args, "model", None) else out / "model.json"
    if not path.is_file():
        raise ConfigError(f"model document not found: {path} (train first or pass --model)", field="model")
    return path


def cmd_synth(args) -> None:
    doc = read_document(args.config) if args.config else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SynthSpec.from_dict(doc)
    with Staging(_out_dir(args)) as stage:
        write_synth(spec, stage, threads=args.threads)


def cmd_featurize(args) -> None:
    cfg = _load_run_config(args)
    prep = prepare(cfg)
    with Staging(_out_dir(args, cfg)) as stage:
        stage_featurize(cfg, prep, stage)


def cmd_cv(args) -> None:
    cfg = _load_run_config(args)
    prep = prepare(cfg)
    with Staging(_out_dir(args, cfg)) as stage:
        stage_cv(cfg, prep, stage, args.threads)


def cmd_train(args) -> None:
    cfg = _load_run_config(args)
    prep = prepare(cfg)
    with Staging(_out_dir(args, cfg)) as stage:
        cv, _ = stage_cv(cfg, prep, stage, args.threads)
        stage_train(cfg, prep, cv, stage)


def cmd_predict(args) -> None:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg)
    model = load_model(_model_path(args, out))
    prep = prepare(cfg)
    with Staging(out) as stage:
        stage_predict(prep, model, stage)


def cmd_evaluate(args) -> None:
    cfg = _load_run_config(args)
    out = _out_dir(args, cfg)
    model = load_model(_model_path(args, out))
    prep = prepare(cfg)
    with Staging(out) as stage:
        yhat, _ = stage_predict(prep, model, stage)
        stage_evaluate(cfg, prep, model, yhat, stage, args.threads)


def cmd_run(args) -> None:
    cfg = _load_run_config(args)
    prep = prepare(cfg)
    with Staging(_out_dir(args, cfg)) as stage:
        files = stage_featurize(cfg, prep, stage)
        cv, f = stage_cv(cfg, prep, stage, args.threads)
        files += f
        model, f = stage_train(cfg, prep, cv, stage)
        files += f
        yhat, f = stage_predict(prep, model, stage)
        files += f
        evaluation, f = stage_evaluate(cfg, prep, model, yhat, stage, args.threads)
        files += f
        counts = {s: int(split_rows(prep, s).size) for s in _split_order(prep)}
        summary = {
            "version": __version__,
            "config": cfg.to_dict(),
            "files": sorted(files + ["run_summary.json"]),
            "split_counts": counts,
            "n_predictions": int(sum(counts.values())),
            "best_point": cv.best_params(),
            "model": {
                "kind": model.kind,
                "intercept": model.intercept,
                "nonzero_coefficients": int(np.count_nonzero(model.coefficients)),
            },
            **evaluation,
        }
        _dump_json(summary, stage / "run_summary.json")


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic dataset with planted ground truth"),
    "run": (cmd_run, "featurize, cross-validate, train, predict and evaluate"),
    "featurize": (cmd_featurize, "write the feature matrix (and delta-Q curves)"),
    "cv": (cmd_cv, "grouped k-fold grid search; writes cv_report.csv"),
    "train": (cmd_train, "cross-validate and fit the final model; writes model.json"),
    "predict": (cmd_predict, "predict every split with an existing model"),
    "evaluate": (cmd_evaluate, "predictions, metrics, diagnostics and plot data for a model"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration (or synth spec) in YAML or JSON")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, default=None, help="override CV/bootstrap (or synth) seed")
    common.add_argument("--threads", type=int, default=1, help="worker threads (default 1)")
    parser = argparse.ArgumentParser(prog="cyclelife", description="Cycle-life prediction pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("predict", "evaluate"):
            p.add_argument("--model", help="model document (default: <out>/model.json)")
    return parser


def _report(exc: BaseException, code: int) -> None:
    payload = {"error": type(exc).__name__, "exit_code": code, "message": str(exc)}
    fld = getattr(exc, "field", None)
    if fld is not None:
        payload["field"] = fld
    sys.stderr.write(json.dumps(payload, sort_keys=True) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1", field="threads")
        COMMANDS[args.command][0](args)
    except CycleLifeError as exc:
        _report(exc, exc.exit_code)
        return exc.exit_code
    except OSError as exc:
        err = DataError(f"{exc.filename or ''}: {exc.strerror or exc}")
        _report(err, err.exit_code)
        return err.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())

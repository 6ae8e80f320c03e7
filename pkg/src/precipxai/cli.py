"""Command-line entry point: ``precipxai <command> [--config FILE] [--seed N] [--out DIR] [--set k=v]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields
from datetime import date
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .data import (
    DataValidationError,
    Dataset,
    PipelineConfig,
    SyntheticSpec,
    build_dataset,
    expm1_inverse,
    generate_synthetic,
    ingest_csv,
    load_bundle,
    parse_key_values,
    save_bundle,
)
from .hyperopt import SearchSpace, TuningError, tune_folds
from .nn import ConvLstmModel, ModelConfig, load_checkpoint, save_checkpoint
from .training import (
    DivergenceError,
    LossConfig,
    MeanPredictor,
    TrainConfig,
    evaluate,
    fit,
    ts_cross_validate,
)
from .xai import explain as run_explain

log = logging.getLogger("precipxai")

THREADS_ENV = "PRECIPXAI_NUM_THREADS"
XAI_METHODS = ("importance", "occlusion", "gradcam", "counterfactual")
EXIT_INVALID = 1
EXIT_FAILED = 3

# every accepted key and its default; values are strings exactly as they would appear in a file
DEFAULTS: dict[str, str] = {
    "seed": "0",
    # pipeline
    "T": "7",
    "lags": "1,2,3",
    "lag_variables": "auto",
    "split": "0.7,0.15,0.15",
    # model
    "conv_filters": "32",
    "convlstm_filters": "16",
    "kernel_size": "3",
    "dropout": "0.2",
    # training
    "epochs": "30",
    "patience": "3",
    "plateau_factor": "0.5",
    "plateau_patience": "2",
    "min_delta": "1e-06",
    "batch_size": "16",
    "learning_rate": "0.001",
    "warm_start_bias": "true",
    "cv_folds": "0",
    # loss
    "alpha": "5.0",
    "tau_percentile": "90.0",
    # tuning
    "n_trials": "20",
    "tune_folds": "3",
    "tune_all_folds": "false",
    "space.conv_filters": "32,64,128",
    "space.convlstm_filters": "16,32,64",
    "space.dropout": "0.0,0.5",
    "space.learning_rate": "0.001,0.0001",
    "space.kernel_size": "3,5",
    "space.strict": "true",
    # explanations
    "xai.methods": ",".join(XAI_METHODS),
    "xai.repeats": "5",
    "xai.delta": "0.1",
    "xai.decile": "0.9",
    "xai.partition": "test",
    # inputs
    "bundle": "",
    "run": "",
}
SYNTH_KEYS = {f"synth.{f.name}": f for f in fields(SyntheticSpec)}


class ConfigError(ValueError):
    pass


class RunConfig:
    """Flat key=value configuration with typed accessors."""

    def __init__(self, values: dict[str, str]):
        self.values = dict(values)

    @classmethod
    def resolve(cls, config_file: Path | None, overrides: Sequence[str], seed: int | None,
                extra: dict[str, str] | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        supplied: dict[str, str] = {}
        if config_file is not None:
            supplied.update(parse_key_values(Path(config_file).read_text(encoding="utf-8")))
        supplied.update(extra or {})
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            k, v = (s.strip() for s in item.split("=", 1))
            supplied[k] = v
        if seed is not None:
            supplied["seed"] = str(seed)
        unknown = sorted(k for k in supplied if k not in values and k not in SYNTH_KEYS)
        if unknown:
            raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
        values.update(supplied)
        return cls(values)

    def get(self, key: str) -> str:
        return self.values[key]

    def int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, got {self.values[key]!r}") from None

    def float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, got {self.values[key]!r}") from None

    def bool(self, key: str) -> bool:
        v = self.values[key].lower()
        if v not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"{key} must be true or false, got {self.values[key]!r}")
        return v in ("true", "1", "yes")

    def list(self, key: str, cast=str) -> list:
        raw = self.values[key].strip()
        try:
            return [cast(x.strip()) for x in raw.split(",") if x.strip()] if raw else []
        except ValueError:
            raise ConfigError(f"{key} has a malformed list {raw!r}") from None

    def text(self) -> str:
        return "".join(f"{k}={self.values[k]}\n" for k in sorted(self.values))

    # --- typed views ---------------------------------------------------------

    def pipeline(self, precip: str, synthetic: bool) -> PipelineConfig:
        lv = self.get("lag_variables").strip()
        if lv == "auto":
            lag_vars = (precip,) if synthetic else None
        elif lv == "all":
            lag_vars = None
        else:
            lag_vars = tuple(self.list("lag_variables"))
        fractions = tuple(self.list("split", float))
        if len(fractions) != 3:
            raise ConfigError("split needs three fractions")
        return PipelineConfig(T=self.int("T"), lags=tuple(self.list("lags", int)),
                              lag_variables=lag_vars, fractions=fractions)

    def model(self, T: int, H: int, W: int, F: int) -> ModelConfig:
        return ModelConfig(T=T, H=H, W=W, F=F, conv_filters=self.int("conv_filters"),
                           convlstm_filters=self.int("convlstm_filters"),
                           kernel_size=self.int("kernel_size"), dropout_rate=self.float("dropout"))

    def train(self, seed: int) -> TrainConfig:
        return TrainConfig(epochs=self.int("epochs"), patience=self.int("patience"),
                           plateau_factor=self.float("plateau_factor"),
                           plateau_patience=self.int("plateau_patience"),
                           min_delta=self.float("min_delta"), batch_size=self.int("batch_size"),
                           learning_rate=self.float("learning_rate"), seed=seed,
                           warm_start_bias=self.bool("warm_start_bias"))

    def loss(self) -> LossConfig:
        return LossConfig(tau_percentile=self.float("tau_percentile"), alpha=self.float("alpha"))

    def space(self) -> SearchSpace:
        drop = self.list("space.dropout", float)
        if len(drop) != 2:
            raise ConfigError("space.dropout needs a lower and upper bound")
        return SearchSpace(conv_filters=tuple(self.list("space.conv_filters", int)),
                           convlstm_filters=tuple(self.list("space.convlstm_filters", int)),
                           dropout=(drop[0], drop[1]),
                           learning_rate=tuple(self.list("space.learning_rate", float)),
                           kernel_size=tuple(self.list("space.kernel_size", int)),
                           strict=self.bool("space.strict"))

    def synthetic(self) -> SyntheticSpec:
        kw = {"seed": self.int("seed"), "T": self.int("T")}
        for key, f in SYNTH_KEYS.items():
            if key not in self.values:
                continue
            raw = self.values[key]
            default = f.default
            if f.name == "start":
                kw[f.name] = date.fromisoformat(raw)
            elif f.name == "mask":
                kw[f.name] = raw
            elif isinstance(default, bool):
                kw[f.name] = raw.lower() in ("true", "1", "yes")
            elif isinstance(default, int):
                kw[f.name] = int(raw)
            else:
                kw[f.name] = None if raw.lower() in ("", "none", "auto") else float(raw)
        return SyntheticSpec(**kw)

    def seeds(self) -> dict[str, int]:
        """Independent per-subsystem seeds split from the root seed."""
        state = np.random.SeedSequence(self.int("seed")).generate_state(4)
        return dict(zip(("init", "train", "permutation", "tuner"), (int(s) for s in state)))


# --- helpers -------------------------------------------------------------------------

def _bundle_path(p: str | Path) -> Path:
    p = Path(p)
    return p / "bundle.json" if p.is_dir() or not p.suffix else p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _require(paths: Sequence[Path]) -> None:
    missing = [str(p) for p in paths if not Path(p).exists()]
    if missing:
        raise ConfigError(f"missing files: {', '.join(missing)}")


def _out_dir(args) -> Path:
    if args.out is None:
        raise ConfigError("--out is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dataset_summary(ds: Dataset) -> dict:
    return {"days": len(ds.cube.dates), "samples": int(len(ds.anchors)),
            "features": len(ds.feature_names), "grid": [ds.manifest.grid_rows, ds.manifest.grid_cols],
            "split": [ds.split.train_end, ds.split.val_end - ds.split.train_end,
                      ds.split.n - ds.split.val_end]}


def _run_config(run: Path) -> RunConfig:
    _require([run / "config.txt"])
    values = parse_key_values((run / "config.txt").read_text(encoding="utf-8"))
    return RunConfig({**DEFAULTS, **values})


def _run_dataset(run: Path) -> tuple[RunConfig, Dataset, ConvLstmModel]:
    cfg = _run_config(run)
    _require([run / "model.json"])
    ds = load_bundle(_bundle_path(cfg.get("bundle")))
    return cfg, ds, load_checkpoint(run / "model.json")


def compute_metrics(model, ds: Dataset, loss_cfg: LossConfig) -> dict:
    """Validation/test metrics plus the mean-predictor baseline; tau comes from the training partition."""
    tr, va, te = ds.partitions()
    tau = loss_cfg.resolved(tr.y).tau
    baseline = MeanPredictor(tr.y)
    out = {"tau_log": tau, "threshold_mm": float(expm1_inverse(tau)), "units": "mm/day"}
    for name, part in (("validation", va), ("test", te)):
        out[name] = evaluate(model, part, tau).to_dict()
        out[f"baseline_{name}"] = evaluate(baseline, part, tau).to_dict()
    return out


# --- commands -------------------------------------------------------------------------

def cmd_ingest(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    manifest, cube = ingest_csv(Path(args.manifest), Path(args.csv))
    ds = build_dataset(manifest, cube, cfg.pipeline(manifest.precip_variable, synthetic=False))
    save_bundle(ds, out / "bundle.json")
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    print(json.dumps(_dataset_summary(ds), sort_keys=True))
    return 0


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    spec = cfg.synthetic()
    manifest, cube, descriptor = generate_synthetic(spec)
    ds = build_dataset(manifest, cube, cfg.pipeline(manifest.precip_variable, synthetic=True),
                       synthetic=descriptor)
    save_bundle(ds, out / "bundle.json")
    _write_json(out / "synthetic.json", descriptor)
    cfg = RunConfig({**cfg.values, **{f"synth.{k}": str(v) for k, v in spec.to_dict().items()}})
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    print(json.dumps(_dataset_summary(ds), sort_keys=True))
    return 0


def _check_pipeline_matches(cfg: RunConfig, ds: Dataset) -> RunConfig:
    """Record the bundle's pipeline in the run config; refuse explicit contradictions."""
    p = ds.pipeline
    actual = {"T": str(p.T), "lags": ",".join(str(x) for x in p.lags),
              "split": ",".join(repr(float(f)) for f in p.fractions)}
    for k, v in actual.items():
        if cfg.values[k] != DEFAULTS[k]:
            mine = cfg.list(k, float) if k != "T" else [cfg.int(k)]
            theirs = [float(x) for x in v.split(",")]
            if [float(x) for x in mine] != theirs:
                raise ConfigError(f"{k}={cfg.values[k]} conflicts with the bundle ({k}={v})")
    lv = "all" if p.lag_variables is None else ",".join(p.lag_variables)
    return RunConfig({**cfg.values, **actual, "lag_variables": lv})


def cmd_train(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    if not cfg.get("bundle"):
        raise ConfigError("train needs --bundle")
    ds = load_bundle(_bundle_path(cfg.get("bundle")))
    cfg = _check_pipeline_matches(cfg, ds)
    seeds = cfg.seeds()
    H, W = ds.manifest.grid_rows, ds.manifest.grid_cols
    model_cfg = cfg.model(ds.pipeline.T, H, W, len(ds.feature_names)).validate(strict=False)
    train_cfg, loss_cfg = cfg.train(seeds["train"]), cfg.loss()
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")

    tr, va, _ = ds.partitions()
    model = ConvLstmModel.initialized(model_cfg, seeds["init"])
    hist = fit(model, tr, va, train_cfg, loss_cfg.resolved(tr.y),
               on_epoch=lambda e: log.info("epoch %(epoch)d train %(train_loss).5f val %(val_loss).5f "
                                           "lr %(lr)g", e))
    save_checkpoint(model, out / "model.json")
    (out / "history.jsonl").write_text(hist.to_jsonl(), encoding="utf-8")
    metrics = compute_metrics(model, ds, loss_cfg)
    _write_json(out / "metrics.json", metrics)
    _write_json(out / "training.json", {
        "best_epoch": hist.best_epoch, "best_val_loss": hist.best_val_loss,
        "epochs_run": len(hist.epochs), "stopped_early": hist.stopped_early,
        "tau_percentile": loss_cfg.tau_percentile, "tau_log": metrics["tau_log"],
        "alpha": loss_cfg.alpha, "seeds": seeds})

    folds = cfg.int("cv_folds")
    if folds > 0:
        results, mean_rmse = ts_cross_validate(ds.scaled_samples(), model_cfg, train_cfg, loss_cfg, k=folds)
        _write_json(out / "cv.json", {"folds": [r.to_dict() for r in results], "mean_test_rmse": mean_rmse})
    print(json.dumps({"test_rmse": metrics["test"]["rmse"],
                      "baseline_test_rmse": metrics["baseline_test"]["rmse"],
                      "best_epoch": hist.best_epoch}, sort_keys=True))
    return 0


def cmd_tune(args, cfg: RunConfig) -> int:
    out = _out_dir(args)
    if not cfg.get("bundle"):
        raise ConfigError("tune needs --bundle")
    ds = load_bundle(_bundle_path(cfg.get("bundle")))
    cfg = _check_pipeline_matches(cfg, ds)
    seeds = cfg.seeds()
    space = cfg.space()
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    samples = ds.scaled_samples()[: ds.split.val_end]  # test partition stays unseen
    base = cfg.model(ds.pipeline.T, ds.manifest.grid_rows, ds.manifest.grid_cols, len(ds.feature_names))
    results, modal = tune_folds(samples, base.validate(strict=False), space, cfg.train(seeds["train"]),
                                cfg.loss(), n_trials=cfg.int("n_trials"), seed=seeds["tuner"],
                                k=cfg.int("tune_folds"), all_folds=cfg.bool("tune_all_folds"),
                                log_dir=out)
    _write_json(out / "tuning.json", {
        "folds": [{"fold": i + 1, "best": json.loads(r.best.to_json()),
                   "best_so_far": r.best_so_far()} for i, r in enumerate(results)],
        "modal": modal})
    tuned = {"conv_filters": modal["conv_filters"], "convlstm_filters": modal["convlstm_filters"],
             "kernel_size": modal["kernel_size"], "dropout": repr(float(modal["dropout"])),
             "learning_rate": repr(float(modal["learning_rate"]))}
    (out / "tuned.conf").write_text("".join(f"{k}={v}\n" for k, v in sorted(tuned.items())),
                                    encoding="utf-8")
    print(json.dumps({"modal": modal}, sort_keys=True))
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    run = Path(args.run)
    stored, ds, model = _run_dataset(run)
    metrics = compute_metrics(model, ds, stored.loss())
    out = Path(args.out) if args.out else run
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "metrics.json", metrics)
    print(json.dumps({"test_rmse": metrics["test"]["rmse"],
                      "baseline_test_rmse": metrics["baseline_test"]["rmse"]}, sort_keys=True))
    return 0


def _pgm(matrix: np.ndarray) -> str:
    levels = np.rint(np.clip(matrix, 0, 1) * 255).astype(int)
    rows = "\n".join(" ".join(str(v) for v in r) for r in levels)
    return f"P2\n{matrix.shape[1]} {matrix.shape[0]}\n255\n{rows}\n"


def cmd_explain(args, cfg: RunConfig) -> int:
    run = Path(args.run)
    stored, ds, model = _run_dataset(run)
    methods = cfg.list("xai.methods")
    bad = [m for m in methods if m not in XAI_METHODS]
    if bad or not methods:
        raise ConfigError(f"xai.methods must be a subset of {','.join(XAI_METHODS)}")
    parts = dict(zip(("train", "validation", "test"), ds.partitions()))
    partition = cfg.get("xai.partition")
    if partition not in parts:
        raise ConfigError(f"xai.partition must be train, validation or test, got {partition!r}")
    samples = parts[partition]
    rep = run_explain(model, samples, parts["train"].X, ds.feature_names, methods=methods,
                      repeats=cfg.int("xai.repeats"), delta=cfg.float("xai.delta"),
                      decile=cfg.float("xai.decile"), seed=cfg.seeds()["permutation"])

    out = (Path(args.out) if args.out else run) / "xai"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.text(), encoding="utf-8")
    if rep.importance is not None:
        r = rep.importance
        _write_csv(out / "feature_importance.csv",
                   ["feature", "mean_delta_rmse_mm", "std_delta_rmse_mm", "baseline_rmse_mm", "repeats"],
                   [(f, m, s, r.baseline_rmse, r.repeats)
                    for f, m, s in zip(r.features, r.mean_delta_rmse, r.std_delta_rmse)])
    if rep.occlusion is not None:
        r = rep.occlusion
        _write_csv(out / "occlusion.csv", ["step", "label", "delta_rmse_mm", "baseline_rmse_mm"],
                   [(t, lab, d, r.baseline_rmse) for t, (lab, d) in enumerate(zip(r.labels, r.delta_rmse))])
    if rep.gradcam is not None:
        m = rep.gradcam.array()
        _write_csv(out / "gradcam.csv", ["row", "col", "attention"],
                   [(i, j, float(m[i, j])) for i in range(m.shape[0]) for j in range(m.shape[1])])
        (out / "gradcam.txt").write_text(
            "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in m), encoding="utf-8")
        (out / "gradcam.pgm").write_text(_pgm(m), encoding="ascii")
    if rep.counterfactual is not None:
        r = rep.counterfactual
        _write_csv(out / "counterfactual.csv", ["feature", "norm_mm", "delta"],
                   [(f, n, r.delta) for f, n in zip(r.features, r.norms)])
    summary = rep.to_dict()
    summary.update({"partition": partition, "n_samples": len(samples), "units": "mm/day",
                    "methods": methods})
    _write_json(out / "explanation.json", summary)
    print(json.dumps({"methods": methods, "partition": partition, "out": str(out)}, sort_keys=True))
    return 0


def cmd_report(args, cfg: RunConfig) -> int:
    run = Path(args.run)
    xai = run / "xai"
    needed = [xai / n for n in ("feature_importance.csv", "occlusion.csv", "gradcam.csv",
                                "counterfactual.csv")]
    _require([run / "config.txt", *needed])
    out = Path(args.out) if args.out else run / "report"
    out.mkdir(parents=True, exist_ok=True)

    imp = _read_csv(needed[0])
    imp.sort(key=lambda r: (-float(r["mean_delta_rmse_mm"]), r["feature"]))
    _write_csv(out / "feature_importance.csv", ["rank", "feature", "delta_rmse_mm", "std_mm"],
               [(i + 1, r["feature"], float(r["mean_delta_rmse_mm"]), float(r["std_delta_rmse_mm"]))
                for i, r in enumerate(imp)])

    occ = sorted(_read_csv(needed[1]), key=lambda r: int(r["step"]))
    _write_csv(out / "occlusion.csv", ["label", "delta_rmse_mm"],
               [(r["label"], float(r["delta_rmse_mm"])) for r in occ])

    cells = _read_csv(needed[2])
    H = max(int(c["row"]) for c in cells) + 1
    W = max(int(c["col"]) for c in cells) + 1
    grid = np.zeros((H, W))
    for c in cells:
        grid[int(c["row"]), int(c["col"])] = float(c["attention"])
    _write_csv(out / "gradcam_matrix.csv", ["row"] + [f"col_{j}" for j in range(W)],
               [[i] + [float(v) for v in grid[i]] for i in range(H)])

    cf = _read_csv(needed[3])
    cf.sort(key=lambda r: (-float(r["norm_mm"]), r["feature"]))
    _write_csv(out / "counterfactual.csv", ["rank", "feature", "l2_norm_mm", "delta"],
               [(i + 1, r["feature"], float(r["norm_mm"]), float(r["delta"])) for i, r in enumerate(cf)])
    print(json.dumps({"out": str(out)}))
    return 0


COMMANDS = {"ingest": cmd_ingest, "synth": cmd_synth, "train": cmd_train, "tune": cmd_tune,
            "evaluate": cmd_evaluate, "explain": cmd_explain, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value configuration file")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="precipxai", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    s = sub.add_parser("ingest", parents=[common], help="validate a manifest + long CSV into a bundle")
    s.add_argument("manifest")
    s.add_argument("csv")
    s = sub.add_parser("synth", parents=[common], help="generate a planted-signal bundle")
    s.add_argument("spec", nargs="?", help="key=value file of synthetic-data fields")
    for name in ("train", "tune"):
        s = sub.add_parser(name, parents=[common], help=f"{name} on a bundle")
        s.add_argument("--bundle", help="bundle directory or bundle.json")
    for name in ("evaluate", "explain", "report"):
        s = sub.add_parser(name, parents=[common], help=f"{name} a training run")
        s.add_argument("--run", required=True, help="run directory written by train")
    sub.choices["explain"].add_argument("--methods", help="comma-separated subset of " + ",".join(XAI_METHODS))
    sub.choices["explain"].add_argument("--partition", choices=("train", "validation", "test"))
    sub.choices["explain"].add_argument("--delta", type=float, help="counterfactual reduction")
    return p


def _extra_from_args(args) -> dict[str, str]:
    extra: dict[str, str] = {}
    if getattr(args, "spec", None):
        for k, v in parse_key_values(Path(args.spec).read_text(encoding="utf-8")).items():
            extra[k if k.startswith("synth.") else f"synth.{k}"] = v
    if getattr(args, "bundle", None):
        extra["bundle"] = args.bundle
    if getattr(args, "run", None):
        extra["run"] = args.run
    for flag, key in (("methods", "xai.methods"), ("partition", "xai.partition"), ("delta", "xai.delta")):
        if getattr(args, flag, None) is not None:
            extra[key] = str(getattr(args, flag))
    return extra


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get(THREADS_ENV)
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"error: {THREADS_ENV} must be an integer", file=sys.stderr)
        return EXIT_INVALID
    try:
        with threadpool_limits(limits=limit):
            # precedence: file < command flags < --set < --seed
            cfg = RunConfig.resolve(args.config, args.set, args.seed, _extra_from_args(args))
            return COMMANDS[args.command](args, cfg)
    except (DataValidationError, ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ValueError as exc:
        print(f"error: invalid value: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except DivergenceError as exc:
        print(f"error: training diverged at epoch {exc.epoch}: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except TuningError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())

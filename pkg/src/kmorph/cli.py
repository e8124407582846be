"""Command-line entry point: generate, train, eval, compare, render-samples.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import logging
import os
import sys
import time
from pathlib import Path


from . import __version__, evaluate, regressor
from .kinematics import SchemaError
from .pipeline import TEST, TRAIN, Dataset, PipelineConfig, generate_dataset, record_rng, train_loop, write_run_report
from .regressor import TrainConfig, TrainingDiverged
from .render import downsample, normalize_image, rasterize, write_pgm
from .scene import TASK_NAMES, GeometryError, instantiate, load_task, sample_params

log = logging.getLogger("kmorph")

OUT_ENV = "KMORPH_OUT"
DATASET_FILE = "dataset.kmd"

# key -> (type, default); every key may appear in a config file or as a flag
CONFIG_KEYS = {
    "task": (str, "box_a"),
    "seed": (int, 0),
    "n_data": (int, 4000),
    "n_aug": (int, 800),
    "n_pred": (int, 5),
    "outer_rounds_max": (int, 3),
    "stop_epsilon": (float, 0.01),
    "epochs": (int, 30),
    "retrain_epochs": (int, 10),
    "baseline_epochs": (int, None),
    "learning_rate": (float, 1e-3),
    "batch_size": (int, 16),
    "lr_decay": (float, 1.0),
    "validation_fraction": (float, 0.1),
    "split_fraction": (float, 0.8),
    "net_factor": (int, 4),
    "cloud_width": (int, 256),
    "cloud_height": (int, 192),
    "workers": (int, None),
}


class UsageError(Exception):
    pass


# --- configuration ------------------------------------------------------------------


def read_config_file(path: str | Path) -> dict[str, str]:
    """Plain ``key = value`` lines; ``#`` starts a comment; an empty value keeps the default.

    ``range.NAME = LO HI`` overrides a parameter range.
    """
    text = Path(path).read_text()
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), delimiters=("=",))
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text)
    except configparser.Error as exc:
        raise UsageError(f"{path}: {exc}") from exc
    return {k: v for k, v in parser["run"].items() if v.strip()}


def resolve_config(args) -> dict:
    """Defaults, then the config file, then explicit flags."""
    raw: dict[str, object] = {}
    if getattr(args, "config", None):
        raw.update(read_config_file(args.config))
    ranges = {k[len("range."):]: v for k, v in raw.items() if k.startswith("range.")}
    unknown = set(raw) - set(CONFIG_KEYS) - {f"range.{k}" for k in ranges}
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    out = {}
    for key, (typ, default) in CONFIG_KEYS.items():
        value = getattr(args, key, None)
        if value is None:
            value = raw.get(key, default)
        try:
            out[key] = None if value is None else typ(value)
        except ValueError as exc:
            raise UsageError(f"config key {key}: cannot read {value!r} as {typ.__name__}") from exc
    for spec in getattr(args, "range", None) or []:
        name, sep, bounds = spec.partition("=")
        if not sep:
            raise UsageError(f"--range expects NAME=LO,HI, got {spec!r}")
        ranges[name] = bounds.replace(",", " ")
    try:
        out["ranges"] = {k: [float(x) for x in v.split()] for k, v in sorted(ranges.items())}
    except ValueError as exc:
        raise UsageError(f"bad parameter range: {exc}") from exc
    if any(len(v) != 2 for v in out["ranges"].values()):
        raise UsageError("each parameter range needs exactly two numbers")
    if out["task"] not in TASK_NAMES:
        raise UsageError(f"unknown task {out['task']!r}; choose from {', '.join(TASK_NAMES)}")
    return out


def pipeline_config(values: dict) -> PipelineConfig:
    task = load_task(values["task"])
    schema = task.schema
    for name, (lo, hi) in values["ranges"].items():
        schema = schema.with_limits(name, lo, hi)
    task = dataclasses.replace(task, schema=schema)
    train = TrainConfig(
        learning_rate=values["learning_rate"], batch_size=values["batch_size"], epochs=values["epochs"],
        seed=values["seed"], validation_fraction=values["validation_fraction"], lr_decay=values["lr_decay"],
    )
    return PipelineConfig.for_task(
        task, cloud_size=(values["cloud_width"], values["cloud_height"]), n_data=values["n_data"],
        n_aug=min(values["n_aug"], values["n_data"]), n_pred_eval=values["n_pred"],
        outer_rounds_max=values["outer_rounds_max"], stop_epsilon=values["stop_epsilon"], train=train,
        retrain_epochs=values["retrain_epochs"], split_fraction=values["split_fraction"],
        net_factor=values["net_factor"], seed=values["seed"], workers=values["workers"] or os.cpu_count() or 1,
    )


# --- manifest ----------------------------------------------------------------------


class RunManifest:
    """JSON record of a command: resolved config, seed, artifacts and timings; rewritten atomically."""

    def __init__(self, run_dir: Path, command: str, config_path, values: dict):
        self.path = run_dir / "manifest.json"
        self.data = {
            "command": command,
            "config_path": str(config_path) if config_path else None,
            "config": values,
            "seed": values["seed"],
            "version": __version__,
            "status": "running",
            "artifacts": {},
            "timings": {},
        }
        if self.path.exists():
            previous = json.loads(self.path.read_text())
            self.data["artifacts"] = previous.get("artifacts", {})
            self.data["timings"] = previous.get("timings", {})
            self.data["history"] = previous.get("history", [])
        self.data.setdefault("history", []).append(command)
        self.write()

    def artifact(self, name: str, path: Path, **extra):
        self.data["artifacts"][name] = {"path": str(path), **extra}
        self.write()

    def timing(self, stage: str, seconds: float):
        self.data["timings"][stage] = round(seconds, 3)
        self.write()

    def finish(self, status: str = "complete"):
        self.data["status"] = status
        self.write()

    def write(self):
        tmp = self.path.with_suffix(".json.partial")
        tmp.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        os.replace(tmp, self.path)


def run_dir(args, values: dict) -> Path:
    if args.run_dir:
        d = Path(args.run_dir)
    else:
        d = Path(os.environ.get(OUT_ENV, "runs")) / f"{values['task']}-seed{values['seed']}"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _refuse_existing(path: Path, force: bool):
    if path.exists() and not force:
        raise UsageError(f"{path} exists; pass --force to overwrite")


# --- commands ----------------------------------------------------------------------


def cmd_generate(args, values, out: Path, manifest: RunManifest) -> int:
    config = pipeline_config(values)
    target = Path(args.output) if args.output else out / DATASET_FILE
    _refuse_existing(target, args.force)
    t = time.perf_counter()
    ds = generate_dataset(config)
    digest = ds.save(target)
    manifest.timing("generate", time.perf_counter() - t)
    manifest.artifact("dataset", target, sha256=digest, records=len(ds))
    labels = ds.labels
    print(f"wrote {len(ds)} records to {target} (sha256 {digest[:16]})")
    print(f"  train {len(ds.indices(split=TRAIN))}, test {len(ds.indices(split=TEST))}, redrawn {ds.resampled}")
    for j, name in enumerate(ds.schema.names):
        print(f"  {name:>8}: [{labels[:, j].min():+.4f}, {labels[:, j].max():+.4f}]" if len(ds) else f"  {name}: -")
    return 0


def _load_dataset(args, out: Path) -> tuple[Dataset, Path]:
    path = Path(args.dataset) if args.dataset else out / DATASET_FILE
    if not path.exists():
        raise UsageError(f"dataset {path} not found; run `generate` first or pass --dataset")
    return Dataset.load(path), path


def _check_schema(ds: Dataset, config: PipelineConfig):
    if ds.schema.names != config.schema.names:
        raise UsageError(f"dataset parameters {ds.schema.names} do not match task {config.schema.task_name}")
    if ds.camera != config.camera or ds.net_factor != config.net_factor:
        raise UsageError("dataset camera or resolution differs from the configuration")


def cmd_train(args, values, out: Path, manifest: RunManifest) -> int:
    config = pipeline_config(values)
    ds, _ = _load_dataset(args, out)
    _check_schema(ds, config)
    mode = args.mode
    weights_path = out / f"{mode}.weights"
    _refuse_existing(weights_path, args.force)
    meta = {"task": config.schema.task_name, "schema": config.schema.to_text(), "mode": mode}
    if mode == "baseline":
        epochs = values["baseline_epochs"]
        if epochs is None:
            epochs = config.train.epochs + config.outer_rounds_max * config.epochs_per_round
        config = dataclasses.replace(config, outer_rounds_max=0, train=dataclasses.replace(config.train, epochs=epochs))

    def on_round(report, w, dataset):
        regressor.save_weights(w, weights_path, {**meta, "round": report.round})
        manifest.artifact(f"{mode}_weights", weights_path, round=report.round)
        print(f"round {report.round}: n_pred={report.n_pred} train {report.train_loss:.6g} val {report.val_loss:.6g}")

    t = time.perf_counter()
    loop = train_loop(config, ds, on_round=on_round)
    manifest.timing(f"train_{mode}", time.perf_counter() - t)
    loss_path, rounds_path = out / f"{mode}_loss.csv", out / f"{mode}_rounds.csv"
    with open(loss_path, "w") as fh:
        fh.write("round,epoch,train_loss,val_loss\n")
        for r, e, tr, va in loop.loss_log:
            fh.write(f"{r},{e},{tr:.10g},{va:.10g}\n")
    write_run_report(loop, rounds_path)
    manifest.artifact(f"{mode}_loss", loss_path)
    manifest.artifact(f"{mode}_rounds", rounds_path, n_pred_sequence=loop.n_pred_sequence)
    print(f"wrote {weights_path}; n_pred sequence {loop.n_pred_sequence}")
    return 0


def _parse_weights(specs, out: Path) -> dict[str, Path]:
    if not specs:
        found = {m: out / f"{m}.weights" for m in ("kmn", "baseline") if (out / f"{m}.weights").exists()}
        if not found:
            raise UsageError(f"no weights given and none found in {out}")
        return found
    result = {}
    for spec in specs:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).stem, spec
        result[name] = Path(path)
    return result


def cmd_eval(args, values, out: Path, manifest: RunManifest) -> int:
    config = pipeline_config(values)
    if args.icp and not evaluate.icp_eligible(config.schema):
        raise UsageError(
            f"--icp is not available for {values['task']}: ICP fits rigid motions only, "
            "and this task has scale or configuration parameters"
        )
    ds, _ = _load_dataset(args, out)
    _check_schema(ds, config)
    weights = {}
    for name, path in _parse_weights(args.weights, out).items():
        if not path.exists():
            raise UsageError(f"weights file {path} not found")
        w, meta = regressor.load_weights(path)
        if w.spec != config.network_spec:
            raise UsageError(f"{path}: network {w.spec} does not fit task {values['task']}")
        if meta.get("schema") not in (None, config.schema.to_text()):
            raise UsageError(f"{path}: trained for a different parameter schema")
        weights[name] = w
    splits = [TEST] + ([TRAIN] if args.train_split else [])
    report_dir = out / "eval"
    t = time.perf_counter()
    report = evaluate.evaluate(
        ds, weights, n_pred=values["n_pred"], task=config.task, splits=splits, max_records=args.max_records,
        with_icp=args.icp, curve_iterations=args.curve_iterations, out_dir=report_dir,
    )
    manifest.timing("eval", time.perf_counter() - t)
    manifest.artifact("eval_report", report_dir / "report.md")
    print(report.markdown())
    return 0


def cmd_compare(args, values, out: Path, manifest: RunManifest) -> int:
    """Whole protocol in one process: generate, both trainings, evaluation (and ICP where eligible)."""
    config = pipeline_config(values)
    if args.icp and not evaluate.icp_eligible(config.schema):
        raise UsageError(f"--icp is not available for {values['task']} (scale or configuration parameters)")
    report_dir = out / "compare"
    result = evaluate.run_comparison(
        config, curve_iterations=args.curve_iterations, with_icp=args.icp or None, out_dir=report_dir
    )
    for stage, seconds in result.timings.items():
        manifest.timing(stage, seconds)
    manifest.artifact("dataset_digest", report_dir, sha256=result.dataset_digest)
    for name, w in (("kmn", result.loop.weights), ("baseline", result.baseline.weights)):
        path = report_dir / f"{name}.weights"
        regressor.save_weights(w, path, {"task": values["task"], "schema": config.schema.to_text(), "mode": name})
        manifest.artifact(f"{name}_weights", path)
    write_run_report(result.loop, report_dir / "kmn_rounds.csv")
    manifest.artifact("compare_report", report_dir / "report.md")
    print(result.report.markdown())
    return 0


def cmd_render_samples(args, values, out: Path, manifest: RunManifest) -> int:
    config = pipeline_config(values)
    target = Path(args.output) if args.output else out / "samples"
    target.mkdir(parents=True, exist_ok=True)
    schema, cam = config.schema, config.camera
    for i in range(args.count):
        rng = record_rng(values["seed"], i, stream=0x5A)
        params = sample_params(schema, rng)
        try:
            metric = rasterize(instantiate(config.task, params).triangles, cam)
        except GeometryError as exc:
            log.warning("sample %d skipped: %s", i, exc)
            continue
        depth = normalize_image(metric, cam)
        write_pgm(depth, target / f"sample{i:04d}.pgm")
        write_pgm(downsample(depth, config.net_factor), target / f"sample{i:04d}_net.pgm")
        text = "".join(f"{n} {v:.9g}\n" for n, v in zip(schema.names, params.vector))
        (target / f"sample{i:04d}.txt").write_text(text)
    manifest.artifact("samples", target, count=args.count)
    print(f"wrote {args.count} samples to {target}")
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "render-samples": cmd_render_samples,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--run-dir", help=f"output directory (default ${OUT_ENV}/<task>-seed<seed>)")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--range", action="append", metavar="NAME=LO,HI", help="override a parameter range")
    common.add_argument("--log-level", default="WARNING")
    for key, (typ, _) in CONFIG_KEYS.items():
        flag = "--" + key.replace("_", "-")
        common.add_argument(flag, dest=key, type=typ if key != "task" else str, default=None)
    common.add_argument("--n", dest="n_data", type=int, default=None, help="alias of --n-data")

    parser = argparse.ArgumentParser(prog="kmorph", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kmorph {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("generate", parents=[common], help="sample and render a dataset")
    p.add_argument("--output", help="dataset path (default <run-dir>/dataset.kmd)")
    p = sub.add_parser("train", parents=[common], help="train a network on a dataset")
    p.add_argument("--mode", choices=("kmn", "baseline"), default="kmn")
    p.add_argument("--dataset")
    p = sub.add_parser("eval", parents=[common], help="score trained networks")
    p.add_argument("--dataset")
    p.add_argument("--weights", action="append", metavar="NAME=PATH")
    p.add_argument("--icp", action="store_true", help="add the ICP column (rigid tasks only)")
    p.add_argument("--train-split", action="store_true", help="also score the training records")
    p.add_argument("--max-records", type=int)
    p.add_argument("--curve-iterations", type=int)
    p = sub.add_parser("compare", parents=[common], help="full network-vs-baseline comparison")
    p.add_argument("--icp", action="store_true")
    p.add_argument("--curve-iterations", type=int)
    p = sub.add_parser("render-samples", parents=[common], help="write sample depth images with labels")
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--output")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    manifest = None
    try:
        values = resolve_config(args)
        pipeline_config(values)  # validate before touching the file system
        out = run_dir(args, values)
        manifest = RunManifest(out, args.command, args.config, values)
        code = COMMANDS[args.command](args, values, out, manifest)
        manifest.finish()
        return code
    except (UsageError, SchemaError, ValueError) as exc:
        if manifest is not None:
            manifest.finish("failed")
        if isinstance(exc, (UsageError, SchemaError)) or manifest is None:
            print(f"kmorph {args.command}: error: {exc}", file=sys.stderr)
            return 2
        print(f"kmorph {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError, FloatingPointError) as exc:
        if manifest is not None:
            manifest.finish("failed")
        print(f"kmorph {args.command}: failed: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        if manifest is not None:
            manifest.finish("interrupted")
        return 1


if __name__ == "__main__":
    sys.exit(main())

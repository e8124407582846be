"""Error metrics, error-vs-iteration curves, ICP comparison and report files."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.spatial import cKDTree

from .icp import IcpResult, icp
from .kinematics import SCALE_NAMES, Affine3, ParamSchema, apply, extract_params, inverse
from .pipeline import (
    GENERATED,
    TEST,
    TRAIN,
    Dataset,
    LoopResult,
    PipelineConfig,
    compact,
    continue_baseline,
    estimates_from_transforms,
    generate_dataset,
    run_iterative_batch,
    train_loop,
)
from .regressor import TrainResult
from .regressor import NetworkWeights
from .render import PointCloud, backproject, rasterize, write_pgm
from .scene import TaskDef, prototype

log = logging.getLogger(__name__)

SPLIT_NAMES = {TRAIN: "train", TEST: "test"}


class IneligibleTaskError(ValueError):
    pass


# --- metrics -------------------------------------------------------------------


@dataclass(frozen=True)
class MaeResult:
    names: tuple[str, ...]
    values: np.ndarray  # per-parameter MAE
    count: int

    @property
    def total(self) -> float:
        return float(np.sum(self.values))

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.names, self.values.tolist()))


def mae(predictions, labels, schema: ParamSchema | None = None, names: Sequence[str] | None = None) -> MaeResult:
    """Per-parameter mean absolute error and its sum.

    ``predictions`` is an ``(N, D)`` array or a sequence of :class:`Affine3`;
    transforms are projected with ``extract_params`` and compared with the
    leading transform columns of ``labels``.
    """
    if len(predictions) == 0:
        raise ValueError("mae needs at least one prediction")
    if isinstance(predictions[0], Affine3):
        if schema is None:
            raise ValueError("a schema is needed to read parameters from transforms")
        predictions = np.array([extract_params(T, schema)[0] for T in predictions])
        labels = np.asarray(labels, dtype=float)[:, : schema.n]
        names = names or schema.transform_names
    pred = np.asarray(predictions, dtype=float)
    lab = np.asarray(labels, dtype=float)
    if pred.ndim == 1:
        pred, lab = pred[:, None], lab.reshape(-1, 1)
    if pred.shape != lab.shape:
        raise ValueError(f"prediction shape {pred.shape} does not match label shape {lab.shape}")
    if names is None:
        names = schema.names if schema is not None else [f"p{i}" for i in range(pred.shape[1])]
    if len(names) != pred.shape[1]:
        raise ValueError(f"{len(names)} names for {pred.shape[1]} parameters")
    return MaeResult(tuple(names), np.abs(pred - lab).mean(axis=0), len(pred))


def _points(x) -> np.ndarray:
    if isinstance(x, PointCloud):
        return x.valid_points
    return np.asarray(x, dtype=float).reshape(-1, 3)


def chamfer(cloud, reference) -> float:
    """Symmetric mean nearest-neighbour distance between two point sets, in meters."""
    a, b = _points(cloud), _points(reference)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer needs two nonempty point sets")
    d_ab = cKDTree(b).query(a)[0]
    d_ba = cKDTree(a).query(b)[0]
    return float(0.5 * (d_ab.mean() + d_ba.mean()))


# --- iterative evaluation ----------------------------------------------------------


@dataclass
class IterationSeries:
    """Summed parameter error after each of ``k = 1..max_iter`` predictions."""

    method: str
    mean: np.ndarray
    std: np.ndarray
    per_param: np.ndarray  # (max_iter, D) MAE
    chamfer_median: np.ndarray | None = None

    @property
    def iterations(self) -> np.ndarray:
        return np.arange(1, len(self.mean) + 1)

    def err(self, k: int) -> float:
        return float(self.mean[k - 1])


@dataclass
class MethodRun:
    estimates: dict[int, np.ndarray]  # k -> (N, D)
    final_depth: np.ndarray
    series: IterationSeries


def run_method(
    dataset: Dataset,
    indices: np.ndarray,
    w: NetworkWeights,
    max_iter: int,
    method: str = "kmn",
    reference: PointCloud | np.ndarray | None = None,
) -> MethodRun:
    """Predict every record in ``indices`` iteratively and keep the estimate after each step.

    With ``reference`` given, also track the median Chamfer distance between
    the moved clouds and that reference.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be at least 1")
    if len(indices) == 0:
        raise ValueError(f"{method}: no records to evaluate")
    schema = dataset.schema
    labels = dataset.labels[indices]
    clouds = [compact(dataset.cloud(i)) for i in indices]
    estimates: dict[int, np.ndarray] = {}
    chamfers = []
    ref = _points(reference) if reference is not None else None

    def on_step(k, totals, outputs):
        estimates[k] = estimates_from_transforms(totals, outputs, schema)
        if ref is not None:
            vals = [chamfer(apply(T, c), ref) for T, c in zip(totals, clouds) if c.valid.any()]
            chamfers.append(float(np.median(vals)) if vals else float("nan"))

    ident = [Affine3.identity()] * len(indices)
    final, _, _, _ = run_iterative_batch(
        dataset.depth[indices], clouds, ident, w, max_iter, schema, dataset.camera, dataset.net_factor,
        on_step=on_step, keep_clouds=False,
    )
    errs = np.stack([np.abs(estimates[k] - labels) for k in range(1, max_iter + 1)])  # (K, N, D)
    summed = errs.sum(axis=2)
    series = IterationSeries(
        method, summed.mean(axis=1), summed.std(axis=1), errs.mean(axis=1),
        np.array(chamfers) if ref is not None else None,
    )
    return MethodRun(estimates, final, series)


def error_vs_iterations(
    dataset: Dataset,
    weights: dict[str, NetworkWeights],
    max_iter: int,
    split: int = TEST,
    reference=None,
) -> dict[str, IterationSeries]:
    """Mean and standard deviation of the summed parameter error for ``k = 1..max_iter``, per network."""
    idx = dataset.indices(split=split, provenance=GENERATED)
    return {name: run_method(dataset, idx, w, max_iter, name, reference).series for name, w in weights.items()}


# --- ICP -------------------------------------------------------------------------


def icp_eligible(schema: ParamSchema) -> bool:
    """ICP is rigid: only tasks without configuration or scale parameters qualify."""
    scaled = any(n in SCALE_NAMES for n in schema.transform_names)
    return schema.m == 0 and not scaled


def prototype_cloud(task: TaskDef, camera) -> PointCloud:
    """Back-projected render of the undeformed prototype, the ICP target."""
    return compact(backproject(rasterize(prototype(task).triangles, camera), camera))


def icp_estimates(
    dataset: Dataset,
    indices: np.ndarray,
    target: PointCloud,
    max_iter: int = 100,
    tol: float = 1e-9,
    max_points: int | None = 2000,
) -> tuple[np.ndarray, list[IcpResult]]:
    """Register each record's cloud onto ``target`` and read the parameters of the inverse.

    ``max_points`` thins both clouds by a fixed stride to bound the cost.
    """
    schema = dataset.schema
    if not icp_eligible(schema):
        raise IneligibleTaskError(
            f"{schema.task_name}: ICP only applies to rigid tasks without configuration or scale parameters"
        )
    dst = _thin(_points(target), max_points)
    out = np.zeros((len(indices), schema.n))
    results = []
    for j, i in enumerate(indices):
        src = _thin(_points(dataset.cloud(i)), max_points)
        res = icp(src, dst, max_iter=max_iter, tol=tol)
        out[j] = extract_params(inverse(res.transform), schema)[0]
        results.append(res)
    return out, results


def _thin(points: np.ndarray, max_points: int | None) -> np.ndarray:
    if max_points is None or len(points) <= max_points:
        return points
    return points[:: int(np.ceil(len(points) / max_points))]


def write_icp_residuals(results: list[IcpResult], record_ids, path: str | Path):
    """One row per record and iteration: mean squared correspondence distance."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["record", "iteration", "mean_squared_distance", "converged"])
        for rid, res in zip(record_ids, results):
            for k, mse in enumerate(res.history):
                out.writerow([int(rid), k, f"{mse:.10g}", int(res.converged)])


# --- report ------------------------------------------------------------------------


@dataclass
class EvalReport:
    task_name: str
    parameter_names: tuple[str, ...]
    n_pred: int
    mae: dict[tuple[str, str], MaeResult] = field(default_factory=dict)  # (method, split) -> MAE
    series: dict[str, IterationSeries] = field(default_factory=dict)

    def summed(self, method: str, split: str = "test") -> float:
        return self.mae[(method, split)].total

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(m for m, _ in self.mae))

    def write_csv(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["method", "split", "parameter", "mae", "count"])
            for (method, split), res in self.mae.items():
                for name, v in res.as_dict().items():
                    out.writerow([method, split, name, f"{v:.10g}", res.count])
                out.writerow([method, split, "sum", f"{res.total:.10g}", res.count])

    def write_curves(self, path: str | Path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh)
            out.writerow(["method", "iteration", "mean", "std", "chamfer_median"])
            for name, s in self.series.items():
                for k in s.iterations:
                    ch = s.chamfer_median[k - 1] if s.chamfer_median is not None else float("nan")
                    out.writerow([name, int(k), f"{s.err(k):.10g}", f"{s.std[k - 1]:.10g}", f"{ch:.10g}"])

    def markdown(self) -> str:
        cols = [(m, s) for m in self.methods for s in ("train", "test") if (m, s) in self.mae]
        head = "| parameter | " + " | ".join(f"{m} ({s})" for m, s in cols) + " |"
        lines = [f"## {self.task_name}: mean absolute error, n_pred = {self.n_pred}", "", head,
                 "|" + "---|" * (len(cols) + 1)]
        for name in self.parameter_names:
            row = [self.mae[c].as_dict().get(name) for c in cols]
            lines.append(f"| {name} | " + " | ".join("-" if v is None else f"{v:.5f}" for v in row) + " |")
        lines.append("| sum | " + " | ".join(f"{self.mae[c].total:.5f}" for c in cols) + " |")
        lines.append("| records | " + " | ".join(str(self.mae[c].count) for c in cols) + " |")
        if self.series:
            lines += ["", "## Summed error by iteration (mean +- std)", ""]
            lines.append("| k | " + " | ".join(self.series) + " |")
            lines.append("|" + "---|" * (len(self.series) + 1))
            for k in range(1, max(len(s.mean) for s in self.series.values()) + 1):
                vals = [f"{s.err(k):.5f} +- {s.std[k - 1]:.5f}" if k <= len(s.mean) else "-" for s in self.series.values()]
                lines.append(f"| {k} | " + " | ".join(vals) + " |")
        return "\n".join(lines) + "\n"

    def write(self, directory: str | Path) -> dict[str, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        paths = {"csv": d / "report.csv", "markdown": d / "report.md", "curves": d / "curves.csv"}
        self.write_csv(paths["csv"])
        paths["markdown"].write_text(self.markdown())
        self.write_curves(paths["curves"])
        return paths


def write_gallery(
    directory: str | Path, dataset: Dataset, indices: np.ndarray, errors: np.ndarray, final_depth: np.ndarray, count: int = 3
) -> list[Path]:
    """PGM pairs (input, final moved image) of the ``count`` best and worst records by summed error."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    order = np.argsort(errors, kind="stable")
    picks = [("best", j) for j in order[:count]] + [("worst", j) for j in order[::-1][:count]]
    written = []
    for rank, (tag, j) in enumerate(picks):
        n = rank % count
        rid = int(indices[j])
        for kind, img in (("input", dataset.depth[rid]), ("final", final_depth[j])):
            p = d / f"{tag}{n}_record{rid}_{kind}.pgm"
            write_pgm(img, p)
            written.append(p)
    return written


def evaluate(
    dataset: Dataset,
    weights: dict[str, NetworkWeights],
    n_pred: int = 5,
    task: TaskDef | None = None,
    splits: Sequence[int] = (TEST,),
    max_records: int | None = None,
    with_icp: bool = False,
    icp_iterations: int = 100,
    curve_iterations: int | None = None,
    out_dir: str | Path | None = None,
) -> EvalReport:
    """MAE table for each network (and optionally ICP) plus the test-split iteration curves.

    Train-split metrics use the generated training records only. Curves run
    to ``max(n_pred, curve_iterations)`` predictions. With ``out_dir`` the
    report files, ICP residual CSV and galleries are written there.
    """
    max_iter = max(n_pred, curve_iterations or 0)
    schema = dataset.schema
    if with_icp and not icp_eligible(schema):
        raise IneligibleTaskError(
            f"{schema.task_name}: ICP is only evaluated on tasks without configuration or scale parameters"
        )
    report = EvalReport(schema.task_name, tuple(schema.names), n_pred)
    target = prototype_cloud(task, dataset.camera) if with_icp else None
    for split in splits:
        sname = SPLIT_NAMES[split]
        idx = dataset.indices(split=split, provenance=GENERATED)
        if max_records is not None:
            idx = idx[:max_records]
        labels = dataset.labels[idx]
        for name, w in weights.items():
            run = run_method(dataset, idx, w, max_iter, name)
            report.mae[(name, sname)] = mae(run.estimates[n_pred], labels, schema)
            if split == TEST:
                report.series[name] = run.series
                if out_dir is not None:
                    errs = np.abs(run.estimates[n_pred] - labels).sum(axis=1)
                    write_gallery(Path(out_dir) / "gallery" / name, dataset, idx, errs, run.final_depth)
        if with_icp:
            est, results = icp_estimates(dataset, idx, target, max_iter=icp_iterations)
            report.mae[("icp", sname)] = mae(est, labels[:, : schema.n], schema, schema.transform_names)
            if out_dir is not None:
                Path(out_dir).mkdir(parents=True, exist_ok=True)
                write_icp_residuals(results, idx, Path(out_dir) / f"icp_residuals_{sname}.csv")
    if out_dir is not None:
        report.write(out_dir)
    return report


# --- full comparison ---------------------------------------------------------------


@dataclass
class Comparison:
    config: PipelineConfig
    dataset_digest: str
    loop: LoopResult
    baseline: TrainResult
    report: EvalReport
    timings: dict[str, float]


def run_comparison(
    config: PipelineConfig,
    curve_iterations: int | None = None,
    with_icp: bool | None = None,
    icp_records: int | None = 200,
    out_dir: str | Path | None = None,
    dataset: Dataset | None = None,
) -> Comparison:
    """Generate, run the self-augmenting loop, train a budget-matched baseline and evaluate both.

    The baseline continues from the loop's initial network on the generated
    records alone for as many epochs as the augmentation rounds used.
    ``with_icp`` defaults to whether the task is eligible; ICP is scored on
    the first ``icp_records`` test records.
    """
    timings = {}
    t = time.perf_counter()
    ds = dataset if dataset is not None else generate_dataset(config)
    digest = ds.digest()
    timings["generate"] = time.perf_counter() - t
    t = time.perf_counter()
    loop = train_loop(config, ds)
    timings["train_kmn"] = time.perf_counter() - t
    t = time.perf_counter()
    extra_epochs = sum(r.epochs for r in loop.rounds if r.round > 0)
    baseline = continue_baseline(loop, config, extra_epochs)
    timings["train_baseline"] = time.perf_counter() - t
    t = time.perf_counter()
    weights = {"kmn": loop.weights, "baseline": baseline.weights}
    report = evaluate(ds, weights, config.n_pred_eval, curve_iterations=curve_iterations, out_dir=out_dir)
    use_icp = icp_eligible(config.schema) if with_icp is None else with_icp
    if use_icp:
        idx = ds.indices(split=TEST, provenance=GENERATED)[:icp_records]
        est, results = icp_estimates(ds, idx, prototype_cloud(config.task, ds.camera))
        report.mae[("icp", "test")] = mae(est, ds.labels[idx][:, : config.schema.n], config.schema, config.schema.transform_names)
        if out_dir is not None:
            write_icp_residuals(results, idx, Path(out_dir) / "icp_residuals_test.csv")
            report.write(out_dir)
    timings["evaluate"] = time.perf_counter() - t
    return Comparison(config, digest, loop, baseline, report, timings)

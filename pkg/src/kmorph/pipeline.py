"""Iterative prediction, self-augmenting training loop and dataset persistence."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import regressor
from .kinematics import Affine3, ParamSchema, apply, as_affine, compose, extract_params, inverse, parse_schema, to_affine
from .regressor import AdamState, NetworkSpec, NetworkWeights, TrainConfig
from .render import Camera, PointCloud, backproject, downsample, normalize_image, rasterize, splat
from .scene import GeometryError, TaskDef, instantiate, load_task, sample_params

log = logging.getLogger(__name__)

DATASET_MAGIC = b"KMND"
DATASET_VERSION = 1
GENERATED = 0
TRAIN, TEST = 0, 1
_SPLIT_STREAM = 0x5111
_VAL_STREAM = 0x7A1
_AUG_STREAM = 0xA06


class PredictionError(FloatingPointError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    task: TaskDef
    camera: Camera
    n_data: int = 4000
    n_aug: int = 800
    n_pred_eval: int = 5
    outer_rounds_max: int = 4
    stop_epsilon: float = 0.01
    train: TrainConfig = field(default_factory=TrainConfig)
    retrain_epochs: int | None = None
    split_fraction: float = 0.8
    net_factor: int = 4
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.n_aug > self.n_data:
            raise ValueError(f"n_aug ({self.n_aug}) must not exceed n_data ({self.n_data})")
        if not 0 < self.split_fraction <= 1:
            raise ValueError("split_fraction must lie in (0, 1]")
        if self.camera.width % self.net_factor or self.camera.height % self.net_factor:
            raise ValueError(f"net_factor {self.net_factor} does not divide the camera resolution")
        if self.n_data < 1:
            raise ValueError("n_data must be positive")

    @classmethod
    def for_task(cls, task: str | TaskDef, cloud_size=(256, 192), **kwargs) -> "PipelineConfig":
        task = load_task(task) if isinstance(task, str) else task
        camera = Camera.from_placement(task.camera, *cloud_size)
        return cls(task=task, camera=camera, **kwargs)

    @property
    def schema(self) -> ParamSchema:
        return self.task.schema

    @property
    def network_size(self) -> tuple[int, int]:
        """(width, height) of the network input."""
        return self.camera.width // self.net_factor, self.camera.height // self.net_factor

    @property
    def network_spec(self) -> NetworkSpec:
        w, h = self.network_size
        return NetworkSpec(w, h, self.task.channels, self.schema.dim)

    @property
    def epochs_per_round(self) -> int:
        return self.train.epochs if self.retrain_epochs is None else self.retrain_epochs


# --- dataset -----------------------------------------------------------------


@dataclass
class DataRecord:
    depth: np.ndarray
    cloud_depth: np.ndarray
    label: np.ndarray
    transform: Affine3
    residual: float
    provenance: int
    split: int


class Dataset:
    """Records stored column-wise; row ``i`` of every array is record ``i``.

    ``transforms`` holds the 3x4 label transform (row-major), ``labels`` the
    parameter vector (extracted theta, then gamma), ``provenance`` 0 for
    generated records and ``k`` for records added in augmentation round ``k``.
    """

    def __init__(self, schema: ParamSchema, camera: Camera, net_factor: int, seed: int, arrays=None, resampled: int = 0):
        self.schema = schema
        self.camera = camera
        self.net_factor = net_factor
        self.seed = seed
        self.resampled = resampled
        h, w = camera.height // net_factor, camera.width // net_factor
        empty = {
            "depth": np.zeros((0, h, w), np.float32),
            "cloud_depth": np.zeros((0, camera.height, camera.width), np.float32),
            "labels": np.zeros((0, schema.dim)),
            "transforms": np.zeros((0, 12)),
            "residual": np.zeros(0),
            "provenance": np.zeros(0, np.uint8),
            "split": np.zeros(0, np.uint8),
        }
        self.arrays = arrays if arrays is not None else empty

    def __len__(self):
        return len(self.arrays["labels"])

    def __getattr__(self, name):
        arrays = self.__dict__.get("arrays")
        if arrays is not None and name in arrays:
            return arrays[name]
        raise AttributeError(name)

    def record(self, i: int) -> DataRecord:
        a = self.arrays
        return DataRecord(
            a["depth"][i], a["cloud_depth"][i], a["labels"][i], Affine3.from_matrix(a["transforms"][i].reshape(3, 4)),
            float(a["residual"][i]), int(a["provenance"][i]), int(a["split"][i]),
        )

    def cloud(self, i: int) -> PointCloud:
        return backproject(self.arrays["cloud_depth"][i], self.camera)

    def indices(self, split: int | None = None, provenance: int | None = None) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        if split is not None:
            mask &= self.arrays["split"] == split
        if provenance is not None:
            mask &= self.arrays["provenance"] == provenance
        return np.flatnonzero(mask)

    def append(self, other: dict[str, np.ndarray]):
        if np.any(other["split"] != TRAIN):
            raise ValueError("only training records can be appended")
        self.arrays = {k: np.concatenate([v, other[k].astype(v.dtype, copy=False)]) for k, v in self.arrays.items()}

    # serialization

    def record_dtype(self) -> np.dtype:
        h, w = self.camera.height // self.net_factor, self.camera.width // self.net_factor
        return np.dtype(
            [
                ("depth", "<f4", (h, w)),
                ("cloud_depth", "<f4", (self.camera.height, self.camera.width)),
                ("labels", "<f8", (self.schema.dim,)),
                ("transforms", "<f8", (12,)),
                ("residual", "<f8"),
                ("provenance", "u1"),
                ("split", "u1"),
            ]
        )

    def header(self) -> dict:
        prov = self.arrays["provenance"]
        return {
            "task": self.schema.task_name,
            "schema": self.schema.to_text(),
            "camera": self.camera.to_text(),
            "seed": int(self.seed),
            "net_factor": int(self.net_factor),
            "network_resolution": [self.camera.width // self.net_factor, self.camera.height // self.net_factor],
            "cloud_resolution": [self.camera.width, self.camera.height],
            "counts": {
                "records": len(self),
                "generated": int(np.count_nonzero(prov == GENERATED)),
                "augmented": int(np.count_nonzero(prov != GENERATED)),
                "test": int(np.count_nonzero(self.arrays["split"] == TEST)),
            },
            "resampled": int(self.resampled),
        }

    def iter_bytes(self, chunk: int = 256) -> Iterator[bytes]:
        raw = json.dumps(self.header(), sort_keys=True).encode("utf-8")
        yield DATASET_MAGIC + struct.pack("<II", DATASET_VERSION, len(raw)) + raw
        dtype = self.record_dtype()
        for start in range(0, len(self), chunk):
            sl = slice(start, start + chunk)
            block = np.zeros(len(self.arrays["labels"][sl]), dtype=dtype)
            for name in dtype.names:
                block[name] = self.arrays[name][sl]
            yield block.tobytes()

    def digest(self) -> str:
        h = hashlib.sha256()
        for part in self.iter_bytes():
            h.update(part)
        return h.hexdigest()

    def save(self, path: str | Path) -> str:
        """Write the dataset; returns its sha256 digest."""
        h = hashlib.sha256()
        tmp = Path(f"{path}.partial")
        with open(tmp, "wb") as fh:
            for part in self.iter_bytes():
                h.update(part)
                fh.write(part)
        os.replace(tmp, path)
        return h.hexdigest()

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        with open(path, "rb") as fh:
            magic = fh.read(4)
            if magic != DATASET_MAGIC:
                raise ValueError(f"{path}: not a dataset file")
            version, hlen = struct.unpack("<II", fh.read(8))
            if version != DATASET_VERSION:
                raise ValueError(f"{path}: unsupported dataset version {version}")
            header = json.loads(fh.read(hlen))
            schema = parse_schema(header["schema"], header["task"])
            camera = Camera.from_text(header["camera"])
            ds = cls(schema, camera, header["net_factor"], header["seed"], resampled=header.get("resampled", 0))
            records = np.fromfile(fh, dtype=ds.record_dtype())
        if len(records) != header["counts"]["records"]:
            raise ValueError(f"{path}: truncated ({len(records)} of {header['counts']['records']} records)")
        ds.arrays = {name: np.ascontiguousarray(records[name]) for name in records.dtype.names}
        ds.arrays["labels"] = ds.arrays["labels"].reshape(len(records), schema.dim)
        return ds


def record_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, stream, index]))


def _generate_one(task: TaskDef, camera: Camera, net_factor: int, seed: int, index: int):
    rng = record_rng(seed, index)
    attempts = 0
    while True:
        attempts += 1
        params = sample_params(task.schema, rng)
        try:
            model = instantiate(task, params)
        except GeometryError:
            continue
        metric = rasterize(model.triangles, camera)
        if np.any(metric > 0):
            break
        if attempts > 1000:
            raise RuntimeError(f"record {index}: no visible sample after 1000 attempts")
    metric = metric.astype(np.float32)
    depth = downsample(normalize_image(metric, camera), net_factor).astype(np.float32)
    T = to_affine(params.theta, task.schema)
    return depth, metric, params.vector, T.matrix.ravel(), attempts - 1


def _generate_chunk(args):
    task, camera, net_factor, seed, indices = args
    return [_generate_one(task, camera, net_factor, seed, i) for i in indices]


def generate_dataset(config: PipelineConfig, seed: int | None = None, n: int | None = None, workers: int | None = None) -> Dataset:
    """Sample, instantiate and render ``n_data`` records; assign the train/test split."""
    seed = config.seed if seed is None else seed
    n = config.n_data if n is None else n
    workers = config.workers if workers is None else workers
    workers = max(1, workers or os.cpu_count() or 1)
    chunks = [list(range(s, min(n, s + 64))) for s in range(0, n, 64)]
    jobs = [(config.task, config.camera, config.net_factor, seed, c) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = [r for chunk in pool.map(_generate_chunk, jobs) for r in chunk]
    else:
        rows = [r for job in jobs for r in _generate_chunk(job)]
    schema = config.schema
    ds = Dataset(schema, config.camera, config.net_factor, seed, resampled=sum(r[4] for r in rows))
    n_test = int(round(n * (1.0 - config.split_fraction)))
    split = np.full(n, TRAIN, np.uint8)
    split[np.random.default_rng(np.random.SeedSequence([seed, _SPLIT_STREAM])).permutation(n)[:n_test]] = TEST
    h, w = ds.depth.shape[1:]
    ds.arrays = {
        "depth": np.stack([r[0] for r in rows]) if rows else np.zeros((0, h, w), np.float32),
        "cloud_depth": np.stack([r[1] for r in rows]) if rows else ds.cloud_depth,
        "labels": np.array([r[2] for r in rows]).reshape(n, schema.dim),
        "transforms": np.array([r[3] for r in rows]).reshape(n, 12),
        "residual": np.zeros(n),
        "provenance": np.zeros(n, np.uint8),
        "split": split,
    }
    if ds.resampled:
        log.info("generate_dataset: %d samples were redrawn (invisible or degenerate)", ds.resampled)
    return ds


# --- iterative prediction ------------------------------------------------------


def early_stop_check(theta_step, tol: float = 1e-3) -> bool:
    """True once a predicted step is within ``tol`` of the identity in every component."""
    step = np.asarray(theta_step, dtype=float)
    return bool(step.size == 0 or np.max(np.abs(step)) < tol)


@dataclass
class IterativeResult:
    depth: np.ndarray
    cloud: PointCloud
    transform: Affine3
    gamma: np.ndarray | None  # None when no prediction was made
    steps: list[np.ndarray] = field(default_factory=list)  # raw network outputs per iteration


def _split_output(vec: np.ndarray, schema: ParamSchema):
    return vec[: schema.n], vec[schema.n :]


def predict_iterative(
    depth: np.ndarray,
    cloud: PointCloud,
    theta_in,
    w: NetworkWeights,
    n_pred: int,
    schema: ParamSchema,
    camera: Camera,
    net_factor: int = 4,
    early_stop_tol: float | None = None,
    record_id=None,
) -> IterativeResult:
    """Predict, move the cloud by the inverse prediction, re-render; ``n_pred`` times.

    Returns the final depth image and cloud, the accumulated transform
    ``inv(T_k) ... inv(T_1) @ theta_in`` and the gamma of the last prediction.
    """
    d, p = depth, cloud
    total = as_affine(theta_in, schema)
    gamma = None
    steps = []
    for _ in range(n_pred):
        out = regressor.forward(d, w)
        if not np.all(np.isfinite(out)):
            raise PredictionError(f"record {record_id}: network returned {out}")
        theta_bar, gamma = _split_output(out, schema)
        steps.append(out)
        try:
            step_inv = inverse(to_affine(theta_bar, schema))
        except (ValueError, np.linalg.LinAlgError) as exc:
            raise PredictionError(f"record {record_id}: unusable prediction {theta_bar}: {exc}") from exc
        p = apply(step_inv, p)
        d = downsample(normalize_image(splat(p, camera), camera), net_factor)
        total = compose(step_inv, total)
        if early_stop_tol is not None and early_stop_check(theta_bar, early_stop_tol):
            break
    return IterativeResult(d, p, total, gamma, steps)


def run_iterative_batch(
    depths: np.ndarray,
    clouds: list[PointCloud],
    thetas_in: list[Affine3],
    w: NetworkWeights,
    n_pred: int,
    schema: ParamSchema,
    camera: Camera,
    net_factor: int,
    on_step: Callable[[int, list[Affine3], np.ndarray], None] | None = None,
    keep_clouds: bool = True,
):
    """Batched form of ``predict_iterative`` (one network call per iteration for all records).

    ``on_step(k, transforms, outputs)`` is called after iteration ``k``.
    Returns final depths, clouds, transforms and last outputs.
    """
    d = np.asarray(depths, dtype=np.float64)
    p = list(clouds)
    totals = list(thetas_in)
    outputs = None
    for k in range(1, n_pred + 1):
        outputs = regressor.predict(d, w)
        bad = ~np.all(np.isfinite(outputs), axis=1)
        if bad.any():
            raise PredictionError(f"records {np.flatnonzero(bad).tolist()}: non-finite network output")
        new_d = np.empty_like(d)
        for i, out in enumerate(outputs):
            step_inv = inverse(to_affine(out[: schema.n], schema))
            p[i] = apply(step_inv, p[i])
            new_d[i] = downsample(normalize_image(splat(p[i], camera), camera), net_factor)
            totals[i] = compose(step_inv, totals[i])
        d = new_d
        if on_step is not None:
            on_step(k, totals, outputs)
    return d, (p if keep_clouds else None), totals, outputs


def compact(cloud: PointCloud) -> PointCloud:
    """Drop invalid points; geometry operations treat the result identically."""
    return PointCloud(cloud.points[:, cloud.valid], np.ones(int(cloud.valid.sum()), dtype=bool))


def augment(
    dataset: Dataset,
    w: NetworkWeights,
    n_aug: int,
    n_pred: int,
    rng: np.random.Generator,
    round_index: int = 1,
    exclude: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """New training records from ``n_aug`` generated training records moved by the network.

    Each chosen record runs ``n_pred`` iterative predictions starting from its
    own label transform; the accumulated transform becomes the new label and
    the original gamma is kept.
    """
    schema, camera, f = dataset.schema, dataset.camera, dataset.net_factor
    pool = dataset.indices(split=TRAIN, provenance=GENERATED)
    if exclude is not None:
        pool = np.setdiff1d(pool, exclude)
    if n_aug > len(pool):
        raise ValueError(f"cannot draw {n_aug} records from {len(pool)} eligible training records")
    chosen = np.sort(rng.choice(pool, size=n_aug, replace=False))
    depths = dataset.depth[chosen]
    clouds = [compact(dataset.cloud(i)) for i in chosen]
    thetas = [Affine3.from_matrix(dataset.transforms[i].reshape(3, 4)) for i in chosen]
    out_d, out_p, totals, _ = run_iterative_batch(depths, clouds, thetas, w, n_pred, schema, camera, f)
    labels = np.zeros((n_aug, schema.dim))
    residual = np.zeros(n_aug)
    cloud_depth = np.zeros((n_aug, camera.height, camera.width), np.float32)
    for j, (i, T) in enumerate(zip(chosen, totals)):
        theta, residual[j] = extract_params(T, schema)
        labels[j] = np.concatenate([theta, dataset.labels[i][schema.n :]])
        cloud_depth[j] = splat(out_p[j], camera)
    log.info(
        "augment round %d: %d records, n_pred=%d, mean projection residual %.3g",
        round_index, n_aug, n_pred, residual.mean() if n_aug else 0.0,
    )
    return {
        "depth": out_d.astype(np.float32),
        "cloud_depth": cloud_depth,
        "labels": labels,
        "transforms": np.array([T.matrix.ravel() for T in totals]).reshape(n_aug, 12),
        "residual": residual,
        "provenance": np.full(n_aug, round_index, np.uint8),
        "split": np.full(n_aug, TRAIN, np.uint8),
        "source_index": chosen,
    }


# --- training loop -------------------------------------------------------------


@dataclass
class RoundReport:
    round: int
    n_pred: int
    n_train: int
    train_loss: float
    val_loss: float
    projection_residual: float
    epochs: int


@dataclass
class LoopResult:
    weights: NetworkWeights
    initial_weights: NetworkWeights
    initial_state: AdamState
    dataset: Dataset
    val_index: np.ndarray
    rounds: list[RoundReport]
    loss_log: list[tuple[int, int, float, float]]  # round, epoch, train loss, val loss

    @property
    def n_pred_sequence(self) -> list[int]:
        return [r.n_pred for r in self.rounds if r.round > 0]


def validation_split(dataset: Dataset, fraction: float, seed: int) -> np.ndarray:
    pool = dataset.indices(split=TRAIN, provenance=GENERATED)
    n_val = int(round(fraction * len(pool)))
    if n_val == 0 or n_val >= len(pool):
        return np.zeros(0, dtype=np.int64)
    rng = np.random.default_rng(np.random.SeedSequence([seed, _VAL_STREAM]))
    return np.sort(rng.choice(pool, size=n_val, replace=False))


def train_loop(
    config: PipelineConfig,
    dataset: Dataset | None = None,
    on_round: Callable[[RoundReport, NetworkWeights, Dataset], None] | None = None,
) -> LoopResult:
    """Generate, train, then repeatedly augment with growing ``n_pred`` and retrain.

    Rounds stop once the relative change of the validation loss drops below
    ``stop_epsilon`` or after ``outer_rounds_max`` rounds; with zero rounds the
    result is the network trained on the generated data alone.
    """
    if dataset is None:
        dataset = generate_dataset(config)
    spec = config.network_spec
    seed = config.train.seed
    val_idx = validation_split(dataset, config.train.validation_fraction, seed)

    def train_arrays():
        idx = np.setdiff1d(dataset.indices(split=TRAIN), val_idx)
        return dataset.depth[idx], dataset.labels[idx]

    val_x = dataset.depth[val_idx] if len(val_idx) else None
    val_y = dataset.labels[val_idx] if len(val_idx) else None
    x, y = train_arrays()
    if val_x is None:
        val_x, val_y = x, y
    result = regressor.train(x, y, spec, config.train, val_x, val_y, rng=np.random.default_rng([seed, 0]))
    rounds = [
        RoundReport(0, 0, len(x), _last(result.log, 1), _val(result, val_x, val_y), 0.0, config.train.epochs)
    ]
    loss_log = [(0, e, tr, va) for e, tr, va in result.log]
    initial_weights, initial_state = result.weights.copy(), result.state
    w, state = result.weights, result.state
    if on_round:
        on_round(rounds[-1], w, dataset)
    epoch = config.train.epochs
    n_pred = 1
    aug_rng = np.random.default_rng(np.random.SeedSequence([seed, _AUG_STREAM]))
    for k in range(1, config.outer_rounds_max + 1):
        new = augment(dataset, w, config.n_aug, n_pred, aug_rng, round_index=k, exclude=val_idx)
        residual = float(new["residual"].mean()) if len(new["residual"]) else 0.0
        new.pop("source_index")
        dataset.append(new)
        x, y = train_arrays()
        cfg = replace(config.train, epochs=config.epochs_per_round)
        result = regressor.train(
            x, y, spec, cfg, val_x, val_y, init=w, state=state, rng=np.random.default_rng([seed, k]), epoch_offset=epoch
        )
        epoch += cfg.epochs
        loss_log += [(k, e, tr, va) for e, tr, va in result.log]
        prev_val = rounds[-1].val_loss
        w, state = result.weights, result.state
        report = RoundReport(k, n_pred, len(x), _last(result.log, 1), _val(result, val_x, val_y), residual, cfg.epochs)
        rounds.append(report)
        log.info("round %d: n_pred=%d train %.5g val %.5g", k, n_pred, report.train_loss, report.val_loss)
        if on_round:
            on_round(report, w, dataset)
        if prev_val > 0 and abs(prev_val - report.val_loss) / prev_val < config.stop_epsilon:
            log.info("validation loss changed by less than %.3g; stopping", config.stop_epsilon)
            break
        n_pred += 1
    return LoopResult(w, initial_weights, initial_state, dataset, val_idx, rounds, loss_log)


def continue_baseline(loop: LoopResult, config: PipelineConfig, epochs: int) -> regressor.TrainResult:
    """Keep training the initial network on the generated data only, for a matched budget."""
    ds = loop.dataset
    idx = np.setdiff1d(ds.indices(split=TRAIN, provenance=GENERATED), loop.val_index)
    val = loop.val_index if len(loop.val_index) else idx
    cfg = replace(config.train, epochs=epochs)
    return regressor.train(
        ds.depth[idx], ds.labels[idx], config.network_spec, cfg, ds.depth[val], ds.labels[val],
        init=loop.initial_weights, state=loop.initial_state,
        rng=np.random.default_rng([config.train.seed, 0xBA5E]), epoch_offset=config.train.epochs,
    )


def _last(log_rows, col):
    return float(log_rows[-1][col]) if log_rows else float("nan")


def _val(result, val_x, val_y):
    return regressor.batched_loss(val_x, val_y, result.weights)


def write_run_report(loop: LoopResult, path: str | Path):
    with open(path, "w") as fh:
        fh.write("round,n_pred,n_train,epochs,train_loss,val_loss,projection_residual\n")
        for r in loop.rounds:
            fh.write(
                f"{r.round},{r.n_pred},{r.n_train},{r.epochs},{r.train_loss:.10g},{r.val_loss:.10g},{r.projection_residual:.6g}\n"
            )


# --- estimator -------------------------------------------------------------------


class KinematicMorphingNetwork(BaseEstimator):
    """Estimator around ``train_loop`` and ``predict_iterative``.

    ``fit`` takes a :class:`Dataset` (or generates one when given ``None``);
    ``predict`` takes a dataset or an ``(N, H, W)`` image stack with matching
    point clouds and returns ``(N, n + m)`` parameter estimates.
    """

    def __init__(
        self,
        task="box_a",
        n_data=4000,
        n_aug=800,
        n_pred=5,
        outer_rounds_max=4,
        stop_epsilon=0.01,
        epochs=30,
        retrain_epochs=None,
        learning_rate=1e-3,
        batch_size=64,
        validation_fraction=0.1,
        net_factor=4,
        cloud_size=(256, 192),
        random_state=0,
    ):
        self.task = task
        self.n_data = n_data
        self.n_aug = n_aug
        self.n_pred = n_pred
        self.outer_rounds_max = outer_rounds_max
        self.stop_epsilon = stop_epsilon
        self.epochs = epochs
        self.retrain_epochs = retrain_epochs
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.validation_fraction = validation_fraction
        self.net_factor = net_factor
        self.cloud_size = cloud_size
        self.random_state = random_state

    def make_config(self) -> PipelineConfig:
        seed = int(self.random_state or 0)
        train = TrainConfig(
            learning_rate=self.learning_rate, batch_size=self.batch_size, epochs=self.epochs,
            seed=seed, validation_fraction=self.validation_fraction,
        )
        return PipelineConfig.for_task(
            self.task, cloud_size=tuple(self.cloud_size), n_data=self.n_data, n_aug=self.n_aug,
            n_pred_eval=self.n_pred, outer_rounds_max=self.outer_rounds_max, stop_epsilon=self.stop_epsilon,
            train=train, retrain_epochs=self.retrain_epochs, net_factor=self.net_factor, seed=seed,
        )

    def fit(self, X=None, y=None):
        config = self.make_config()
        if X is not None and not isinstance(X, Dataset):
            raise TypeError("fit expects a Dataset (or None to generate one)")
        loop = train_loop(config, X)
        self.config_ = config
        self.weights_ = loop.weights
        self.rounds_ = loop.rounds
        self.loss_log_ = loop.loss_log
        self.dataset_ = loop.dataset
        return self

    def predict(self, X, clouds=None, n_pred=None):
        check_is_fitted(self, "weights_")
        cfg = self.config_
        if isinstance(X, Dataset):
            idx = np.arange(len(X))
            depths = X.depth[idx]
            clouds = [compact(X.cloud(i)) for i in idx]
        else:
            depths = np.asarray(X, dtype=float)
            if clouds is None or len(clouds) != len(depths):
                raise ValueError("predict needs one point cloud per depth image")
            clouds = [compact(c) for c in clouds]
        n_pred = self.n_pred if n_pred is None else n_pred
        ident = [Affine3.identity()] * len(depths)
        _, _, totals, outputs = run_iterative_batch(
            depths, clouds, ident, self.weights_, n_pred, cfg.schema, cfg.camera, cfg.net_factor, keep_clouds=False
        )
        return estimates_from_transforms(totals, outputs, cfg.schema)


def estimates_from_transforms(totals: list[Affine3], outputs: np.ndarray, schema: ParamSchema) -> np.ndarray:
    """Parameter estimates: theta of ``inverse(accumulated)``, gamma of the last output.

    Without any output (zero predictions) gamma is reported as zero.
    """
    out = np.zeros((len(totals), schema.dim))
    for i, T in enumerate(totals):
        out[i, : schema.n] = extract_params(inverse(T), schema)[0]
        if outputs is not None:
            out[i, schema.n :] = outputs[i, schema.n :]
    return out

"""Convolutional regressor from depth images to morphing parameters.

Five 3x3 conv layers (stride 1, zero padding 1, ReLU), each followed by a
2x2/2 max pool, then one linear output layer. Everything runs in float64 on
numpy; backpropagation is written out by hand.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

log = logging.getLogger(__name__)

N_CONV = 5
WEIGHTS_MAGIC = b"KMNW"
WEIGHTS_VERSION = 1


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, epoch: int | None = None):
        super().__init__(message)
        self.epoch = epoch


@dataclass(frozen=True)
class NetworkSpec:
    input_width: int = 64
    input_height: int = 48
    channels: tuple[int, ...] = (2, 4, 6, 8, 10)
    output_dim: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) != N_CONV:
            raise ValueError(f"need {N_CONV} conv layers, got channels {self.channels}")
        if min(self.channels) < 1 or self.output_dim < 1:
            raise ValueError("channel counts and output_dim must be positive")
        h, w = self.feature_map
        if h < 1 or w < 1:
            raise ValueError(f"input {self.input_width}x{self.input_height} is too small for {N_CONV} pools")

    @property
    def feature_map(self) -> tuple[int, int]:
        h, w = self.input_height, self.input_width
        for _ in range(N_CONV):
            h, w = h // 2, w // 2
        return h, w

    @property
    def feature_size(self) -> int:
        h, w = self.feature_map
        return self.channels[-1] * h * w

    def shapes(self) -> dict[str, tuple[int, ...]]:
        out = {}
        cin = 1
        for i, cout in enumerate(self.channels):
            out[f"conv{i}.weight"] = (cout, cin, 3, 3)
            out[f"conv{i}.bias"] = (cout,)
            cin = cout
        out["fc.weight"] = (self.output_dim, self.feature_size)
        out["fc.bias"] = (self.output_dim,)
        return out


@dataclass
class NetworkWeights:
    spec: NetworkSpec
    params: dict[str, np.ndarray]

    @classmethod
    def initialize(cls, spec: NetworkSpec, seed: int | np.random.Generator = 0) -> "NetworkWeights":
        """He-style fan-in scaling for conv kernels, 1/sqrt(fan_in) for the output layer; zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in spec.shapes().items():
            if name.endswith("bias"):
                params[name] = np.zeros(shape)
            elif name.startswith("conv"):
                fan_in = shape[1] * 9
                params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
            else:
                params[name] = rng.normal(0.0, np.sqrt(1.0 / shape[1]), size=shape)
        return cls(spec, params)

    @classmethod
    def zeros(cls, spec: NetworkSpec) -> "NetworkWeights":
        return cls(spec, {k: np.zeros(s) for k, s in spec.shapes().items()})

    def copy(self) -> "NetworkWeights":
        return NetworkWeights(self.spec, {k: v.copy() for k, v in self.params.items()})

    @property
    def count(self) -> int:
        return sum(v.size for v in self.params.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.params.values()])

    def __getitem__(self, name):
        return self.params[name]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    validation_fraction: float = 0.1
    lr_decay: float = 1.0  # learning rate multiplier applied after every epoch

    def __post_init__(self):
        if self.learning_rate <= 0 or self.adam_epsilon <= 0:
            raise ValueError("learning rate and epsilon must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ValueError("ADAM betas must lie in [0, 1)")
        if not 0 < self.validation_fraction < 1:
            raise ValueError("validation_fraction must lie in (0, 1)")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, w: NetworkWeights) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in w.params.items()}, {k: np.zeros_like(p) for k, p in w.params.items()})


# --- layers --------------------------------------------------------------


def _conv_forward(x, kernel, bias):
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(padded, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
    out = cols @ kernel.reshape(kernel.shape[0], -1).T + bias
    return out.reshape(n, h, w, -1).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, kernel, cols, need_input_grad=True):
    n, c, h, w = x_shape
    f = kernel.shape[0]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, f)
    dkernel = (d.T @ cols).reshape(kernel.shape)
    dbias = d.sum(axis=0)
    if not need_input_grad:
        return None, dkernel, dbias
    dcols = (d @ kernel.reshape(f, -1)).reshape(n, h, w, c, 3, 3)
    dpad = np.zeros((n, c, h + 2, w + 2))
    for i in range(3):
        for j in range(3):
            dpad[:, :, i : i + h, j : j + w] += dcols[..., i, j].transpose(0, 3, 1, 2)
    return dpad[:, :, 1:-1, 1:-1], dkernel, dbias


def _pool_forward(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    windows = (
        x[:, :, : 2 * h2, : 2 * w2]
        .reshape(n, c, h2, 2, w2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h2, w2, 4)
    )
    # argmax takes the first maximum: ties go to the top-left-most input
    idx = windows.argmax(axis=-1)
    return np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0], idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    h2, w2 = h // 2, w // 2
    g = np.zeros((n, c, h2, w2, 4))
    np.put_along_axis(g, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(x_shape)
    dx[:, :, : 2 * h2, : 2 * w2] = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * h2, 2 * w2)
    return dx


def _as_batch(images, spec: NetworkSpec) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim == 3:
        x = x[:, None]
    if x.shape[1:] != (1, spec.input_height, spec.input_width):
        raise ValueError(
            f"expected images of shape ({spec.input_height}, {spec.input_width}), got {np.shape(images)}"
        )
    return x, single


def _forward_cached(x, w: NetworkWeights):
    cache = []
    h = x
    for i in range(N_CONV):
        z, cols = _conv_forward(h, w.params[f"conv{i}.weight"], w.params[f"conv{i}.bias"])
        a = np.maximum(z, 0.0)
        p, idx = _pool_forward(a)
        cache.append((h.shape, cols, z, idx))
        h = p
    feat = h.reshape(h.shape[0], -1)
    out = feat @ w.params["fc.weight"].T + w.params["fc.bias"]
    return out, (cache, h.shape, feat)


def forward(images, w: NetworkWeights) -> np.ndarray:
    """Predict parameter vectors; a single ``(H, W)`` image gives a ``(D,)`` vector."""
    x, single = _as_batch(images, w.spec)
    out, _ = _forward_cached(x, w)
    return out[0] if single else out


def loss(images, labels, w: NetworkWeights) -> float:
    """Batch mean of the squared Euclidean error over all outputs."""
    pred = forward(images, w)
    labels = np.asarray(labels, dtype=float).reshape(pred.shape)
    return float(np.mean(np.sum((pred - labels) ** 2, axis=-1)))


def gradients(images, labels, w: NetworkWeights, scale: float = 1.0) -> tuple[float, dict[str, np.ndarray]]:
    """Loss (times ``scale``) and its exact gradient with respect to every parameter."""
    x, _ = _as_batch(images, w.spec)
    out, (cache, pooled_shape, feat) = _forward_cached(x, w)
    labels = np.asarray(labels, dtype=float).reshape(out.shape)
    n = x.shape[0]
    diff = out - labels
    value = scale * float(np.mean(np.sum(diff**2, axis=1)))
    dout = (2.0 * scale / n) * diff
    grads = {"fc.weight": dout.T @ feat, "fc.bias": dout.sum(axis=0)}
    dh = (dout @ w.params["fc.weight"]).reshape(pooled_shape)
    for i in reversed(range(N_CONV)):
        in_shape, cols, z, idx = cache[i]
        da = _pool_backward(dh, idx, z.shape)
        dz = da * (z > 0)
        dh, dk, db = _conv_backward(dz, in_shape, w.params[f"conv{i}.weight"], cols, need_input_grad=i > 0)
        grads[f"conv{i}.weight"] = dk
        grads[f"conv{i}.bias"] = db
    return value, {k: grads[k] for k in w.params}


def adam_step(
    w: NetworkWeights, grads: dict[str, np.ndarray], state: AdamState, config: TrainConfig, learning_rate: float | None = None
):
    """One bias-corrected ADAM update; returns new weights and state."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDiverged(f"non-finite gradient in {name} ({bad} of {g.size} entries) at step {state.t + 1}")
    b1, b2 = config.adam_beta1, config.adam_beta2
    lr = config.learning_rate if learning_rate is None else learning_rate
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in w.params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1 - b1) * g
        v = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + config.adam_epsilon)
        m_new[name], v_new[name] = m, v
    return NetworkWeights(w.spec, new_params), AdamState(m_new, v_new, t)


def batched_loss(images, labels, w: NetworkWeights, batch_size: int = 256) -> float:
    n = len(images)
    if n == 0:
        return float("nan")
    total = 0.0
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        total += loss(images[sl], labels[sl], w) * len(images[sl])
    return total / n


def predict(images, w: NetworkWeights, batch_size: int = 256) -> np.ndarray:
    images = np.asarray(images)
    if images.ndim == 2:
        return forward(images, w)
    return np.concatenate([forward(images[s : s + batch_size], w) for s in range(0, len(images), batch_size)])


@dataclass
class TrainResult:
    weights: NetworkWeights
    log: list[tuple[int, float, float]] = field(default_factory=list)  # epoch, train loss, val loss
    best_epoch: int = 0
    state: AdamState | None = None

    @property
    def best_val_loss(self) -> float:
        return min((v for _, _, v in self.log), default=float("nan"))


def train(
    images,
    labels,
    spec: NetworkSpec,
    config: TrainConfig,
    val_images=None,
    val_labels=None,
    init: NetworkWeights | None = None,
    state: AdamState | None = None,
    rng: np.random.Generator | None = None,
    epoch_offset: int = 0,
) -> TrainResult:
    """Mini-batch ADAM; keeps the weights with the lowest validation loss.

    Without explicit validation data, ``validation_fraction`` of the input is
    held out. ``init``/``state`` continue an earlier run (fine-tuning).
    """
    images = np.asarray(images)
    labels = np.asarray(labels, dtype=float)
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.shape != (len(images), spec.output_dim):
        raise ValueError(f"labels have shape {labels.shape}, expected ({len(images)}, {spec.output_dim})")
    _as_batch(images[:1], spec)
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    if val_images is None:
        n_val = int(round(config.validation_fraction * len(images)))
        if n_val == 0 or n_val == len(images):
            val_images, val_labels = images, labels
        else:
            perm = rng.permutation(len(images))
            val_idx, train_idx = np.sort(perm[:n_val]), np.sort(perm[n_val:])
            val_images, val_labels = images[val_idx], labels[val_idx]
            images, labels = images[train_idx], labels[train_idx]
    w = init.copy() if init is not None else NetworkWeights.initialize(spec, config.seed)
    if w.spec != spec:
        raise ValueError(f"initial weights were built for {w.spec}, not {spec}")
    state = state if state is not None else AdamState.zeros_like(w)
    best = TrainResult(w.copy(), [], epoch_offset, state)
    best_val = batched_loss(val_images, val_labels, w) if config.epochs == 0 else np.inf
    n = len(images)
    for epoch in range(epoch_offset + 1, epoch_offset + config.epochs + 1):
        lr = config.learning_rate * config.lr_decay ** (epoch - epoch_offset - 1)
        order = rng.permutation(n)
        running = 0.0
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start : start + config.batch_size])
            value, grads = gradients(images[idx], labels[idx], w)
            if not np.isfinite(value):
                raise TrainingDiverged(f"training loss became {value} in epoch {epoch}", epoch)
            w, state = adam_step(w, grads, state, config, lr)
            running += value * len(idx)
        train_loss = running / n
        val_loss = batched_loss(val_images, val_labels, w)
        if not np.isfinite(val_loss):
            raise TrainingDiverged(f"validation loss became {val_loss} in epoch {epoch}", epoch)
        best.log.append((epoch, train_loss, val_loss))
        log.debug("epoch %d train %.6g val %.6g", epoch, train_loss, val_loss)
        if val_loss < best_val:
            best_val = val_loss
            best.weights, best.best_epoch = w.copy(), epoch
    best.state = state
    return best


# --- persistence -----------------------------------------------------------


def save_weights(w: NetworkWeights, path: str | Path, metadata: dict | None = None):
    """Binary weights file: magic, version, JSON header, then float64 blocks in header order."""
    header = {
        "spec": asdict(w.spec),
        "blocks": [[name, list(arr.shape)] for name, arr in w.params.items()],
        "metadata": metadata or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, len(raw)))
        fh.write(raw)
        for arr in w.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_weights(path: str | Path) -> tuple[NetworkWeights, dict]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValueError(f"{path}: not a weights file")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != WEIGHTS_VERSION:
        raise ValueError(f"{path}: unsupported weights version {version}")
    header = json.loads(data[12 : 12 + hlen])
    spec_fields = header["spec"]
    spec = NetworkSpec(**{**spec_fields, "channels": tuple(spec_fields["channels"])})
    offset = 12 + hlen
    params = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        offset += 8 * count
    w = NetworkWeights(spec, params)
    if {k: tuple(v.shape) for k, v in params.items()} != spec.shapes():
        raise ValueError(f"{path}: weight blocks do not match the stored network spec")
    return w, header["metadata"]


def write_loss_log(rows, path: str | Path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, va in rows:
            fh.write(f"{epoch},{tr:.10g},{va:.10g}\n")


# --- estimator -----------------------------------------------------------


class DepthRegressor(RegressorMixin, BaseEstimator):
    """scikit-learn wrapper: ``X`` is an ``(N, H, W)`` stack of normalized depth images."""

    def __init__(
        self,
        channels=(2, 4, 6, 8, 10),
        learning_rate=1e-3,
        beta1=0.9,
        beta2=0.999,
        epsilon=1e-8,
        batch_size=64,
        epochs=30,
        validation_fraction=0.1,
        random_state=0,
        warm_start=False,
    ):
        self.channels = channels
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.random_state = random_state
        self.warm_start = warm_start

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            self.learning_rate, self.beta1, self.beta2, self.epsilon,
            self.batch_size, self.epochs, int(self.random_state or 0), self.validation_fraction,
        )

    def fit(self, X, y):
        X = _check_images(X)
        y = np.asarray(y, dtype=float)
        if y.ndim == 1:
            y = y[:, None]
        if len(y) != len(X):
            raise ValueError(f"X has {len(X)} images but y has {len(y)} rows")
        spec = NetworkSpec(X.shape[2], X.shape[1], tuple(self.channels), y.shape[1])
        init = state = None
        if self.warm_start and hasattr(self, "weights_") and self.weights_.spec == spec:
            init, state = self.weights_, self.adam_state_
        result = train(X, y, spec, self._train_config(), init=init, state=state)
        self.weights_ = result.weights
        self.adam_state_ = result.state
        self.loss_log_ = result.log
        self.best_epoch_ = result.best_epoch
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def predict(self, X):
        check_is_fitted(self, "weights_")
        X = _check_images(X)
        out = predict(X, self.weights_)
        return out[:, 0] if out.shape[1] == 1 else out


def _check_images(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise ValueError(f"expected an (N, H, W) image stack, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("depth images contain non-finite values")
    return X


def with_output_dim(spec: NetworkSpec, output_dim: int) -> NetworkSpec:
    return replace(spec, output_dim=output_dim)

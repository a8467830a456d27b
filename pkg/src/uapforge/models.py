"""Differentiable victim classifiers: forward pass, exact gradients, Adam,
and training with class weights and early stopping.

Two model kinds are supported. ``affine`` is a softmax regression on the
flattened trial. ``small-cnn`` follows the shallow band-power layout:
temporal convolution, spatial filter across channels, squaring, mean pooling
over time, log activation, dense softmax. All arithmetic is float64.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as kernels
from .errors import FormatError, NumericalError, ShapeError

AFFINE = "affine"
SMALL_CNN = "small-cnn"

LOG_FLOOR = 1e-12

GRAD_LOGIT = "logit"
GRAD_LOG_PROB = "log_prob"
GRAD_NEG_LOG_PROB = "neg_log_prob"


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; array shapes are fully determined by it."""

    kind: str
    input_channels: int
    input_samples: int
    num_classes: int
    temporal_filters: int = 8
    temporal_kernel_len: int = 17
    pool_len: int = 8
    pool_stride: int = 4
    log_epsilon: float = 1e-6

    def __post_init__(self):
        if self.kind not in (AFFINE, SMALL_CNN):
            raise FormatError(f"unknown model kind {self.kind!r}")
        if min(self.input_channels, self.input_samples) < 1:
            raise ShapeError("input dimensions must be positive")
        if self.num_classes < 2:
            raise ShapeError("need at least 2 classes")
        if self.kind == SMALL_CNN:
            if min(self.temporal_filters, self.temporal_kernel_len,
                   self.pool_len, self.pool_stride) < 1:
                raise ShapeError("small-cnn layer sizes must be positive")
            if self.temporal_kernel_len > self.input_samples:
                raise ShapeError("temporal kernel longer than the trial")
            if self.pooled_out < 1:
                raise ShapeError("pooling leaves no output samples")
            if self.log_epsilon <= 0:
                raise ShapeError("log_epsilon must be positive")

    @classmethod
    def affine(cls, channels: int, samples: int, num_classes: int) -> "ModelSpec":
        return cls(AFFINE, channels, samples, num_classes)

    @classmethod
    def small_cnn(cls, channels: int, samples: int, num_classes: int, **kw) -> "ModelSpec":
        return cls(SMALL_CNN, channels, samples, num_classes, **kw)

    @property
    def conv_out(self) -> int:
        return self.input_samples - self.temporal_kernel_len + 1

    @property
    def pooled_out(self) -> int:
        return (self.conv_out - self.pool_len) // self.pool_stride + 1

    @property
    def feature_dim(self) -> int:
        return self.temporal_filters * self.pooled_out

    def to_dict(self) -> dict:
        d = {
            "kind": self.kind,
            "input_channels": self.input_channels,
            "input_samples": self.input_samples,
            "num_classes": self.num_classes,
        }
        if self.kind == SMALL_CNN:
            d.update(
                temporal_filters=self.temporal_filters,
                temporal_kernel_len=self.temporal_kernel_len,
                pool_len=self.pool_len,
                pool_stride=self.pool_stride,
                log_epsilon=self.log_epsilon,
            )
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        try:
            kind = d["kind"]
        except (TypeError, KeyError):
            raise FormatError("model spec is missing the kind tag")
        if kind not in (AFFINE, SMALL_CNN):
            raise FormatError(f"unknown model kind {kind!r}")
        keys = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in keys})


def array_shapes(spec: ModelSpec) -> dict[str, tuple[int, ...]]:
    """Layer name -> array shape, in a fixed order."""
    c, t, k = spec.input_channels, spec.input_samples, spec.num_classes
    if spec.kind == AFFINE:
        return {"weight": (k, c * t), "bias": (k,)}
    return {
        "temporal_w": (spec.temporal_filters, spec.temporal_kernel_len),
        "temporal_b": (spec.temporal_filters,),
        "spatial_w": (spec.temporal_filters, c),
        "spatial_b": (spec.temporal_filters,),
        "dense_w": (k, spec.feature_dim),
        "dense_b": (k,),
    }


# fan_in/fan_out per weight array, used by the uniform init bound
def _fans(spec: ModelSpec) -> dict[str, tuple[int, int]]:
    c, t, k = spec.input_channels, spec.input_samples, spec.num_classes
    if spec.kind == AFFINE:
        return {"weight": (c * t, k)}
    return {
        "temporal_w": (spec.temporal_kernel_len, spec.temporal_filters),
        "spatial_w": (c, spec.temporal_filters),
        "dense_w": (spec.feature_dim, k),
    }


@dataclass
class ModelParams:
    spec: ModelSpec
    arrays: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.spec, {k: v.copy() for k, v in self.arrays.items()})


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform weights in [-s, s] with s = sqrt(6 / (fan_in + fan_out)); zero biases."""
    rng = np.random.default_rng(seed)
    fans = _fans(spec)
    arrays = {}
    for name, shape in array_shapes(spec).items():
        if name in fans:
            fan_in, fan_out = fans[name]
            s = math.sqrt(6.0 / (fan_in + fan_out))
            arrays[name] = rng.uniform(-s, s, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return ModelParams(spec, arrays)


def validate_trial(spec: ModelSpec, trial: np.ndarray) -> np.ndarray:
    trial = np.asarray(trial, dtype=np.float64)
    if trial.shape != (spec.input_channels, spec.input_samples):
        raise ShapeError(
            f"trial shape {trial.shape} does not match spec "
            f"({spec.input_channels}, {spec.input_samples})"
        )
    if not np.isfinite(trial).all():
        raise NumericalError("trial contains non-finite values")
    return trial


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _pool_forward(e: np.ndarray, pool_len: int, pool_stride: int) -> np.ndarray:
    win = np.lib.stride_tricks.sliding_window_view(e, pool_len, axis=2)
    return win[:, :, ::pool_stride, :].mean(axis=3)


def _pool_backward(dp: np.ndarray, conv_out: int, pool_len: int, pool_stride: int) -> np.ndarray:
    n, k, t2 = dp.shape
    de = np.zeros((n, k, conv_out))
    for j in range(t2):
        de[:, :, j * pool_stride : j * pool_stride + pool_len] += dp[:, :, j : j + 1] / pool_len
    return de


def _cnn_forward(params: ModelParams, x: np.ndarray, check: bool = False):
    """Forward pass of the small CNN on a batch; returns logits and a cache."""
    a = params.arrays
    spec = params.spec
    u = kernels.temporal_conv_forward(x, a["temporal_w"], a["temporal_b"])
    v = np.einsum("nkct,kc->nkt", u, a["spatial_w"], optimize=True)
    v += a["spatial_b"][None, :, None]
    e = v * v
    p = _pool_forward(e, spec.pool_len, spec.pool_stride)
    feat = np.log(np.maximum(p, spec.log_epsilon)).reshape(x.shape[0], -1)
    z = feat @ a["dense_w"].T + a["dense_b"]
    if check:
        for name, arr in (("temporal conv", u), ("spatial filter", v),
                          ("mean pool", p), ("dense", z)):
            if not np.isfinite(arr).all():
                raise NumericalError(f"non-finite values after {name} layer")
    return z, (x, u, v, p, feat)


def _cnn_backward(params: ModelParams, cache, dz: np.ndarray, want_input: bool, want_params: bool):
    """Backward pass from a logit cotangent dz (n, K)."""
    a = params.arrays
    spec = params.spec
    x, u, v, p, feat = cache
    grads: dict[str, np.ndarray] = {}
    if want_params:
        grads["dense_w"] = dz.T @ feat
        grads["dense_b"] = dz.sum(axis=0)
    dfeat = dz @ a["dense_w"]
    df = dfeat.reshape(p.shape)
    dp = np.where(p > spec.log_epsilon, df / np.maximum(p, spec.log_epsilon), 0.0)
    de = _pool_backward(dp, spec.conv_out, spec.pool_len, spec.pool_stride)
    dv = 2.0 * v * de
    if want_params:
        grads["spatial_w"] = np.einsum("nkt,nkct->kc", dv, u, optimize=True)
        grads["spatial_b"] = dv.sum(axis=(0, 2))
    du = np.einsum("nkt,kc->nkct", dv, a["spatial_w"], optimize=True)
    du = np.ascontiguousarray(du)
    dx = None
    if want_input:
        dx = kernels.temporal_conv_backward_input(a["temporal_w"], du, spec.input_samples)
    if want_params:
        dw, db = kernels.temporal_conv_backward_weights(x, du)
        grads["temporal_w"] = dw
        grads["temporal_b"] = db
    return dx, grads


def _affine_forward(params: ModelParams, x: np.ndarray):
    a = params.arrays
    flat = x.reshape(x.shape[0], -1)
    z = flat @ a["weight"].T + a["bias"]
    return z, flat


def logits_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    if params.spec.kind == AFFINE:
        return _affine_forward(params, x)[0]
    return _cnn_forward(params, x)[0]


def forward_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """Class probabilities for a batch of trials (n, C, T) -> (n, K)."""
    return softmax(logits_batch(params, x))


def forward(params: ModelParams, trial: np.ndarray) -> np.ndarray:
    """Class probabilities for a single trial, with per-layer finite checks."""
    trial = validate_trial(params.spec, trial)
    x = trial[None]
    if params.spec.kind == AFFINE:
        z = _affine_forward(params, x)[0]
        if not np.isfinite(z).all():
            raise NumericalError("non-finite values after affine layer")
    else:
        z = _cnn_forward(params, x, check=True)[0]
    return softmax(z)[0]


def predict_batch(params: ModelParams, x: np.ndarray) -> np.ndarray:
    return np.argmax(logits_batch(params, x), axis=1)


def predict_label(params: ModelParams, trial: np.ndarray) -> int:
    """Argmax class; ties resolve to the smallest class index."""
    return int(np.argmax(forward(params, trial)))


def class_weights(labels: np.ndarray, num_classes: int, mode: str = "inverse") -> np.ndarray:
    """Per-class loss weights: inverse of the class proportion, rescaled to mean 1."""
    if mode == "uniform":
        return np.ones(num_classes)
    if mode != "inverse":
        raise ValueError(f"unknown class weighting {mode!r}")
    counts = np.bincount(labels, minlength=num_classes).astype(np.float64)
    if (counts == 0).any():
        raise ValueError("every class must appear in the training labels")
    w = counts.sum() / counts
    return w / w.mean()


def _loss_dz(params: ModelParams, x: np.ndarray, labels: np.ndarray, weights: np.ndarray):
    """Weighted cross entropy on a batch plus the logit cotangent of its mean."""
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= params.spec.num_classes:
        raise ValueError("label out of range")
    if params.spec.kind == AFFINE:
        z, flat = _affine_forward(params, x)
        cache = flat
    else:
        z, cache = _cnn_forward(params, x)
    probs = softmax(z)
    n = x.shape[0]
    idx = np.arange(n)
    py = probs[idx, labels]
    w = weights[labels]
    loss = float(np.mean(-w * np.log(np.maximum(py, LOG_FLOOR))))
    dz = probs.copy()
    dz[idx, labels] -= 1.0
    dz *= (w * (py > LOG_FLOOR))[:, None]
    dz /= n
    return loss, dz, cache


def weighted_cross_entropy(params: ModelParams, trials: np.ndarray,
                           labels: np.ndarray, weights: np.ndarray) -> float:
    """Mean over trials of -weight[y] * log(p_y), log floored at 1e-12."""
    trials = np.asarray(trials, dtype=np.float64)
    if trials.ndim != 3 or trials.shape[0] == 0:
        raise ShapeError("need a non-empty (n, C, T) batch")
    return _loss_dz(params, trials, labels, weights)[0]


def _backward(params: ModelParams, cache, dz, want_input: bool, want_params: bool):
    if params.spec.kind == AFFINE:
        grads = {}
        if want_params:
            grads = {"weight": dz.T @ cache, "bias": dz.sum(axis=0)}
        dx = None
        if want_input:
            n = dz.shape[0]
            dx = (dz @ params.arrays["weight"]).reshape(
                n, params.spec.input_channels, params.spec.input_samples)
        return dx, grads
    return _cnn_backward(params, cache, dz, want_input, want_params)


def grad_params(params: ModelParams, trials: np.ndarray, labels: np.ndarray,
                weights: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradient of weighted_cross_entropy with respect to every array."""
    trials = np.asarray(trials, dtype=np.float64)
    _, dz, cache = _loss_dz(params, trials, labels, weights)
    return _backward(params, cache, dz, want_input=False, want_params=True)[1]


def _selector_dz(probs: np.ndarray, select: str, class_indices: np.ndarray) -> np.ndarray:
    """Logit cotangent for the chosen per-trial scalar."""
    n, k = probs.shape
    idx = np.arange(n)
    onehot = np.zeros((n, k))
    onehot[idx, class_indices] = 1.0
    if select == GRAD_LOGIT:
        return onehot
    live = (probs[idx, class_indices] > LOG_FLOOR)[:, None]
    if select == GRAD_LOG_PROB:
        return (onehot - probs) * live
    if select == GRAD_NEG_LOG_PROB:
        return (probs - onehot) * live
    raise ValueError(f"unknown gradient selector {select!r}")


def grad_input_batch(params: ModelParams, trials: np.ndarray, select: str,
                     class_indices: np.ndarray) -> np.ndarray:
    """Per-trial input gradients of the selected scalar, shape (n, C, T)."""
    trials = np.asarray(trials, dtype=np.float64)
    class_indices = np.asarray(class_indices)
    if class_indices.min() < 0 or class_indices.max() >= params.spec.num_classes:
        raise ValueError("class index out of range")
    if params.spec.kind == AFFINE:
        z, cache = _affine_forward(params, trials)
    else:
        z, cache = _cnn_forward(params, trials)
    dz = _selector_dz(softmax(z), select, class_indices)
    return _backward(params, cache, dz, want_input=True, want_params=False)[0]


def grad_input(params: ModelParams, trial: np.ndarray, select: str, class_index: int) -> np.ndarray:
    """Gradient with respect to the input of logit j, log p_y, or -log p_y."""
    trial = validate_trial(params.spec, trial)
    return grad_input_batch(params, trial[None], select, np.array([class_index]))[0]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, arr: np.ndarray) -> "AdamState":
        return cls(np.zeros_like(arr), np.zeros_like(arr))


def adam_step(value: np.ndarray, grad: np.ndarray, state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8):
    """One bias-corrected Adam update; returns (new_value, new_state)."""
    if grad.shape != value.shape:
        raise ShapeError("gradient shape does not match the variable")
    t = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return value - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m, v, t)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_epochs: int = 150
    batch_size: int = 32
    patience: int = 10
    seed: int = 0
    class_weighting: str = "inverse"

    def __post_init__(self):
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass
class FitReport:
    epochs_run: int
    best_validation_loss: float
    training_curve: list[float] = field(default_factory=list)
    validation_curve: list[float] = field(default_factory=list)
    stopped_early: bool = False


def fit_victim(spec: ModelSpec, train, val, cfg: TrainConfig):
    """Train by minibatch Adam on weighted cross entropy; keep the epoch with
    the lowest validation loss; stop after `patience` epochs without
    improvement. Returns (ModelParams, FitReport)."""
    if train.n == 0:
        raise ShapeError("training set is empty")
    if val.n == 0:
        raise ShapeError("validation set is empty")
    for s in (train, val):
        if s.trials.shape[1:] != (spec.input_channels, spec.input_samples):
            raise ShapeError("trial set shape does not match the model spec")
    weights = class_weights(train.labels, spec.num_classes, cfg.class_weighting)
    params = init_params(spec, cfg.seed)
    states = {name: AdamState.zeros_like(arr) for name, arr in params.arrays.items()}
    rng = np.random.default_rng(cfg.seed)

    best = params.copy()
    best_val = math.inf
    bad = 0
    curve: list[float] = []
    val_curve: list[float] = []
    stopped = False
    epochs = 0
    for _ in range(cfg.max_epochs):
        epochs += 1
        order = rng.permutation(train.n)
        total = 0.0
        for start in range(0, train.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            loss, dz, cache = _loss_dz(params, train.trials[batch], train.labels[batch], weights)
            grads = _backward(params, cache, dz, want_input=False, want_params=True)[1]
            for name in params.arrays:
                params.arrays[name], states[name] = adam_step(
                    params.arrays[name], grads[name], states[name],
                    cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
            total += loss * len(batch)
        curve.append(total / train.n)
        vloss = weighted_cross_entropy(params, val.trials, val.labels, weights)
        val_curve.append(vloss)
        if vloss < best_val:
            best_val = vloss
            best = params.copy()
            bad = 0
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped = True
                break
    report = FitReport(epochs, best_val, curve, val_curve, stopped)
    return best, report


MODEL_FORMAT = "uapforge-model"


def save_model(params: ModelParams, path) -> None:
    doc = {
        "format": MODEL_FORMAT,
        "version": 1,
        "spec": params.spec.to_dict(),
        "arrays": {k: v.ravel().tolist() for k, v in params.arrays.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, allow_nan=False)


def load_model(path) -> ModelParams:
    with open(path, "r", encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"not a model file: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise FormatError("missing uapforge-model format tag")
    if doc.get("version") != 1:
        raise FormatError(f"unsupported model version {doc.get('version')!r}")
    spec = ModelSpec.from_dict(doc.get("spec", {}))
    arrays = {}
    raw = doc.get("arrays", {})
    for name, shape in array_shapes(spec).items():
        if name not in raw:
            raise ShapeError(f"model file is missing array {name!r}")
        flat = np.asarray(raw[name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise ShapeError(
                f"array {name!r} has {flat.size} values, expected {int(np.prod(shape))}")
        arrays[name] = flat.reshape(shape)
    if not all(np.isfinite(a).all() for a in arrays.values()):
        raise NumericalError("model file contains non-finite weights")
    return ModelParams(spec, arrays)


def copy_params(params: ModelParams) -> ModelParams:
    return copy.deepcopy(params)

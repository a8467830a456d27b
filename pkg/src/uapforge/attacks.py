"""Attack algorithms: per-trial DeepFool, the DeepFool-based UAP, total-loss
minimization (TLM) UAPs (full, channel-invariant, and randomly placed mini
templates), plus projection, attack losses, penalties, and UAP file I/O.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .data import TrialSet
from .errors import DegenerateGradientError, FormatError, ShapeError
from .models import (
    GRAD_LOG_PROB,
    GRAD_LOGIT,
    GRAD_NEG_LOG_PROB,
    LOG_FLOOR,
    AdamState,
    ModelParams,
    TrainConfig,
    adam_step,
    fit_victim,
    forward,
    grad_input_batch,
    logits_batch,
    predict_batch,
    validate_trial,
)

FULL = "full"
CHANNEL_INVARIANT = "channel-invariant"
MINI = "mini"

NORM_TOL = 1e-9
DEGENERATE_TOL = 1e-12

# Alg. 2 caps epochs over the dataset; the inner per-trial DeepFool loop
# gets its own conventional cap.
DEEPFOOL_MAX_ITER = 50

VAL_PLACEMENTS = 30


@dataclass
class Uap:
    """A crafted perturbation with its shape mode and norm budget."""

    mode: str
    values: np.ndarray
    xi: float
    norm_p: float = np.inf

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.mode not in (FULL, CHANNEL_INVARIANT, MINI):
            raise ValueError(f"unknown UAP mode {self.mode!r}")
        if self.values.ndim != 2:
            raise ShapeError("UAP values must be a 2-D array")
        if self.mode == CHANNEL_INVARIANT and self.values.shape[0] != 1:
            raise ShapeError("channel-invariant UAP must have a single row")
        if self.norm() > self.xi + NORM_TOL:
            raise ValueError(f"UAP norm {self.norm():g} exceeds the bound {self.xi:g}")

    def norm(self) -> float:
        if self.norm_p == np.inf:
            return float(np.abs(self.values).max()) if self.values.size else 0.0
        return float(np.linalg.norm(self.values.ravel(), ord=self.norm_p))


@dataclass
class Placement:
    """Offsets locating a mini template inside a trial."""

    channel_offset: int
    time_offset: int


@dataclass
class AttackConfig:
    """Crafting parameters. The defaults are the TLM row of the reference
    configuration (xi=0.2, delta=1.0, 500 epochs, no constraint); use
    ``AttackConfig.df()`` for the DeepFool-UAP row (delta=0.8, 10 epochs)."""

    xi: float = 0.2
    delta: float = 1.0
    max_iter: int = 500
    alpha: float = 0.0
    norm_p: float = np.inf
    batch_size: int = 32
    target: int | None = None
    constraint: str = "none"
    seed: int = 0
    overshoot: float = 0.02
    label_source: str = "predicted"
    learning_rate: float = 0.05
    patience: int = 10
    uap_mode: str = FULL

    def __post_init__(self):
        if self.xi <= 0:
            raise ValueError("xi must be positive")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError("delta must lie in [0, 1]")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.alpha < 0 or self.overshoot < 0:
            raise ValueError("alpha and overshoot must be non-negative")
        if self.norm_p not in (2, np.inf):
            raise ValueError("norm_p must be 2 or inf")
        if self.constraint not in ("none", "l1", "l2"):
            raise ValueError(f"unknown constraint {self.constraint!r}")
        if self.label_source not in ("true", "predicted"):
            raise ValueError(f"unknown label source {self.label_source!r}")
        if self.uap_mode not in (FULL, CHANNEL_INVARIANT):
            raise ValueError("uap_mode must be full or channel-invariant")

    @classmethod
    def df(cls, **kw) -> "AttackConfig":
        kw.setdefault("delta", 0.8)
        kw.setdefault("max_iter", 10)
        return cls(**kw)


@dataclass
class AttackResult:
    uap: Uap
    iterations_run: int
    best_validation_asr: float
    asr_curve: list[float] = field(default_factory=list)


def project(v: np.ndarray, p: float, xi: float) -> np.ndarray:
    """Nearest point (in l2 distance) of the lp ball of radius xi."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    v = np.asarray(v, dtype=np.float64)
    if p == np.inf:
        return np.clip(v, -xi, xi)
    if p == 2:
        n = float(np.linalg.norm(v.ravel()))
        # the tolerance keeps a radial rescale idempotent in floating point
        if n <= xi * (1.0 + 1e-12):
            return v.copy()
        return v * (xi / n)
    raise ValueError("norm order must be 2 or inf")


def attack_loss(params: ModelParams, trial: np.ndarray, class_index: int,
                targeted: bool = False) -> float:
    """log p_y of the trial (non-target) or -log p_{y_t} (target)."""
    if not 0 <= class_index < params.spec.num_classes:
        raise ValueError("target class out of range")
    p = forward(params, trial)[class_index]
    loss = float(np.log(max(p, LOG_FLOOR)))
    return -loss if targeted else loss


def constraint_penalty(values: np.ndarray, kind: str) -> float:
    values = np.asarray(values)
    if kind == "none":
        return 0.0
    if kind == "l1":
        return float(np.abs(values).sum())
    if kind == "l2":
        return float((values * values).sum())
    raise ValueError(f"unknown constraint {kind!r}")


def constraint_grad(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "none":
        return np.zeros_like(values)
    if kind == "l1":
        return np.sign(values)
    if kind == "l2":
        return 2.0 * values
    raise ValueError(f"unknown constraint {kind!r}")


def apply_uap(trial: np.ndarray, uap: Uap, placement: Placement | None = None) -> np.ndarray:
    """Add the perturbation to one trial; mini mode needs a placement."""
    trial = np.asarray(trial, dtype=np.float64)
    if uap.mode == FULL:
        if uap.values.shape != trial.shape:
            raise ShapeError("full UAP shape does not match the trial")
        return trial + uap.values
    if uap.mode == CHANNEL_INVARIANT:
        if uap.values.shape[1] != trial.shape[1]:
            raise ShapeError("channel-invariant UAP length does not match the trial")
        return trial + uap.values
    if placement is None:
        raise ValueError("mini UAP needs a placement")
    cm, tm = uap.values.shape
    c, t = trial.shape
    if not (0 <= placement.channel_offset <= c - cm and 0 <= placement.time_offset <= t - tm):
        raise ValueError("placement puts the template outside the trial")
    out = trial.copy()
    out[placement.channel_offset : placement.channel_offset + cm,
        placement.time_offset : placement.time_offset + tm] += uap.values
    return out


def _apply_batch(x: np.ndarray, values: np.ndarray, placements: np.ndarray | None) -> np.ndarray:
    """Batch perturbation; placements (n, 2) selects per-trial offsets for
    mini templates, None broadcasts full or channel-invariant values."""
    if placements is None:
        return x + values
    cm, tm = values.shape
    out = x.copy()
    for i, (co, to) in enumerate(placements):
        out[i, co : co + cm, to : to + tm] += values
    return out


def sample_placements(rng: np.random.Generator, count: int,
                      trial_shape: tuple[int, int], template_shape: tuple[int, int]) -> np.ndarray:
    """Uniform placements (count, 2) keeping the template inside the trial."""
    c, t = trial_shape
    cm, tm = template_shape
    return np.stack([rng.integers(0, c - cm + 1, size=count),
                     rng.integers(0, t - tm + 1, size=count)], axis=1)


def deepfool(params: ModelParams, trial: np.ndarray, overshoot: float = 0.02,
             max_iter: int = DEEPFOOL_MAX_ITER) -> np.ndarray:
    """Minimal-perturbation attack on a single trial.

    Repeats the closest-hyperplane linearized step (margins f_j - f_yhat over
    j != yhat) until the predicted label flips or max_iter is hit, then
    scales the accumulated perturbation by (1 + overshoot).
    """
    x0 = validate_trial(params.spec, trial)
    k = params.spec.num_classes
    y0 = int(np.argmax(logits_batch(params, x0[None])[0]))
    total = np.zeros_like(x0)
    x = x0
    for _ in range(max_iter):
        z = logits_batch(params, x[None])[0]
        if int(np.argmax(z)) != y0:
            break
        grads = grad_input_batch(params, np.repeat(x[None], k, axis=0),
                                 GRAD_LOGIT, np.arange(k))
        best_ratio = np.inf
        best_step = None
        for j in range(k):
            if j == y0:
                continue
            w = grads[j] - grads[y0]
            wn = float(np.linalg.norm(w.ravel()))
            if wn < DEGENERATE_TOL:
                continue
            margin = float(z[j] - z[y0])
            ratio = abs(margin) / wn
            if ratio < best_ratio:
                best_ratio = ratio
                best_step = -(margin / wn**2) * w
        if best_step is None:
            raise DegenerateGradientError(
                "every candidate hyperplane has (near-)zero gradient norm")
        total = total + best_step
        x = x0 + total
    return (1.0 + overshoot) * total


def df_uap(params: ModelParams, trials: TrialSet, cfg: AttackConfig,
           on_project=None) -> AttackResult:
    """DeepFool-based UAP (non-target only).

    Epochs sweep the dataset in a reshuffled order; any trial the current v
    fails to fool gets a fresh DeepFool increment, and v is re-projected onto
    the xi ball after every aggregation. Stops once the attack success rate
    on the crafting set reaches delta.
    """
    if cfg.target is not None:
        raise ValueError("the DeepFool-based UAP supports non-target attacks only")
    if trials.n == 0:
        raise ShapeError("cannot craft a UAP from an empty trial set")
    x = trials.trials
    reference = predict_batch(params, x)
    v = np.zeros((trials.channels, trials.samples))
    rng = np.random.default_rng([cfg.seed, 2])
    curve: list[float] = []
    epochs = 0
    for _ in range(cfg.max_iter):
        current = float(np.mean(predict_batch(params, x + v) != reference))
        if current >= cfg.delta:
            break
        epochs += 1
        for i in rng.permutation(trials.n):
            xi_trial = x[i] + v
            pred = int(np.argmax(logits_batch(params, xi_trial[None])[0]))
            if pred == reference[i]:
                dv = deepfool(params, xi_trial, cfg.overshoot)
                v = project(v + dv, cfg.norm_p, cfg.xi)
                if on_project is not None:
                    on_project(v)
        curve.append(float(np.mean(predict_batch(params, x + v) != reference)))
    final = float(np.mean(predict_batch(params, x + v) != reference))
    uap = Uap(FULL, v, cfg.xi, cfg.norm_p)
    return AttackResult(uap, epochs, final, curve)


def _craft_labels(params: ModelParams, train: TrialSet, cfg: AttackConfig):
    """Per-trial class indices and the gradient selector for the TLM loss."""
    if cfg.target is not None:
        if not 0 <= cfg.target < params.spec.num_classes:
            raise ValueError("target class out of range")
        return np.full(train.n, cfg.target, dtype=np.int64), GRAD_NEG_LOG_PROB
    if cfg.label_source == "predicted":
        return predict_batch(params, train.trials), GRAD_LOG_PROB
    return train.labels.copy(), GRAD_LOG_PROB


def _validation_metric(params: ModelParams, val: TrialSet, reference: np.ndarray,
                       perturbed: np.ndarray, target: int | None) -> float:
    pred = predict_batch(params, perturbed)
    if target is None:
        return float(np.mean(pred != reference))
    return float(np.mean(pred == target))


def tlm_uap(params: ModelParams, train: TrialSet, val: TrialSet, cfg: AttackConfig,
            on_project=None) -> AttackResult:
    """Total-loss-minimization UAP by projected minibatch Adam.

    Minimizes the mean attack loss (log p_y for non-target, -log p_{y_t} for
    target) plus alpha times the constraint penalty, projecting v onto the xi
    ball after every step. After each epoch the validation metric (ASR, or
    target rate in target mode) is computed and the best v is retained; the
    loop stops when the best metric exceeds delta, the metric fails to
    improve for `patience` epochs, or max_iter epochs have run.
    """
    if val.n == 0:
        raise ShapeError("validation set is empty")
    if train.n == 0:
        raise ShapeError("training set is empty")
    c, t = train.channels, train.samples
    labels, select = _craft_labels(params, train, cfg)
    reference = predict_batch(params, val.trials)
    shape = (1, t) if cfg.uap_mode == CHANNEL_INVARIANT else (c, t)
    v = np.zeros(shape)
    state = AdamState.zeros_like(v)
    rng = np.random.default_rng([cfg.seed, 3])
    best_v = v.copy()
    best = 0.0
    curve: list[float] = []
    bad = 0
    epochs = 0
    for _ in range(cfg.max_iter):
        epochs += 1
        order = rng.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            g = grad_input_batch(params, train.trials[batch] + v, select, labels[batch])
            g = g.mean(axis=0)
            if cfg.uap_mode == CHANNEL_INVARIANT:
                g = g.sum(axis=0, keepdims=True)
            if cfg.alpha > 0.0:
                g = g + cfg.alpha * constraint_grad(v, cfg.constraint)
            v, state = adam_step(v, g, state, cfg.learning_rate)
            v = project(v, cfg.norm_p, cfg.xi)
            if on_project is not None:
                on_project(v)
        metric = _validation_metric(params, val, reference, val.trials + v, cfg.target)
        curve.append(metric)
        if metric > best:
            best = metric
            best_v = v.copy()
            bad = 0
        else:
            bad += 1
        if best > cfg.delta or bad >= cfg.patience:
            break
    uap = Uap(cfg.uap_mode, best_v, cfg.xi, cfg.norm_p)
    return AttackResult(uap, epochs, best, curve)


def craft_mini_uap(params: ModelParams, train: TrialSet, val: TrialSet,
                   cfg: AttackConfig, shape: tuple[int, int],
                   on_project=None) -> AttackResult:
    """TLM crafting of a small template placed at a fresh random location per
    trial each epoch; validation averages the metric over 30 random
    placements per validation trial (sampled once per craft)."""
    cm, tm = shape
    c, t = train.channels, train.samples
    if cm > c or tm > t:
        raise ShapeError("mini template larger than the trial")
    if val.n == 0 or train.n == 0:
        raise ShapeError("need non-empty train and validation sets")
    labels, select = _craft_labels(params, train, cfg)
    reference = predict_batch(params, val.trials)

    place_rng = np.random.default_rng([cfg.seed, 4])
    val_places = sample_placements(np.random.default_rng([cfg.seed, 5]),
                                   val.n * VAL_PLACEMENTS, (c, t), (cm, tm))
    val_big = np.repeat(val.trials, VAL_PLACEMENTS, axis=0)
    val_ref_big = np.repeat(reference, VAL_PLACEMENTS)

    v = np.zeros((cm, tm))
    state = AdamState.zeros_like(v)
    rng = np.random.default_rng([cfg.seed, 3])
    best_v = v.copy()
    best = 0.0
    curve: list[float] = []
    bad = 0
    epochs = 0
    for _ in range(cfg.max_iter):
        epochs += 1
        places = sample_placements(place_rng, train.n, (c, t), (cm, tm))
        order = rng.permutation(train.n)
        for start in range(0, train.n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            xb = _apply_batch(train.trials[batch], v, places[batch])
            grads = grad_input_batch(params, xb, select, labels[batch])
            g = np.zeros_like(v)
            for gi, (co, to) in zip(grads, places[batch]):
                g += gi[co : co + cm, to : to + tm]
            g /= len(batch)
            if cfg.alpha > 0.0:
                g = g + cfg.alpha * constraint_grad(v, cfg.constraint)
            v, state = adam_step(v, g, state, cfg.learning_rate)
            v = project(v, cfg.norm_p, cfg.xi)
            if on_project is not None:
                on_project(v)
        perturbed = _apply_batch(val_big, v, val_places)
        pred = predict_batch(params, perturbed)
        if cfg.target is None:
            metric = float(np.mean(pred != val_ref_big))
        else:
            metric = float(np.mean(pred == cfg.target))
        curve.append(metric)
        if metric > best:
            best = metric
            best_v = v.copy()
            bad = 0
        else:
            bad += 1
        if best > cfg.delta or bad >= cfg.patience:
            break
    uap = Uap(MINI, best_v, cfg.xi, cfg.norm_p)
    return AttackResult(uap, epochs, best, curve)


def substitute_transfer(train: TrialSet, val: TrialSet, substitute,
                        victim_params: ModelParams, cfg: AttackConfig,
                        method: str = "tlm", train_cfg: TrainConfig | None = None):
    """Gray-box attack: craft a UAP on a substitute trained on the same data,
    then report the victim's performance under it (evaluated on val).

    `substitute` may be a ModelSpec (trained here) or ready ModelParams."""
    from .metrics import evaluate

    if isinstance(substitute, ModelParams):
        sub = substitute
    else:
        sub = fit_victim(substitute, train, val, train_cfg or TrainConfig(seed=cfg.seed))[0]
    if method == "tlm":
        result = tlm_uap(sub, train, val, cfg)
    elif method == "df":
        result = df_uap(sub, train, cfg)
    else:
        raise ValueError(f"unknown crafting method {method!r}")
    return evaluate(victim_params, val, result.uap, target=cfg.target,
                    placement_seed=cfg.seed)


UAP_MAGIC = b"UAPF"
_MODE_CODES = {FULL: 0, CHANNEL_INVARIANT: 1, MINI: 2}
_MODE_NAMES = {v: k for k, v in _MODE_CODES.items()}


def save_uap(uap: Uap, path) -> None:
    c, t = uap.values.shape
    norm_code = 255 if uap.norm_p == np.inf else 2
    with open(path, "wb") as f:
        f.write(UAP_MAGIC)
        f.write(struct.pack("<HBIIdB", 1, _MODE_CODES[uap.mode], c, t, uap.xi, norm_code))
        f.write(uap.values.astype("<f8").tobytes())


def load_uap(path) -> Uap:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != UAP_MAGIC:
        raise FormatError("bad magic: not a UAP file")
    header = struct.Struct("<HBIIdB")
    if len(blob) < 4 + header.size:
        raise FormatError("truncated UAP header")
    version, mode_code, c, t, xi, norm_code = header.unpack_from(blob, 4)
    if version != 1:
        raise FormatError(f"unsupported UAP version {version}")
    if mode_code not in _MODE_NAMES:
        raise FormatError(f"unknown UAP mode code {mode_code}")
    if norm_code not in (2, 255):
        raise FormatError(f"unknown norm order code {norm_code}")
    payload = blob[4 + header.size :]
    if len(payload) != c * t * 8:
        raise FormatError(f"UAP payload has {len(payload)} bytes, expected {c * t * 8}")
    values = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(c, t)
    return Uap(_MODE_NAMES[mode_code], values, xi, np.inf if norm_code == 255 else 2)


def uap_to_csv(uap: Uap, path) -> None:
    """One row per channel, full-precision decimal values."""
    with open(path, "w", encoding="utf-8") as f:
        for row in uap.values:
            f.write(",".join(repr(x) for x in row.tolist()) + "\n")


def df_config(**kw) -> AttackConfig:
    return AttackConfig.df(**kw)


def with_target(cfg: AttackConfig, target: int | None) -> AttackConfig:
    return replace(cfg, target=target)

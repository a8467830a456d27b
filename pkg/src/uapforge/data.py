"""Trial-set construction: synthetic multichannel data, per-trial
normalizations, cross-validation splits, and binary trial-file I/O."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError

MEAN_SHIFT_CLIP = "mean-shift-clip"
Z_SCORE = "z-score"
EMA_STANDARDIZE = "ema-standardize"

STD_FLOOR = 1e-8


@dataclass
class TrialSet:
    """Ordered trials (n, C, T) with labels, subject ids, and class names."""

    trials: np.ndarray
    labels: np.ndarray
    subjects: np.ndarray
    class_names: list[str]

    def __post_init__(self):
        self.trials = np.asarray(self.trials, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.subjects = np.asarray(self.subjects, dtype=np.int64)
        if self.trials.ndim != 3:
            raise ShapeError("trials must be a (n, C, T) array")
        n = self.trials.shape[0]
        if len(self.labels) != n or len(self.subjects) != n:
            raise ShapeError("labels/subjects length does not match trial count")
        k = len(self.class_names)
        if n and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ShapeError("label outside [0, K)")
        if not np.isfinite(self.trials).all():
            raise ShapeError("trials contain non-finite values")

    @property
    def n(self) -> int:
        return self.trials.shape[0]

    @property
    def channels(self) -> int:
        return self.trials.shape[1]

    @property
    def samples(self) -> int:
        return self.trials.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, indices) -> "TrialSet":
        indices = np.asarray(indices)
        return TrialSet(self.trials[indices], self.labels[indices],
                        self.subjects[indices], list(self.class_names))

    def std(self) -> float:
        """Per-dataset standard deviation, the reference scale for xi."""
        return float(self.trials.std())


@dataclass
class SynthConfig:
    """Synthetic EEG-like data: class templates buried in heavy noise plus
    per-subject DC offsets, so the class signal is small relative to the
    overall trial scale (as in real evoked-potential data).

    class_proportions splits the total trial count (num_classes *
    trials_per_class) across classes. None selects the paradigm default:
    binary sets are imbalanced 75/25 (like P300/ERN feedback data), sets
    with more classes are balanced (like motor imagery).
    """

    num_classes: int = 2
    channels: int = 8
    samples: int = 64
    trials_per_class: int = 300
    num_subjects: int = 4
    noise_sigma: float = 2.5
    class_amplitude: float = 1.0
    subject_shift_sigma: float = 2.0
    class_proportions: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes (K >= 2)")
        if min(self.channels, self.samples, self.trials_per_class, self.num_subjects) < 1:
            raise ValueError("all synthetic dimensions must be positive")
        if self.class_proportions is not None:
            if len(self.class_proportions) != self.num_classes:
                raise ValueError("class_proportions length must equal num_classes")
            if min(self.class_proportions) <= 0:
                raise ValueError("class_proportions must be positive")

    def proportions(self) -> tuple[float, ...]:
        if self.class_proportions is not None:
            total = sum(self.class_proportions)
            return tuple(p / total for p in self.class_proportions)
        if self.num_classes == 2:
            return (0.75, 0.25)
        return tuple(1.0 / self.num_classes for _ in range(self.num_classes))

    def class_counts(self) -> list[int]:
        total = self.num_classes * self.trials_per_class
        counts = [int(round(p * total)) for p in self.proportions()]
        counts[-1] = total - sum(counts[:-1])
        return counts


def class_templates(cfg: SynthConfig) -> np.ndarray:
    """Fixed per-class waveforms (K, C, T): one sinusoid per channel whose
    frequency and phase depend on the class. Identical for every subject."""
    rng = np.random.default_rng([cfg.seed, 0])
    k, c, t = cfg.num_classes, cfg.channels, cfg.samples
    freqs = rng.integers(3, 15, size=(k, c))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(k, c))
    ts = np.arange(t)
    return np.sin(2.0 * np.pi * freqs[:, :, None] * ts[None, None, :] / t
                  + phases[:, :, None])


def gen_synthetic(cfg: SynthConfig) -> TrialSet:
    """Class template + per-subject DC offset + white Gaussian noise.

    Trials of each class are dealt round-robin across subjects. Values are
    rounded through float32 so the trial-file round trip is the identity.
    """
    templates = cfg.class_amplitude * class_templates(cfg)
    rng = np.random.default_rng([cfg.seed, 1])
    offsets = rng.normal(0.0, cfg.subject_shift_sigma,
                         size=(cfg.num_subjects, cfg.channels))

    counts = cfg.class_counts()
    n = sum(counts)
    trials = np.empty((n, cfg.channels, cfg.samples))
    labels = np.empty(n, dtype=np.int64)
    subjects = np.empty(n, dtype=np.int64)
    i = 0
    for k in range(cfg.num_classes):
        for j in range(counts[k]):
            s = j % cfg.num_subjects
            noise = rng.normal(0.0, cfg.noise_sigma, size=(cfg.channels, cfg.samples))
            trials[i] = templates[k] + offsets[s][:, None] + noise
            labels[i] = k
            subjects[i] = s
            i += 1
    trials = trials.astype(np.float32).astype(np.float64)
    names = [f"class{k}" for k in range(cfg.num_classes)]
    return TrialSet(trials, labels, subjects, names)


def normalize(ts: TrialSet, mode: str, ema_decay: float = 0.999) -> TrialSet:
    """Per-trial normalization in one of three modes.

    mean-shift-clip: (x - mean(x)) / 10, clipped to [-5, 5].
    z-score: (x - mean(x)) / std(x), std floored at 1e-8.
    ema-standardize: per channel over time, exponentially weighted mean and
    variance (m_t = d*m_{t-1} + (1-d)*x_t, then s2_t likewise from the
    demeaned sample), output (x_t - m_t) / max(s_t, 1e-8); state starts at
    m_0 = x_0, s2_0 = 1, so the first output sample is exactly 0.
    """
    if ts.n == 0:
        raise ShapeError("cannot normalize an empty trial set")
    x = ts.trials
    if mode == MEAN_SHIFT_CLIP:
        shifted = (x - x.mean(axis=(1, 2), keepdims=True)) / 10.0
        out = np.clip(shifted, -5.0, 5.0)
    elif mode == Z_SCORE:
        mean = x.mean(axis=(1, 2), keepdims=True)
        std = np.maximum(x.std(axis=(1, 2), keepdims=True), STD_FLOOR)
        out = (x - mean) / std
    elif mode == EMA_STANDARDIZE:
        d = ema_decay
        out = np.empty_like(x)
        m = x[:, :, 0].copy()
        s2 = np.ones_like(m)
        out[:, :, 0] = (x[:, :, 0] - m) / np.maximum(np.sqrt(s2), STD_FLOOR)
        for t in range(1, x.shape[2]):
            m = d * m + (1.0 - d) * x[:, :, t]
            s2 = d * s2 + (1.0 - d) * (x[:, :, t] - m) ** 2
            out[:, :, t] = (x[:, :, t] - m) / np.maximum(np.sqrt(s2), STD_FLOOR)
    else:
        raise ValueError(f"unknown normalization mode {mode!r}")
    return TrialSet(out, ts.labels.copy(), ts.subjects.copy(), list(ts.class_names))


@dataclass
class SplitPlan:
    """Within-subject plan: per-trial fold index (0..4), blocks contiguous in
    recorded order per subject."""

    kind: str
    folds: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def fold_indices(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.folds == fold)


def block_sizes(count: int, blocks: int = 5) -> list[int]:
    """Near-equal contiguous block sizes, remainder spread over the first blocks."""
    base, rem = divmod(count, blocks)
    return [base + (1 if i < rem else 0) for i in range(blocks)]


def within_subject_blocks(ts: TrialSet, seed: int = 0) -> SplitPlan:
    """Partition every subject's trials, in recorded order, into 5 contiguous blocks."""
    folds = np.empty(ts.n, dtype=np.int64)
    for s in np.unique(ts.subjects):
        idx = np.flatnonzero(ts.subjects == s)
        if len(idx) < 5:
            raise ShapeError(f"subject {s} has fewer than 5 trials")
        pos = 0
        for fold, size in enumerate(block_sizes(len(idx))):
            folds[idx[pos : pos + size]] = fold
            pos += size
    return SplitPlan("within-subject-blocks", folds)


def within_subject_split(ts: TrialSet, subject: int, fold: int, seed: int = 0):
    """One rotation for one subject: test = block `fold`, validation = next
    block, training = the remaining three."""
    plan = within_subject_blocks(ts, seed)
    mine = ts.subjects == subject
    if not mine.any():
        raise ValueError(f"unknown subject id {subject}")
    test = mine & (plan.folds == fold)
    val = mine & (plan.folds == (fold + 1) % 5)
    train = mine & ~test & ~val
    return ts.subset(np.flatnonzero(train)), ts.subset(np.flatnonzero(val)), ts.subset(np.flatnonzero(test))


def loso_split(ts: TrialSet, test_subject: int, seed: int = 0):
    """Leave-one-subject-out: held-out subject is the test set; the rest are
    shuffled and split 75/25 into training and validation."""
    if len(np.unique(ts.subjects)) < 2:
        raise ShapeError("leave-one-subject-out needs at least 2 subjects")
    test_mask = ts.subjects == test_subject
    if not test_mask.any():
        raise ValueError(f"unknown subject id {test_subject}")
    rest = np.flatnonzero(~test_mask)
    rng = np.random.default_rng(seed)
    rest = rest[rng.permutation(len(rest))]
    n_val = len(rest) // 4
    n_train = len(rest) - n_val
    return (ts.subset(rest[:n_train]), ts.subset(rest[n_train:]),
            ts.subset(np.flatnonzero(test_mask)))


TRIAL_MAGIC = b"EEGB"


def write_trials(ts: TrialSet, path) -> None:
    """Binary trial file plus a JSON sidecar with labels/subjects/classes."""
    path = str(path)
    with open(path, "wb") as f:
        f.write(TRIAL_MAGIC)
        f.write(struct.pack("<HIII", 1, ts.channels, ts.samples, ts.n))
        f.write(ts.trials.astype("<f4").tobytes())
    meta = {
        "labels": ts.labels.tolist(),
        "subjects": ts.subjects.tolist(),
        "classes": list(ts.class_names),
    }
    with open(path + ".meta.json", "w", encoding="utf-8") as f:
        json.dump(meta, f)


def read_trials(path) -> TrialSet:
    path = str(path)
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != TRIAL_MAGIC:
        raise FormatError("bad magic: not a trial file")
    if len(blob) < 18:
        raise FormatError("truncated trial file header")
    version, c, t, n = struct.unpack("<HIII", blob[4:18])
    if version != 1:
        raise FormatError(f"unsupported trial file version {version}")
    payload = blob[18:]
    expected = n * c * t * 4
    if len(payload) != expected:
        raise FormatError(f"trial payload has {len(payload)} bytes, expected {expected}")
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, c, t)
    try:
        with open(path + ".meta.json", "r", encoding="utf-8") as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"missing or malformed sidecar: {exc}") from exc
    labels = meta.get("labels", [])
    subjects = meta.get("subjects", [])
    classes = meta.get("classes", [])
    if len(labels) != n or len(subjects) != n:
        raise FormatError(
            f"sidecar lists {len(labels)} labels / {len(subjects)} subjects for {n} trials")
    return TrialSet(values, np.asarray(labels), np.asarray(subjects), list(classes))

"""Metrics (RCA, BCA, ASR, target rate, SPR), the clipped-Gaussian noisy
baseline, and the white-box / gray-box experiment runner."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import (
    MINI,
    AttackConfig,
    Uap,
    df_uap,
    sample_placements,
    tlm_uap,
)
from .data import SynthConfig, TrialSet, gen_synthetic, loso_split, within_subject_split
from .errors import ShapeError, UapForgeError
from .models import ModelParams, ModelSpec, TrainConfig, fit_victim, predict_batch


@dataclass
class PlacementPolicy:
    """How mini-UAP evaluation samples placements: `count` per trial."""

    count: int = 30
    seed: int = 0


@dataclass
class EvalReport:
    rca: float
    bca: float
    per_class_rca: list[float]
    asr: float
    target_rate: float | None
    spr_db: float
    n: int


def rca_bca(predictions, labels, num_classes: int | None = None):
    """Raw accuracy, balanced accuracy, and per-class accuracies.

    Classes absent from `labels` get NaN and are excluded from the BCA mean.
    """
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ShapeError("cannot score an empty prediction set")
    if len(predictions) != len(labels):
        raise ShapeError("predictions and labels differ in length")
    k = num_classes if num_classes is not None else int(labels.max()) + 1
    rca = float(np.mean(predictions == labels))
    per_class = []
    for c in range(k):
        mask = labels == c
        per_class.append(float(np.mean(predictions[mask] == c)) if mask.any() else math.nan)
    bca = float(np.nanmean(per_class))
    return rca, bca, per_class


def _expand(ts: TrialSet, uap: Uap, policy: PlacementPolicy | None):
    """Perturbed trials, the index of the source trial per row, and the
    effective additive perturbation per row (zero-padded for mini mode)."""
    n = ts.n
    if uap.mode != MINI:
        full = np.broadcast_to(uap.values, (ts.channels, ts.samples))
        perturbed = ts.trials + uap.values
        pert = np.broadcast_to(full, perturbed.shape)
        return perturbed, np.arange(n), pert
    policy = policy or PlacementPolicy()
    rng = np.random.default_rng([policy.seed, 6])
    places = sample_placements(rng, n * policy.count,
                               (ts.channels, ts.samples), uap.values.shape)
    idx = np.repeat(np.arange(n), policy.count)
    cm, tm = uap.values.shape
    pert = np.zeros((n * policy.count, ts.channels, ts.samples))
    for row, (co, to) in enumerate(places):
        pert[row, co : co + cm, to : to + tm] = uap.values
    return ts.trials[idx] + pert, idx, pert


def asr(params: ModelParams, clean: TrialSet, uap: Uap,
        policy: PlacementPolicy | None = None) -> float:
    """Fraction of trials whose prediction changes after adding the UAP.

    The reference labels are the model's own predictions on the clean trials,
    so true labels are never read."""
    reference = predict_batch(params, clean.trials)
    perturbed, idx, _ = _expand(clean, uap, policy)
    return float(np.mean(predict_batch(params, perturbed) != reference[idx]))


def target_rate(params: ModelParams, ts: TrialSet, uap: Uap, target_class: int,
                policy: PlacementPolicy | None = None) -> float:
    """Fraction of perturbed trials predicted as the target class."""
    if not 0 <= target_class < params.spec.num_classes:
        raise ValueError("target class out of range")
    perturbed, _, _ = _expand(ts, uap, policy)
    return float(np.mean(predict_batch(params, perturbed) == target_class))


def _spr_from_arrays(clean: np.ndarray, pert: np.ndarray) -> float:
    signal = (clean * clean).sum(axis=(1, 2))
    noise = (pert * pert).sum(axis=(1, 2))
    if float(noise.max(initial=0.0)) == 0.0:
        return math.inf
    return float(10.0 * np.log10(np.mean(signal / noise)))


def spr_db(clean: TrialSet, uap: Uap, policy: PlacementPolicy | None = None) -> float:
    """Signal-to-perturbation ratio: 10*log10 of the mean per-trial power
    ratio between the clean trial and its effective additive perturbation.
    A zero perturbation reports +inf."""
    if clean.n == 0:
        raise ShapeError("cannot compute SPR on an empty set")
    perturbed, idx, pert = _expand(clean, uap, policy)
    return _spr_from_arrays(clean.trials[idx], pert)


def noise_baseline(ts: TrialSet, xi: float, seed: int) -> TrialSet:
    """Adds xi * clip(N(0,1), -1, 1) noise per entry; max amplitude is xi."""
    if xi <= 0:
        raise ValueError("xi must be positive")
    rng = np.random.default_rng([seed, 7])
    noise = xi * np.clip(rng.standard_normal(ts.trials.shape), -1.0, 1.0)
    return TrialSet(ts.trials + noise, ts.labels.copy(), ts.subjects.copy(),
                    list(ts.class_names))


def evaluate(params: ModelParams, ts: TrialSet, uap: Uap | None = None, *,
             target: int | None = None, perturbed: np.ndarray | None = None,
             placement_policy: PlacementPolicy | None = None,
             placement_seed: int = 0) -> EvalReport:
    """Full report for one (model, data, perturbation) triple.

    With neither `uap` nor `perturbed`, scores the clean baseline. `perturbed`
    supplies explicit perturbed trials (the noisy baseline path)."""
    reference = predict_batch(params, ts.trials)
    if uap is not None:
        policy = placement_policy or PlacementPolicy(seed=placement_seed)
        x, idx, pert = _expand(ts, uap, policy)
        spr = _spr_from_arrays(ts.trials[idx], pert)
    elif perturbed is not None:
        if perturbed.shape != ts.trials.shape:
            raise ShapeError("perturbed trials must match the clean set shape")
        x, idx = perturbed, np.arange(ts.n)
        spr = _spr_from_arrays(ts.trials, perturbed - ts.trials)
    else:
        x, idx = ts.trials, np.arange(ts.n)
        spr = math.inf
    pred = predict_batch(params, x)
    rca, bca, per_class = rca_bca(pred, ts.labels[idx], ts.num_classes)
    attack_rate = float(np.mean(pred != reference[idx]))
    rate = float(np.mean(pred == target)) if target is not None else None
    return EvalReport(rca, bca, per_class, attack_rate, rate, spr, ts.n)


@dataclass
class VictimPlan:
    name: str
    spec: ModelSpec
    train: TrainConfig | None = None


@dataclass
class AttackPlan:
    name: str
    method: str = "tlm"  # tlm | df
    config: AttackConfig = field(default_factory=AttackConfig)
    substitute: ModelSpec | None = None  # gray-box when set
    xi_times_std: bool = False  # interpret config.xi as a multiple of the data std


@dataclass
class ExperimentPlan:
    data: SynthConfig
    victims: list[VictimPlan]
    attacks: list[AttackPlan] = field(default_factory=list)
    split: str = "loso"  # loso | within
    folds: list | None = None  # loso: subject ids; within: (subject, fold) pairs
    noise_xi: float | None = None
    dataset_name: str = "synthetic"
    seed: int = 0


@dataclass
class ReportRow:
    cell: str
    dataset: str
    split: str
    victim: str
    attack: str
    report: EvalReport


def _derive_seed(*parts: int) -> int:
    h = 0
    for p in parts:
        h = (h * 1000003 + int(p) + 1) % (2**31 - 1)
    return h


def _craft(params: ModelParams, train, val, plan: AttackPlan, cfg: AttackConfig,
           train_seed: int):
    if plan.substitute is not None:
        sub, _ = fit_victim(plan.substitute, train, val, TrainConfig(seed=train_seed))
        target_model = sub
    else:
        target_model = params
    if plan.method == "df":
        return df_uap(target_model, train, cfg)
    if plan.method == "tlm":
        return tlm_uap(target_model, train, val, cfg)
    raise ValueError(f"unknown attack method {plan.method!r}")


def run_experiment(plan: ExperimentPlan) -> list[ReportRow]:
    """Executes the split protocol, trains victims, crafts attacks on the
    training folds, evaluates on test folds, and averages over folds."""
    ts = gen_synthetic(plan.data)
    if plan.split == "loso":
        folds = plan.folds or [int(ts.subjects.max())]
        splits = [("loso", s, loso_split(ts, s, seed=_derive_seed(plan.seed, 90, i)))
                  for i, s in enumerate(folds)]
    elif plan.split == "within":
        folds = plan.folds or [(int(ts.subjects.min()), 0)]
        splits = [("within", sf, within_subject_split(ts, sf[0], sf[1])) for sf in folds]
    else:
        raise ValueError(f"unknown split kind {plan.split!r}")

    cells: dict[tuple[str, str], list[EvalReport]] = {}
    order: list[tuple[str, str]] = []

    def record(victim: str, attack: str, report: EvalReport):
        key = (victim, attack)
        if key not in cells:
            cells[key] = []
            order.append(key)
        cells[key].append(report)

    for fold_i, (_, fold_id, (train, val, test)) in enumerate(splits):
        for vic_i, victim in enumerate(plan.victims):
            cell_name = f"{victim.name}@{fold_id}"
            try:
                tcfg = victim.train or TrainConfig(seed=_derive_seed(plan.seed, fold_i, vic_i))
                params, _ = fit_victim(victim.spec, train, val, tcfg)
                record(victim.name, "clean", evaluate(params, test))
                if plan.noise_xi is not None:
                    noisy = noise_baseline(test, plan.noise_xi,
                                           _derive_seed(plan.seed, fold_i, vic_i, 7))
                    record(victim.name, "noisy", evaluate(params, test, perturbed=noisy.trials))
                for atk_i, attack in enumerate(plan.attacks):
                    cfg = attack.config
                    if attack.xi_times_std:
                        cfg = replace(cfg, xi=cfg.xi * ts.std())
                    cfg = replace(cfg, seed=_derive_seed(plan.seed, fold_i, vic_i, atk_i, 13))
                    result = _craft(params, train, val, attack, cfg,
                                    _derive_seed(plan.seed, fold_i, vic_i, atk_i, 29))
                    record(victim.name, attack.name,
                           evaluate(params, test, result.uap, target=cfg.target,
                                    placement_seed=cfg.seed))
            except UapForgeError as exc:
                raise UapForgeError(f"experiment cell {cell_name!r} failed: {exc}") from exc

    rows = []
    for victim, attack in order:
        reports = cells[(victim, attack)]
        merged = EvalReport(
            rca=float(np.mean([r.rca for r in reports])),
            bca=float(np.mean([r.bca for r in reports])),
            per_class_rca=np.nanmean([r.per_class_rca for r in reports], axis=0).tolist(),
            asr=float(np.mean([r.asr for r in reports])),
            target_rate=(float(np.mean([r.target_rate for r in reports]))
                         if reports[0].target_rate is not None else None),
            spr_db=float(np.mean([r.spr_db for r in reports])),
            n=int(sum(r.n for r in reports)),
        )
        rows.append(ReportRow(f"{victim}/{attack}", plan.dataset_name, plan.split,
                              victim, attack, merged))
    return rows


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    if math.isinf(x):
        return "inf"
    return f"{x:.6f}"


REPORT_HEADER = "cell,dataset,split,victim,attack,rca,bca,asr,target_rate,spr_db,n"


def write_report_csv(rows: list[ReportRow], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(REPORT_HEADER + "\n")
        for r in rows:
            rep = r.report
            f.write(",".join([
                r.cell, r.dataset, r.split, r.victim, r.attack,
                _fmt(rep.rca), _fmt(rep.bca), _fmt(rep.asr),
                _fmt(rep.target_rate), _fmt(rep.spr_db), str(rep.n),
            ]) + "\n")


def write_report_json(rows: list[ReportRow], path) -> None:
    doc = []
    for r in rows:
        rep = r.report
        doc.append({
            "cell": r.cell, "dataset": r.dataset, "split": r.split,
            "victim": r.victim, "attack": r.attack,
            "rca": rep.rca, "bca": rep.bca,
            "per_class_rca": [None if math.isnan(x) else x for x in rep.per_class_rca],
            "asr": rep.asr, "target_rate": rep.target_rate,
            "spr_db": None if math.isinf(rep.spr_db) else rep.spr_db,
            "n": rep.n,
        })
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)

"""Command-line front door: dataset generation, victim training, UAP
crafting, evaluation, and hyper-parameter sweeps.

Exit codes: 0 success, 1 runtime/numerical failure, 2 usage or validation
error. All randomness flows from --seed, so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .attacks import (
    CHANNEL_INVARIANT,
    FULL,
    AttackConfig,
    craft_mini_uap,
    df_uap,
    load_uap,
    save_uap,
    tlm_uap,
    uap_to_csv,
)
from .data import (
    SynthConfig,
    gen_synthetic,
    loso_split,
    read_trials,
    within_subject_split,
    write_trials,
)
from .errors import UapForgeError
from .metrics import (
    EvalReport,
    PlacementPolicy,
    ReportRow,
    evaluate,
    noise_baseline,
    rca_bca,
    write_report_csv,
    write_report_json,
)
from .models import (
    ModelSpec,
    TrainConfig,
    fit_victim,
    load_model,
    predict_batch,
    save_model,
)


class _Usage(Exception):
    """Raised for validation problems that map to exit code 2."""


def _add_split_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--split", choices=["loso", "within"], default="loso")
    p.add_argument("--test-subject", type=int, default=None,
                   help="held-out subject for --split loso (default: last)")
    p.add_argument("--subject", type=int, default=None,
                   help="subject for --split within (default: first)")
    p.add_argument("--fold", type=int, default=0, help="test block for --split within")


def _resolve_split(ts, args, seed: int):
    if args.split == "loso":
        subject = args.test_subject if args.test_subject is not None else int(ts.subjects.max())
        return loso_split(ts, subject, seed=seed)
    subject = args.subject if args.subject is not None else int(ts.subjects.min())
    return within_subject_split(ts, subject, args.fold)


def _load_data(path: str):
    if not Path(path).is_file():
        raise _Usage(f"data file not found: {path}")
    return read_trials(path)


def _load_params(path: str):
    if not Path(path).is_file():
        raise _Usage(f"model file not found: {path}")
    return load_model(path)


def cmd_gen_data(args) -> int:
    try:
        cfg = SynthConfig(
            num_classes=args.classes, channels=args.channels, samples=args.samples,
            trials_per_class=args.per_class, num_subjects=args.subjects,
            noise_sigma=args.noise_sigma, class_amplitude=args.class_amplitude,
            subject_shift_sigma=args.subject_shift, seed=args.seed)
    except ValueError as exc:
        raise _Usage(str(exc)) from exc
    ts = gen_synthetic(cfg)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "trials.eegb"
        write_trials(ts, path)
    except OSError as exc:
        raise _Usage(f"cannot write to {args.out}: {exc}") from exc
    print(f"wrote {path} n={ts.n} C={ts.channels} T={ts.samples} K={ts.num_classes}")
    return 0


def _model_spec(args, ts) -> ModelSpec:
    if args.model == "affine":
        return ModelSpec.affine(ts.channels, ts.samples, ts.num_classes)
    return ModelSpec.small_cnn(
        ts.channels, ts.samples, ts.num_classes,
        temporal_filters=args.temporal_filters,
        temporal_kernel_len=args.temporal_kernel_len,
        pool_len=args.pool_len, pool_stride=args.pool_stride)


def cmd_train(args) -> int:
    ts = _load_data(args.data)
    try:
        spec = _model_spec(args, ts)
        train, val, _ = _resolve_split(ts, args, args.seed)
        cfg = TrainConfig(learning_rate=args.lr, max_epochs=args.epochs,
                          batch_size=args.batch_size, patience=args.patience,
                          seed=args.seed, class_weighting=args.class_weighting)
    except (ValueError, UapForgeError) as exc:
        raise _Usage(str(exc)) from exc
    params, report = fit_victim(spec, train, val, cfg)
    save_model(params, args.out)
    rca, bca, _ = rca_bca(predict_batch(params, val.trials), val.labels, ts.num_classes)
    print(f"wrote {args.out} validation RCA={rca:.4f} BCA={bca:.4f} "
          f"epochs={report.epochs_run}")
    return 0


def _parse_mini_shape(text: str) -> tuple[int, int]:
    try:
        c, t = text.lower().split("x")
        return int(c), int(t)
    except ValueError as exc:
        raise _Usage(f"--mini-shape must look like CxT, got {text!r}") from exc


def _attack_config(args, ts) -> AttackConfig:
    xi = args.xi * ts.std() if args.xi_unit == "std" else args.xi
    delta = args.delta if args.delta is not None else (0.8 if args.method == "df" else 1.0)
    max_iter = args.max_iter if args.max_iter is not None else (10 if args.method == "df" else 500)
    mode = CHANNEL_INVARIANT if args.mode == "channel-invariant" else FULL
    try:
        return AttackConfig(
            xi=xi, delta=delta, max_iter=max_iter, alpha=args.alpha,
            batch_size=args.batch_size, target=args.target, constraint=args.constraint,
            seed=args.seed, overshoot=args.overshoot, label_source=args.label_source,
            learning_rate=args.lr, patience=args.patience, uap_mode=mode)
    except ValueError as exc:
        raise _Usage(str(exc)) from exc


def _craft_result(args, params, train, val, ts):
    cfg = _attack_config(args, ts)
    if args.method == "df":
        return df_uap(params, train, cfg), cfg
    if args.mode == "mini":
        if args.mini_shape is None:
            raise _Usage("--mode mini requires --mini-shape CxT")
        return craft_mini_uap(params, train, val, cfg, _parse_mini_shape(args.mini_shape)), cfg
    return tlm_uap(params, train, val, cfg), cfg


def cmd_craft(args) -> int:
    if args.method == "df" and args.target is not None:
        raise _Usage("the DeepFool-based UAP supports non-target attacks only; "
                     "drop --target or use --method tlm")
    ts = _load_data(args.data)
    params = _load_params(args.model_file)
    if (params.spec.input_channels, params.spec.input_samples) != (ts.channels, ts.samples):
        raise _Usage("model input shape does not match the data file")
    train, val, _ = _resolve_split(ts, args, args.seed)
    result, cfg = _craft_result(args, params, train, val, ts)
    save_uap(result.uap, args.out)
    if args.csv:
        uap_to_csv(result.uap, args.csv)
    metric = "target rate" if cfg.target is not None else "ASR"
    print(f"wrote {args.out} validation {metric}={result.best_validation_asr:.4f} "
          f"epochs={result.iterations_run}")
    return 0


def cmd_eval(args) -> int:
    ts = _load_data(args.data)
    params = _load_params(args.model_file)
    if (params.spec.input_channels, params.spec.input_samples) != (ts.channels, ts.samples):
        raise _Usage("model input shape does not match the data file")
    _, _, test = _resolve_split(ts, args, args.seed)
    dataset = Path(args.data).stem
    victim = params.spec.kind
    policy = PlacementPolicy(count=args.placements, seed=args.seed)

    rows = [ReportRow(f"{victim}/clean", dataset, args.split, victim, "clean",
                      evaluate(params, test, target=args.target))]
    if args.baseline == "noise":
        noisy = noise_baseline(test, args.xi, args.seed)
        rows.append(ReportRow(f"{victim}/noisy", dataset, args.split, victim, "noisy",
                              evaluate(params, test, target=args.target,
                                       perturbed=noisy.trials)))
    if args.uap:
        if not Path(args.uap).is_file():
            raise _Usage(f"UAP file not found: {args.uap}")
        uap = load_uap(args.uap)
        full_shape = (ts.channels, ts.samples)
        cm, tm = uap.values.shape
        if uap.mode == FULL and (cm, tm) != full_shape:
            raise _Usage("full UAP shape does not match the data")
        if uap.mode == CHANNEL_INVARIANT and tm != ts.samples:
            raise _Usage("channel-invariant UAP length does not match the data")
        if cm > ts.channels or tm > ts.samples:
            raise _Usage("UAP template larger than the trials")
        rows.append(ReportRow(f"{victim}/uap", dataset, args.split, victim, "uap",
                              evaluate(params, test, uap, target=args.target,
                                       placement_policy=policy)))
    write_report_csv(rows, args.out)
    json_path = args.out[:-4] + ".json" if args.out.endswith(".csv") else args.out + ".json"
    write_report_json(rows, json_path)
    for r in rows:
        line = f"{r.cell}: RCA={r.report.rca:.4f} BCA={r.report.bca:.4f} ASR={r.report.asr:.4f}"
        if r.report.target_rate is not None:
            line += f" target-rate={r.report.target_rate:.4f}"
        print(line)
    print(f"wrote {args.out} and {json_path}")
    return 0


def cmd_sweep(args) -> int:
    ts = _load_data(args.data)
    params = _load_params(args.model_file)
    train, val, test = _resolve_split(ts, args, args.seed)
    try:
        values = [float(v) if args.param == "xi" else int(v)
                  for v in args.values.split(",") if v]
    except ValueError as exc:
        raise _Usage(f"bad --values list: {exc}") from exc
    if not values:
        raise _Usage("--values must list at least one point")

    lines = ["param,value,rca,bca,asr,target_rate,spr_db,n"]
    for value in values:
        sweep_args = args
        craft_train = train
        if args.param == "xi":
            sweep_args = argparse.Namespace(**{**vars(args), "xi": value})
        elif args.param == "batch-size":
            sweep_args = argparse.Namespace(**{**vars(args), "batch_size": value})
        elif args.param == "train-size":
            if not 1 <= value <= train.n:
                raise _Usage(f"train-size {value} outside [1, {train.n}]")
            keep = np.random.default_rng([args.seed, 8]).permutation(train.n)[:value]
            craft_train = train.subset(np.sort(keep))
        result, cfg = _craft_result(sweep_args, params, craft_train, val, ts)
        rep = evaluate(params, test, result.uap, target=cfg.target,
                       placement_seed=cfg.seed)
        rate = "" if rep.target_rate is None else f"{rep.target_rate:.6f}"
        spr = "inf" if rep.spr_db == float("inf") else f"{rep.spr_db:.6f}"
        lines.append(f"{args.param},{value:g},{rep.rca:.6f},{rep.bca:.6f},"
                     f"{rep.asr:.6f},{rate},{spr},{rep.n}")
        print(lines[-1])
    Path(args.out).write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uapforge",
        description="Craft and evaluate universal adversarial perturbations "
                    "against multichannel time-series classifiers.")
    parser.add_argument("--config", default=None,
                        help="JSON file of flag defaults; explicit flags win")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic trial file")
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--channels", type=int, default=8)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--per-class", type=int, default=200)
    g.add_argument("--subjects", type=int, default=4)
    g.add_argument("--noise-sigma", type=float, default=SynthConfig.noise_sigma)
    g.add_argument("--class-amplitude", type=float, default=SynthConfig.class_amplitude)
    g.add_argument("--subject-shift", type=float, default=SynthConfig.subject_shift_sigma)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a victim classifier")
    t.add_argument("--data", required=True)
    t.add_argument("--model", choices=["affine", "small-cnn"], default="small-cnn")
    t.add_argument("--temporal-filters", type=int, default=ModelSpec.temporal_filters)
    t.add_argument("--temporal-kernel-len", type=int, default=ModelSpec.temporal_kernel_len)
    t.add_argument("--pool-len", type=int, default=ModelSpec.pool_len)
    t.add_argument("--pool-stride", type=int, default=ModelSpec.pool_stride)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--patience", type=int, default=15)
    t.add_argument("--class-weighting", choices=["inverse", "uniform"], default="inverse")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True, help="model JSON path")
    _add_split_flags(t)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("craft", help="craft a UAP against a trained model")
    c.add_argument("--data", required=True)
    c.add_argument("--model-file", required=True)
    c.add_argument("--method", choices=["df", "tlm"], default="tlm")
    c.add_argument("--target", type=int, default=None)
    c.add_argument("--mode", choices=["full", "channel-invariant", "mini"], default="full")
    c.add_argument("--mini-shape", default=None, help="template shape CxT for --mode mini")
    c.add_argument("--constraint", choices=["none", "l1", "l2"], default="none")
    c.add_argument("--alpha", type=float, default=0.0)
    c.add_argument("--xi", type=float, default=0.2)
    c.add_argument("--xi-unit", choices=["raw", "std"], default="raw",
                   help="std interprets --xi as a multiple of the dataset std")
    c.add_argument("--delta", type=float, default=None,
                   help="stop threshold (default 0.8 for df, 1.0 for tlm)")
    c.add_argument("--max-iter", type=int, default=None,
                   help="epoch cap (default 10 for df, 500 for tlm)")
    c.add_argument("--batch-size", type=int, default=32)
    c.add_argument("--lr", type=float, default=AttackConfig.learning_rate)
    c.add_argument("--label-source", choices=["true", "predicted"], default="predicted")
    c.add_argument("--overshoot", type=float, default=0.02)
    c.add_argument("--patience", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out", required=True, help="UAP binary path")
    c.add_argument("--csv", default=None, help="also export the UAP as CSV")
    _add_split_flags(c)
    c.set_defaults(func=cmd_craft)

    e = sub.add_parser("eval", help="evaluate a model, optionally under a UAP")
    e.add_argument("--data", required=True)
    e.add_argument("--model-file", required=True)
    e.add_argument("--uap", default=None)
    e.add_argument("--baseline", choices=["noise"], default=None)
    e.add_argument("--xi", type=float, default=0.2, help="noise amplitude for --baseline noise")
    e.add_argument("--target", type=int, default=None)
    e.add_argument("--placements", type=int, default=30, help="mini-UAP placements per trial")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="report CSV path")
    _add_split_flags(e)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="grid over xi / batch size / crafting set size")
    s.add_argument("--data", required=True)
    s.add_argument("--model-file", required=True)
    s.add_argument("--param", choices=["xi", "batch-size", "train-size"], required=True)
    s.add_argument("--values", required=True, help="comma-separated grid points")
    s.add_argument("--method", choices=["df", "tlm"], default="tlm")
    s.add_argument("--target", type=int, default=None)
    s.add_argument("--mode", choices=["full", "channel-invariant", "mini"], default="full")
    s.add_argument("--mini-shape", default=None)
    s.add_argument("--constraint", choices=["none", "l1", "l2"], default="none")
    s.add_argument("--alpha", type=float, default=0.0)
    s.add_argument("--xi", type=float, default=0.2)
    s.add_argument("--xi-unit", choices=["raw", "std"], default="raw")
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--max-iter", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=AttackConfig.learning_rate)
    s.add_argument("--label-source", choices=["true", "predicted"], default="predicted")
    s.add_argument("--overshoot", type=float, default=0.02)
    s.add_argument("--patience", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="sweep CSV path")
    _add_split_flags(s)
    s.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    pre, _ = argparse.ArgumentParser(add_help=False).parse_known_args(argv)
    conf_parser = argparse.ArgumentParser(add_help=False)
    conf_parser.add_argument("--config", default=None)
    pre, _ = conf_parser.parse_known_args(argv)
    if pre.config:
        try:
            with open(pre.config, "r", encoding="utf-8") as f:
                conf = json.load(f)
            if not isinstance(conf, dict):
                raise ValueError("config must be a JSON object")
        except (OSError, ValueError) as exc:
            print(f"error: cannot load config {pre.config}: {exc}", file=sys.stderr)
            return 2
        for action in parser._subparsers._group_actions[0].choices.values():
            dests = {a.dest for a in action._actions}
            action.set_defaults(**{k: v for k, v in conf.items() if k in dests})
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _Usage as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UapForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line pipeline: synth, prep, train, score, eval, fuse.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or input
validation. Every command with a --seed is bit-reproducible. Effective
settings are echoed into the text outputs they produce.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as dataio
from . import grbm as grbmio
from . import metrics as metricsmod
from . import plda as pldamod
from . import scoring as scoringmod
from . import synth as synthmod
from . import train as trainmod
from .errors import NumericError, ValidationError
from .mathutil import derive_rng

TRUTH_RNG_INDEX = 2**31 - 1


def _parse_range(text: str, flag: str) -> tuple:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError as exc:
        raise ValidationError(f"{flag} expects lo:hi, got {text!r}") from exc


def _parse_dims(text: str, flag: str) -> tuple:
    try:
        a, b = text.split(",")
        return int(a), int(b)
    except ValueError as exc:
        raise ValidationError(f"{flag} expects two comma-separated integers, got {text!r}") from exc


def _random_truth(spec: str, seed: int, f_scale: float, g_scale: float) -> grbmio.GrbmParams:
    try:
        p, ds, dc = (int(v) for v in spec.split(","))
    except ValueError as exc:
        raise ValidationError(f"--truth random:p,ds,dc malformed: {spec!r}") from exc
    rng = derive_rng(seed, TRUTH_RNG_INDEX)
    F = rng.standard_normal((p, ds)) * (f_scale / np.sqrt(p))
    G = rng.standard_normal((p, dc)) * (g_scale / np.sqrt(p))
    # Hidden biases offset the per-column Gaussian-integral gain so the
    # latent prior stays spread over configurations.
    return grbmio.GrbmParams(
        b=np.zeros(p),
        f=-0.5 * np.sum(F**2, axis=0),
        g=-0.5 * np.sum(G**2, axis=0),
        F=F,
        G=G,
        z=np.zeros(p),
    )


def cmd_synth(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    per_speaker = _parse_range(args.per_speaker, "--per-speaker")
    if args.truth.startswith("random:"):
        truth = _random_truth(args.truth[len("random:"):], args.seed, args.f_scale, args.g_scale)
    else:
        truth = grbmio.load_grbm(args.truth)
    corpus, manifest = synthmod.synth_corpus(truth, args.speakers, per_speaker, args.seed)
    dataio.save_corpus(corpus, os.path.join(args.out_dir, "corpus.csv"))
    grbmio.save_grbm(truth, os.path.join(args.out_dir, "truth.grbm"))
    manifest["truth_source"] = args.truth
    synthmod.write_manifest(manifest, os.path.join(args.out_dir, "manifest.txt"))
    return 0


def cmd_prep(args) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    corpus = dataio.load_corpus(args.data)
    settings = {"data": args.data}
    if args.min_duration is not None:
        corpus = dataio.filter_by_duration(corpus, args.min_duration)
        settings["min_duration"] = args.min_duration
    outputs = {}
    if args.partition:
        part = dataio.partition_by_count(
            corpus,
            train_range=_parse_range(args.train_range, "--train-range"),
            eval_range=_parse_range(args.eval_range, "--eval-range"),
            cv_min=args.cv_min,
            enroll_per_speaker=args.enroll,
        )
        outputs = {
            "train": part.train,
            "model": part.model,
            "test": part.test,
            "model_cv": part.model_cv,
            "test_cv": part.test_cv,
        }
        settings.update(
            train_range=args.train_range,
            eval_range=args.eval_range,
            cv_min=args.cv_min,
            enroll=args.enroll,
        )
    else:
        outputs = {"corpus": corpus}
    if args.whiten:
        fit_on = outputs.get("train", corpus)
        transform = dataio.fit_whitening(fit_on)
        dataio.save_whitening(transform, os.path.join(args.out_dir, "whitening.bin"))
        outputs = {k: dataio.apply_whitening(transform, v) if len(v) else v for k, v in outputs.items()}
        settings["whiten"] = True
    if args.sphere:
        outputs = {k: dataio.unit_sphere_project(v) if len(v) else v for k, v in outputs.items()}
        settings["sphere"] = True
    for name, c in outputs.items():
        dataio.save_corpus(c, os.path.join(args.out_dir, f"{name}.csv"))
    synthmod.write_manifest(settings, os.path.join(args.out_dir, "prep.txt"))
    return 0


def _load_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ValidationError(f"{path}:{lineno}: expected key = value")
            key, val = (part.strip() for part in body.split("=", 1))
            values[key] = val
    return values


_TRAIN_KEYS = {
    "lr": float,
    "momentum": float,
    "weight_decay": float,
    "batch": int,
    "epochs": int,
    "cd_steps": int,
    "learn_sigma": lambda v: v.lower() in ("1", "true", "yes"),
    "init_std": float,
    "seed": int,
    "eval_every": int,
    "dims": str,
    "em_iters": int,
}


def _effective_train_settings(args) -> dict:
    """Defaults, overridden by the config file, overridden by flags."""
    defaults = {
        "lr": 0.01,
        "momentum": 0.5,
        "weight_decay": 0.0,
        "batch": 256,
        "epochs": 40,
        "cd_steps": 1,
        "learn_sigma": False,
        "init_std": 0.01,
        "seed": 0,
        "eval_every": 1,
        "dims": None,
        "em_iters": 20,
    }
    effective = dict(defaults)
    if args.config:
        raw = _load_config_file(args.config)
        for key, val in raw.items():
            if key not in _TRAIN_KEYS:
                raise ValidationError(f"unknown config key {key!r}")
            effective[key] = _TRAIN_KEYS[key](val)
    for key in defaults:
        flag_value = getattr(args, key, None)
        if flag_value is not None:
            effective[key] = flag_value
    return effective


def cmd_train(args) -> int:
    cfg = _effective_train_settings(args)
    if cfg["dims"] is None:
        raise ValidationError("--dims is required (hidden dims ds,dc or PLDA dims qs,qc)")
    corpus = dataio.load_corpus(args.data)
    d1, d2 = _parse_dims(cfg["dims"], "--dims")
    report_path = args.report or f"{args.out}.report.csv"
    header = [f"{k} = {v}" for k, v in sorted(cfg.items())] + [f"data = {args.data}"]

    if args.plda:
        params = pldamod.plda_train(corpus, d1, d2, em_iters=cfg["em_iters"], seed=cfg["seed"])
        pldamod.save_plda(params, args.out)
        loglik = pldamod.plda_log_likelihood(params, corpus)
        with open(report_path, "w", encoding="utf-8") as fh:
            for line in header:
                fh.write(f"# {line}\n")
            fh.write("em_iters,loglik\n")
            fh.write(f"{cfg['em_iters']},{loglik!r}\n")
        return 0

    config = trainmod.TrainConfig(
        learning_rate=cfg["lr"],
        momentum=cfg["momentum"],
        weight_decay=cfg["weight_decay"],
        batch_speakers=cfg["batch"],
        epochs=cfg["epochs"],
        cd_steps=cfg["cd_steps"],
        learn_sigma=cfg["learn_sigma"],
        init_weight_std=cfg["init_std"],
        seed=cfg["seed"],
        eval_every=cfg["eval_every"],
    )
    cv = None
    if args.cv_model or args.cv_test:
        if not (args.cv_model and args.cv_test):
            raise ValidationError("--cv-model and --cv-test must be given together")
        cv = (dataio.load_corpus(args.cv_model), dataio.load_corpus(args.cv_test))
    if args.checkpoint_dir:
        os.makedirs(args.checkpoint_dir, exist_ok=True)
    params, report = trainmod.train(
        corpus, d1, d2, config, cv=cv, checkpoint_dir=args.checkpoint_dir
    )
    grbmio.save_grbm(params, args.out)
    report.write_csv(report_path, header_comments=header)
    return 0


def cmd_score(args) -> int:
    model_corpus = dataio.load_corpus(args.model_data)
    test_corpus = dataio.load_corpus(args.test_data)
    grbm = grbmio.load_grbm(args.grbm) if args.grbm else None
    plda = pldamod.load_plda(args.plda) if args.plda else None
    trials = metricsmod.build_trials(model_corpus, test_corpus)
    score_file = scoringmod.score_trial_file(
        trials,
        args.scorer,
        model_corpus,
        test_corpus,
        grbm=grbm,
        plda=plda,
        exact_z=args.exact_z,
    )
    scoringmod.write_score_file(score_file, args.out)
    return 0


def cmd_eval(args) -> int:
    score_file = scoringmod.read_score_file(args.scores)
    report = metricsmod.compute_metrics(score_file, fa_cost=args.fa_cost)
    metricsmod.write_metrics(report, args.metrics_out, fa_cost=args.fa_cost)
    if args.det_out:
        metricsmod.export_det(report, args.det_out)
    return 0


def cmd_fuse(args) -> int:
    if not args.weights_in and not args.cv_scores:
        raise ValidationError("fuse needs --cv-scores (to train) or --weights-in")
    if args.weights_in:
        weights = scoringmod.load_fusion_weights(args.weights_in)
    else:
        cv_files = [scoringmod.read_score_file(p) for p in args.cv_scores]
        weights = scoringmod.fuse_train(cv_files, seed=args.seed)
    if args.weights_out:
        scoringmod.save_fusion_weights(weights, args.weights_out)
    if args.apply:
        apply_files = [scoringmod.read_score_file(p) for p in args.apply]
        fused = scoringmod.fuse_apply(weights, apply_files)
        if not args.out:
            raise ValidationError("--out is required with --apply")
        scoringmod.write_score_file(fused, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spkrbm",
        description="Speaker-subspace GRBM toolkit: synthesize, preprocess, train, score, evaluate, fuse.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a labelled corpus from a truth model")
    p.add_argument("--truth", required=True, help="model file or random:p,ds,dc")
    p.add_argument("--speakers", type=int, required=True)
    p.add_argument("--per-speaker", required=True, metavar="LO:HI")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--f-scale", type=float, default=2.5, help="random-truth speaker column scale")
    p.add_argument("--g-scale", type=float, default=1.0, help="random-truth channel column scale")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prep", help="filter, partition, whiten, and sphere-project a corpus")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--min-duration", type=float, default=None)
    p.add_argument("--partition", action="store_true")
    p.add_argument("--train-range", default="3:10", metavar="LO:HI")
    p.add_argument("--eval-range", default="11:15", metavar="LO:HI")
    p.add_argument("--cv-min", type=int, default=15)
    p.add_argument("--enroll", type=int, default=5)
    p.add_argument("--whiten", action="store_true", help="fit on train (or all), apply everywhere")
    p.add_argument("--sphere", action="store_true")
    p.set_defaults(func=cmd_prep)

    p = sub.add_parser("train", help="train a GRBM (default) or PLDA (--plda) model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dims", default=None, metavar="D1,D2")
    p.add_argument("--plda", action="store_true")
    p.add_argument("--config", default=None, help="flat key = value file; flags override it")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--momentum", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None, dest="weight_decay")
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--cd-steps", type=int, default=None, dest="cd_steps")
    p.add_argument("--learn-sigma", action="store_const", const=True, default=None, dest="learn_sigma")
    p.add_argument("--init-std", type=float, default=None, dest="init_std")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", type=int, default=None, dest="eval_every")
    p.add_argument("--em-iters", type=int, default=None, dest="em_iters")
    p.add_argument("--cv-model", default=None)
    p.add_argument("--cv-test", default=None)
    p.add_argument("--report", default=None)
    p.add_argument("--checkpoint-dir", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score model-vs-test trials")
    p.add_argument("--scorer", required=True, choices=["llr", "cos", "cosnorm", "plda", "plda-fproj"])
    p.add_argument("--model-data", required=True)
    p.add_argument("--test-data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grbm", default=None)
    p.add_argument("--plda", default=None)
    p.add_argument("--exact-z", action="store_true", help="add exact partition terms to llr")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER / minDCF / DET from a labelled score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--metrics-out", required=True)
    p.add_argument("--det-out", default=None)
    p.add_argument("--fa-cost", type=float, default=100.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", help="train fusion weights on CV scores and combine systems")
    p.add_argument("--cv-scores", nargs="+", default=None)
    p.add_argument("--apply", nargs="+", default=None)
    p.add_argument("--weights-out", default=None)
    p.add_argument("--weights-in", default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_fuse)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

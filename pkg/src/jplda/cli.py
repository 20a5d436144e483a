"""Command-line pipeline: synth, preprocess, train, score and eval.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every command writes ``<output>.manifest.json`` next to its main output.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from pathlib import Path

import numpy as np

from . import __version__, backend, metrics, preprocess, synth, tied
from .data import (PldaParams, read_dataset, read_model, read_scores, read_trials, write_dataset, write_model,
                   write_scores, write_trials)
from .errors import DataError, NumericalError
from .joint import ConditionPriors
from .standard import DEFAULT_RX, DEFAULT_RY

log = logging.getLogger("jplda")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _manifest(args, outputs: list[Path], inputs: list, started: float, resolved: dict | None = None) -> None:
    flags = {k: (str(v) if isinstance(v, Path) else v)
             for k, v in sorted(vars(args).items()) if k not in ("func", "started")}
    doc = {
        "command": args.command,
        "flags": flags,
        "resolved": resolved or {},
        "seeds": {k: v for k, v in flags.items() if "seed" in k},
        "inputs": [str(p) for p in inputs if p is not None],
        "outputs": [str(p) for p in outputs],
        "wall_clock_seconds": round(time.perf_counter() - started, 6),
        "version": __version__,
    }
    main = outputs[0]
    Path(f"{main}.manifest.json").write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    config = synth.ScenarioConfig.read(args.config) if args.config else synth.ScenarioConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.single_condition:
        changes["bilingual_fraction"] = 0.0
    if changes:
        config = config.replace(**changes)
    sc = synth.make_scenario(config, per_cell=args.per_cell)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "train.tsv", out / "test.tsv", out / "trials.tsv", out / "true_model.json",
             out / "scenario.json"]
    write_dataset(sc.train, paths[0])
    write_dataset(sc.test, paths[1])
    write_trials(sc.trials, paths[2])
    write_model(sc.model, paths[3])
    paths[4].write_text(config.to_json() + "\n", encoding="utf-8")
    print(f"train={sc.train.n_samples} test={sc.test.n_samples} trials={len(sc.trials)}")
    return _done(args, paths, [args.config])


def cmd_preprocess_fit(args) -> int:
    data = read_dataset(args.data)
    dim = args.dim
    if dim is None:
        dim = min(preprocess.DEFAULT_LDA_DIM, data.dim, data.n_speakers - 1)
        log.info("LDA dimension defaulted to %d", dim)
    pipe = preprocess.fit_lda(data, dim)
    preprocess.write_pipeline(pipe, args.out)
    return _done(args, [Path(args.out)], [args.data])


def cmd_preprocess_apply(args) -> int:
    pipe = preprocess.read_pipeline(args.pipeline)
    data = read_dataset(args.data)
    write_dataset(preprocess.apply_dataset(pipe, data), args.out)
    return _done(args, [Path(args.out)], [args.pipeline, args.data])


def _resolve_ranks(args, data, component_map) -> tuple[int, int]:
    max_ry, max_rx = backend.rank_limits(args.model, data, component_map)
    ry, rx = args.ry, args.rx
    if ry is None:
        ry = min(DEFAULT_RY, max_ry)
        if ry < DEFAULT_RY:
            warnings.warn(f"speaker rank clamped from {DEFAULT_RY} to {ry} by the training data")
    elif not 1 <= ry <= max_ry:
        raise DataError(f"--ry {ry} outside [1, {max_ry}] for this {args.model} training set")
    if args.model in ("splda", "tplda"):
        if rx not in (None, 0):
            raise DataError(f"{args.model} has no condition subspace; --rx must be 0")
        return ry, 0
    low = 1 if args.model == "fplda" else 0
    if rx is None:
        rx = min(DEFAULT_RX, max_rx)
        if rx < DEFAULT_RX:
            warnings.warn(f"condition rank clamped from {DEFAULT_RX} to {rx} by the training data")
    elif not low <= rx <= max_rx:
        raise DataError(f"--rx {rx} outside [{low}, {max_rx}] for this {args.model} training set")
    return ry, rx


def cmd_train(args) -> int:
    data = read_dataset(args.data)
    if args.model in ("jplda", "tplda"):
        data.require_conditions(f"{args.model} training")
    component_map = None
    if args.model == "tplda":
        if not args.component_map:
            raise DataError("tplda needs --component-map cond=comp,...")
        component_map = tied.parse_component_map(args.component_map)
    elif args.component_map:
        raise DataError("--component-map only applies to tplda")
    ry, rx = _resolve_ranks(args, data, component_map)
    defaults = backend.DEFAULTS[args.model]
    resolved = {"ry": ry, "rx": rx,
                "iters": defaults.n_iters if args.iters is None else args.iters,
                "init": defaults.init if args.init is None else args.init,
                "d_diagonal": defaults.d_diagonal if args.d_diagonal is None else args.d_diagonal}
    model, trace = backend.train(args.model, data, ry, rx, n_iters=resolved["iters"], init=resolved["init"],
                                 seed=args.seed, d_diagonal=resolved["d_diagonal"], component_map=component_map)
    write_model(model, args.out)
    sys.stdout.write("iter\tloglik\n" + "".join(f"{i}\t{v!r}\n" for i, v in enumerate(trace)))
    return _done(args, [Path(args.out)], [args.data], resolved)


def cmd_score(args) -> int:
    model = read_model(args.model_file)
    enroll = read_dataset(args.enroll)
    test = enroll if args.test == args.enroll else read_dataset(args.test)
    trials = read_trials(args.trials)
    priors = ConditionPriors(args.p_same_cond_ss, args.p_same_cond_ds)
    if args.known_condition and not (isinstance(model, PldaParams) and model.variant == "jplda"):
        raise DataError("--known-condition applies to jplda models only")
    if args.use_oracle and 2 * model.dim > 5000:
        raise DataError("--use-oracle is limited to models with 2*dim <= 5000")
    scores = backend.score(model, enroll, test, trials, priors=priors, known_condition=args.known_condition,
                           threads=args.threads, use_oracle=args.use_oracle)
    write_scores(scores, args.out)
    return _done(args, [Path(args.out)], [args.model_file, args.enroll, args.test, args.trials])


def _write_det(points, path) -> None:
    lines = ["p_fa\tp_miss\tprobit_fa\tprobit_miss\n"]
    lines += [f"{p.p_fa!r}\t{p.p_miss!r}\t{p.probit_fa!r}\t{p.probit_miss!r}\n" for p in points]
    Path(path).write_text("".join(lines), encoding="utf-8")


def cmd_eval(args) -> int:
    scores = read_scores(args.scores)
    trials = read_trials(args.trials)
    if not trials.has_keys:
        raise DataError("evaluation needs target/impostor keys on every trial")
    if args.subset_by_condition and not trials.has_cond_tags:
        raise DataError("--subset-by-condition needs same/cross tags on every trial")
    lines = []
    inputs = [args.scores, args.trials] + list(args.data or [])
    if args.calibrate_cv:
        if not args.data:
            raise DataError("--calibrate-cv needs --data to map samples to speakers")
        speaker_of: dict[str, str] = {}
        for path in args.data:
            ds = read_dataset(path)
            speaker_of.update(zip(ds.sample_ids, ds.speakers()))
        calibrated = metrics.cv_calibrate(scores, trials, speaker_of, args.calibrate_cv, args.seed)
        kept = {p for p in zip(calibrated.enroll_ids, calibrated.test_ids)}
        mask = np.array([p in kept for p in zip(trials.enroll_ids, trials.test_ids)])
        trials = trials.select(mask)
        raw = metrics.evaluate(scores, trials)
        scores = calibrated
        if args.out_scores:
            write_scores(calibrated, args.out_scores)
    report = metrics.evaluate(scores, trials, args.det_points, args.subset_by_condition)
    lines.append(report.summary())
    for name, sub in report.subsets.items():
        lines.append(sub.summary(name))
    if args.calibrate_cv:
        lines.append(f"uncalibrated eer={raw.eer!r} cllr={raw.cllr!r} dropped_cross_split={int(np.sum(~mask))}")
    print("\n".join(lines))
    _write_det(report.det, args.out_det)
    outputs = [Path(args.out_det)] + ([Path(args.out_scores)] if args.calibrate_cv and args.out_scores else [])
    return _done(args, outputs, inputs)


def _done(args, outputs, inputs, resolved=None) -> int:
    _manifest(args, outputs, inputs, args.started, resolved)
    return 0


# ---------------------------------------------------------------- parser

def _probability(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"probability {value} outside [0, 1]")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="jplda", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scenario")
    p.add_argument("--config", help="ScenarioConfig JSON (defaults used when absent)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--single-condition", action="store_true", help="train speakers keep one condition each")
    p.add_argument("--per-cell", type=_positive, default=1000, help="trials per key/condition cell")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="fit or apply the LDA + length-norm pipeline")
    psub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    q = psub.add_parser("fit")
    q.add_argument("--data", required=True)
    q.add_argument("--dim", type=_positive, help="LDA dimension (default min(400, dim, speakers-1))")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_preprocess_fit)
    q = psub.add_parser("apply")
    q.add_argument("--pipeline", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_preprocess_apply)

    p = sub.add_parser("train", help="train a back-end model")
    p.add_argument("--model", required=True, choices=("splda", "fplda", "tplda", "jplda"))
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ry", type=int, help=f"speaker rank (default {DEFAULT_RY}, clamped to the data)")
    p.add_argument("--rx", type=int, help=f"condition/channel rank (default {DEFAULT_RX}, clamped to the data)")
    p.add_argument("--iters", type=int, help="EM iterations (per-variant default)")
    p.add_argument("--init", choices=("random", "smart"), help="initialization (per-variant default)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-diagonal", action=argparse.BooleanOptionalAction, default=None,
                   help="diagonal noise precision (default: fplda/tplda diagonal, others full)")
    p.add_argument("--component-map", help="tplda condition-to-component map, e.g. en=0,es=1,fr=1")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="score trials with a trained model")
    p.add_argument("--model-file", required=True)
    p.add_argument("--enroll", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--p-same-cond-ss", type=_probability, default=0.5,
                   help="P(same condition | same speaker), jplda only")
    p.add_argument("--p-same-cond-ds", type=_probability, default=0.5,
                   help="P(same condition | different speakers), jplda only")
    p.add_argument("--known-condition", action="store_true", help="use the trials' same/cross tags (jplda)")
    p.add_argument("--use-oracle", action="store_true", help="dense reference computation (small models)")
    p.add_argument("--threads", type=_positive, default=1)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", help="EER, Cllr and DET points")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out-det", required=True)
    p.add_argument("--det-points", type=_positive, help="downsample the DET curve")
    p.add_argument("--subset-by-condition", action="store_true")
    p.add_argument("--calibrate-cv", type=int, metavar="N", help="N-split by-speaker calibration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", action="append", help="dataset TSV(s) mapping sample ids to speakers")
    p.add_argument("--out-scores", help="write calibrated scores here")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "eval" and args.calibrate_cv is not None and args.calibrate_cv < 2:
        parser.error("--calibrate-cv needs at least 2 splits")
    if args.command == "train" and args.iters is not None and args.iters < 0:
        parser.error("--iters must be >= 0")
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    args.started = time.perf_counter()
    try:
        return args.func(args)
    except DataError as exc:
        print(f"jplda: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"jplda: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    finally:
        logging.captureWarnings(False)


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``taskcal <command> ...``.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .calibrate import Calibrator, FitConfig, deserialize, fit, serialize
from .core import FORMAT_VERSION, NumericalError, ValidationError, categorical_space, dump_dataset, load_dataset
from .decision import mbr_decode_batch
from .harness import (
    PRESETS,
    ExperimentConfig,
    TaskSpec,
    dump_task_spec,
    generate_synthetic,
    load_task_spec,
    report_bytes,
    run_experiment,
)
from .losses import LossSpec
from .metrics import (
    DEFAULT_BANDWIDTH,
    DEFAULT_BINS_PER_DIM,
    TceBinConfig,
    action_movement_matrix,
    evaluate,
    tce_binned,
    tce_kde,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _write(path: str, data: bytes) -> None:
    if path == "-":
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()
        return
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise ValidationError(f"cannot write {path}: {exc.strerror}") from None


def _read(path: str) -> bytes:
    if path == "-":
        return sys.stdin.buffer.read()
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read {path}: {exc.strerror}") from None


def _json(obj) -> bytes:
    return (json.dumps(obj, indent=2) + "\n").encode("utf-8")


def _jsonl(rows) -> bytes:
    return "".join(json.dumps(r) + "\n" for r in rows).encode("utf-8")


def _load_calibrator(path: str | None, C: int) -> Calibrator:
    if path is None:
        return Calibrator.identity(C)
    return deserialize(_read(path), expected_dimension=C)


def cmd_synth(args) -> None:
    ds, truth = generate_synthetic(args.n, args.classes, args.preset, args.seed)
    _write(args.output, dump_dataset(ds))
    if args.task_spec_output:
        _write(args.task_spec_output, dump_task_spec(TaskSpec(ds.space, LossSpec("exact_match"))))
    if args.truth_output:
        rows = [{"id": i, "probs": [float(x) for x in p]} for i, p in zip(ds.ids, truth.true_probs)]
        _write(args.truth_output, _jsonl(rows))


def _fit_config(args) -> FitConfig:
    return FitConfig(max_iterations=args.max_iters, gradient_tolerance=args.tol, seed=args.seed)


def cmd_fit(args) -> None:
    spec = load_task_spec(_read(args.task_spec))
    ds = load_dataset(_read(args.input), spec.space)
    cal = fit(ds, args.family, _fit_config(args))
    _write(args.output, serialize(cal))


def cmd_apply(args) -> None:
    cal = deserialize(_read(args.calibrator))
    space = categorical_space([str(i) for i in range(cal.dimension)])
    ds = load_dataset(_read(args.input), space, require_labels=False)
    P = cal.apply(ds.beliefs) if len(ds) else ds.beliefs
    rows = [{"id": i, "probs": [float(x) for x in p]} for i, p in zip(ds.ids, P)]
    _write(args.output, _jsonl(rows))


def cmd_decode(args) -> None:
    spec = load_task_spec(_read(args.task_spec))
    loss = spec.loss_matrix()
    cal = _load_calibrator(args.calibrator, spec.space.n_classes)
    ds = load_dataset(_read(args.input), spec.space, require_labels=False)
    actions = mbr_decode_batch(cal.apply(ds.beliefs), loss) if len(ds) else []
    rows = [
        {"id": i, "action_index": int(a), "action_label": spec.space.labels[a]}
        for i, a in zip(ds.ids, actions)
    ]
    _write(args.output, _jsonl(rows))


def cmd_eval(args) -> None:
    spec = load_task_spec(_read(args.task_spec))
    loss = spec.loss_matrix()
    C = spec.space.n_classes
    cal = _load_calibrator(args.calibrator, C)
    ds = load_dataset(_read(args.input), spec.space)
    bins = TceBinConfig(args.bins_per_dim)
    out = {
        "format_version": FORMAT_VERSION,
        "calibrator_family": cal.family,
        "uncalibrated": evaluate(ds, loss, config=bins).to_dict(),
        "calibrated": evaluate(ds.with_beliefs(cal.apply(ds.beliefs)), loss, config=bins).to_dict(),
        "action_movement": action_movement_matrix(ds, cal, loss).tolist(),
    }
    _write(args.output, _json(out))


def cmd_tce(args) -> None:
    spec = load_task_spec(_read(args.task_spec))
    loss = spec.loss_matrix()
    ds = load_dataset(_read(args.input), spec.space)
    if args.estimator == "binned":
        value = tce_binned(ds, loss, TceBinConfig(args.bins_per_dim))
    else:
        value = tce_kde(ds, loss, args.bandwidth)
    out = {
        "format_version": FORMAT_VERSION,
        "estimator": args.estimator,
        "bins_per_dimension": args.bins_per_dim if args.estimator == "binned" else None,
        "bandwidth": args.bandwidth if args.estimator == "kde" else None,
        "n": len(ds),
        "tce": value,
    }
    _write(args.output, _json(out))


def cmd_cv(args) -> None:
    spec = load_task_spec(_read(args.task_spec))
    ds = load_dataset(_read(args.input), spec.space)
    config = ExperimentConfig(
        loss=spec.loss,
        folds=args.folds,
        seed=args.seed,
        family=args.family,
        fit=_fit_config(args),
        bins=TceBinConfig(args.bins_per_dim),
    )
    _write(args.report, report_bytes(run_experiment(ds, config)))


def _add_fit_flags(p, families=("temperature", "dirichlet")):
    p.add_argument("--family", choices=families, default="dirichlet")
    p.add_argument("--max-iters", type=int, default=FitConfig.max_iterations)
    p.add_argument("--tol", type=float, default=FitConfig.gradient_tolerance)
    p.add_argument("--seed", type=int, default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="taskcal", description="Task calibration and MBR decoding of latent beliefs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--preset", choices=PRESETS, default="overconfident")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output", default="-")
    p.add_argument("--task-spec-output")
    p.add_argument("--truth-output")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit a calibration map")
    p.add_argument("--task-spec", required=True)
    p.add_argument("--input", required=True)
    _add_fit_flags(p)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("apply", help="calibrate beliefs")
    p.add_argument("--calibrator", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("decode", help="MBR-decode (calibrated) beliefs")
    p.add_argument("--task-spec", required=True)
    p.add_argument("--calibrator")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="loss, TCE, ECE and action movement")
    p.add_argument("--task-spec", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--calibrator")
    p.add_argument("--bins-per-dim", type=int, default=DEFAULT_BINS_PER_DIM)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("tce", help="task calibration error")
    p.add_argument("--task-spec", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--estimator", choices=("binned", "kde"), default="binned")
    p.add_argument("--bins-per-dim", type=int, default=DEFAULT_BINS_PER_DIM)
    p.add_argument("--bandwidth", type=float, default=DEFAULT_BANDWIDTH)
    p.add_argument("--output", default="-")
    p.set_defaults(func=cmd_tce)

    p = sub.add_parser("cv", help="k-fold calibration experiment")
    p.add_argument("--task-spec", required=True)
    p.add_argument("--input", required=True)
    _add_fit_flags(p, ("identity", "temperature", "dirichlet"))
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--bins-per-dim", type=int, default=DEFAULT_BINS_PER_DIM)
    p.add_argument("--report", default="-")
    p.set_defaults(func=cmd_cv)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except ValidationError as exc:
        print(f"taskcal: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"taskcal: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end: ``espreadout <verb> [options]``.

Exit codes: 0 ok, 2 config error, 3 data error, 4 fit failure, 5 evaluation error.
Output directory precedence: ``--out`` > manifest ``out`` > ``$ESPREADOUT_OUT``
> ``./espreadout-out``.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .dataprep import DegenerateCovarianceError
from .metrics import CoverageError
from .sim import Dataset, DatasetFormatError, DeviceConfigError
from .surfaces import GridSpec, decision_surface, histogram_csv, iq_histogram, surface_csv

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_FIT, EXIT_EVAL = 0, 2, 3, 4, 5

log = logging.getLogger("espreadout")


def _manifest(args) -> pipeline.Manifest:
    if not args.manifest:
        raise pipeline.ManifestError("--manifest is required for this command")
    m = pipeline.load_manifest(args.manifest)
    if args.seed is not None:
        m.seed = args.seed
    if getattr(args, "mode", None):
        m.mode = args.mode
    return m


def _models(args) -> list[str] | None:
    return [s.strip() for s in args.models.split(",")] if args.models else None


def cmd_simulate(args) -> int:
    m = _manifest(args)
    out = m.resolve_out(args.out)
    path = pipeline.run_simulate(m, out)
    ds_n = 3 ** m.device_model().n_qubits
    print(f"states={ds_n} shots_per_state={m.shots_per_state} records={ds_n * m.shots_per_state} "
          f"bytes={path.stat().st_size} -> {path}")
    return EXIT_OK


def cmd_prep(args) -> int:
    m = _manifest(args)
    out = m.resolve_out(args.out)
    summary = pipeline.run_prep(m, out)
    for q, groups in summary["outliers"].items():
        print(f"outliers {q}: " + " ".join(f"{s}={v}" for s, v in groups.items()))
    print("split sizes: " + " ".join(f"{k}={v}" for k, v in summary["split_sizes"].items()))
    return EXIT_OK


def cmd_train(args) -> int:
    m = _manifest(args)
    out = m.resolve_out(args.out)
    try:
        times = pipeline.run_train(m, out, _models(args))
    except pipeline.FitFailure as exc:
        for name, msg in exc.failures.items():
            print(f"FAILED {name}: {msg}", file=sys.stderr)
        return EXIT_FIT
    for name, t in times.items():
        print(f"fitted {name} in {t:.3f} s")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    m = _manifest(args)
    out = m.resolve_out(args.out)
    reports = pipeline.run_evaluate(m, out, _models(args))
    print((out / "reports" / "comparison.csv").read_text(), end="")
    return EXIT_OK if reports else EXIT_EVAL


def cmd_report(args) -> int:
    if args.out:
        out = Path(args.out)
    else:
        out = _manifest(args).resolve_out(None)
    print(pipeline.run_report(out), end="")
    return EXIT_OK


def cmd_decision_surface(args) -> int:
    model = pipeline.load_model(Path(args.model))
    n_features = model.arch.input_dim if hasattr(model, "arch") else model.n_features
    grid = GridSpec(args.i_range[0], args.i_range[1], args.q_range[0], args.q_range[1], args.nx, args.ny)
    gi, gq, labels, state = decision_surface(
        lambda X: pipeline.predict_labels(model, X), n_features, args.qubit, grid
    )
    text = surface_csv(gi, gq, labels, state, grid, args.qubit)
    if args.output:
        pipeline.write_atomic(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_histogram(args) -> int:
    ds = Dataset.load(args.dataset)
    hist = iq_histogram(ds, args.qubit, args.state, args.bins)
    text = histogram_csv(hist, args.qubit, args.state)
    if args.output:
        pipeline.write_atomic(Path(args.output), text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    for step in (cmd_simulate, cmd_prep, cmd_train, cmd_evaluate):
        code = step(args)
        if code:
            return code
    return cmd_report(args)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--manifest", help="experiment manifest (JSON)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed, overrides the manifest")
    common.add_argument("--models", help="comma-separated model names to restrict to")
    common.add_argument("--mode", choices=("single", "multi"), help="evaluation mode")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="espreadout", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_ in (
        ("simulate", cmd_simulate, "generate the synthetic shot dataset"),
        ("prep", cmd_prep, "outlier removal, split and scaling"),
        ("train", cmd_train, "fit every listed model on the train split"),
        ("evaluate", cmd_evaluate, "fidelity reports on the evaluation split"),
        ("report", cmd_report, "combined table with fit-time ratios"),
        ("run", cmd_run, "simulate, prep, train, evaluate and report"),
    ):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=fn)

    p = sub.add_parser("decision-surface", parents=[common], help="grid of predicted labels")
    p.add_argument("--model", required=True, help="model artifact (.json or .fnn)")
    p.add_argument("--qubit", type=int, default=0)
    p.add_argument("--i-range", type=float, nargs=2, default=(-3.0, 3.0), metavar=("MIN", "MAX"))
    p.add_argument("--q-range", type=float, nargs=2, default=(-3.0, 3.0), metavar=("MIN", "MAX"))
    p.add_argument("--nx", type=int, default=100)
    p.add_argument("--ny", type=int, default=100)
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_decision_surface)

    p = sub.add_parser("histogram", parents=[common], help="binned I and Q marginals")
    p.add_argument("--dataset", required=True)
    p.add_argument("--qubit", type=int, default=0)
    p.add_argument("--state", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--bins", type=int, default=100)
    p.add_argument("--output", help="CSV path (default stdout)")
    p.set_defaults(func=cmd_histogram)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (pipeline.ManifestError, DeviceConfigError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetFormatError, DegenerateCovarianceError, FileNotFoundError) as exc:
        code = EXIT_EVAL if args.command in ("evaluate", "decision-surface") else EXIT_DATA
        print(f"{'evaluation' if code == EXIT_EVAL else 'data'} error: {exc}", file=sys.stderr)
        return code
    except CoverageError as exc:
        print(f"evaluation error: {exc}", file=sys.stderr)
        return EXIT_EVAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

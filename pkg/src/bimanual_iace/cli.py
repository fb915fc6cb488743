"""``bimanual-iace`` command line.

Exit codes: 0 success, 1 usage error, 2 integrity or contract failure,
3 gradient-check failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint
from .data import EpisodeFormatError
from .estimator import TrainingDiverged
from .nn import ConfigurationError
from .policy import VARIANTS, ContractViolation, ObservationError
from .sim.tasks import TASKS, UnknownTask
from . import harness

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("training config (override the --config file)")
    for f in fields(harness.TrainConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        group.add_argument(f"--{f.name}", type=kind, default=None)
    parser.add_argument("--config", type=Path, help="key=value file of training settings")


def _train_config(args) -> harness.TrainConfig:
    overrides = {f.name: getattr(args, f.name) for f in fields(harness.TrainConfig) if getattr(args, f.name) is not None}
    try:
        if args.config:
            return harness.TrainConfig.from_file(args.config, **overrides)
        return harness.TrainConfig(**overrides)
    except (ValueError, ConfigurationError) as exc:
        raise UsageError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bimanual-iace", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate demonstrations and write a dataset")
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--count", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", help="train one policy variant on a dataset")
    p.add_argument("--manifest", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path, help="checkpoint path")
    _add_train_flags(p)

    p = sub.add_parser("eval", help="roll out a checkpoint in the simulator")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--task", required=True, choices=sorted(TASKS))
    p.add_argument("--episodes", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="write the report as JSON")

    p = sub.add_parser("ablate", help="train and evaluate all four variants on each task")
    p.add_argument("--manifest", action="append", required=True, metavar="TASK=PATH")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--episodes", type=int, default=25)
    p.add_argument("--out", required=True, type=Path)
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="finite-difference check of every variant at the smallest config")
    p.add_argument("--epsilon", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--coords", type=int, default=32, help="coordinates sampled per parameter tensor")
    p.add_argument("--force-bug", action="store_true", help="perturb one analytic gradient (self-test)")

    p = sub.add_parser("report", help="tables and curves from eval report JSON files")
    p.add_argument("reports", nargs="*", type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _cmd_gen_data(args) -> int:
    manifest = harness.gen_data(args.task, args.count, args.seed, args.out, noise_scale=args.noise)
    print(f"wrote {len(manifest.episodes)} episodes to {manifest.root}")
    return EXIT_OK


def _cmd_train(args) -> int:
    config = _train_config(args)
    policy = harness.train(config, args.manifest, args.out)
    for epoch, value in enumerate(policy.loss_history_, 1):
        print(f"epoch {epoch} loss {value:.6f}")
    return EXIT_OK


def _print_report(report: harness.EvalReport) -> None:
    subs = " ".join(f"{k}={report.subscore_pct(k):.0f}%" for k in report.subscores)
    print(f"{report.task} {report.variant}: {report.success_pct:.0f}% of {report.n_episodes} ({subs}); "
          f"{1000 * report.mean_latency:.2f} ms per action (reference {1000 * harness.REFERENCE_LATENCY_S:.0f} ms on GPU)")


def _cmd_eval(args) -> int:
    policy = load_checkpoint(harness.output_path(args.checkpoint))
    report = harness.evaluate(policy, args.task, episodes=args.episodes, seed=args.seed)
    _print_report(report)
    if args.out:
        out = harness.output_path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(report.to_json())
    return EXIT_OK


def _cmd_ablate(args) -> int:
    manifests = {}
    for item in args.manifest:
        task, sep, path = item.partition("=")
        if not sep or task not in TASKS:
            raise UsageError(f"--manifest expects TASK=PATH with TASK in {sorted(TASKS)}, got {item!r}")
        manifests[task] = path
    if len(args.seeds) < 1:
        raise UsageError("need at least one seed")
    reports = harness.ablate(manifests, args.seeds, _train_config(args), args.out, episodes=args.episodes,
                             variants=VARIANTS)
    for r in reports:
        _print_report(r)
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    try:
        reports = harness.gradcheck_all(args.epsilon, args.tolerance, corrupt=args.force_bug,
                                        coords_per_tensor=args.coords)
    except ConfigurationError as exc:
        raise UsageError(str(exc)) from exc
    ok = True
    for variant, rep in reports.items():
        print(f"{variant}: {'pass' if rep.passed else 'FAIL'} worst {rep.worst:.3e} (epsilon {rep.epsilon:g})")
        for name, err in rep.max_rel_error.items():
            print(f"  {name:<48} {err:.3e}  ({rep.coords_checked[name]} coords)")
        if rep.failure:
            print(f"  failure: {rep.failure}")
        ok &= rep.passed
    return EXIT_OK if ok else EXIT_GRADCHECK


def _cmd_report(args) -> int:
    reports = [harness.EvalReport.from_json(Path(p).read_text()) for p in args.reports]
    paths = harness.write_report(reports, args.out)
    print(f"wrote {', '.join(str(p) for p in paths.values())}")
    return EXIT_OK


COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, UnknownTask) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EpisodeFormatError, ContractViolation, ObservationError, TrainingDiverged) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())

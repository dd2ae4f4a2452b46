"""Command-line entry points.

Verbs: phantom gen, atlas gen, train, eval, perturb, study run, report.
Exit codes: 0 success, 1 usage error, 2 data error, 3 run failure.
ATLASSEG_DETERMINISTIC=1 is equivalent to passing --deterministic.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_RUN = 3


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract here wants 1
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _build_parser() -> _Parser:
    p = _Parser(prog="atlasseg", description=__doc__)
    sub = p.add_subparsers(dest="verb", required=True, parser_class=_Parser)

    ph = sub.add_parser("phantom", help="synthetic subject generation")
    ph_sub = ph.add_subparsers(dest="action", required=True, parser_class=_Parser)
    ph_gen = ph_sub.add_parser("gen", help="generate one phantom")
    ph_gen.add_argument("--ga", type=float, required=True)
    ph_gen.add_argument("--seed", type=int, default=0)
    ph_gen.add_argument("--size", type=int, default=64)
    ph_gen.add_argument("--variability", type=float, default=0.0)
    ph_gen.add_argument("--noise-sd", type=float, default=0.0)
    ph_gen.add_argument("--out", required=True, help="output directory")
    ph_gen.add_argument("--name", default="phantom", help="file stem")

    at = sub.add_parser("atlas", help="canonical weekly template generation")
    at_sub = at.add_subparsers(dest="action", required=True, parser_class=_Parser)
    at_gen = at_sub.add_parser("gen", help="generate the weekly template set")
    at_gen.add_argument("--size", type=int, default=64)
    at_gen.add_argument("--weeks", default="23:38", help="inclusive range, like 23:38")
    at_gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="train one model")
    tr.add_argument("--config", required=True, help="training config JSON")
    tr.add_argument("--manifest", required=True)
    tr.add_argument("--atlas-dir", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--deterministic", action="store_true")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--manifest", required=True)
    ev.add_argument("--atlas-dir", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--patch", type=int, default=32)
    ev.add_argument("--stride", type=int, default=32)

    pe = sub.add_parser("perturb", help="apply one intensity perturbation")
    pe.add_argument("--kind", choices=("gamma", "noise"), required=True)
    pe.add_argument("--value", type=float, required=True)
    pe.add_argument("--seed", type=int, default=0)
    pe.add_argument("--in", dest="input", required=True)
    pe.add_argument("--out", required=True)

    st = sub.add_parser("study", help="multi-variant experiment harness")
    st_sub = st.add_subparsers(dest="action", required=True, parser_class=_Parser)
    st_run = st_sub.add_parser("run", help="run a study spec end to end")
    st_run.add_argument("--spec", required=True)
    st_run.add_argument("--out", required=True)
    st_run.add_argument("--deterministic", action="store_true")

    rp = sub.add_parser("report", help="re-emit report tables from results")
    rp.add_argument("--in", dest="input", required=True)
    rp.add_argument("--out", default=None)
    return p


def _cmd_phantom_gen(args) -> int:
    from .phantom import PhantomSpec, generate_phantom
    from .volume import write_mvol

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    img, lab = generate_phantom(
        PhantomSpec(ga=args.ga, seed=args.seed, size=args.size,
                    variability=args.variability, noise_sd=args.noise_sd)
    )
    write_mvol(out / f"{args.name}_image.mvol", img)
    write_mvol(out / f"{args.name}_labels.mvol", lab)
    print(out / f"{args.name}_image.mvol")
    return EXIT_OK


def _cmd_atlas_gen(args) -> int:
    from .phantom import atlas_for_week
    from .pipeline import write_atlas_dir

    lo, _, hi = args.weeks.partition(":")
    weeks = range(int(lo), int(hi or lo) + 1)
    entries = [atlas_for_week(w, size=args.size) for w in weeks]
    write_atlas_dir(args.out, entries)
    print(args.out)
    return EXIT_OK


def _cmd_train(args) -> int:
    from .trainer import TrainConfig, train

    with open(args.config) as fh:
        cfg = TrainConfig.from_dict(json.load(fh))
    if args.deterministic:
        cfg = TrainConfig.from_dict({**cfg.to_dict(), "deterministic": True})
    result = train(cfg, args.manifest, args.atlas_dir, args.out)
    print(result.best_path)
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .experiments import evaluate_run

    evaluate_run(args.checkpoint, args.manifest, args.atlas_dir, args.out,
                 args.patch, args.stride)
    print(Path(args.out) / "per_class.csv")
    return EXIT_OK


def _cmd_perturb(args) -> int:
    from .perturb import PerturbationSpec, apply_perturbation
    from .volume import Volume, read_mvol, write_mvol

    vol = read_mvol(args.input)
    if not isinstance(vol, Volume):
        raise ValueError("perturbations apply to image volumes, not label maps")
    out = apply_perturbation(vol, PerturbationSpec(args.kind, args.value, args.seed))
    write_mvol(args.out, out)
    print(args.out)
    return EXIT_OK


def _cmd_study_run(args) -> int:
    import os

    from .experiments import StudySpec, run_study

    if args.deterministic:
        os.environ["ATLASSEG_DETERMINISTIC"] = "1"
    spec = StudySpec.from_json(args.spec)
    out = run_study(spec, args.out)
    print(out)
    return EXIT_OK


def _cmd_report(args) -> int:
    import shutil

    from .experiments import emit_report

    report_dir = emit_report(args.input)
    if args.out and Path(args.out).resolve() != report_dir.resolve():
        dest = Path(args.out)
        if dest.exists():
            shutil.rmtree(dest)
        shutil.copytree(report_dir, dest)
        report_dir = dest
    print(report_dir)
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.verb == "phantom":
            return _cmd_phantom_gen(args)
        if args.verb == "atlas":
            return _cmd_atlas_gen(args)
        if args.verb == "train":
            return _cmd_train(args)
        if args.verb == "eval":
            return _cmd_eval(args)
        if args.verb == "perturb":
            return _cmd_perturb(args)
        if args.verb == "study":
            return _cmd_study_run(args)
        if args.verb == "report":
            return _cmd_report(args)
        raise AssertionError(f"unhandled verb {args.verb}")
    except (FileNotFoundError, IsADirectoryError, PermissionError,
            json.JSONDecodeError, ValueError, TypeError, KeyError) as e:
        print(f"atlasseg: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except RuntimeError as e:
        print(f"atlasseg: run failure: {e}", file=sys.stderr)
        return EXIT_RUN


if __name__ == "__main__":
    sys.exit(main())

"""Command-line entry point: one binary, six pipeline subcommands.

Exit codes: 0 success, 2 configuration error, 3 quality-floor or
missing-artifact error. Errors print a single machine-parsable line to
stderr: ``E_<CODE>: <human text>``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .errors import (
    CheckpointError,
    ConfigurationError,
    DistillStoryError,
    LockError,
    MissingArtifactError,
    QualityFloorError,
    TrainingDivergence,
)
from .models import TASKS
from .pipeline import (
    RunConfig,
    run_config_from_dict,
    stage_distill,
    stage_evaluate,
    stage_explain,
    stage_gen_data,
    stage_story,
    stage_train_teachers,
)

_EXIT_CODES = {
    ConfigurationError: 2,
    LockError: 2,
    QualityFloorError: 3,
    MissingArtifactError: 3,
    CheckpointError: 3,
    TrainingDivergence: 3,
}

_GLOBALS = ("config", "seed", "out", "quiet")


def _add_globals(parser: argparse.ArgumentParser, suppress: bool) -> None:
    kw = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", metavar="PATH", help="JSON config file", **kw)
    parser.add_argument("--seed", type=int, help="training/explanation seed", **kw)
    parser.add_argument("--out", metavar="DIR", help="output root", **kw)
    if suppress:
        parser.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
    else:
        parser.add_argument("--quiet", action="store_true", help="suppress progress output")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="distill-story",
        description=(
            "Train task teachers on synthetic chest images, distill one "
            "multi-task student, and render audience-tagged explanation stories."
        ),
    )
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help_text)
        _add_globals(sp, suppress=True)
        return sp

    gen = add("gen-data", "generate the synthetic dataset")
    gen.add_argument("--n-samples", type=int, help="override dataset size")

    teach = add("train-teachers", "train the three task teachers")
    teach.add_argument("--only", metavar="TASK", help="train a single task's teacher")

    dist = add("distill", "distill the multi-task student from the teachers")
    dist.add_argument("--alpha", type=float, help="distillation weight in [0, 1]")
    dist.add_argument("--temperature", type=float, help="softening temperature")
    dist.add_argument("--lr", type=float, help="SGD learning rate")
    dist.add_argument("--epochs-per-phase", type=int, help="epochs per phase")

    explain = add("explain", "write heatmaps and surrogate tables for samples")
    explain.add_argument("--samples", metavar="ID[,ID...]", help="dataset indices")
    explain.add_argument("--methods", metavar="M[,M...]", help="explanation methods")

    story = add("story", "assemble and render explanation stories")
    story.add_argument("--samples", metavar="ID[,ID...]", help="dataset indices")
    story.add_argument("--audiences", metavar="A[,A...]", help="story audiences")

    add("evaluate", "score student, teachers, and their agreement on the test split")
    return parser


def _parse_ids(text: str | None) -> list[int] | None:
    if text is None:
        return None
    try:
        return [int(part) for part in text.split(",") if part.strip() != ""]
    except ValueError:
        raise ConfigurationError(f"samples: expected comma-separated integers, got {text!r}")


def _resolve_config(args: argparse.Namespace) -> RunConfig:
    base: dict = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise ConfigurationError(f"config: file not found: {path}")
        try:
            base = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"config: invalid JSON in {path}: {exc}") from exc
    if "out" not in base:
        base["out"] = os.environ.get("DISTILL_STORY_OUT", "out")
    run = run_config_from_dict(base)

    replacements: dict = {}
    if getattr(args, "seed", None) is not None:
        replacements["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        replacements["out"] = args.out
    if getattr(args, "n_samples", None) is not None:
        replacements["dataset"] = dataclasses.replace(run.dataset, n_samples=args.n_samples)
    distill_over = {
        name: getattr(args, name)
        for name in ("alpha", "temperature", "lr", "epochs_per_phase")
        if getattr(args, name, None) is not None
    }
    if distill_over:
        replacements["distill"] = dataclasses.replace(run.distill, **distill_over)
    if getattr(args, "methods", None) is not None:
        replacements["methods"] = tuple(m for m in args.methods.split(",") if m)
    if getattr(args, "audiences", None) is not None:
        replacements["audiences"] = tuple(a for a in args.audiences.split(",") if a)
    if replacements:
        run = dataclasses.replace(run, **replacements)
    run.validate()
    return run


def _dispatch(args: argparse.Namespace, run: RunConfig, say) -> None:
    root = Path(run.out)
    if args.command == "gen-data":
        out = stage_gen_data(run, root)
        say(f"[gen-data] {run.dataset.n_samples} samples -> {out}")
    elif args.command == "train-teachers":
        only = getattr(args, "only", None)
        if only is not None and only not in TASKS:
            raise ConfigurationError(
                f"only: unknown task {only!r}; valid tasks: " + ", ".join(TASKS)
            )
        best = stage_train_teachers(run, root, only=only)
        for task in sorted(best):
            say(f"[train-teachers] {task}: val {best[task]:.4f}")
    elif args.command == "distill":
        end = stage_distill(run, root)
        agreements = ", ".join(f"{t} {end[t]:.4f}" for t in sorted(end))
        say(f"[distill] val agreement: {agreements}")
    elif args.command == "explain":
        dirs = stage_explain(run, root, _parse_ids(getattr(args, "samples", None)))
        say(f"[explain] wrote {len(dirs)} sample(s) under {root / 'explain'}")
    elif args.command == "story":
        trees = stage_story(run, root, _parse_ids(getattr(args, "samples", None)))
        say(f"[story] wrote {len(trees)} story tree(s) under {root / 'story'}")
    elif args.command == "evaluate":
        report = stage_evaluate(run, root)
        for task in ("abnormality", "segmentation", "report"):
            row = report[task]
            say(
                f"[evaluate] {task}: student {row['student']:.4f} "
                f"teacher {row['teacher']:.4f} agreement {row['agreement']:.4f}"
            )
    else:  # pragma: no cover - argparse enforces the choices
        raise ConfigurationError(f"command: unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    quiet = getattr(args, "quiet", False)

    def say(text: str) -> None:
        if not quiet:
            print(text)

    try:
        run = _resolve_config(args)
        _dispatch(args, run, say)
    except DistillStoryError as exc:
        print(f"{exc.code}: {exc}", file=sys.stderr)
        for klass, code in _EXIT_CODES.items():
            if isinstance(exc, klass):
                return code
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

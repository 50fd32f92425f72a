"""Command line entry point: ``psychoforge <study> [flags]`` and ``psychoforge report <run-dir>``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, agents
from .pipeline import BACKENDS, FORMATS, STUDIES, PipelineError, RunConfig, cmd_report, run_study
from .semantic import EmbeddingError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--format", choices=FORMATS)
    p.add_argument("--n-agents", type=int, dest="n_agents")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--offline", action="store_true", default=None, help="use cached embeddings only")
    p.add_argument("--input", dest="input_matrix", help="BFI2 response matrix (CSV)")
    p.add_argument("--params", help="simulation parameter file (JSON)")
    p.add_argument("--noise-sd", type=float, dest="noise_sd", help="mock agent noise in BFI2 answer units")
    p.add_argument("--concurrency", type=int)
    p.add_argument("--model")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="psychoforge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (
        ("study1", "item embeddings, similarity panels and t-SNE"),
        ("simulate", "simulate BFI2 responses from facet statistics"),
        ("study23", "persona agents answer Mini-Markers; convergent, alpha and CFA"),
        ("study4", "persona agents answer risk and ethics scenarios; regressions"),
    ):
        _common(sub.add_parser(name, help=help_))
    run = sub.add_parser("run", help="run the study named by --study")
    _common(run)
    run.add_argument("--study", choices=STUDIES)
    rep = sub.add_parser("report", help="verify a run directory and render its report")
    rep.add_argument("run_dir")
    return parser


_OVERRIDES = ("backend", "format", "n_agents", "seed", "out_dir", "offline", "input_matrix",
              "params", "noise_sd", "concurrency", "model")


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k: getattr(args, k) for k in _OVERRIDES}
    if args.command == "run":
        overrides["study"] = args.study
    elif args.command == "study23":
        cfg_study = "study2" if args.input_matrix else None
        overrides["study"] = cfg_study or "study3"
    else:
        overrides["study"] = args.command
    if args.command == "study23" and args.config and not args.input_matrix:
        # let a config file that names an input matrix select study2
        base = RunConfig.load(args.config)
        overrides["study"] = "study2" if base.input_matrix else "study3"
    return RunConfig.load(args.config, **overrides)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            path = cmd_report(args.run_dir)
            print(path)
            return 0
        cfg = config_from_args(args)
        man = run_study(cfg)
    except (PipelineError, agents.ConfigurationError, agents.BatchError, EmbeddingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"{man.study}: {len(man.outputs)} outputs written to {cfg.out_dir}/{man.study}")
    for group, fails in sorted(man.failures.items()):
        print(f"  {group}: {len(fails)} agent(s) failed", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())

"""``light-hids`` command line.

One subcommand per pipeline stage, plus ``run`` (all stages), ``bench`` and
``echo-config``.  Global flags may appear before or after the subcommand.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import PipelineConfig, dump_config, load_config
from .errors import LightHidsError
from .pipeline import STAGE_FUNCS, RunPaths, detect_trace, run_all, stage_bench

log = logging.getLogger("light_hids")

EXIT_OK = 0


def _global_flags(parser: argparse.ArgumentParser, suppress: bool):
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="INI config file (defaults apply when omitted)")
    parser.add_argument("--seed", type=int, default=default, help="override run.seed (and the seeds that follow it)")
    parser.add_argument("--out", default=default, help="run directory; overrides run.out_dir")
    parser.add_argument(
        "--quantized", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="use the int8 extractor for fit-forest/calibrate/detect/eval/bench",
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="light-hids", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in STAGE_FUNCS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        _global_flags(p, suppress=True)
        if name == "detect":
            p.add_argument("--trace", help="classify one raw trace file instead of the test split")
            p.add_argument("--format", choices=["lid_ds_like", "plain_names"], help="format of --trace")
    p = sub.add_parser("run", help="run every stage in order")
    _global_flags(p, suppress=True)
    p = sub.add_parser("bench", help="per-sample latency of the detection pipeline")
    _global_flags(p, suppress=True)
    p.add_argument("--repetitions", type=int, help="override bench.repetitions")
    p.add_argument("--windows", type=int, help="override bench.windows")
    p = sub.add_parser("echo-config", help="print the fully resolved configuration")
    _global_flags(p, suppress=True)
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out is not None:
        cfg.run.out_dir = args.out
    if getattr(args, "repetitions", None) is not None:
        cfg.bench.repetitions = args.repetitions
    if getattr(args, "windows", None) is not None:
        cfg.bench.windows = args.windows
    cfg.validate()
    return cfg


def _dispatch(args, cfg: PipelineConfig, stage: list[str]) -> int:
    paths = RunPaths(cfg.out_dir, quantized=args.quantized)
    cmd = args.command
    if cmd == "echo-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    if cmd == "run":
        paths.root.mkdir(parents=True, exist_ok=True)

        def on_stage(name, variant):
            stage[0] = f"{name} ({variant})" if name in ("fit-forest", "calibrate", "detect", "eval") else name
            log.info("stage %s", stage[0])

        reports = run_all(cfg, paths.variant(False), on_stage)
        for variant, report in reports.items():
            m = report.metrics
            print(f"{variant:9s} precision {m.precision:.4f}  recall {m.recall:.4f}  f1 {m.f1:.4f}")
        return EXIT_OK
    if cmd == "bench":
        report = stage_bench(cfg, paths, quantized=True if args.quantized else None)
        for line in report.summary_lines():
            print(line)
        print(f"wrote {paths.bench}")
        return EXIT_OK
    if cmd == "detect" and args.trace:
        from .ingest import TraceFormat

        fmt = TraceFormat(args.format) if args.format else None
        result = detect_trace(cfg, paths, args.trace, fmt)
        print(json.dumps(result, indent=2))
        return EXIT_OK
    paths.root.mkdir(parents=True, exist_ok=True)
    result = STAGE_FUNCS[cmd](cfg, paths)
    if cmd == "eval":
        m = result.metrics
        print(f"precision {m.precision:.4f}  recall {m.recall:.4f}  f1 {m.f1:.4f}")
        print(f"wrote {paths.report} and {paths.report_csv}")
    else:
        print(f"wrote {result}")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    stage = [args.command]
    try:
        cfg = resolve_config(args)
        return _dispatch(args, cfg, stage)
    except LightHidsError as exc:
        print(f"light-hids: error in stage {stage[0]}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        # a missing upstream artifact: the stage that produces it has not run
        print(f"light-hids: error in stage {stage[0]}: missing artifact {exc.filename}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())

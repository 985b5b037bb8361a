"""Command-line entry point: ``fclsim run | presets | validate``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import ConfigError, ExperimentConfig, list_presets, parse_config, preset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fclsim", description="Federated contrastive learning backdoor simulator")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment and write its artifacts")
    r.add_argument("config", nargs="?", help="config file; its keys override the preset")
    r.add_argument("--preset", help="start from a named preset")
    r.add_argument("--seed", type=int, help="root seed (unsigned 64-bit)")
    r.add_argument("--out", help="output directory")
    r.add_argument("--no-plots", action="store_true", help="skip PNG figures")

    sub.add_parser("presets", help="list preset names")

    v = sub.add_parser("validate", help="check a config file without running it")
    v.add_argument("config")
    v.add_argument("--preset")
    return p


def _load(args) -> ExperimentConfig:
    base = preset(args.preset) if args.preset else None
    if args.config:
        return parse_config(args.config, base)
    if base is None:
        raise ConfigError("give a config file, a --preset, or both")
    return base


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    if args.command == "presets":
        for name in list_presets():
            print(name)
        return EXIT_OK

    try:
        cfg = _load(args)
        if args.command == "validate":
            print(f"ok {cfg.hash()}")
            return EXIT_OK
        overrides = {}
        if args.seed is not None:
            overrides["run.seed"] = args.seed
        if args.out:
            overrides["run.out"] = args.out
        cfg = cfg.merged(overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    from .harness import run  # deferred: pulls in matplotlib

    try:
        result = run(cfg, plots=not args.no_plots)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure maps to the runtime exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for row in result.summary:
        print(f"task {row['task_id']} target {row['target_class']}: "
              f"main_acc={row['main_acc']:.3f} asr={row['asr']:.3f}")
    print(f"wrote {result.out_dir}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

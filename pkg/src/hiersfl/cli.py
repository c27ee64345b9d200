"""Command line interface: ``hiersfl run|compare|validate-config|selftest``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import harness, protocols, selftest
from .errors import ConfigError, HierSFLError

log = logging.getLogger("hiersfl")


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat 'key = value' config file")
    group = parser.add_argument_group("experiment")
    for f in fields(harness.ExperimentConfig):
        flag = f.metadata["flag"]
        # Values stay strings here; parse_config owns coercion and validation.
        group.add_argument(f"--{flag}", dest=f.name, default=argparse.SUPPRESS,
                           help=f"{f.metadata['help']} (default: {f.default})")


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hiersfl", description="Hierarchical split federated learning simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one protocol, write rounds.csv and summary.json")
    _add_config_flags(run)

    cmp = sub.add_parser("compare", help="run a protocol x topology grid, write compare.csv")
    _add_config_flags(cmp)
    cmp.add_argument("--protocols", default=",".join(protocols.PROTOCOLS))
    cmp.add_argument("--clients-grid", type=_int_list, default=None, help="e.g. 20,40,60,80")
    cmp.add_argument("--mes-grid", type=_int_list, default=None, help="e.g. 4,8,12,16")
    cmp.add_argument("--jobs", type=int, default=1)

    val = sub.add_parser("validate-config", help="check a config and print the effective values")
    _add_config_flags(val)

    sub.add_parser("selftest", help="run the built-in oracle checks")
    return parser


def _config_from_args(args: argparse.Namespace) -> harness.ExperimentConfig:
    names = {f.name: f.metadata["flag"] for f in fields(harness.ExperimentConfig)}
    flags = {flag: getattr(args, name) for name, flag in names.items() if hasattr(args, name)}
    return harness.parse_config(args.config, flags)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "selftest":
            return 0 if selftest.run_all() else 1
        cfg = _config_from_args(args)
        if args.command == "validate-config":
            sys.stdout.write(harness.format_config(cfg))
            return 0
        if args.command == "run":
            metrics = harness.run_experiment(cfg)
            s = metrics.summary
            print(f"{cfg.protocol}: final accuracy {s['final_accuracy']:.4f}, "
                  f"simulated time {s['total_sim_time_s']:.2f} s -> {cfg.out}")
            return 0
        if args.command == "compare":
            rows = harness.compare_protocols(
                cfg, [p.strip() for p in args.protocols.split(",") if p.strip()],
                args.clients_grid, args.mes_grid, args.jobs,
            )
            out = Path(cfg.out)
            out.mkdir(parents=True, exist_ok=True)
            text = harness.compare_csv(rows)
            (out / "compare.csv").write_text(text, encoding="utf-8")
            sys.stdout.write(text)
            return 0 if all(r.status == "ok" for r in rows) else 1
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return 2
    except (HierSFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())

"""Command-line front end.

Exit codes: 0 success, 1 bad invocation or config, 2 runtime failure,
3 a convergence condition was violated in theorem-check mode.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .algorithms import TheoremViolation
from .config import apply_overrides, read_config_dict
from .data import IdxFormatError
from .engine import (ConfigError, build_data, config_from_dict, config_to_dict, partition_stats_rows,
                     r_monotone_report, run_experiment, sweep, sweep_summary, write_partition_stats)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_THEOREM = 0, 1, 2, 3

log = logging.getLogger("clusterfl")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; bad flags are a config-class error here
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", required=True, help="TOML experiment config")
    common.add_argument("--out", default=None, help="output directory for artifacts")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-path override applied before validation (repeatable)")
    common.add_argument("--seed-data", type=int, default=None)
    common.add_argument("--seed-init", type=int, default=None)
    common.add_argument("--seed-train", type=int, default=None)
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    p = _Parser(prog="clusterfl", description="Clustered federated learning simulator.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("run", parents=[common], help="run one experiment")
    sw = sub.add_parser("sweep", parents=[common], help="run one experiment per value of an axis")
    sw.add_argument("--axis", default=None, help="config path to vary (default: [sweep].axis)")
    sw.add_argument("--values", default=None,
                    help="TOML array of values, e.g. '[1, 5, 10]' (default: [sweep].values)")
    sub.add_parser("check-theorems", parents=[common],
                   help="run with clamped step sizes and assert the monotonicity conditions")
    sub.add_parser("partition-stats", parents=[common], help="report per-client and per-cluster histograms")
    return p


def _load(args) -> tuple[dict, dict]:
    """Effective config document plus the optional [sweep] table."""
    doc = read_config_dict(args.config)
    overrides = list(args.override)
    for flag, key in (("seed_data", "data"), ("seed_init", "init"), ("seed_train", "train")):
        v = getattr(args, flag)
        if v is not None:
            overrides.append(f"seeds.{key}={v}")
    doc = apply_overrides(doc, overrides)
    sweep_table = doc.pop("sweep", {})
    if not isinstance(sweep_table, dict):
        raise ConfigError("[sweep] must be a table")
    return doc, sweep_table


def _echo_config(out: Path | None, cfg, extra: dict | None = None) -> None:
    if out is None:
        return
    out.mkdir(parents=True, exist_ok=True)
    doc = config_to_dict(cfg)
    if extra:
        doc["sweep"] = extra
    (out / "config.effective.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _say(args, msg: str) -> None:
    if not args.quiet:
        print(msg)


def _cmd_run(args, doc, _sweep) -> int:
    cfg = config_from_dict(doc)
    out = Path(args.out) if args.out else None
    _echo_config(out, cfg)
    res = run_experiment(cfg, out)
    s = res.summary
    _say(args, f"rounds={s['rounds_run']} micro_acc={s['micro_acc_mean']} macro_f1={s['macro_f1_mean']} "
               f"final_F={s['final_f']:.6g} final_R={s['final_r']:.6g} ari={s['final_ari']}")
    return EXIT_OK


def _cmd_sweep(args, doc, table) -> int:
    from .config import parse_value

    axis = args.axis or table.get("axis")
    values = parse_value(args.values) if args.values is not None else table.get("values")
    if not axis or values is None:
        raise ConfigError("sweep needs an axis and a list of values (flags or a [sweep] table)")
    if not isinstance(values, list):
        raise ConfigError("sweep values must be a list")
    cfg = config_from_dict(doc)
    out = Path(args.out) if args.out else None
    _echo_config(out, cfg, {"axis": axis, "values": values})
    results = sweep(cfg, axis, values, out)
    summary = sweep_summary(axis, values, results)
    if out is not None:
        (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
    for v, r in zip(values, results):
        _say(args, f"{axis}={v}: micro_acc={r.summary['micro_acc_mean']} macro_f1={r.summary['macro_f1_mean']}")
    return EXIT_OK


def _cmd_check(args, doc, _sweep) -> int:
    doc["theorem_check_mode"] = True
    cfg = config_from_dict(doc)
    out = Path(args.out) if args.out else None
    _echo_config(out, cfg)
    res = run_experiment(cfg, out)
    if "descent" in cfg.theorem.clamps:
        rep = r_monotone_report(res.records)
        if not rep["monotone"]:
            raise TheoremViolation(rep["first_violation_round"], "R measured after the M step rose")
    _say(args, f"ok: F non-increasing over {len(res.records)} rounds"
               + (", R non-increasing" if "descent" in cfg.theorem.clamps else ""))
    return EXIT_OK


def _cmd_partition_stats(args, doc, _sweep) -> int:
    cfg = config_from_dict(doc)
    dataset, partition = build_data(cfg)
    partition.validate_against(len(dataset))
    if args.out:
        out = Path(args.out)
        _echo_config(out, cfg)
        rows = write_partition_stats(dataset, partition, out / "partition_stats.csv")
    else:
        rows = partition_stats_rows(dataset, partition)
    if not args.quiet:
        for row in rows:
            print("\t".join(str(v) for v in row))
    return EXIT_OK


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "check-theorems": _cmd_check,
            "partition-stats": _cmd_partition_stats}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        doc, table = _load(args)
        return COMMANDS[args.command](args, doc, table)
    except TheoremViolation as exc:
        print(f"theorem check failed: {exc}", file=sys.stderr)
        return EXIT_THEOREM
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IdxFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, RuntimeError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

"""``spear`` command line.

Exit codes: 0 on completion (failed recoveries are reported, not raised),
2 for configuration errors, 3 for data and file errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import experiments as ex
from .config import ConfigError, load_config
from .io import DataError

log = logging.getLogger("spear")

EXIT_CONFIG = 2
EXIT_DATA = 3


def _pairs(items: Sequence[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value file with ExperimentConfig keys")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--workers", type=int, help="parallel trials (default: SPEAR_THREADS or 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="spear", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("attack", parents=[common], help="simulate clients and attack layer 1")
    a.add_argument("--gradients", help="attack a gradient dump written by 'simulate' instead")
    a.add_argument("--truth", help="ground-truth dump used to score an offline attack")
    al = sub.add_parser("attack-layer", parents=[common], help="attack an inner layer")
    al.add_argument("--layer", type=int, required=True)
    sub.add_parser("validate-theory", parents=[common], help="compare predicted and measured sampling cost")
    sub.add_parser("simulate", parents=[common], help="write one client's gradients to a raw dump")
    sub.add_parser("analyze", parents=[common], help="tabulate closed-form predictions")
    return p


def _config(args, **extra):
    overrides = _pairs(args.set)
    for key in ("seed", "trials", "out"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = str(val)
    for key, val in extra.items():
        overrides[key] = str(val)
    return load_config(args.config, overrides)


def _run(args) -> int:
    workers = ex.resolve_workers(args.workers)
    if args.command == "attack" and args.gradients:
        cfg = _config(args)
        doc = ex.attack_dump(cfg, args.gradients, args.truth, cfg.out)
        print(json.dumps(doc))
        return 0
    if args.command in ("attack", "attack-layer"):
        cfg = _config(args, **({"layer": args.layer} if args.command == "attack-layer" else {}))
        report = ex.run_attack_experiment(cfg, workers)
        out = report.write(cfg.out)
        s = report.summary
        print(f"accuracy {s['accuracy']:.3f} ({s['recovered']}/{s['trials']}) -> {out}")
        return 0
    cfg = _config(args)
    out = Path(cfg.out)
    if args.command == "validate-theory":
        rows = ex.validate_theory(cfg, workers)
        out.mkdir(parents=True, exist_ok=True)
        (out / "theory.csv").write_text(ex.rows_to_csv(rows, ex.THEORY_COLUMNS))
        for r in rows:
            print(f"{r['kind']:8s} b={r['b']} m={r['m']} predicted={r['predicted']:.4g} "
                  f"empirical={r['empirical']:.4g}")
        return 0
    if args.command == "simulate":
        ex.simulate_to_dump(cfg, out)
        print(f"wrote {out / 'gradients.bin'}")
        return 0
    if args.command == "analyze":
        rows = ex.analyze_table(cfg)
        out.mkdir(parents=True, exist_ok=True)
        (out / "analysis.csv").write_text(ex.rows_to_csv(rows, ex.ANALYZE_COLUMNS))
        print(f"wrote {len(rows)} rows to {out / 'analysis.csv'}")
        return 0
    raise ConfigError(f"unknown command {args.command}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"spear: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"spear: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())

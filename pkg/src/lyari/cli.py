"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 infeasible slot, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_baseline, load_scenario
from .lyari_optimizer import InfeasibleSlot, SolverError
from .oracle import OracleInfeasible
from .sim import SweepSpec, fit, oracle_check, simulate, sweep
from .source_dprd import FitError, ModelError

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("lyari")


def _scenario(args):
    return load_scenario(args.config) if args.config else load_baseline()


def cmd_simulate(args) -> int:
    sc = _scenario(args)
    art = simulate(sc, args.out, oracle=True if args.oracle else None, T=args.T, seed=args.seed)
    s = art.summary
    print(f"{s['name']}: T={s['T']} final S_X={s['final_S_X']:.6g} SD={s['sd']:.6g} "
          f"mean Pt={s['pt_mean']:.6g} mW -> {art.csv_path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    sc = _scenario(args)
    axes = sc.sweep_axes
    if axes is None:
        raise ConfigError("the scenario has no sweep section", "sweep")
    table = sweep(sc, SweepSpec.of(axes), args.out, workers=args.workers)
    failed = [r for r in table if r["status"] != "ok"]
    print(f"{len(table)} cells, {len(failed)} failed -> {Path(args.out) / 'sweep.csv'}")
    for r in failed:
        log.warning("cell %s: %s", {k: r[k] for k in axes}, r["status"])
    return EXIT_OK


def cmd_fit(args) -> int:
    sig, dc = args.sigma_samples, args.dcoe_samples
    if args.config and not (sig or dc):
        doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        base = Path(args.config).parent
        sig = doc.get("sigma", {}).get("samples")
        dc = doc.get("delay", {}).get("samples")
        sig = base / sig if sig else None
        dc = base / dc if dc else None
    if not (sig or dc):
        raise ConfigError("no sample files given", "fit")
    doc = fit(sig, dc, args.out)
    for key, entry in doc.items():
        print(f"{key}: " + ", ".join(f"{k}={v:.8g}" for k, v in entry.items() if isinstance(v, float)))
    return EXIT_OK


def cmd_oracle(args) -> int:
    sc = _scenario(args)
    rep = oracle_check(sc, args.out, T=args.T)
    print(f"{rep['name']}: T={rep['T']} max gap={rep['max_gap']:.3e} mean gap={rep['mean_gap']:.3e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lyari", description="UAV video source/channel optimization")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="scenario JSON (default: built-in baseline)")
        sp.add_argument("--out", default=out_default, help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="recorded in outputs; the run is deterministic")

    sp = sub.add_parser("simulate", help="run the horizon and write per-slot CSV and a summary")
    common(sp, "out")
    sp.add_argument("--T", type=int, default=None, help="override the number of slots")
    sp.add_argument("--oracle", action="store_true", help="attach per-slot grid oracle gaps")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", help="grid sweep over optimizer parameters")
    common(sp, "out")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("fit", help="fit model coefficients from sample CSV files")
    common(sp, "out")
    sp.add_argument("--sigma-samples", type=Path, default=None, help="CSV with lambda,qp,sigma")
    sp.add_argument("--dcoe-samples", type=Path, default=None, help="CSV with q,dcoe")
    sp.set_defaults(func=cmd_fit)

    sp = sub.add_parser("oracle-check", help="compare each slot against the grid oracle")
    common(sp, "out")
    sp.add_argument("--T", type=int, default=None)
    sp.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InfeasibleSlot, OracleInfeasible) as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (SolverError, FitError, ModelError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

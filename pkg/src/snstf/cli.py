"""Command-line front end.

Exit codes: 0 success, 2 validation or parse failure, 3 insufficient statistics.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from typing import List, Optional, Sequence

from . import __version__
from .channel_sim import simulate
from .domain import InsufficientStatistics, ValidationError, validate
from .keyrate import (
    OPT_FIELDS,
    analyze,
    analyze_simulated,
    expected_rate,
    optimize_params,
    simulate_rate_curve,
    window_sweep,
)
from .ledger_io import (
    LedgerParseError,
    config_echo,
    config_from_kv,
    fixture_path,
    ledger_to_kv,
    load_ledger,
    read_file,
    read_windows,
    serialize,
)

EXIT_OK, EXIT_INVALID, EXIT_INSUFFICIENT = 0, 2, 3

CURVE_COLUMNS = ("loss_db", "rate", "plob_abs", "plob_rel", "qber_z", "qber_x11", "status")
OPT_COLUMNS = ("loss_db", "rate", "init_rate") + OPT_FIELDS

EPILOG = f"""\
output columns (CSV, fixed order):
  simulate, curve: {",".join(CURVE_COLUMNS)}
  optimize:        {",".join(OPT_COLUMNS)}
  replay writes a JSON report.
every output starts with the run configuration ('#' lines in CSV, a
"config" entry in JSON).

exit codes: 0 success, 2 validation/parse failure, 3 insufficient statistics
"""


def _num(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.10g}"
    return str(v)


def _load_config(path: Optional[str]):
    return config_from_kv(read_file(path or fixture_path("paper_params.txt")))


def _write(text: str, out: Optional[str]) -> None:
    if out:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv(header: List[str], columns: Sequence[str], rows: List[Sequence]) -> str:
    buf = io.StringIO()
    buf.writelines(f"# {h}\n" for h in header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_num(v) for v in r])
    return buf.getvalue()


def _parse_grid(spec: str) -> List[float]:
    try:
        parts = [float(x) for x in spec.split(":")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad loss grid {spec!r}; expected a:b:step") from None
    if len(parts) == 1:
        return parts
    if len(parts) != 3 or parts[2] <= 0 or parts[1] < parts[0]:
        raise argparse.ArgumentTypeError(f"bad loss grid {spec!r}; expected a:b:step with step > 0")
    a, b, step = parts
    n = int(math.floor((b - a) / step + 1e-9)) + 1
    return [round(a + i * step, 10) for i in range(n)]


# --- commands ------------------------------------------------------------------

def cmd_validate(args) -> int:
    params, channel, sec = _load_config(args.config)
    validate(params, channel, sec)
    msg = "configuration valid"
    if args.ledger:
        led, _ = load_ledger(args.ledger)
        led.check()
        msg += "; ledger valid"
    print(msg)
    return EXIT_OK


def cmd_replay(args) -> int:
    params, channel, sec = _load_config(args.config)
    validate(params, channel, sec)
    led, kv = load_ledger(args.ledger or fixture_path("paper_ledger.txt"))
    rep = analyze(led, params, sec, channel=channel, finite=not args.infinite)
    out = {"config": config_echo(params, channel, sec, {"ledger": args.ledger or "paper_ledger.txt"})}
    out["report"] = rep.as_dict()
    pub = kv.sections.get("published", {})
    compare = {"rate": "Key-rate", "n1_lb": "n1-before", "e1ph_ub": "e1ph-before",
               "n1_prime": "n1-after", "e1ph_prime": "e1ph-after"}
    deltas = {}
    for field, key in compare.items():
        if key in pub:
            ref = kv.number("published", key)
            got = getattr(rep, field)
            deltas[field] = {"published": ref, "computed": got, "relative_delta": (got - ref) / ref if ref else None}
    if "QBER-Z-before" in pub:
        ref = kv.number("published", "QBER-Z-before")
        deltas["qber_z"] = {"published": ref, "computed": led.qber_z, "relative_delta": (led.qber_z - ref) / ref}
    out["published_comparison"] = deltas
    if args.windows:
        rows = read_windows(None if args.windows == "paper" else args.windows)
        best, rates = window_sweep(led, [(r.ds_half_deg, r.x11_detections, r.x11_qber) for r in rows], params, sec)
        out["window_sweep"] = {
            "best_ds_half_deg": best,
            "rows": [{"ds_half_deg": ds, "rate": r, "published_rate": w.published_rate}
                     for (ds, r), w in zip(rates, rows)],
        }
    _write(json.dumps(out, indent=2, sort_keys=False) + "\n", args.out)
    if "failed_stage" in rep.diagnostics:
        print(f"insufficient statistics at stage {rep.diagnostics['failed_stage']}: rate 0", file=sys.stderr)
        return EXIT_INSUFFICIENT
    return EXIT_OK


def _curve_row(loss, rep) -> list:
    status = "ok" if "failed_stage" not in rep.diagnostics else f"insufficient:{rep.diagnostics['failed_stage']}"
    return [loss, rep.rate, rep.plob_abs, rep.plob_rel, rep.diagnostics.get("qber_z", float("nan")),
            rep.diagnostics.get("qber_x11", float("nan")), status]


def cmd_simulate(args) -> int:
    params, channel, sec = _load_config(args.config)
    if args.loss_db is not None:
        channel = channel.with_total_loss(args.loss_db)
    validate(params, channel, sec)
    led, raw = simulate(params, channel, args.pairs, args.seed, workers=args.workers, return_raw_keys=True)
    rep = analyze_simulated(led, raw, params, args.seed, sec, channel)
    header = config_echo(params, channel, sec, {"command": "simulate", "pairs": args.pairs, "seed": args.seed})
    _write(_csv(header, CURVE_COLUMNS, [_curve_row(round(channel.fiber_loss_db, 6), rep)]), args.out)
    if args.ledger_out:
        with open(args.ledger_out, "w", encoding="utf-8") as fh:
            fh.write(serialize(ledger_to_kv(led), header=header))
    if "failed_stage" in rep.diagnostics:
        print(f"insufficient statistics at stage {rep.diagnostics['failed_stage']}: rate 0", file=sys.stderr)
        return EXIT_INSUFFICIENT
    return EXIT_OK


def cmd_curve(args) -> int:
    params, channel, sec = _load_config(args.config)
    validate(params, channel, sec)
    grid = _parse_grid(args.loss_db)
    pts = simulate_rate_curve(params, channel, grid, sec, mode=args.mode, n_pairs=args.pairs,
                              seed=args.seed, workers=args.workers)
    rows = [[p.total_loss_db, p.rate_per_pulse, p.plob_abs, p.plob_rel, p.qber_z, p.qber_x11,
             "ok" if p.error is None else p.error] for p in pts]
    header = config_echo(params, channel, sec, {"command": "curve", "loss_db": args.loss_db, "mode": args.mode,
                                                "seed": args.seed})
    _write(_csv(header, CURVE_COLUMNS, rows), args.out)
    return EXIT_OK


def cmd_optimize(args) -> int:
    params, channel, sec = _load_config(args.config)
    if args.loss_db is not None:
        channel = channel.with_total_loss(args.loss_db)
    validate(params, channel, sec)
    fields = tuple(args.fields.split(",")) if args.fields else OPT_FIELDS
    bad = [f for f in fields if f not in OPT_FIELDS]
    if bad:
        raise ValidationError([f"unknown optimization field {f!r}" for f in bad])
    init_rate = expected_rate(params, channel, sec).rate
    best = optimize_params(channel, params.n_total, sec, params, fields=fields, max_evals=args.max_evals)
    rate = expected_rate(best, channel, sec).rate
    header = config_echo(params, channel, sec, {"command": "optimize", "fields": ",".join(fields),
                                                "max_evals": args.max_evals})
    row = [round(channel.fiber_loss_db, 6), rate, init_rate] + [getattr(best, f) for f in OPT_FIELDS]
    _write(_csv(header, OPT_COLUMNS, [row]), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="snstf",
        description="Simulate and analyse sending-or-not-sending twin-field QKD runs.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="parameter file (default: shipped 511 km operating point)")
        sp.add_argument("--out", help="output file (default: stdout)")

    sp = sub.add_parser("validate", help="check a configuration and optionally a ledger")
    common(sp)
    sp.add_argument("--ledger")
    sp.set_defaults(func=cmd_validate)

    sp = sub.add_parser("replay", help="run the analysis chain on a count ledger; JSON report")
    common(sp)
    sp.add_argument("--ledger", help="ledger file (default: shipped 511 km ledger)")
    sp.add_argument("--windows", nargs="?", const="paper",
                    help="per-window CSV to sweep the phase window over (default: shipped table)")
    sp.add_argument("--infinite", action="store_true", help="disable finite-size corrections")
    sp.set_defaults(func=cmd_replay)

    sp = sub.add_parser("simulate", help="Monte Carlo run followed by the analysis chain; CSV row")
    common(sp)
    sp.add_argument("--pairs", type=int, required=True)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--loss-db", type=float, help="override total fiber loss")
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--ledger-out", help="also write the simulated ledger here")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("curve", help="key rate against total fiber loss; CSV")
    common(sp)
    sp.add_argument("--loss-db", required=True, help="grid a:b:step in dB, or a single value")
    sp.add_argument("--mode", choices=("expected", "monte_carlo"), default="expected")
    sp.add_argument("--pairs", type=int, help="pulse pairs per point in monte_carlo mode")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_curve)

    sp = sub.add_parser("optimize", help="local search over source parameters; CSV row")
    common(sp)
    sp.add_argument("--loss-db", type=float, help="override total fiber loss")
    sp.add_argument("--fields", help=f"comma-separated subset of {','.join(OPT_FIELDS)}")
    sp.add_argument("--max-evals", type=int, default=400)
    sp.set_defaults(func=cmd_optimize)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "curve":
        try:
            _parse_grid(args.loss_db)
        except argparse.ArgumentTypeError as exc:
            parser.error(str(exc))
    try:
        return args.func(args)
    except (ValidationError, LedgerParseError) as exc:
        print(f"validation failed: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except InsufficientStatistics as exc:
        print(f"insufficient statistics: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT


if __name__ == "__main__":
    sys.exit(main())

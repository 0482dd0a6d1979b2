"""Command line front end.

Subcommands: epsilon, delta, sweep, quadratic, encode-attack, audit.
Exit codes: 0 success, 2 usage error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from typing import Callable, Sequence

import numpy as np

from .accountant import SgdParams, heuristic_delta, heuristic_epsilon, heuristic_sweep_max
from .audit import AuditConfig, run_audit
from .baselines import (
    fullbatch_epsilon,
    fullbatch_rescale,
    gaussian_mechanism_delta,
    gdp_mu,
    sigma_for_standard_epsilon,
    standard_epsilon,
)
from .counterexamples import (
    ClippingViolation,
    EncoderConfig,
    QuadraticParams,
    decode_presence,
    encode_attack_run,
    encoding_attack_epsilon,
    quadratic_epsilon_ratio,
)
from .numerics import BracketError

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

SWEEP_COLUMNS = [
    "T",
    "q_effective",
    "sigma_effective",
    "eps_heuristic",
    "eps_standard_ub",
    "eps_fullbatch",
    "eps_sweep_max",
]
QUADRATIC_COLUMNS = ["T", "q", "sigma", "alpha", "eps_quadratic", "eps_linear_sweep", "ratio", "rounded"]


class UsageError(Exception):
    pass


def _round(x, digits: int):
    if isinstance(x, (bool, np.bool_)):
        return bool(x)
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        return float(f"{float(x):.{digits}g}")
    if isinstance(x, dict):
        return {k: _round(v, digits) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_round(v, digits) for v in x]
    return x


def _emit_json(obj: dict, digits: int, out=None) -> None:
    payload = {"schema_version": SCHEMA_VERSION, **_round(obj, digits)}
    text = json.dumps(payload, indent=2, sort_keys=False)
    _write(text + "\n", out)


def _emit_rows(rows: list[dict], columns: Sequence[str], fmt: str, digits: int, out=None) -> None:
    if fmt == "json":
        _emit_json({"rows": rows}, digits, out)
        return
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_csv_cell(row[c], digits) for c in columns])
    _write(buf.getvalue(), out)


def _csv_cell(v, digits: int) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return f"{float(v):.{digits}g}"


def _write(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _int_grid(text: str) -> list[int]:
    """'1,2,5' or 'geom:1:10000:20' (geometric, deduplicated)."""
    if text.startswith("geom:"):
        _, lo, hi, n = text.split(":")
        vals = np.unique(np.round(np.geomspace(int(lo), int(hi), int(n))).astype(int))
        return [int(v) for v in vals]
    if text.startswith("range:"):
        _, lo, hi = text.split(":")
        return list(range(int(lo), int(hi) + 1))
    return [int(x) for x in text.split(",") if x.strip()]


def _point(params: SgdParams, delta: float) -> dict:
    sweep_eps, sweep_t = heuristic_sweep_max(params, delta)
    return {
        "eps_heuristic": heuristic_epsilon(params, delta),
        "eps_standard_ub": standard_epsilon(params, delta),
        "eps_fullbatch": fullbatch_epsilon(params, delta),
        "eps_sweep_max": sweep_eps,
        "sweep_argmax_t": sweep_t,
    }


def cmd_epsilon(args) -> int:
    params = SgdParams(args.t, args.q, args.sigma, args.eta)
    row = {"T": args.t, "q": args.q, "sigma": args.sigma, "delta": args.delta, **_point(params, args.delta)}
    if args.format == "csv":
        _emit_rows([row], list(row), "csv", args.digits, args.out)
    else:
        _emit_json({**row, "standard_is_upper_bound": True}, args.digits, args.out)
    return 0


def cmd_delta(args) -> int:
    params = SgdParams(args.t, args.q, args.sigma, args.eta)
    fb = 0.0 if args.q == 0 else gaussian_mechanism_delta(gdp_mu(fullbatch_rescale(params)), args.epsilon)
    row = {
        "T": args.t,
        "q": args.q,
        "sigma": args.sigma,
        "epsilon": args.epsilon,
        "delta_heuristic": heuristic_delta(params, args.epsilon),
        "delta_fullbatch": fb,
    }
    if args.format == "csv":
        _emit_rows([row], list(row), "csv", args.digits, args.out)
    else:
        _emit_json(row, args.digits, args.out)
    return 0


def sweep_rows(regime: str, grid: Sequence[int], anchor: SgdParams, delta: float, target_epsilon=None) -> list[dict]:
    rows = []
    for T in grid:
        if regime == "a":
            q = anchor.T * anchor.q / T
            sigma = anchor.sigma * (anchor.T / T) ** 0.5
            if q > 1:
                raise UsageError(f"regime a needs T >= {anchor.T * anchor.q:g} to keep q <= 1 (got T={T})")
        elif regime == "b":
            if target_epsilon is None:
                raise UsageError("regime b needs --target-epsilon")
            q = anchor.q
            sigma = sigma_for_standard_epsilon(T, q, target_epsilon, delta)
        elif regime == "c":
            q, sigma = anchor.q, anchor.sigma
        else:
            raise UsageError(f"unknown regime {regime!r}")
        point = _point(SgdParams(T, q, sigma, anchor.eta), delta)
        point.pop("sweep_argmax_t")
        rows.append({"T": T, "q_effective": q, "sigma_effective": sigma, **point})
    return rows


def cmd_sweep(args) -> int:
    if args.sigma is None and args.regime != "b":
        raise UsageError(f"regime {args.regime} needs --sigma")
    # regime b derives sigma per row, so the anchor only carries T, q and eta
    anchor = SgdParams(args.t, args.q, args.sigma if args.sigma is not None else 1.0, args.eta)
    rows = sweep_rows(args.regime, _int_grid(args.grid), anchor, args.delta, args.target_epsilon)
    _emit_rows(rows, SWEEP_COLUMNS, args.format, args.digits, args.out)
    return 0


def quadratic_rows(t_values, q_values, alpha, delta, calibration_epsilon=1.0, sigma=None) -> list[dict]:
    rows = []
    for q in q_values:
        s = sigma if sigma is not None else sigma_for_standard_epsilon(1, q, calibration_epsilon, delta)
        for T in t_values:
            r = quadratic_epsilon_ratio(QuadraticParams(SgdParams(T, q, s), alpha), delta)
            rows.append(
                {
                    "T": T,
                    "q": q,
                    "sigma": s,
                    "alpha": alpha,
                    "eps_quadratic": r.eps_quadratic,
                    "eps_linear_sweep": r.eps_linear_sweep,
                    "ratio": r.ratio,
                    "rounded": r.rounded,
                }
            )
    return rows


def cmd_quadratic(args) -> int:
    rows = quadratic_rows(
        _int_grid(args.grid), _float_list(args.q_list), args.alpha, args.delta, args.calibration_epsilon, args.sigma
    )
    _emit_rows(rows, QUADRATIC_COLUMNS, args.format, args.digits, args.out)
    return 0


def _resolve_sigma(args) -> float:
    if args.sigma is not None:
        return args.sigma
    if args.calibration_epsilon is not None:
        return sigma_for_standard_epsilon(1, args.q, args.calibration_epsilon, args.delta)
    if args.standard_epsilon is not None:
        return sigma_for_standard_epsilon(args.t, args.q, args.standard_epsilon, args.delta)
    raise UsageError("give --sigma, --calibration-epsilon or --standard-epsilon")


def _encoder_config(args, sigma: float) -> EncoderConfig:
    return EncoderConfig(
        T=args.t,
        p=args.q,
        sigma=sigma,
        N=args.repeaters,
        big_val=args.big_val,
        t_last=args.t_last,
        eta=args.eta,
    )


def cmd_encode_attack(args) -> int:
    sigma = _resolve_sigma(args)
    cfg = _encoder_config(args, sigma)
    trace = encode_attack_run(cfg, not args.no_canary, args.seed)
    out = {
        "T": cfg.T,
        "q": cfg.p,
        "sigma": sigma,
        "canary_included": trace.canary_included,
        "final_model": trace.final_model.tolist(),
        "presence_bits": [int(b) for b in trace.presence_bits],
        "decoded_bits": [int(b) for b in decode_presence(trace.final_model, cfg)],
    }
    if sigma > 0:
        params = SgdParams(cfg.T, cfg.p, sigma, cfg.eta)
        out["eps_attack_exact"] = encoding_attack_epsilon(cfg, args.delta)
        out["eps_heuristic_sweep_max"] = heuristic_sweep_max(params, args.delta)[0] if cfg.p > 0 else 0.0
    _emit_json(out, args.digits, args.out)
    return 0


def cmd_audit(args) -> int:
    sigma = _resolve_sigma(args)
    params = SgdParams(args.t, args.q, sigma, args.eta)
    cfg = AuditConfig(
        trials_per_arm=args.trials,
        delta_target=args.delta,
        calibration_fraction=args.calibration_fraction,
        seed=args.seed,
    )
    scenario = "linear" if args.scenario == "linear" else _encoder_config(args, sigma)
    result = run_audit(params, cfg, scenario, workers=args.workers, scores_out=args.scores_out)
    sweep_eps = heuristic_sweep_max(params, args.delta)[0] if args.q > 0 else 0.0
    out = {
        "scenario": args.scenario,
        "T": args.t,
        "q": args.q,
        "sigma": sigma,
        "trials_per_arm": args.trials,
        "seed": args.seed,
        **result.to_dict(),
        "eps_heuristic": heuristic_epsilon(params, args.delta),
        "eps_heuristic_sweep_max": sweep_eps,
        "eps_standard_ub": standard_epsilon(params, args.delta),
    }
    _emit_json(out, args.digits, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lastiterate", description="Last-iterate privacy accounting for DP-SGD.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, t_required=True, sigma_required=True):
        p.add_argument("--t", type=int, required=t_required, help="number of steps T")
        p.add_argument("--q", type=float, required=True, help="sampling rate")
        p.add_argument("--sigma", type=float, required=sigma_required, default=None, help="noise multiplier")
        p.add_argument("--eta", type=float, default=1.0, help="learning rate")
        p.add_argument("--delta", type=float, default=1e-6)
        p.add_argument("--out", default=None, help="write output here instead of stdout")
        p.add_argument("--digits", type=int, default=6, help="significant digits in output")

    p = sub.add_parser("epsilon", help="epsilon at one point, with baselines")
    common(p)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=cmd_epsilon)

    p = sub.add_parser("delta", help="delta at one epsilon")
    common(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=cmd_delta)

    p = sub.add_parser("sweep", help="epsilon vs. T in one of three regimes")
    common(p, sigma_required=False)
    p.add_argument("--regime", choices=("a", "b", "c"), required=True)
    p.add_argument("--grid", default="geom:1:1000:16", help="T values: '1,2,4', 'range:1:20' or 'geom:lo:hi:n'")
    p.add_argument("--target-epsilon", type=float, default=None, help="standard epsilon to hold (regime b)")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("quadratic", help="quadratic-regularizer ratio grid")
    p.add_argument("--grid", default="range:1:16", help="T values")
    p.add_argument("--q-list", default="0.05,0.1,0.2,0.4")
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--delta", type=float, default=1e-6)
    p.add_argument("--sigma", type=float, default=None, help="fixed sigma instead of per-q calibration")
    p.add_argument("--calibration-epsilon", type=float, default=1.0, help="single-step epsilon used to set sigma")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("--out", default=None)
    p.add_argument("--digits", type=int, default=6)
    p.set_defaults(func=cmd_quadratic)

    def attack_opts(p):
        p.add_argument("--calibration-epsilon", type=float, default=None, help="set sigma so one step is this eps")
        p.add_argument("--standard-epsilon", type=float, default=None, help="set sigma from the standard analysis")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--repeaters", type=int, default=EncoderConfig.N)
        p.add_argument("--big-val", type=float, default=EncoderConfig.big_val)
        p.add_argument("--t-last", type=float, default=EncoderConfig.t_last)

    p = sub.add_parser("encode-attack", help="one run of the encoding attack")
    common(p, sigma_required=False)
    attack_opts(p)
    p.add_argument("--no-canary", action="store_true")
    p.set_defaults(func=cmd_encode_attack)

    p = sub.add_parser("audit", help="Monte Carlo audit with certified lower bound")
    common(p, sigma_required=False)
    attack_opts(p)
    p.add_argument("--scenario", choices=("linear", "encoding"), default="linear")
    p.add_argument("--trials", type=int, default=100_000)
    p.add_argument("--calibration-fraction", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--scores-out", default=None, help="dump per-trial scores as CSV")
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BracketError, ClippingViolation, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())

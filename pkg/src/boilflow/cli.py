"""Command-line entry point for reproducible batch runs.

Subcommands: ``generate``, ``estimate``, ``metrics``, ``prefilter``,
``roundtrip``. Configs and reports are JSON, plottable series are CSV, and
screen data uses the PHS1 binary format. Exit codes: 0 success, 1
runtime/estimation failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .core import ScreenSequence
from .estimator import EstimationError, estimate_all
from .generator import BoilingFlowParams, generate_sequence
from .io import read_phs1, write_phs1
from .metrics import (
    convective_velocity,
    sequence_errors,
    sf_to_csv,
    strouhal_premultiplied,
    strouhal_to_csv,
    tps_to_csv,
)
from .prefilter import apply_fir, filters_from_json
from .spectrum import VonKarmanModel

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class ConfigError(ValueError):
    """Bad or missing configuration; maps to exit code 2."""


def _load_config(path) -> dict:
    try:
        with open(path) as f:
            return json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config is not valid JSON: {e}") from e


def _params_from_config(cfg: dict) -> BoilingFlowParams:
    try:
        m = cfg["model"]
        return BoilingFlowParams(
            model=VonKarmanModel(m["L0"], m["r0"], m.get("gamma0", 1.0)),
            v=tuple(cfg["v"]),
            alpha=cfg["alpha"],
            n_out=cfg["n_out"],
            delta=cfg["delta"],
            fs=cfg["fs"],
            oversample=cfg.get("oversample", 4),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ConfigError(f"bad generation parameters: {e}") from e


def splitmix64(x: int) -> int:
    """Single splitmix64 output step; used to derive per-trial seeds."""
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)


def _out_dir(args) -> Path:
    d = Path(args.out_dir)
    d.mkdir(parents=True, exist_ok=True)
    return d


def cmd_generate(args) -> int:
    cfg = _load_config(args.config)
    params = _params_from_config(cfg)
    n_frames = args.frames if args.frames is not None else cfg.get("n_frames")
    if n_frames is None:
        raise ConfigError("frame count missing: set n_frames in the config or pass --frames")
    if n_frames < 1:
        raise ConfigError(f"frame count must be >= 1, got {n_frames}")
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out = Path(args.out) if args.out else _out_dir(args) / "screens.phs1"
    seq = generate_sequence(params, n_frames, seed)
    write_phs1(out, seq)
    echo = {
        "out": str(out),
        "n_frames": n_frames,
        "seed": seed,
        "params": {
            "model": {"L0": params.model.L0, "r0": params.model.r0, "gamma0": params.model.gamma0},
            "v": list(params.v),
            "alpha": params.alpha,
            "n_out": params.n_out,
            "delta": params.delta,
            "fs": params.fs,
            "oversample": params.oversample,
        },
    }
    print(json.dumps(echo, indent=2))
    return EXIT_OK


def _train_slice(seq: ScreenSequence, fraction: float) -> ScreenSequence:
    if not 0 < fraction <= 1:
        raise ConfigError(f"train fraction must lie in (0, 1], got {fraction}")
    n = max(1, int(round(seq.n_frames * fraction)))
    if n == seq.n_frames:
        return seq
    return ScreenSequence(seq.frames[:n].copy(), seq.delta, seq.fs)


def cmd_estimate(args) -> int:
    seq = read_phs1(args.input)
    train = _train_slice(seq, args.train_fraction)
    report = estimate_all(
        train,
        anisotropic=args.anisotropic,
        kmax=args.kmax,
        max_lag=args.max_lag,
    )
    out = Path(args.out) if args.out else _out_dir(args) / "report.json"
    with open(out, "w") as f:
        json.dump(report.to_dict(), f, indent=2)
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "diagnostics"}, indent=2))
    print(f"report written to {out}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    ref = read_phs1(args.reference)
    cand = read_phs1(args.candidate)
    cfg = _load_config(args.config) if args.config else {}
    which = set(args.which.split(",")) if args.which != "all" else {"tps", "flowtps", "sf", "strouhal"}
    out_dir = _out_dir(args)
    errors = sequence_errors(ref, cand)
    art = errors.pop("artifacts")
    if "tps" in which:
        tps_to_csv(out_dir / "phase_tps_reference.csv", art["phase_tps_reference"])
        tps_to_csv(out_dir / "phase_tps_candidate.csv", art["phase_tps_candidate"])
    if "flowtps" in which:
        tps_to_csv(out_dir / "flow_tps_reference.csv", art["flow_tps_reference"])
        tps_to_csv(out_dir / "flow_tps_candidate.csv", art["flow_tps_candidate"])
    if "sf" in which:
        sf_to_csv(out_dir / "structure_function_reference.csv", art["sf_reference"])
        sf_to_csv(out_dir / "structure_function_candidate.csv", art["sf_candidate"])
    if "strouhal" in which and "strouhal" in cfg:
        sc = cfg["strouhal"]
        try:
            delta_star = sc["delta_star"]
            u_c = sc.get("u_c")
            if u_c is None:
                u_c = convective_velocity(sc["v_x"], ref.delta, ref.fs)
        except KeyError as e:
            raise ConfigError(f"strouhal config needs delta_star and u_c or v_x: {e}") from e
        for tag in ("reference", "candidate"):
            st, st_s = strouhal_premultiplied(art[f"flow_tps_{tag}"], delta_star, u_c)
            strouhal_to_csv(out_dir / f"strouhal_{tag}.csv", st, st_s)
    summary_path = out_dir / "metrics_summary.json"
    with open(summary_path, "w") as f:
        json.dump(errors, f, indent=2)
    print(json.dumps(errors, indent=2))
    print(f"summary written to {summary_path}")
    return EXIT_OK


def cmd_prefilter(args) -> int:
    cfg = _load_config(args.config)
    if "filters" not in cfg:
        raise ConfigError('prefilter config needs a "filters" list')
    seq = read_phs1(args.input)
    try:
        chain = filters_from_json(cfg["filters"], seq.fs)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"bad filter block: {e}") from e
    out_seq = apply_fir(seq, chain)
    out = Path(args.out) if args.out else _out_dir(args) / "filtered.phs1"
    write_phs1(out, out_seq)
    print(f"filtered {seq.n_frames} -> {out_seq.n_frames} frames; written to {out}")
    return EXIT_OK


_ROUNDTRIP_COLUMNS = [
    "trial",
    "status",
    "L0_rel_err",
    "r0_rel_err",
    "gamma0_rel_err",
    "v_rel_err",
    "alpha_rel_err",
    "flow_tps_nrmse",
    "phase_tps_nrmse",
    "structure_function_nrmse",
]


def run_roundtrip_trial(
    params: BoilingFlowParams,
    frames_train: int,
    frames_eval: int,
    trial_seed: int,
    anisotropic: bool = False,
    kmax: int = 2,
) -> dict:
    """Generate train/eval data, estimate on the train set, regenerate with
    the estimates, and score parameter recovery plus the three NRMSE metrics."""
    train = generate_sequence(params, frames_train, splitmix64(trial_seed + 1))
    evaldata = generate_sequence(params, frames_eval, splitmix64(trial_seed + 2))
    report = estimate_all(train, anisotropic=anisotropic, kmax=kmax)
    params_hat = BoilingFlowParams(
        model=VonKarmanModel(report.L0_hat, report.r0_hat, report.gamma0_hat),
        v=report.v_hat,
        alpha=report.alpha_hat,
        n_out=params.n_out,
        delta=params.delta,
        fs=params.fs,
        oversample=params.oversample,
    )
    regen = generate_sequence(params_hat, frames_eval, splitmix64(trial_seed + 3))
    errs = sequence_errors(evaldata, regen)
    errs.pop("artifacts")
    truth = params.model
    v_true = np.hypot(*params.v)
    row = {
        "L0_rel_err": abs(report.L0_hat - truth.L0) / truth.L0,
        "r0_rel_err": abs(report.r0_hat - truth.r0) / truth.r0,
        "gamma0_rel_err": abs(report.gamma0_hat - truth.gamma0) / truth.gamma0,
        "v_rel_err": np.hypot(report.v_hat[0] - params.v[0], report.v_hat[1] - params.v[1])
        / v_true if v_true > 0 else np.nan,
        "alpha_rel_err": abs(report.alpha_hat - params.alpha) / params.alpha
        if params.alpha > 0 else np.nan,
    }
    return row | errs | {"report": report}


def cmd_roundtrip(args) -> int:
    cfg = _load_config(args.config)
    if "truth" not in cfg:
        raise ConfigError('roundtrip config needs a "truth" parameter block')
    params = _params_from_config(cfg["truth"])
    frames_train = cfg.get("frames_train", 10000)
    frames_eval = cfg.get("frames_eval", 10000)
    trials = cfg.get("trials", 3)
    if trials < 1 or frames_train < 1 or frames_eval < 1:
        raise ConfigError("trials, frames_train and frames_eval must all be >= 1")
    anisotropic = cfg.get("anisotropic", False)
    kmax = cfg.get("kmax", 2)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    out_dir = _out_dir(args)

    rows = []
    for t in range(trials):
        trial_seed = splitmix64(seed + t)
        try:
            res = run_roundtrip_trial(
                params, frames_train, frames_eval, trial_seed, anisotropic, kmax
            )
            report = res.pop("report")
            with open(out_dir / f"trial_{t}_report.json", "w") as f:
                json.dump(report.to_dict(), f, indent=2)
            rows.append({"trial": t, "status": "ok"} | res)
            print(f"trial {t}: " + ", ".join(f"{k}={v:.4g}" for k, v in res.items()))
        except EstimationError as e:
            rows.append({"trial": t, "status": f"failed:{e.stage}"})
            print(f"trial {t}: failed at stage {e.stage}: {e}")
    ok = [r for r in rows if r["status"] == "ok"]
    if ok:
        mean_row = {"trial": "mean", "status": "ok"}
        for c in _ROUNDTRIP_COLUMNS[2:]:
            mean_row[c] = float(np.mean([r[c] for r in ok]))
        rows.append(mean_row)
    table = out_dir / "roundtrip.csv"
    with open(table, "w") as f:
        f.write(",".join(_ROUNDTRIP_COLUMNS) + "\n")
        for r in rows:
            f.write(",".join(_fmt_cell(r.get(c)) for c in _ROUNDTRIP_COLUMNS) + "\n")
    print(f"round-trip table written to {table}")
    return EXIT_OK if ok else EXIT_RUNTIME


def _fmt_cell(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boilflow", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
        sp.add_argument("--out-dir", default=".", help="directory for outputs")
        sp.add_argument("--config", default=None, help="JSON config path")

    g = sub.add_parser("generate", help="synthesize a screen sequence to PHS1")
    common(g)
    g.add_argument("--frames", type=int, default=None, help="frame count (overrides config)")
    g.add_argument("--out", default=None, help="output PHS1 path")
    g.set_defaults(func=cmd_generate, needs_config=True)

    e = sub.add_parser("estimate", help="estimate parameters from a PHS1 file")
    common(e)
    e.add_argument("--input", required=True, help="input PHS1 path")
    e.add_argument("--anisotropic", action="store_true", help="fit gamma0 (default isotropic)")
    e.add_argument("--kmax", type=int, default=2, help="edge-bin cutoff (default 2)")
    e.add_argument("--train-fraction", type=float, default=0.8,
                   help="use the first fraction of frames (default 0.8)")
    e.add_argument("--max-lag", type=int, default=None, help="cap on velocity time lags")
    e.add_argument("--out", default=None, help="report JSON path")
    e.set_defaults(func=cmd_estimate, needs_config=False)

    m = sub.add_parser("metrics", help="compare two PHS1 files")
    common(m)
    m.add_argument("--reference", required=True)
    m.add_argument("--candidate", required=True)
    m.add_argument("--which", default="all", help="all or comma list of tps,flowtps,sf,strouhal")
    m.set_defaults(func=cmd_metrics, needs_config=False)

    f = sub.add_parser("prefilter", help="apply FIR notch/band-stop filters to a PHS1 file")
    common(f)
    f.add_argument("--input", required=True)
    f.add_argument("--out", default=None, help="output PHS1 path")
    f.set_defaults(func=cmd_prefilter, needs_config=True)

    r = sub.add_parser("roundtrip", help="generate/estimate/regenerate error table")
    common(r)
    r.set_defaults(func=cmd_roundtrip, needs_config=True)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.needs_config and not args.config:
        parser.error(f"{args.command} requires --config")  # exits 2
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as e:
        print(f"missing input: {e}", file=sys.stderr)
        return EXIT_USAGE
    except EstimationError as e:
        print(f"estimation failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())

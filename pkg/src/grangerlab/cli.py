"""Command-line front end.

Every subcommand reads an optional JSON config (``--config``), applies
command-line overrides, echoes the fully resolved config in its result
JSON and exits 0 on success, 2 on validation errors and 3 on numerical
failures (with an error JSON on standard error).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
import zlib
from itertools import permutations

import numpy as np

from . import __version__
from .data import HistorySpec, demean, read_csv, stationarity_screen, write_csv
from .errors import GrangerLabError, NumericalError, ValidationError
from .gc_time import granger_tests
from .io import RESULT_SCHEMA_VERSION, dumps, write_json, write_rows
from .resampling import SurrogateScheme, correct_multiplicity, surrogate_pvalue, write_null_csv
from .simulation import builtin_scenarios, scenario, simulate
from .spectral import spectral_significance_surrogate, spectral_statistic
from .te import te_gaussian, te_kernel, te_permutation_test
from .tvvar import (
    KalmanConfig,
    kalman_em,
    tv_causality,
    tv_var_adaptive,
    tv_var_basis,
    tv_var_kalman,
    tv_var_window,
)
from .var import fit_var, residual_whiteness, select_order

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3

COMMON = {
    "input": None,
    "sampling_rate": 1.0,
    "channels": None,
    "demean": False,
    "order": 1,
    "delay": 0,
    "lag_step": 1,
    "auto_order": None,
    "criterion": "bic",
    "seed": 0,
    "output": None,
}
PAIR = {"source": None, "target": None}

DEFAULTS = {
    "validate": {"n_segments": 4},
    "fit-var": {"whiteness_lags": 20},
    "gc-time": {**PAIR, "conditional": False},
    "gc-spectral": {**PAIR, "stat": "ggc", "nfreq": 512, "plot_data": None},
    "te": {**PAIR, "estimator": "gaussian", "n_perm": 0},
    "gc-tv": {
        **PAIR, "method": "kalman", "uc": 0.01, "r_variant": "schack",
        "q_variant": "isaksson", "smooth": False, "average_trials": False,
        "window_len": None, "step": None, "n_basis": 8, "basis": "spline", "n_iter": 50,
        "tv_stat": "wald", "nfreq": 64, "plot_data": None,
    },
    "simulate": {"scenario": None, "n_times": None, "n_trials": None, "out_dir": None},
    "significance": {
        **PAIR, "stat": "f", "estimator": "gaussian", "scheme": "circular-shift",
        "n_surrogates": 199, "block_len": None, "nfreq": 512, "correction": None,
        "null_csv": None,
    },
}
NO_INPUT = ("simulate",)


def substream_seed(seed: int, name: str) -> int:
    """Independent integer seed for a named consumer of the config seed."""
    ss = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


# --- argument parsing ---------------------------------------------------------

def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _add_common(p, with_input=True):
    p.add_argument("--config", help="JSON config file; command-line options override it")
    p.add_argument("--output", "-o", help="result JSON path (default: standard output)")
    p.add_argument("--seed", type=int)
    if not with_input:
        return
    p.add_argument("--input", "-i", nargs="+", help="CSV file(s): one per trial or one with a trial column")
    p.add_argument("--sampling-rate", type=float)
    p.add_argument("--channels", type=_csv_list, help="comma-separated channel names or indices")
    p.add_argument("--demean", action="store_const", const=True, default=None)
    p.add_argument("--order", "-p", type=int, help="model order / embedding dimension")
    p.add_argument("--delay", type=int)
    p.add_argument("--lag-step", type=int)
    p.add_argument("--auto-order", type=int, metavar="P_MAX", help="select the order up to P_MAX")
    p.add_argument("--criterion", choices=["aic", "bic"])


def _add_pair(p):
    p.add_argument("--source")
    p.add_argument("--target")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grangerlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"grangerlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check input files and screen for nonstationarity")
    _add_common(p)
    p.add_argument("--n-segments", type=int)

    p = sub.add_parser("fit-var", help="fit a stationary VAR")
    _add_common(p)
    p.add_argument("--whiteness-lags", type=int)

    p = sub.add_parser("gc-time", help="time-domain F and Wald tests")
    _add_common(p)
    _add_pair(p)
    p.add_argument("--conditional", action="store_const", const=True, default=None,
                   help="condition each pair on all other selected channels")

    p = sub.add_parser("gc-spectral", help="spectral GGC, DTF or PDC")
    _add_common(p)
    _add_pair(p)
    p.add_argument("--stat", choices=["ggc", "dtf", "pdc"])
    p.add_argument("--nfreq", type=int)
    p.add_argument("--plot-data", help="CSV path stem; one long-format CSV per direction")

    p = sub.add_parser("te", help="transfer entropy")
    _add_common(p)
    _add_pair(p)
    p.add_argument("--estimator", choices=["gaussian", "kernel"])
    p.add_argument("--n-perm", type=int, help="surrogates for a p-value (0 = none)")

    p = sub.add_parser("gc-tv", help="time-varying VAR and per-time causality")
    _add_common(p)
    _add_pair(p)
    p.add_argument("--method", choices=["window", "lms", "rls", "kalman", "em", "basis"])
    p.add_argument("--uc", type=float)
    p.add_argument("--r-variant")
    p.add_argument("--q-variant")
    p.add_argument("--smooth", action="store_const", const=True, default=None)
    p.add_argument("--average-trials", action="store_const", const=True, default=None)
    p.add_argument("--window-len", type=int)
    p.add_argument("--step", type=int)
    p.add_argument("--n-basis", type=int)
    p.add_argument("--basis", choices=["spline", "wavelet"])
    p.add_argument("--n-iter", type=int)
    p.add_argument("--tv-stat", choices=["wald", "spectral_ggc", "dtf", "pdc"])
    p.add_argument("--nfreq", type=int)
    p.add_argument("--plot-data", help="CSV path stem; one long-format CSV per direction")

    p = sub.add_parser("simulate", help="write a builtin scenario to CSV")
    _add_common(p, with_input=False)
    p.add_argument("--scenario", choices=sorted(builtin_scenarios()))
    p.add_argument("--n-times", type=int)
    p.add_argument("--n-trials", type=int)
    p.add_argument("--out-dir")

    p = sub.add_parser("significance", help="surrogate significance tests")
    _add_common(p)
    _add_pair(p)
    p.add_argument("--stat", choices=["f", "wald", "ggc", "dtf", "pdc", "te"])
    p.add_argument("--estimator", choices=["gaussian", "kernel"])
    p.add_argument("--scheme", choices=["circular-shift", "trial-shuffle", "block-permutation"])
    p.add_argument("--n-surrogates", type=int)
    p.add_argument("--block-len", type=int)
    p.add_argument("--nfreq", type=int)
    p.add_argument("--correction", choices=["bonferroni", "benjamini-hochberg"])
    p.add_argument("--null-csv", help="CSV path stem for the null samples")
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit command-line values."""
    keys = dict(DEFAULTS[command])
    if command in NO_INPUT:
        base = {"seed": 0, "output": None}
    else:
        base = dict(COMMON)
    cfg = {**base, **keys}
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise ValidationError(f"cannot read config: {exc}", path=args.config) from None
        except json.JSONDecodeError as exc:
            raise ValidationError(f"config is not valid JSON: {exc}", path=args.config) from None
        if not isinstance(loaded, dict):
            raise ValidationError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(cfg))
        if unknown:
            raise ValidationError(f"unknown config keys for {command}: {unknown}")
        cfg.update(loaded)
    for key in cfg:
        val = getattr(args, key, None)
        if val is not None:
            cfg[key] = val
    if command not in NO_INPUT and not cfg["input"]:
        raise ValidationError("no input files given (--input or config 'input')")
    if isinstance(cfg.get("input"), str):
        cfg["input"] = [cfg["input"]]
    return cfg


# --- helpers ------------------------------------------------------------------

def _load(cfg):
    series = read_csv(cfg["input"], sampling_rate=cfg["sampling_rate"])
    if cfg["channels"]:
        idx = [series.channel_index(_as_channel(c)) for c in cfg["channels"]]
        series = series.select(idx)
    if cfg["demean"]:
        series = demean(series)
    return series


def _as_channel(c):
    if isinstance(c, int):
        return c
    return int(c) if str(c).lstrip("-").isdigit() else c


def _history(cfg, series, channels=None):
    h = HistorySpec(cfg["order"], cfg["delay"], cfg["lag_step"])
    if cfg["auto_order"]:
        p = select_order(series, channels, cfg["auto_order"], cfg["criterion"], h)
        h = h.with_order(p)
    return h


def _directions(cfg, series):
    names = series.channel_names
    if cfg["source"] is not None or cfg["target"] is not None:
        if cfg["source"] is None or cfg["target"] is None:
            raise ValidationError("give both source and target, or neither")
        s = series.channel_index(_as_channel(cfg["source"]))
        t = series.channel_index(_as_channel(cfg["target"]))
        return [(s, t)]
    if series.n_channels < 2:
        raise ValidationError("at least two channels are needed")
    return list(permutations(range(len(names)), 2))


def _stem_path(stem, s_name, t_name):
    root, ext = os.path.splitext(stem)
    return f"{root}_{s_name}-{t_name}{ext or '.csv'}"


# --- subcommands --------------------------------------------------------------

def cmd_validate(cfg, warn):
    series = _load(cfg)
    out = {
        "n_trials": series.n_trials,
        "n_times": series.n_times,
        "n_channels": series.n_channels,
        "channels": list(series.channel_names),
        "sampling_rate": series.sampling_rate,
    }
    try:
        out["stationarity"] = stationarity_screen(series, cfg["n_segments"]).to_dict()
    except ValidationError as exc:
        warn.append(f"stationarity screen skipped: {exc}")
    return [out]


def cmd_fit_var(cfg, warn):
    series = _load(cfg)
    history = _history(cfg, series)
    model, diag = fit_var(series, None, history)
    out = {"model": model.to_dict(), "diagnostics": diag.to_dict()}
    lags = cfg["whiteness_lags"]
    if lags > history.order and lags < diag.residuals.shape[1]:
        out["whiteness"] = residual_whiteness(diag, lags).to_dict()
    else:
        warn.append("whiteness test skipped: lag count incompatible with order or length")
    return [out]


def cmd_gc_time(cfg, warn):
    series = _load(cfg)
    history = _history(cfg, series)
    results = []
    for s, t in _directions(cfg, series):
        cond = ()
        if cfg["conditional"]:
            cond = tuple(c for c in range(series.n_channels) if c not in (s, t))
        results.append(granger_tests(series, s, t, history, conditioning=cond).to_dict())
    return results


def cmd_gc_spectral(cfg, warn):
    series = _load(cfg)
    stat = cfg["stat"]
    dirs = _directions(cfg, series)
    multichannel = None if stat == "ggc" else list(range(series.n_channels))
    history = _history(cfg, series, multichannel)
    results = []
    for s, t in dirs:
        res = spectral_statistic(series, s, t, history, stat, cfg["nfreq"], multichannel)
        entry = res.to_dict()
        if cfg["plot_data"]:
            path = _stem_path(cfg["plot_data"], series.channel_names[s], series.channel_names[t])
            write_rows(path, ["freq_hz", "value"], zip(res.freq_hz, res.values))
            entry["plot_data"] = path
        results.append(entry)
    return results


def cmd_te(cfg, warn):
    series = _load(cfg)
    history = _history(cfg, series)
    seed = substream_seed(cfg["seed"], "significance")
    results = []
    for s, t in _directions(cfg, series):
        if cfg["n_perm"]:
            est = te_permutation_test(series, s, t, history, cfg["estimator"],
                                      n_perm=cfg["n_perm"], seed=seed)
        elif cfg["estimator"] == "kernel":
            est = te_kernel(series, s, t, history)
        else:
            est = te_gaussian(series, s, t, history)
        results.append(est.to_dict())
    return results


def _trajectory(cfg, series, history):
    method = cfg["method"]
    if method == "window":
        return tv_var_window(series, None, history, cfg["window_len"], cfg["step"])
    if method in ("lms", "rls"):
        return tv_var_adaptive(series, None, history, method, cfg["uc"])
    if method == "kalman":
        config = KalmanConfig(uc=cfg["uc"], q_variant=cfg["q_variant"],
                              r_variant=cfg["r_variant"], average_trials=cfg["average_trials"])
        return tv_var_kalman(series, None, history, config, smooth=cfg["smooth"])
    if method == "em":
        return kalman_em(series, None, history, n_iter=cfg["n_iter"])[1]
    if method == "basis":
        return tv_var_basis(series, None, history, cfg["n_basis"], cfg["basis"])
    raise ValidationError(f"unknown method {method!r}")


def cmd_gc_tv(cfg, warn):
    series = _load(cfg)
    history = _history(cfg, series)
    traj = _trajectory(cfg, series, history)
    warn.extend(traj.warnings)
    results = [{"trajectory": traj.to_dict()}]
    for s, t in _directions(cfg, series):
        tv = tv_causality(traj, s, t, cfg["tv_stat"], n_freqs=cfg["nfreq"])
        warn.extend(tv.warnings)
        entry = tv.to_dict()
        if cfg["plot_data"]:
            path = _stem_path(cfg["plot_data"], series.channel_names[s], series.channel_names[t])
            header = ["time_s", "value"] if tv.freqs is None else ["time_s", "freq_hz", "value"]
            write_rows(path, header, tv.long_rows())
            entry["plot_data"] = path
        results.append(entry)
    return results


def cmd_simulate(cfg, warn):
    if not cfg["scenario"]:
        raise ValidationError("simulate needs --scenario")
    if not cfg["out_dir"]:
        raise ValidationError("simulate needs --out-dir")
    overrides = {"seed": substream_seed(cfg["seed"], "simulation")}
    for key in ("n_times", "n_trials"):
        if cfg[key] is not None:
            overrides[key] = cfg[key]
    spec = scenario(cfg["scenario"], **overrides)
    series = simulate(spec)
    files = write_csv(series, cfg["out_dir"])
    truth_path = os.path.join(cfg["out_dir"], "truth.json")
    write_json(truth_path, spec.truth())
    return [{"scenario": spec.name, "files": files, "truth": truth_path,
             "generator_seed": spec.seed}]


def cmd_significance(cfg, warn):
    series = _load(cfg)
    history = _history(cfg, series)
    stat = cfg["stat"]
    seed = substream_seed(cfg["seed"], "significance")
    n = cfg["n_surrogates"]
    results = []
    for s, t in _directions(cfg, series):
        names = series.channel_names[s], series.channel_names[t]
        entry = {"source": names[0], "target": names[1], "statistic": stat,
                 "scheme": cfg["scheme"], "n_surrogates": n}
        if stat in ("ggc", "dtf", "pdc"):
            channels = None if stat == "ggc" else list(range(series.n_channels))
            res, null = spectral_significance_surrogate(
                series, s, t, history, stat, n, cfg["scheme"], seed, cfg["nfreq"],
                channels, return_null=True)
            entry.update(observed=res.values, p_value=res.p_values, freq_hz=res.freq_hz)
            observed = res.values
        else:
            if stat == "te":
                est = te_kernel if cfg["estimator"] == "kernel" else te_gaussian
                fn = lambda x: est(x, s, t, history).value  # noqa: E731
            else:
                attr = "f_stat" if stat == "f" else "wald_stat"
                fn = lambda x: getattr(granger_tests(x, s, t, history), attr)  # noqa: E731
            scheme = SurrogateScheme.for_history(cfg["scheme"], n, seed, history,
                                                 cfg["block_len"])
            observed = fn(series)
            p, null = surrogate_pvalue(fn, series, scheme, [s], observed=observed)
            entry.update(observed=observed, p_value=p)
        if cfg["null_csv"]:
            path = _stem_path(cfg["null_csv"], *names)
            write_null_csv(path, null, observed)
            entry["null_csv"] = path
        results.append(entry)
    if cfg["correction"]:
        flat = np.concatenate([np.ravel(r["p_value"]) for r in results])
        adj = correct_multiplicity(flat, cfg["correction"])
        pos = 0
        for r in results:
            size = np.size(r["p_value"])
            block = adj[pos:pos + size]
            r["p_value_corrected"] = block if np.ndim(r["p_value"]) else float(block[0])
            pos += size
    return results


COMMANDS = {
    "validate": cmd_validate,
    "fit-var": cmd_fit_var,
    "gc-time": cmd_gc_time,
    "gc-spectral": cmd_gc_spectral,
    "te": cmd_te,
    "gc-tv": cmd_gc_tv,
    "simulate": cmd_simulate,
    "significance": cmd_significance,
}


def _error_payload(exc: Exception, code: int) -> str:
    return json.dumps({
        "error": type(exc).__name__,
        "message": str(exc),
        "details": json.loads(dumps(getattr(exc, "details", {}))),
        "exit_code": code,
    }, sort_keys=True)


def run(argv=None) -> int:
    """Parse ``argv``, run one analysis and return the exit code."""
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            warn: list = []
            results = COMMANDS[args.command](cfg, warn)
        warn.extend(str(w.message) for w in caught)
        payload = {
            "version": RESULT_SCHEMA_VERSION,
            "package_version": __version__,
            "command": args.command,
            "config": cfg,
            "results": results,
            "warnings": list(dict.fromkeys(warn)),
        }
        text = dumps(payload)
        if cfg.get("output"):
            with open(cfg["output"], "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
        return EXIT_OK
    except ValidationError as exc:
        sys.stderr.write(_error_payload(exc, EXIT_VALIDATION) + "\n")
        return EXIT_VALIDATION
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        sys.stderr.write(_error_payload(exc, EXIT_NUMERICAL) + "\n")
        return EXIT_NUMERICAL
    except GrangerLabError as exc:
        sys.stderr.write(_error_payload(exc, EXIT_NUMERICAL) + "\n")
        return EXIT_NUMERICAL


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

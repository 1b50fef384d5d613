"""Command-line entry point.

Usage::

    mttem --mode simulate --config cfg.json --out-dir out --seed 1

The config is a JSON object; command-line paths and ``--seed`` override
its fields. Every run writes ``manifest.json`` holding the resolved config,
which can be fed back through ``--config`` to reproduce the outputs.

Exit codes: 0 success, 1 usage, 2 data, 3 numerical.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .em import SAEM, OnlineEM, OracleEM, StepSizeSchedule, select_k
from .exceptions import DataError, InvalidParameterError, NumericalError, StructuralError
from .model import CvParams
from .simulator import read_scans, read_truth, simulate, simulate_fixed_k, write_scans, write_truth
from .smc import ParticleSet, SMCConfig

MODES = ("simulate", "fit-batch", "fit-online", "track", "select-k", "check-n", "oracle-em")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

DEFAULTS = {
    "N": None, "L": 10, "alpha": 0.8, "overrides": {"sigma_xv2": 0.55}, "t_b": 10,
    "iters": 100, "ess_threshold": 0.5, "fixed_k": None, "k_range": None,
    "n": 100, "K": None, "n_values": [50, 200], "n_verify": 100, "bound": 1.0,
}

# required config fields per mode (besides mode and seed)
REQUIRED = {
    "simulate": ("theta", "n"),
    "fit-batch": ("theta0", "scans"),
    "fit-online": ("theta0", "scans"),
    "track": ("theta", "scans"),
    "select-k": ("theta0", "scans", "k_range"),
    "check-n": ("scans", "n_values", "n_verify"),
    "oracle-em": ("theta0", "scans", "truth"),
}


class UsageError(Exception):
    pass


def _fmt(v):
    return format(float(v), ".17g")


# ------------------------------------------------------------ config

def resolve_config(args):
    """Merge the config file with command-line overrides."""
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"invalid JSON ({exc.msg})", line=exc.lineno, path=args.config) from exc
        if not isinstance(cfg, dict):
            raise UsageError("config must be a JSON object")
    for key in ("mode", "scans", "truth", "out_dir", "seed"):
        v = getattr(args, key)
        if v is not None:
            cfg[key] = v
    mode = cfg.get("mode")
    if mode not in MODES:
        raise UsageError(f"mode must be one of {', '.join(MODES)}")
    if cfg.get("seed") is None:
        raise UsageError("a seed is required (--seed or config 'seed')")
    try:
        cfg["seed"] = int(cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise UsageError("seed must be an integer") from exc
    for k, v in DEFAULTS.items():
        cfg.setdefault(k, v)
    if cfg["N"] is None:
        cfg["N"] = 200 if mode == "fit-batch" else 100
    if mode in ("fit-online", "fit-batch", "select-k", "oracle-em") and "theta0" not in cfg:
        if "theta" in cfg:
            cfg["theta0"] = cfg["theta"]
    if mode == "check-n" and "theta0" not in cfg and "theta_hat" not in cfg:
        raise UsageError("check-n needs theta0 (to fit) or theta_hat")
    missing = [k for k in REQUIRED[mode] if cfg.get(k) is None]
    if missing:
        raise UsageError(f"mode {mode} requires {', '.join(missing)}")
    cfg.setdefault("out_dir", ".")
    return cfg


def _params(cfg, key):
    try:
        return CvParams.from_dict(cfg[key])
    except (TypeError, AttributeError) as exc:
        raise UsageError(f"{key} must be a parameter object") from exc


def _schedule(cfg):
    return StepSizeSchedule(alpha=float(cfg["alpha"]), overrides=dict(cfg["overrides"]),
                            t_b=int(cfg["t_b"]))


def _threads():
    v = os.environ.get("MTT_THREADS")
    if v is None:
        return os.cpu_count() or 1
    try:
        return max(1, int(v))
    except ValueError as exc:
        raise UsageError("MTT_THREADS must be an integer") from exc


def _pmap(fn, items):
    """Map over independent runs, in parallel up to ``MTT_THREADS`` workers."""
    items = list(items)
    workers = min(_threads(), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items))


# ------------------------------------------------------------ modes

def run_simulate(cfg, out):
    theta = _params(cfg, "theta")
    if cfg.get("K") is not None:
        scans, truth = simulate_fixed_k(theta, int(cfg["K"]), int(cfg["n"]), cfg["seed"])
    else:
        scans, truth = simulate(theta, int(cfg["n"]), cfg["seed"])
    write_scans(out / "scans.jsonl", scans)
    write_truth(out / "truth.jsonl", truth)
    return ["scans.jsonl", "truth.jsonl"]


def _online(cfg, theta0, N=None, fixed_k=None):
    return OnlineEM(theta0=theta0, n_particles=int(N or cfg["N"]), L=int(cfg["L"]),
                    schedule=_schedule(cfg), seed=cfg["seed"], fixed_k=fixed_k,
                    ess_threshold=float(cfg["ess_threshold"]))


def run_fit_online(cfg, out):
    scans = read_scans(cfg["scans"])
    est = _online(cfg, _params(cfg, "theta0"), fixed_k=cfg["fixed_k"]).fit(scans)
    est.trace_.to_csv(out / "trace.csv")
    return ["trace.csv"]


def run_fit_batch(cfg, out):
    scans = read_scans(cfg["scans"])
    est = SAEM(theta0=_params(cfg, "theta0"), n_particles=int(cfg["N"]), L=int(cfg["L"]),
               schedule=_schedule(cfg), n_iter=int(cfg["iters"]), seed=cfg["seed"],
               fixed_k=cfg["fixed_k"], ess_threshold=float(cfg["ess_threshold"])).fit(scans)
    est.trace_.to_csv(out / "trace.csv")
    return ["trace.csv"]


def run_oracle_em(cfg, out):
    scans = read_scans(cfg["scans"])
    truth = read_truth(cfg["truth"])
    est = OracleEM(theta0=_params(cfg, "theta0"), n_iter=int(cfg["iters"]),
                   fixed_k=cfg["fixed_k"] is not None).fit(scans, truth)
    est.trace_.to_csv(out / "trace.csv")
    return ["trace.csv"]


def track(scans, theta, N, L, seed, ess_threshold=0.5, fixed_k=None):
    """Filter ``scans`` at known ``theta``; per-step ``(k_hat, loglik)`` arrays."""
    cfg = SMCConfig(N=N, L=L, ess_threshold=ess_threshold, fixed_k=fixed_k)
    ps = ParticleSet(cfg, seed)
    model = theta.to_model()
    k_hat = np.empty(len(scans))
    ll = np.empty(len(scans))
    for t, s in enumerate(scans):
        ps.step(s, model)
        k_hat[t] = ps.mean_k_x()
        ll[t] = ps.log_norm_const
    return k_hat, ll


def run_track(cfg, out):
    scans = read_scans(cfg["scans"])
    if not scans:
        raise InvalidParameterError("scan file is empty")
    k_hat, ll = track(scans, _params(cfg, "theta"), int(cfg["N"]), int(cfg["L"]), cfg["seed"],
                      float(cfg["ess_threshold"]), cfg["fixed_k"])
    k_true = None
    if cfg.get("truth"):
        k_true = read_truth(cfg["truth"]).k_x
        if k_true.size != len(scans):
            raise StructuralError("truth and scans differ in length")
    with open(out / "track.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "k_hat", "loglik"] + (["k_true"] if k_true is not None else []))
        for i, s in enumerate(scans):
            row = [s.t, _fmt(k_hat[i]), _fmt(ll[i])]
            if k_true is not None:
                row.append(int(k_true[i]))
            w.writerow(row)
    return ["track.csv"]


def _select_one(job):
    cfg, K = job
    scans = read_scans(cfg["scans"])
    res = select_k(scans, [K], _params(cfg, "theta0"),
                   dict(n_particles=int(cfg["N"]), L=int(cfg["L"]), schedule=_schedule(cfg),
                        seed=cfg["seed"], ess_threshold=float(cfg["ess_threshold"])))
    return res.curves[0]


def run_select_k(cfg, out):
    ks = [int(k) for k in cfg["k_range"]]
    if not ks:
        raise InvalidParameterError("k_range is empty")
    scans = read_scans(cfg["scans"])
    if not scans:
        raise InvalidParameterError("scan file is empty")
    curves = np.array(_pmap(_select_one, [(cfg, K) for K in ks]))
    best = np.asarray(ks)[np.argmax(curves, axis=0)]
    with open(out / "select_k.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + [f"K={k}" for k in ks] + ["argmax"])
        for i, s in enumerate(scans):
            w.writerow([s.t] + [_fmt(c) for c in curves[:, i]] + [int(best[i])])
    return ["select_k.csv"]


def _check_one(job):
    cfg, N = job
    scans = read_scans(cfg["scans"])
    if cfg.get("theta_hat") is not None:
        theta_hat = _params(cfg, "theta_hat")
    else:
        theta_hat = _online(cfg, _params(cfg, "theta0"), N=N).fit(scans).params_
    vs, vt = simulate(theta_hat, int(cfg["n_verify"]), cfg["seed"] + 1)
    k_hat, _ = track(vs, theta_hat, N, int(cfg["L"]), cfg["seed"],
                     float(cfg["ess_threshold"]))
    err = np.abs(k_hat - vt.k_x)
    return dict(N=N, mae=float(err.mean()), theta_hat=json.loads(theta_hat.to_json()))


def check_n(cfg):
    """Particle-count adequacy report for the candidate counts in ``cfg``.

    For each candidate ``N``: estimate parameters with online EM (unless
    ``theta_hat`` is given), simulate verification data at the estimate,
    track it with the estimate known and measure the mean absolute error of
    the estimated target count. The recommendation is the smallest ``N``
    whose error is within ``bound``.
    """
    n_values = sorted(int(n) for n in cfg["n_values"])
    if not n_values or n_values[0] < 1:
        raise InvalidParameterError("n_values must hold positive particle counts")
    if int(cfg["n_verify"]) < 1:
        raise InvalidParameterError("verification length must be at least 1")
    rows = _pmap(_check_one, [(cfg, N) for N in n_values])
    ok = [r["N"] for r in rows if r["mae"] <= float(cfg["bound"])]
    return dict(bound=float(cfg["bound"]), n_verify=int(cfg["n_verify"]), results=rows,
                recommended=ok[0] if ok else None)


def run_check_n(cfg, out):
    report = check_n(cfg)
    (out / "check_n.json").write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    return ["check_n.json"]


RUNNERS = {
    "simulate": run_simulate, "fit-batch": run_fit_batch, "fit-online": run_fit_online,
    "track": run_track, "select-k": run_select_k, "check-n": run_check_n,
    "oracle-em": run_oracle_em,
}


def run(cfg):
    """Execute a resolved config; returns the list of files written."""
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    files = RUNNERS[cfg["mode"]](cfg, out)
    manifest = dict(cfg, version=__version__, outputs=files)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")
    return files


def build_parser():
    p = argparse.ArgumentParser(prog="mttem", description="ML estimation for multiple target tracking")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--scans", help="observation scans (JSON lines)")
    p.add_argument("--truth", help="ground truth (JSON lines)")
    p.add_argument("--out-dir", dest="out_dir", help="output directory")
    p.add_argument("--seed", type=int, help="random seed (overrides the config)")
    p.add_argument("--version", action="version", version=__version__)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = resolve_config(args)
        run(cfg)
    except (UsageError, InvalidParameterError) as exc:
        print(f"mttem: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, StructuralError) as exc:
        print(f"mttem: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"mttem: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())

"""Command-line entry points: run, validate, oracle.

``run`` executes a TOML-configured experiment and streams results to CSV
files plus a machine-readable manifest that reproduces the run exactly.
``validate`` checks a config without running it.  ``oracle`` exposes the
closed-form baselines (variances, overlap, offline estimator, mean-field
drift) for quick numeric checks.

Floats in CSV output carry 17 significant digits so round-trips are
bit-faithful.  The environment variable ``TSS_SEED`` overrides the
configured seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline import (
    diff_variance,
    mbar_solve,
    overlap_matrix,
    pair_drift_closed_form,
    var_mbar,
    var_tss_uniform,
)
from .config import ConfigError, ExperimentConfig, write_manifest
from .experiment import run_experiment
from .models import make_model

_FLOAT = "{:.17g}"


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and not np.isfinite(x)):
        return ""
    return _FLOAT.format(float(x))


class RunWriter:
    """Streams estimate and trajectory rows for a single (batch of one) run."""

    def __init__(self, directory, config: ExperimentConfig):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config = config
        self._estimates = open(self.dir / "estimates.csv", "w", newline="")
        self._rungs = open(self.dir / "rungs.csv", "w", newline="")
        self._est_writer = csv.writer(self._estimates)
        self._rung_writer = csv.writer(self._rungs)
        self._est_writer.writerow(["cycle", "rung", "f_tss", "mse"])
        self._rung_writer.writerow(["cycle", "replica", "rung", "window"])
        self._final = None

    def emit(self, t, state, reported, mse_map):
        anchor = self.config.anchor_rung
        for k in range(reported.F.shape[1]):
            value = reported.F[0, k]
            if not np.isfinite(value):
                continue
            err = mse_map.get((anchor, k))
            self._est_writer.writerow([t, k, _fmt(value), _fmt(err[0] if err is not None else None)])
        for r in range(state.k.shape[1]):
            self._rung_writer.writerow([t, r, int(state.k[0, r]), int(state.j[0, r])])
        self._final = (t, reported, mse_map)

    def checkpoint(self, ledger, t):
        with open(self.dir / "checkpoint.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["batch", "window", "epoch", "rung", "N", "logS", "tiltU", "psi0", "psi1"])
            for row in ledger.to_table():
                writer.writerow(row[:4] + [_fmt(v) for v in row[4:]])

    def finalize(self):
        anchor = self.config.anchor_rung
        with open(self.dir / "summary.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rung", "f_tss", "diff_vs_anchor", "mse", "errbar"])
            if self._final is not None:
                _, reported, mse_map = self._final
                base = reported.F[0, anchor]
                for k in range(reported.F.shape[1]):
                    value = reported.F[0, k]
                    if not np.isfinite(value):
                        continue
                    err = mse_map.get((anchor, k))
                    err_val = float(err[0]) if err is not None and np.isfinite(err[0]) else None
                    bar = 2.0 * err_val ** 0.5 if err_val is not None else None
                    writer.writerow([k, _fmt(value), _fmt(value - base), _fmt(err_val), _fmt(bar)])
        write_manifest(self.config, self.dir / "manifest.json", __version__)
        self._estimates.close()
        self._rungs.close()


def _load_config(path: str) -> ExperimentConfig:
    if path.endswith(".json"):
        return ExperimentConfig.from_manifest(path)
    return ExperimentConfig.from_toml(path)


def _cmd_run(args) -> int:
    try:
        config = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.output_dir:
        config.output_dir = args.output_dir
    if os.environ.get("TSS_SEED"):
        config.seed = int(os.environ["TSS_SEED"])
    report = config.validate()
    errors = [line for line in report if line.startswith("error:")]
    if errors:
        print("\n".join(errors), file=sys.stderr)
        return 2
    writer = RunWriter(config.output_dir, config) if config.output_dir else None
    try:
        result = run_experiment(config, writer=writer, collect_series=False)
    except Exception as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        if writer is not None:
            writer.finalize()
        return 3
    if writer is not None:
        writer.finalize()
    if result.reported is not None:
        anchor = config.anchor_rung
        for k in range(result.reported.F.shape[1]):
            value = result.reported.F[0, k]
            if np.isfinite(value):
                print(f"rung {k}: F_tss = {value:+.6f} (vs anchor {value - result.reported.F[0, anchor]:+.6f})")
    return 0


def _cmd_validate(args) -> int:
    try:
        config = _load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}")
        return 0
    for line in config.validate():
        print(line)
    return 0


def _cmd_oracle(args) -> int:
    sub = args.oracle_command
    if sub == "var-tss":
        print(f"{var_tss_uniform(args.delta, args.nu):.4f}")
    elif sub == "var-mbar":
        family = make_model("uniform_pair", delta=args.delta)
        O = overlap_matrix(family, [0.5, 0.5])
        print(f"{diff_variance(var_mbar(O, [0.5, 0.5]), 0, 1):.4f}")
    elif sub == "overlap":
        params = {}
        if args.delta is not None:
            params["delta"] = args.delta
        if args.L is not None:
            params["L"] = args.L
        family = make_model(args.model, **params)
        pi = np.full(family.count, 1.0 / family.count)
        method = "monte_carlo" if args.mc else "quadrature"
        O = overlap_matrix(family, pi, method=method, n=args.mc or 0)
        for row in O:
            print(" ".join(f"{v:.6f}" for v in row))
    elif sub == "mbar":
        data = np.load(args.samples_file)
        u = data["u"]
        counts = data["counts"].astype(int)
        samples = {}
        start = 0
        for k, n_k in enumerate(counts):
            samples[k] = u[start : start + n_k]
            start += n_k
        f = mbar_solve(samples, tol=args.tol)
        for k, value in enumerate(f):
            print(f"F[{k}] = {value:.6f}")
    elif sub == "meanfield":
        if args.delta_range:
            lo, hi, n = args.delta_range
            grid = np.linspace(lo, hi, int(n))
        else:
            grid = np.array([args.delta])
        for d in grid:
            print(f"{d:.6f} {pair_drift_closed_form(d, args.eta):.6f}")
    else:  # pragma: no cover
        raise SystemExit(f"unknown oracle {sub!r}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="tss", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a configured experiment")
    run_p.add_argument("config", help="TOML config or a run manifest (.json)")
    run_p.add_argument("--output-dir", default="", help="override the output directory")
    run_p.set_defaults(func=_cmd_run)

    val_p = sub.add_parser("validate", help="check a config without running")
    val_p.add_argument("config")
    val_p.set_defaults(func=_cmd_validate)

    orc = sub.add_parser("oracle", help="closed-form baselines and checks")
    orc_sub = orc.add_subparsers(dest="oracle_command", required=True)

    p = orc_sub.add_parser("var-tss", help="asymptotic variance of the adaptive pair estimator")
    p.add_argument("--delta", type=float, required=True)
    p.add_argument("--nu", type=int, required=True)

    p = orc_sub.add_parser("var-mbar", help="asymptotic variance of the offline estimator")
    p.add_argument("--delta", type=float, required=True)

    p = orc_sub.add_parser("overlap", help="mixture overlap matrix of a built-in model")
    p.add_argument("--model", required=True)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--L", type=int, default=None)
    p.add_argument("--mc", type=int, default=0, help="Monte Carlo sample count (default: quadrature)")

    p = orc_sub.add_parser("mbar", help="offline estimate from an .npz of energies")
    p.add_argument("--samples-file", required=True)
    p.add_argument("--tol", type=float, default=1e-12)

    p = orc_sub.add_parser("meanfield", help="visit-control drift of the pair model")
    p.add_argument("--eta", type=float, required=True)
    p.add_argument("--delta", type=float, default=0.0)
    p.add_argument("--delta-range", type=float, nargs=3, metavar=("LO", "HI", "N"), default=None)

    args = parser.parse_args(argv)
    if args.command == "oracle":
        return _cmd_oracle(args)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())

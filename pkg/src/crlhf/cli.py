"""Command-line entry point.

Every command resolves its parameters from (lowest to highest precedence)
built-in defaults, an optional preset, a ``key = value`` config file and
command-line flags, then writes its artifacts and a ``manifest.kv`` holding
the resolved parameters into ``--out``. A command's manifest can be passed
as ``--config`` to the next command, so ``generate -> fit -> solve ->
certify/evaluate`` chains without editing.

Exit codes: 0 success, 2 invalid input, 3 numerical failure or
infeasibility, 4 I/O error.
"""

from __future__ import annotations

import argparse
import os
import platform
import sys
import warnings
import numpy as np

from . import __version__
from .certificates import certify
from .core import Divergence, Policy, ProblemSpec, constraint_value, primal_objective
from .dual import DualFunction
from .exceptions import CrlhfError, InfeasibleError, NumericalError, ValidationError
from .io import (fmt, ingest_external, read_features, read_kv, read_policy, read_thetas,
                 write_features, write_kv, write_policy, write_preferences, write_thetas)
from .mle import fit_all
from .oracle import minimize_dual
from .solver import SolverConfig, solve_dual
from .synthetic import (SweepConfig, SyntheticConfig, calibrate_jmin, generate_instance,
                        run_sweep, sample_dataset)

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4
MANIFEST = "manifest.kv"
PATH_KEYS = ("features", "preferences", "reference", "thetas", "truth", "policy")


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt_float(text):
    return None if str(text).strip().lower() in ("", "none") else float(text)


# key: (parser, default, help)
KEYS = {
    "seed": (int, 0, "random seed"),
    "num_prompts": (int, 100, "number of prompts"),
    "num_actions": (int, 10, "number of actions per prompt"),
    "dim": (int, 8, "feature dimension"),
    "num_constraints": (int, 1, "number of constrained oracles"),
    "w": (float, 0.6, "reference-policy mixing weight"),
    "eta0": (float, 0.2, "reference-policy temperature"),
    "frac": (float, 0.3, "threshold calibration fraction"),
    "lambda_hi": (float, 5.0, "calibration multiplier"),
    "calibration": (str, "exact", "threshold calibration: exact or sample"),
    "calib_N": (int, 10_000, "samples for sampled calibration"),
    "N": (int, 3000, "number of generated comparisons"),
    "features": (str, None, "features CSV"),
    "preferences": (str, None, "preferences CSV"),
    "reference": (str, None, "reference policy CSV (uniform if omitted)"),
    "thetas": (str, None, "estimated parameters CSV"),
    "truth": (str, None, "ground-truth parameters CSV"),
    "policy": (str, None, "policy CSV to evaluate"),
    "renormalize": (_bool, True, "rescale feature vectors with norm above 1"),
    "lambda_reg": (float, 0.01, "ridge weight"),
    "eta": (float, 0.05, "divergence weight"),
    "j_min": (_floats, None, "constraint thresholds, comma separated"),
    "divergence": (str, "kl", "kl, chi2 or alpha(<a>)"),
    "radius_R": (float, 100.0, "projection radius"),
    "iterations_T": (int, 1000, "projected-gradient iterations"),
    "step_mode": (str, "fixed", "fixed or adaptive"),
    "step_size": (_opt_float, None, "fixed step size (eta/B^2 if omitted)"),
    "bound_B": (_opt_float, None, "reward bound B"),
    "delta": (float, 0.05, "per-event failure probability"),
    "C": (float, 1.0, "confidence-radius constant"),
    "CK2": (float, 1.0, "covariance concentration constant"),
    "cert_mode": (str, "data-dependent", "data-dependent or data-independent"),
    "cert_R": (_opt_float, None, "projection radius for certificates (certified radius if omitted)"),
    "fallback_R": (float, 100.0, "radius used when the Slater slack is not certified"),
    "ws": (_floats, [0.3, 0.6, 0.9], "sweep mixing weights"),
    "seeds": (_ints, [0, 1, 2, 3, 4], "sweep seeds"),
    "N_grid": (_ints, list(range(0, 3001, 300)), "sweep dataset sizes"),
    "n_jobs": (int, 1, "parallel sweep workers"),
}

PRESETS = {
    "convergence": {
        "num_prompts": 100, "num_actions": 10, "dim": 8, "eta": 0.05, "iterations_T": 1000,
        "step_mode": "fixed", "ws": [0.3, 0.6, 0.9], "seeds": [0, 1, 2, 3, 4],
        "N_grid": list(range(0, 3001, 300)), "N": 3000,
    },
    "adaptive": {"eta": 0.3, "radius_R": 100.0, "iterations_T": 1000, "step_mode": "adaptive"},
}

COMMAND_KEYS = {
    "generate": ["num_prompts", "num_actions", "dim", "num_constraints", "w", "eta0",
                 "frac", "lambda_hi", "calibration", "calib_N", "N", "eta"],
    "fit": ["features", "preferences", "reference", "renormalize", "lambda_reg"],
    "solve": ["features", "reference", "thetas", "renormalize", "eta", "j_min", "divergence",
              "radius_R", "iterations_T", "step_mode", "step_size", "bound_B"],
    "certify": ["features", "preferences", "reference", "thetas", "truth", "renormalize",
                "eta", "j_min", "divergence", "lambda_reg", "bound_B", "delta", "C", "CK2",
                "cert_mode", "cert_R", "fallback_R", "iterations_T"],
    "evaluate": ["features", "reference", "truth", "policy", "renormalize", "eta", "j_min",
                 "divergence", "radius_R"],
    "sweep": ["num_prompts", "num_actions", "dim", "eta0", "frac", "lambda_hi", "eta",
              "iterations_T", "lambda_reg", "delta", "C", "CK2", "fallback_R", "step_mode",
              "ws", "seeds", "N_grid", "n_jobs"],
}

REQUIRED = {
    "fit": ["features", "preferences"],
    "solve": ["features", "thetas", "j_min"],
    "certify": ["features", "preferences", "thetas", "j_min"],
    "evaluate": ["features", "truth", "policy", "j_min"],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crlhf", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, keys in COMMAND_KEYS.items():
        keys = ["seed"] + keys
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value file (a previous run's manifest works)")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--out", required=True, help="output directory")
        for key in keys:
            _, default, help_text = KEYS[key]
            shown = fmt(default) if default is not None else "none"
            p.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                           help=f"{help_text} (default {shown})")
    return parser


def resolve(command: str, args: argparse.Namespace) -> dict:
    """Merge defaults, preset, config file and flags into typed parameters."""
    layers = []
    if args.preset:
        layers.append(dict(PRESETS[args.preset]))
    if args.config:
        if not os.path.exists(args.config):
            raise FileNotFoundError(args.config)
        raw = read_kv(args.config)
        base = os.path.dirname(os.path.abspath(args.config))
        for key in PATH_KEYS:
            if key in raw and not os.path.isabs(raw[key]):
                raw[key] = os.path.join(base, raw[key])
        layers.append(raw)
    layers.append({k: v for k, v in vars(args).items() if k in KEYS and v is not None})
    params = {}
    if args.config:
        # keys this command does not use are carried forward for later stages
        for key, value in layers[-2].items():
            if key not in COMMAND_KEYS[command] and key not in ("command", "seed") and not key.startswith("version_"):
                params.setdefault("_carry", {})[key] = value
    for key in ["seed"] + COMMAND_KEYS[command]:
        kind, default, _ = KEYS[key]
        value = default
        for layer in layers:
            if key in layer:
                value = layer[key]
        if isinstance(value, str):
            try:
                value = kind(value)
            except ValueError as exc:
                raise ValidationError(f"bad value for {key}: {exc}") from None
        params[key] = value
    missing = [k for k in REQUIRED.get(command, []) if params.get(k) is None]
    if missing:
        raise ValidationError(f"{command} needs: {', '.join(missing)}")
    return params


def _versions() -> dict:
    import scipy
    import sklearn
    return {"version_crlhf": __version__, "version_numpy": np.__version__,
            "version_scipy": scipy.__version__, "version_sklearn": sklearn.__version__,
            "version_python": platform.python_version()}


class Run:
    """Output directory bookkeeping: manifest header on every file."""

    def __init__(self, command: str, out: str, params: dict):
        self.command = command
        self.out = os.path.abspath(out)
        os.makedirs(self.out, exist_ok=True)
        carry = params.pop("_carry", {})
        self.params = params
        self.manifest = {"command": command, **carry, **params}

    @property
    def header(self):
        return [f"manifest: {MANIFEST}", f"command: {self.command}"]

    def path(self, name: str) -> str:
        return os.path.join(self.out, name)

    def finish(self, extra: dict = None):
        self.manifest.update(extra or {})
        for key in PATH_KEYS:
            value = self.manifest.get(key)
            # files inside the run directory are recorded relative to it
            if isinstance(value, str) and os.path.dirname(os.path.abspath(value)) == self.out:
                self.manifest[key] = os.path.basename(value)
        self.manifest.update(_versions())
        write_kv(self.path(MANIFEST), self.manifest, [f"crlhf {self.command} run manifest"])


def _spec(p: dict) -> ProblemSpec:
    return ProblemSpec(p["eta"], p["j_min"], Divergence.parse(p["divergence"]))


def _table_and_reference(p: dict):
    table = read_features(p["features"], renormalize=p["renormalize"])
    if p.get("reference"):
        pi0 = read_policy(p["reference"], (table.num_prompts, table.num_actions))
    else:
        pi0 = Policy.uniform(table.num_prompts, table.num_actions)
    return table, pi0


def cmd_generate(p: dict, run: Run):
    cfg = SyntheticConfig(seed=p["seed"], num_prompts=p["num_prompts"], num_actions=p["num_actions"],
                          dim=p["dim"], num_constraints=p["num_constraints"], w=p["w"],
                          eta0=p["eta0"], frac=p["frac"], lambda_hi=p["lambda_hi"],
                          calib_N=p["calib_N"])
    inst = generate_instance(cfg)
    data = sample_dataset(inst, p["N"])
    j_min = calibrate_jmin(inst, p["eta"], mode=p["calibration"])
    write_features(run.path("features.csv"), inst.table, run.header)
    write_preferences(run.path("preferences.csv"), data, run.header)
    write_policy(run.path("reference.csv"), inst.pi0, run.header)
    write_thetas(run.path("truth.csv"), inst.thetas, run.header)
    run.finish({"features": run.path("features.csv"), "preferences": run.path("preferences.csv"),
                "reference": run.path("reference.csv"), "truth": run.path("truth.csv"),
                "j_min": list(j_min)})


def cmd_fit(p: dict, run: Run):
    table, data, _ = ingest_external(p["features"], p["preferences"], p.get("reference"),
                                     renormalize=p["renormalize"])
    fits = fit_all(data, table, p["lambda_reg"])
    write_thetas(run.path("thetas.csv"), np.stack([f.theta_hat for f in fits]), run.header)
    stats = {}
    for f in fits:
        k = f.oracle_index
        stats[f"converged_{k}"] = f.converged
        stats[f"grad_norm_{k}"] = f.grad_norm
        stats[f"neg_loglik_{k}"] = f.neg_loglik
    write_kv(run.path("fit.kv"), stats, run.header)
    run.finish({"thetas": run.path("thetas.csv"), "N": len(data)})


def cmd_solve(p: dict, run: Run):
    table, pi0 = _table_and_reference(p)
    thetas = read_thetas(p["thetas"])
    config = SolverConfig(radius_R=p["radius_R"], iterations_T=p["iterations_T"],
                          step_mode=p["step_mode"], step_size=p["step_size"], bound_B=p["bound_B"])
    trace = solve_dual(_spec(p), pi0, table, thetas, config)
    with open(run.path("trace.csv"), "w") as fh:
        fh.write(trace.to_csv(run.header))
    write_policy(run.path("policy.csv"), trace.policy, run.header)
    summary = {"lambda_bar": list(trace.lambda_bar), "lambda_final": list(trace.lambda_final),
               "step_bound_B": trace.bound_B}
    write_kv(run.path("solution.kv"), summary, run.header)
    run.finish({"policy": run.path("policy.csv"), **summary})


def cmd_certify(p: dict, run: Run):
    table, data, pi0 = ingest_external(p["features"], p["preferences"], p.get("reference"),
                                       renormalize=p["renormalize"])
    thetas = read_thetas(p["thetas"])
    truth = read_thetas(p["truth"]) if p.get("truth") else None
    report = certify(table, pi0, data, thetas, _spec(p), delta=p["delta"], C=p["C"],
                     CK2=p["CK2"], lambda_reg=p["lambda_reg"], bound_B=p["bound_B"],
                     T=p["iterations_T"], R=p["cert_R"], mode=p["cert_mode"],
                     true_thetas=truth, fallback_R=p["fallback_R"])
    write_kv(run.path("certificate.kv"), report.to_dict(), run.header)
    run.finish({"failure_probability": report.failure_probability,
                "radius_R": report.R})


def cmd_evaluate(p: dict, run: Run):
    table, pi0 = _table_and_reference(p)
    truth = read_thetas(p["truth"])
    spec = _spec(p)
    policy = read_policy(p["policy"], (table.num_prompts, table.num_actions))
    dual = DualFunction(spec, pi0, table, truth[0], truth[1:])
    lam_star = minimize_dual(dual, None if dual.num_constraints == 1 else p["radius_R"])
    opt = primal_objective(dual.policy(lam_star), spec, truth[0], table, pi0)
    value = primal_objective(policy, spec, truth[0], table, pi0)
    metrics = {"objective": value, "optimal_objective": opt, "suboptimality": opt - value,
               "lambda_star": list(lam_star)}
    for k in range(spec.num_constraints):
        signed = constraint_value(policy, spec, truth[k + 1], table, k)
        metrics[f"signed_violation_{k}"] = signed
        metrics[f"violation_{k}"] = max(signed, 0.0)
    write_kv(run.path("metrics.kv"), metrics, run.header)
    run.finish()


def cmd_sweep(p: dict, run: Run):
    base = SyntheticConfig(num_prompts=p["num_prompts"], num_actions=p["num_actions"], dim=p["dim"],
                           eta0=p["eta0"], frac=p["frac"], lambda_hi=p["lambda_hi"],
                           N_max=max(p["N_grid"]))
    cfg = SweepConfig(base=base, ws=tuple(p["ws"]), seeds=tuple(p["seeds"]), eta=p["eta"],
                      T=p["iterations_T"], lambda_reg=p["lambda_reg"], delta=p["delta"],
                      C=p["C"], CK2=p["CK2"], fallback_R=p["fallback_R"],
                      step_mode=p["step_mode"], N_grid=tuple(p["N_grid"]), n_jobs=p["n_jobs"])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        report = run_sweep(cfg)
    with open(run.path("sweep.csv"), "w") as fh:
        fh.write(report.to_csv(run.header))
    with open(run.path("sweep_long.csv"), "w") as fh:
        fh.write(report.to_long_csv(header_lines=run.header))
    run.finish({"cells": len(report.rows)})


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "solve": cmd_solve,
            "certify": cmd_certify, "evaluate": cmd_evaluate, "sweep": cmd_sweep}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        params = resolve(args.command, args)
        run = Run(args.command, args.out, params)
        COMMANDS[args.command](params, run)
    except ValidationError as exc:
        print(f"crlhf: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericalError, InfeasibleError) as exc:
        print(f"crlhf: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"crlhf: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CrlhfError as exc:
        print(f"crlhf: error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

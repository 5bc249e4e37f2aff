"""``qtraj`` command line.

Configuration is one JSON document::

    {
      "model": {"dim": 2, "operators": [...]}        # or {"reference": "keep_switch", "p": 0.3}
      "observable": "population:0",
      "experiment": {"seed": 0, "n": 20000, "replicas": 400, "initial": "plus"}
    }

Command-line flags override the ``experiment`` section.  Every command
writes ``report.json``, its CSV series and ``manifest.json`` into ``--out``.

Exit codes: 0 ok, 1 domain failure, 2 input error, 3 assumption violation.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .assumptions import check_assumptions
from .engine import TrajectoryConfig, sample_trajectory, write_trajectory_csv
from .errors import (DegenerateVariance, InsufficientPoints, NoConvergence, NonUniqueFixedPoint, QTrajError,
                     SizeLimit, ZeroBranch)
from .kernel import estimate_gamma_sq, haar_states, solve_poisson
from .measures import DiscreteMeasure, empirical_measure, fit_lambda, wasserstein1
from .model import KrausFamily, ProjectiveState, validate_stochasticity
from .observables import Observable, parse_observable
from .reference import KeepSwitchModel, keep_switch_oracles
from .stats import clt_test, fclt_covariance, lil_scan, mdp_cumulant

log = logging.getLogger("qtraj")

EXIT_OK, EXIT_DOMAIN, EXIT_INPUT, EXIT_ASSUMPTION = 0, 1, 2, 3

DEFAULTS = {
    "simulate": {"n": 1000},
    "poisson": {"n": 100_000, "probes": 100, "tol": 1e-4},
    "clt": {"n": 20_000, "replicas": 400},
    "fclt": {"n": 10_000, "replicas": 2000},
    "lil": {"n": 1_000_000, "replicas": 20},
    "mdp": {"n": 1_000_000, "replicas": 200, "beta": 0.75},
    "wasserstein": {"n": 12, "replicas": 10_000},
}


class InputError(Exception):
    pass


class AssumptionViolation(Exception):
    def __init__(self, report: dict):
        super().__init__("assumption check failed")
        self.report = report


# -- configuration -------------------------------------------------------------


def load_config(path: str) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    try:
        cfg = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    except UnicodeDecodeError as exc:
        raise InputError(f"{path}: not UTF-8 ({exc.reason})") from None
    if not isinstance(cfg, dict):
        raise InputError(f"{path}: top level must be an object")
    if "model" not in cfg and "operators" in cfg:
        cfg = {"model": cfg}  # a bare family file
    if "model" not in cfg:
        raise InputError(f"{path}: missing 'model' section")
    return cfg, raw


def build_model(section: dict) -> tuple[KrausFamily, KeepSwitchModel | None]:
    if not isinstance(section, dict):
        raise InputError("'model' must be an object")
    try:
        if "reference" in section:
            if section["reference"] != "keep_switch":
                raise InputError(f"unknown reference model {section['reference']!r}")
            ref = KeepSwitchModel(float(section.get("p", 0.3)))
            return ref.family, ref
        return KrausFamily.from_dict(section, float(section.get("tolerance", 1e-10))), None
    except (ValueError, TypeError) as exc:
        raise InputError(f"bad model: {exc}") from None


def build_observable(cfg: dict, override: str | None, d: int) -> Observable:
    spec = override or cfg.get("observable", "population:0")
    if isinstance(spec, dict):
        spec = spec.get("name", "population:0")
    try:
        return parse_observable(str(spec), d)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def build_initial(spec, d: int) -> ProjectiveState:
    """``plus`` (uniform superposition), ``basis:i`` or ``{"state": [[re, im], ...]}``."""
    if spec is None or spec == "plus":
        return ProjectiveState(np.ones(d) / np.sqrt(d))
    if isinstance(spec, str) and spec.startswith("basis:"):
        return ProjectiveState.basis(d, int(spec.split(":", 1)[1]))
    if isinstance(spec, dict) and "state" in spec:
        v = np.array([complex(re, im) for re, im in spec["state"]])
        if v.shape != (d,):
            raise InputError(f"initial state must have {d} entries")
        return ProjectiveState(v)
    raise InputError(f"unknown initial state {spec!r}")


def experiment_params(cfg: dict, args, command: str) -> dict:
    params = dict(DEFAULTS.get(command, {}))
    params.update(cfg.get("experiment", {}) or {})
    for key in ("seed", "n", "replicas", "burn_in", "beta", "threads", "m"):
        val = getattr(args, key, None)
        if val is not None:
            params[key] = val
    params.setdefault("seed", 0)
    params.setdefault("burn_in", 0)
    if params.get("threads") is None and os.environ.get("QTRAJ_THREADS"):
        params["threads"] = int(os.environ["QTRAJ_THREADS"])
    return params


# -- helpers -------------------------------------------------------------------


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not serializable: {type(o)}")


def _write_csv(path: Path, header: list[str], rows) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _require_assumptions(family: KrausFamily, skip: bool) -> dict:
    rep = check_assumptions(family)
    if not skip and not rep.ok:
        raise AssumptionViolation(rep.to_dict())
    return rep.to_dict()


def _period(family: KrausFamily, args, params) -> int:
    if params.get("m"):
        return int(params["m"])
    rep = check_assumptions(family)
    return int(rep.period_m or 1)


def _gamma_sq(family, ref, g, nu, params, m) -> tuple[float, str, float]:
    """Normalizing variance: closed form on reference models, else ``ergodic_h``."""
    sol = solve_poisson(family, g, m, float(params.get("tol", 1e-4)))
    if ref is not None:
        atoms, w = ref.invariant_atoms
        est = estimate_gamma_sq(sol, atoms=atoms, weights=w)
    else:
        n_var = int(params.get("variance_n", 100_000))
        path = sample_trajectory(TrajectoryConfig(family, nu, n_var, int(params["seed"]) + 7_919, 0))
        est = estimate_gamma_sq(sol, path, burn_in=min(1000, n_var // 10))
    return est.gamma_sq, est.method, est.stderr


def _mean(family, ref, g) -> float | None:
    if ref is not None:
        return keep_switch_oracles(ref, g).mean
    return None


# -- commands --------------------------------------------------------------------


def cmd_validate(ctx) -> tuple[int, dict]:
    rep = validate_stochasticity(ctx["family"])
    print(f"stochasticity residual {rep.residual:.3e} (tolerance {rep.tolerance:.1e}): "
          f"{'pass' if rep.passed else 'FAIL'}")
    return (EXIT_OK if rep.passed else EXIT_DOMAIN), rep.to_dict()


def cmd_check(ctx) -> tuple[int, dict]:
    rep = check_assumptions(ctx["family"], ctx["params"].get("max_word_len"))
    out = rep.to_dict()
    out["stochasticity"] = validate_stochasticity(ctx["family"]).to_dict()
    return (EXIT_OK if rep.ok else EXIT_ASSUMPTION), out


def cmd_simulate(ctx) -> tuple[int, dict]:
    fam, p, out = ctx["family"], ctx["params"], ctx["out"]
    path = sample_trajectory(TrajectoryConfig(fam, ctx["initial"], int(p["n"]), int(p["seed"]), 0,
                                              p.get("on_zero_branch", "abort")))
    csv_path = out / "trajectory.csv"
    write_trajectory_csv(path, fam, csv_path)
    ctx["outputs"]["trajectory"] = csv_path.name
    emp = empirical_measure(path, min(int(p["burn_in"]), path.n_steps))
    summary = {"n_steps": path.n_steps, "final_log_norm_sq": float(path.log_norm_sq[-1]),
               "empirical_atoms": emp.size}
    if ctx["plot"]:
        import csv as _csv

        with open(csv_path) as fh:
            rows = list(_csv.DictReader(fh))
        steps = [int(r["step"]) for r in rows]
        from .plotting import line_chart

        line_chart({f"|x_{j}|^2": (steps, np.abs(path.states[:, j]) ** 2) for j in range(fam.dim)},
                   out / "trajectory.svg", title="populations along the trajectory", xlabel="step")
        line_chart({"d(x_n, y_n)": (steps, [max(float(r["distance_to_estimator"]), 1e-300) for r in rows])},
                   out / "estimator.svg", title="distance to evolved estimator", xlabel="step", logy=True)
        ctx["outputs"].update(trajectory_plot="trajectory.svg", estimator_plot="estimator.svg")
    return EXIT_OK, summary


def cmd_poisson(ctx) -> tuple[int, dict]:
    fam, p, out, g = ctx["family"], ctx["params"], ctx["out"], ctx["observable"]
    ctx["assumptions"] = _require_assumptions(fam, ctx["skip_checks"])
    m = _period(fam, None, p)
    sol = solve_poisson(fam, g, m, float(p["tol"]), mean=_mean(fam, ctx["ref"], g))
    probes = haar_states(fam.dim, int(p["probes"]), int(p["seed"]))
    vals = sol.values(probes)
    res = sol.residual(probes)
    hv = sol.h(probes)
    header = ["probe"] + [f"{c}_{j}" for j in range(fam.dim) for c in ("re", "im")] + ["g_tilde", "h", "residual"]
    rows = []
    for i in range(probes.shape[0]):
        comps = [v for z in probes[i] for v in (float(z.real), float(z.imag))]
        rows.append([i] + comps + [float(vals[i]), float(hv[i]), float(res[i])])
    _write_csv(out / "poisson.csv", header, rows)
    ctx["outputs"]["poisson"] = "poisson.csv"
    gamma_sq, method, se = _gamma_sq(fam, ctx["ref"], g, ctx["initial"], p, m)
    return EXIT_OK, {"diagnostics": sol.diagnostics(), "max_probe_residual": float(np.max(np.abs(res))),
                     "gamma_sq": gamma_sq, "gamma_sq_method": method, "gamma_sq_stderr": se}


def _limit_setup(ctx):
    fam, p, g = ctx["family"], ctx["params"], ctx["observable"]
    ctx["assumptions"] = _require_assumptions(fam, ctx["skip_checks"])
    m = _period(fam, None, p)
    mean = _mean(fam, ctx["ref"], g)
    if mean is None:
        from .kernel import invariant_mean

        mean = invariant_mean(fam, g).value
    gamma_sq, method, _ = _gamma_sq(fam, ctx["ref"], g, ctx["initial"], p, m)
    return fam, p, g, mean, gamma_sq, method


def cmd_clt(ctx) -> tuple[int, dict]:
    fam, p, g, mean, gamma_sq, method = _limit_setup(ctx)
    rep = clt_test(fam, g, ctx["initial"], int(p["n"]), int(p["replicas"]), int(p["seed"]),
                   mean=mean, gamma_sq=gamma_sq, threads=p.get("threads"))
    _write_csv(ctx["out"] / "clt.csv", ["replica", "normalized_sum"],
               [[i, float(v)] for i, v in enumerate(rep.values)])
    ctx["outputs"]["clt"] = "clt.csv"
    if ctx["plot"]:
        from scipy.stats import norm

        from .plotting import histogram

        histogram(rep.values, ctx["out"] / "clt.svg", title="S_n / sqrt(n gamma^2)", density=norm.pdf)
        ctx["outputs"]["clt_plot"] = "clt.svg"
    return EXIT_OK, {**rep.to_dict(), "gamma_sq_method": method}


def cmd_fclt(ctx) -> tuple[int, dict]:
    fam, p, g, mean, gamma_sq, method = _limit_setup(ctx)
    grid = p.get("t_grid", [0.0, 0.25, 0.5, 0.75, 1.0])
    rep = fclt_covariance(fam, g, ctx["initial"], int(p["n"]), int(p["replicas"]), grid, int(p["seed"]),
                          mean=mean, gamma_sq=gamma_sq, threads=p.get("threads"))
    rows = [[float(s), float(t), float(rep.covariance[i, j]), float(min(s, t))]
            for i, s in enumerate(rep.t_grid) for j, t in enumerate(rep.t_grid) if s <= t]
    _write_csv(ctx["out"] / "fclt.csv", ["s", "t", "covariance", "target"], rows)
    ctx["outputs"]["fclt"] = "fclt.csv"
    if ctx["plot"]:
        from .plotting import line_chart

        line_chart({"var s_n(t)/(n gamma^2)": (rep.t_grid, np.diag(rep.covariance)),
                    "target t": (rep.t_grid, rep.t_grid)}, ctx["out"] / "fclt.svg",
                   title="FCLT variance profile", xlabel="t")
        ctx["outputs"]["fclt_plot"] = "fclt.svg"
    return EXIT_OK, {**rep.to_dict(), "gamma_sq_method": method}


def cmd_lil(ctx) -> tuple[int, dict]:
    fam, p, g, mean, gamma_sq, method = _limit_setup(ctx)
    rep = lil_scan(fam, g, ctx["initial"], int(p["n"]), int(p["replicas"]), int(p["seed"]),
                   n_min=int(p.get("n_min", 1000)), mean=mean, gamma_sq=gamma_sq, threads=p.get("threads"))
    rows = [[int(n), float(rep.envelopes[:, j].mean()), float(rep.envelopes[:, j].max())]
            for j, n in enumerate(rep.checkpoints)]
    _write_csv(ctx["out"] / "lil.csv", ["n", "mean_envelope", "max_envelope"], rows)
    ctx["outputs"]["lil"] = "lil.csv"
    if ctx["plot"]:
        from .plotting import line_chart

        x = np.log10(rep.checkpoints)
        line_chart({"mean envelope": (x, rep.envelopes.mean(axis=0)), "max envelope": (x, rep.envelopes.max(axis=0)),
                    "target 1": (x, np.ones_like(x))}, ctx["out"] / "lil.svg",
                   title="running max |S_n| / sqrt(2 n gamma^2 loglog n)", xlabel="log10 n")
        ctx["outputs"]["lil_plot"] = "lil.svg"
    return EXIT_OK, {**rep.to_dict(), "gamma_sq_method": method}


def cmd_mdp(ctx) -> tuple[int, dict]:
    fam, p, g, mean, gamma_sq, method = _limit_setup(ctx)
    z = p.get("z_grid", [-1.0, -0.5, 0.0, 0.5, 1.0])
    rep = mdp_cumulant(fam, g, ctx["initial"], int(p["n"]), int(p["replicas"]), float(p["beta"]), z,
                       int(p["seed"]), mean=mean, gamma_sq=gamma_sq, threads=p.get("threads"))
    rows = [[float(a), float(b), float(c), float(d), float(e)]
            for a, b, c, d, e in zip(rep.z, rep.cumulant, rep.stderr, rep.target, rep.rate)]
    _write_csv(ctx["out"] / "mdp.csv", ["z", "cumulant", "stderr", "target", "rate_function"], rows)
    ctx["outputs"]["mdp"] = "mdp.csv"
    if ctx["plot"]:
        from .plotting import line_chart

        line_chart({"estimate": (rep.z, rep.cumulant), "target z^2 gamma^2/2": (rep.z, rep.target)},
                   ctx["out"] / "mdp.svg", title="scaled cumulant", xlabel="z")
        ctx["outputs"]["mdp_plot"] = "mdp.svg"
    return EXIT_OK, {**rep.to_dict(), "gamma_sq_method": method}


def cmd_wasserstein(ctx) -> tuple[int, dict]:
    fam, p, ref = ctx["family"], ctx["params"], ctx["ref"]
    ctx["assumptions"] = _require_assumptions(fam, ctx["skip_checks"])
    m = _period(fam, None, p)
    grid = p.get("n_grid") or list(range(1, int(p["n"]) + 1))
    target = DiscreteMeasure(*ref.invariant_atoms) if ref is not None else None
    fit = fit_lambda(fam, ctx["initial"], m, grid, int(p["replicas"]), int(p["seed"]), target=target,
                     threads=p.get("threads"))
    fit.write_csv(ctx["out"] / "decay.csv")
    ctx["outputs"]["decay"] = "decay.csv"
    if ctx["plot"]:
        from .plotting import line_chart

        line_chart({"W1": (fit.grid, fit.w1), "floor": (fit.grid, [fit.floor] * len(fit.grid))},
                   ctx["out"] / "decay.svg", title="W1 to the invariant measure", xlabel="n", logy=True)
        ctx["outputs"]["decay_plot"] = "decay.svg"
    summary = fit.to_dict()
    summary["target"] = "exact invariant atoms" if ref is not None else "long-run Monte Carlo pushforward"
    return (EXIT_OK if fit.decays else EXIT_DOMAIN), summary


COMMANDS = {
    "validate": (cmd_validate, "check the stochasticity condition of the family"),
    "check": (cmd_check, "run the purification / ergodicity checkers"),
    "simulate": (cmd_simulate, "sample one trajectory to CSV"),
    "poisson": (cmd_poisson, "solve the Poisson equation at probe states"),
    "clt": (cmd_clt, "KS test of the normalized partial sums"),
    "fclt": (cmd_fclt, "covariance of the interpolated partial-sum process"),
    "lil": (cmd_lil, "iterated-logarithm envelope scan"),
    "mdp": (cmd_mdp, "scaled cumulant for moderate deviations"),
    "wasserstein": (cmd_wasserstein, "fit the geometric W1 decay to the invariant measure"),
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="qtraj", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("config", help="JSON configuration (or a bare Kraus family file)")
        sp.add_argument("--out", default=None, help="output directory (default: ./qtraj-<command>)")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--n", type=int)
        sp.add_argument("--replicas", type=int)
        sp.add_argument("--burn-in", dest="burn_in", type=int)
        sp.add_argument("--observable")
        sp.add_argument("--beta", type=float)
        sp.add_argument("--m", type=int, help="period override")
        sp.add_argument("--threads", type=int, help="worker threads (fallback: QTRAJ_THREADS)")
        sp.add_argument("--plot", action="store_true", help="also emit SVG charts")
        sp.add_argument("--skip-checks", action="store_true", help="run even if the assumption check fails")
        sp.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out or f"qtraj-{args.command}")
    t0 = time.perf_counter()
    try:
        cfg, raw = load_config(args.config)
        family, ref = build_model(cfg["model"])
        params = experiment_params(cfg, args, args.command)
        ctx = {
            "family": family,
            "ref": ref,
            "params": params,
            "observable": build_observable(cfg, args.observable, family.dim),
            "initial": build_initial(params.get("initial"), family.dim),
            "out": out,
            "plot": args.plot,
            "skip_checks": args.skip_checks,
            "outputs": {},
        }
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    out.mkdir(parents=True, exist_ok=True)
    fn = COMMANDS[args.command][0]
    try:
        code, summary = fn(ctx)
    except AssumptionViolation as exc:
        _write_json(out / "report.json", {"assumptions": exc.report})
        print(json.dumps({"error": "assumption violation", "assumptions": exc.report}, indent=2))
        return EXIT_ASSUMPTION
    except (NoConvergence, NonUniqueFixedPoint, DegenerateVariance, InsufficientPoints, SizeLimit, ZeroBranch) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (InputError, ValueError, QTrajError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if "assumptions" in ctx:
        summary = {**summary, "assumptions": ctx["assumptions"]}
    _write_json(out / "report.json", summary)
    manifest = {
        "command": args.command,
        "config": os.path.abspath(args.config),
        "config_sha256": hashlib.sha256(raw).hexdigest(),
        "master_seed": int(params["seed"]),
        "parameters": params,
        "observable": ctx["observable"].name,
        "version": __version__,
        "outputs": {"report": "report.json", **ctx["outputs"]},
        "exit_code": code,
        "wall_seconds": round(time.perf_counter() - t0, 3),
    }
    _write_json(out / "manifest.json", manifest)
    if args.command != "validate":
        print(json.dumps(summary, indent=2, sort_keys=True, default=_json_default))
    return code


if __name__ == "__main__":
    sys.exit(main())

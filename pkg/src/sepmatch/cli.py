"""Command-line interface.

    sepmatch solve     --margins q.csv (--surplus Phi.csv | --basis phi.csv --beta ...) --out DIR
    sepmatch estimate  --matching mu.csv --basis phi.csv --method mde|poisson --out DIR
    sepmatch simulate  --config study.json --out DIR
    sepmatch check     --matching mu.csv [--model m.json] [--margins q.csv] [--surplus Phi.csv]

Exit codes: 0 success, 1 failed checks or unexpected error, 2 input error,
3 convergence failure, 4 identification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .core import (
    MatchingPatterns,
    SemilinearSurplus,
    margins_from_matching,
    sample_covariance,
    surplus_matrix,
)
from .entropy import ChooSiow, entropy_gradient, model_hessians
from .estimators import MDEConfig, mde_two_step, poisson_estimate
from .exceptions import InputError, SepMatchError
from .io import (
    RunManifest,
    load_json,
    model_to_config,
    parse_model_config,
    parse_study_config,
    read_basis_csv,
    read_margins_csv,
    read_matching_csv,
    read_surplus_csv,
    study_to_config,
    write_json,
    write_matching_csv,
    write_potentials_csv,
)
from .montecarlo import default_jobs, run_study
from .solvers import DEFAULT_MAX_ITER, DEFAULT_TOL, solve_model

log = logging.getLogger("sepmatch")


def _model(path, space=None):
    return parse_model_config(path, space) if path else ChooSiow()


def _parse_beta(text):
    if text is None:
        raise InputError("--beta is required with --basis")
    try:
        if Path(text).is_file():
            vals = load_json(text)
        else:
            vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise InputError(f"--beta must be comma-separated numbers or a JSON file, got {text!r}") from None
    return np.asarray(vals, dtype=float)


def _surplus(args, space):
    if args.surplus:
        return read_surplus_csv(args.surplus, space)
    if args.basis:
        phi = read_basis_csv(args.basis, space)
        return surplus_matrix(SemilinearSurplus(phi, _parse_beta(args.beta), space))
    raise InputError("give either --surplus or --basis with --beta")


def _out_dir(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_solve(args):
    q = read_margins_csv(args.margins)
    space = q.space
    model = _model(args.model, space)
    Phi = _surplus(args, space)
    sol = solve_model(Phi, model, q, tol=args.tol, max_iter=args.max_iter)
    out = _out_dir(args.out)
    man = RunManifest("solve", {"model": model_to_config(model), "tol": args.tol, "max_iter": args.max_iter},
                      version=__version__)
    for p in (args.margins, args.model, args.surplus, args.basis):
        man.add_input(p)
    write_matching_csv(sol.mu, out / "matching.csv")
    write_potentials_csv(sol.u, sol.v, out / "potentials.csv")
    man.outputs = ["matching.csv", "potentials.csv"]
    man.config.update(iterations=sol.iterations, residual=sol.residual)
    man.write(out)
    print(f"solved in {sol.iterations} sweeps, margin residual {sol.residual:.3e}; wrote {out}/matching.csv")
    return 0


def _se_dict(names, values, ses):
    return {n: {"estimate": float(v), "std_error": float(s)} for n, v, s in zip(names, values, ses)}


def cmd_estimate(args):
    mu = read_matching_csv(args.matching, N=args.households)
    space = mu.space
    phi = read_basis_csv(args.basis, space)
    model = _model(args.model, space)
    K = phi.shape[1]
    beta_names = tuple(f"beta_{k + 1}" for k in range(K))
    if args.method == "mde":
        shift = args.shift_delta
        cfg = MDEConfig(zero_cell_policy=args.zero_cells, shift_delta=shift)
        r = mde_two_step(mu, model, phi, cfg, beta_names=beta_names)
        result = {
            "method": "mde",
            "family": model.family,
            "N": mu.N,
            "parameters": _se_dict(r.param_names, r.lambda_hat, r.std_errors),
            "T_stat": r.T_stat,
            "df": r.df,
            "p_value": r.p_value,
            "diagnostics": {
                "dropped_cells": [list(c) for c in r.dropped_cells],
                "df_note": "df counts retained cells minus free parameters",
                "warnings": r.warnings,
                "zero_cell_policy": args.zero_cells,
            },
        }
    else:
        if model.family != "choo_siow":
            raise InputError("the Poisson estimator only applies to the choo_siow family")
        r = poisson_estimate(mu, phi)
        se = r.std_errors
        X = space.X
        result = {
            "method": "poisson",
            "family": model.family,
            "N": mu.N,
            "parameters": _se_dict(beta_names, r.beta_hat, se[:K]),
            "fixed_effects": {"a": r.a_hat.tolist(), "b": r.b_hat.tolist(),
                              "a_std_error": se[K:K + X].tolist(), "b_std_error": se[K + X:].tolist()},
            "potentials": {"u": r.u_hat.tolist(), "v": r.v_hat.tolist()},
            "diagnostics": {
                "iterations": r.iterations,
                "loglik": r.loglik,
                "comoment_residual": r.comoment_residual,
                "gradient_norm": r.gradient_norm,
            },
        }
    result["variance_note"] = "standard errors are the asymptotic variance divided by N"
    out = _out_dir(args.out)
    write_json(result, out / "estimate.json")
    man = RunManifest("estimate", {"method": args.method, "model": model_to_config(model),
                                   "zero_cells": args.zero_cells, "shift_delta": args.shift_delta,
                                   "households": mu.N}, version=__version__)
    for p in (args.matching, args.basis, args.model):
        man.add_input(p)
    man.outputs = ["estimate.json"]
    man.write(out)
    for name, d in result["parameters"].items():
        print(f"{name:>12s} {d['estimate']: .6f} ({d['std_error']:.6f})")
    if result.get("T_stat") is not None:
        print(f"T = {result['T_stat']:.3f} on {result['df']} df, p = {result['p_value']:.4f}")
    return 0


def cmd_simulate(args):
    config = parse_study_config(args.config, seed=args.seed)
    jobs = args.jobs if args.jobs is not None else default_jobs()
    out = _out_dir(args.out)
    result = run_study(config, out_dir=out, jobs=jobs, histograms=not args.no_plots)
    man = RunManifest("simulate", study_to_config(config), version=__version__, seed=config.seed)
    man.add_input(args.config)
    man.outputs = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    man.config["jobs"] = jobs
    man.write(out)
    s = result.summary
    for est in config.estimators:
        print(f"{est}: {s.successes[est]} successful, {s.failures[est]} failed replications")
        for name, ps in s.params[est].items():
            print(f"  {name:>10s} true {ps.true: .4f} mean {ps.mean: .4f} sd {ps.sd:.4f} "
                  f"asd {ps.asd_mean:.4f} cover {ps.coverage:.2f}")
    if s.T_mean is not None:
        print(f"mean T {s.T_mean:.2f}, mean df {s.df_mean:.2f}")
    return 0


def invariant_checks(mu: MatchingPatterns, model=None, q=None, Phi=None, tol=DEFAULT_TOL):
    """Run the package invariants on the given inputs.

    Returns a list of ``(name, passed, detail)``.
    """
    out = []
    space = mu.space
    back = MatchingPatterns.from_flat(mu.flatten(), space, mu.N)
    out.append(("flatten round trip", bool(np.array_equal(back.flatten(), mu.flatten())), ""))
    sig = sample_covariance(mu.normalized()).sigma
    ev = float(np.linalg.eigvalsh(sig).min())
    out.append(("covariance PSD", ev >= -1e-12, f"min eigenvalue {ev:.3e}"))
    rs = float(np.abs(sig.sum(axis=1)).max())
    out.append(("covariance row sums zero", rs < 1e-12, f"max {rs:.3e}"))
    if q is not None:
        qm = margins_from_matching(mu)
        gap = float(max(np.max(np.abs(qm.n - q.n) / q.n), np.max(np.abs(qm.m - q.m) / q.m)))
        out.append(("margins consistency", gap < 1e-8, f"relative gap {gap:.3e}"))
    if model is not None and mu.is_interior():
        qm = margins_from_matching(mu)
        X, Y = space.X, space.Y
        g = model.men_part(mu.mu_xy, qm.n, np.arange(X))
        scaled = mu.mu_xy.copy()
        scaled[0] *= 3.0
        n2 = qm.n.copy()
        n2[0] *= 3.0
        g2 = model.men_part(scaled, n2, np.arange(X))
        diff = float(np.abs(g2[0] - g[0]).max())
        out.append(("row-scaling invariance", diff < 1e-8, f"max change {diff:.3e}"))
        if X * Y <= 400:
            H = model_hessians(model, mu, qm)[0].toarray()
            sym = float(np.abs(H - H.T).max() / max(1.0, np.abs(H).max()))
            out.append(("Hessian symmetry", sym < 1e-6, f"relative asymmetry {sym:.3e}"))
            top = float(np.linalg.eigvalsh(0.5 * (H + H.T)).max())
            out.append(("entropy concavity", top <= 1e-8 * max(1.0, np.abs(H).max()), f"max eigenvalue {top:.3e}"))
        if Phi is not None:
            resid = float(np.abs(Phi + entropy_gradient(model, mu, None)).max())
            out.append(("identification (Phi + dE/dmu = 0)", resid < 1e-7, f"max residual {resid:.3e}"))
    if model is not None and q is not None and Phi is not None:
        sol = solve_model(Phi, model, q, tol=tol)
        h = np.asarray(sol.history)
        mono = bool(h.size < 3 or np.all(np.diff(h[1:]) <= 1e-15 + 1e-9 * h[1:-1]))
        out.append(("solver residual monotone", mono, f"{sol.iterations} sweeps"))
        qm = margins_from_matching(sol.mu)
        gap = float(max(np.max(np.abs(qm.n - q.n) / q.n), np.max(np.abs(qm.m - q.m) / q.m)))
        out.append(("solver margins", gap < max(10 * tol, 1e-12), f"relative gap {gap:.3e}"))
        resid = float(np.abs(Phi + entropy_gradient(model, sol.mu, None)).max())
        out.append(("solver identification", resid < 1e-7, f"max residual {resid:.3e}"))
        if isinstance(model, ChooSiow):
            rec = np.sqrt(np.outer(q.n, q.m)) * np.exp((Phi - sol.u[:, None] - sol.v[None, :]) / 2.0)
            err = float(np.abs(rec - sol.mu.mu_xy).max() / sol.mu.mu_xy.max())
            out.append(("potentials reproduce couples", err < 1e-12, f"relative error {err:.3e}"))
    return out


def cmd_check(args):
    mu = read_matching_csv(args.matching)
    space = mu.space
    model = _model(args.model, space) if (args.model or args.surplus or args.basis) else None
    q = read_margins_csv(args.margins) if args.margins else None
    Phi = _surplus(args, space) if (args.surplus or args.basis) else None
    results = invariant_checks(mu, model, q, Phi)
    ok = True
    for name, passed, detail in results:
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sepmatch", description="Separable matching models: solve, estimate, simulate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def surplus_args(sp):
        sp.add_argument("--surplus", help="joint surplus CSV (x,y,Phi)")
        sp.add_argument("--basis", help="basis CSV (x,y,k,phi), used with --beta")
        sp.add_argument("--beta", help="comma-separated coefficients or a JSON list file")
        sp.add_argument("--model", help="model JSON (default: choo_siow)")

    s = sub.add_parser("solve", help="compute the stable matching")
    s.add_argument("--margins", required=True, help="margins CSV (side,type,mass)")
    surplus_args(s)
    s.add_argument("--tol", type=float, default=DEFAULT_TOL)
    s.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("estimate", help="estimate surplus and heterogeneity parameters")
    e.add_argument("--matching", required=True, help="observed matching CSV (x,y,mu)")
    e.add_argument("--basis", required=True, help="basis CSV (x,y,k,phi)")
    e.add_argument("--model", help="model JSON (default: choo_siow)")
    e.add_argument("--method", choices=("mde", "poisson"), default="mde")
    e.add_argument("--zero-cells", choices=("drop", "shift"), default="drop")
    e.add_argument("--shift-delta", type=float, default=None, help="shift added to cells (default 0.5/N)")
    e.add_argument("--households", type=float, default=None,
                   help="sample size N (default: total of the file if it holds counts, else 1)")
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_estimate)

    m = sub.add_parser("simulate", help="run a Monte Carlo study")
    m.add_argument("--config", required=True, help="study JSON")
    m.add_argument("--out", required=True, help="output directory")
    m.add_argument("--jobs", type=int, default=None, help="worker processes (default: $SEPMATCH_JOBS or 1)")
    m.add_argument("--seed", type=int, default=None, help="override the config seed")
    m.add_argument("--no-plots", action="store_true", help="skip the histogram SVGs")
    m.set_defaults(func=cmd_simulate)

    c = sub.add_parser("check", help="run invariant checks on inputs")
    c.add_argument("--matching", required=True)
    c.add_argument("--margins")
    surplus_args(c)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SepMatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return InputError.exit_code


if __name__ == "__main__":
    sys.exit(main())

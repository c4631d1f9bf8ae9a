"""Stable matching solvers.

* ``ipfp_choo_siow``: alternating margin balancing for the logit model.
* ``ipfp_heteroskedastic``: the logit model with type-specific scale
  parameters; each half-sweep is a monotone root-find per type.
* ``ipfp_nested_logit``: the same idea for type-independent nests, with a
  monotone scalar root-find for each single's mass.
* ``brute_force_surplus_max``: direct maximization of total surplus plus
  generalized entropy, for small markets; used to cross-check the other two.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Margins, MatchingPatterns
from .entropy import EntropyModel, NestedLogit, NestedLogitSpec
from .exceptions import ConvergenceError, InputError

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-10
DEFAULT_MAX_ITER = 10_000
EXP_LIMIT = 700.0


@dataclass(frozen=True)
class IpfpSolution:
    """Stable matching with its potentials.

    ``u`` and ``v`` satisfy ``mu_x0 = n_x exp(-u_x)`` and ``mu_0y = m_y exp(-v_y)``.
    ``residual`` is the largest margin violation relative to the margin, and
    ``history`` holds it after every sweep.
    """

    mu: MatchingPatterns
    u: np.ndarray
    v: np.ndarray
    iterations: int
    residual: float
    history: tuple = field(default=(), repr=False)


@dataclass(frozen=True)
class NestedIpfpSolution(IpfpSolution):
    """Adds the nest aggregates ``mu_xn`` (X x men's nests) and ``mu_ny`` (women's nests x Y)."""

    mu_xn: np.ndarray | None = None
    mu_ny: np.ndarray | None = None
    fixed_point_residual: float = 0.0


def _guarded_exp(a, what="surplus"):
    a = np.asarray(a, dtype=float)
    if a.size and np.max(np.abs(a)) > EXP_LIMIT:
        raise ConvergenceError(
            f"exponent of {what} reaches {np.max(np.abs(a)):.1f}, beyond the +/-{EXP_LIMIT:g} overflow guard"
        )
    return np.exp(a)


def _check_inputs(Phi, q: Margins):
    Phi = np.asarray(Phi, dtype=float)
    if Phi.shape != (q.n.size, q.m.size):
        raise InputError(f"surplus matrix has shape {Phi.shape}, margins imply {(q.n.size, q.m.size)}")
    if not np.all(np.isfinite(Phi)):
        raise InputError("surplus matrix has non-finite entries")
    q.check_positive()
    return Phi


def _potentials(mux0, mu0y, n, m):
    return -np.log(mux0 / n), -np.log(mu0y / m)


def ipfp_choo_siow(Phi, q: Margins, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> IpfpSolution:
    """Solve the Choo and Siow model for its stable matching.

    At the solution ``mu_xy = sqrt(mu_x0 mu_0y) exp(Phi_xy / 2)``. Each
    half-sweep solves the quadratic in ``sqrt(mu_x0)`` (resp. ``sqrt(mu_0y)``)
    given by the margin constraint, holding the other side fixed.
    """
    Phi = _check_inputs(Phi, q)
    n, m = q.n, q.m
    K = _guarded_exp(Phi / 2.0)
    a = np.sqrt(n / 2.0)
    b = np.sqrt(m / 2.0)
    history = []
    for it in range(1, max_iter + 1):
        s = K @ b
        a = 2.0 * n / (s + np.sqrt(s * s + 4.0 * n))
        s = K.T @ a
        b = 2.0 * m / (s + np.sqrt(s * s + 4.0 * m))
        resid = float(np.max(np.abs(a * a + a * (K @ b) - n) / n))
        history.append(resid)
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"Choo-Siow IPFP did not converge in {max_iter} sweeps (residual {resid:.3e})")
    muxy = a[:, None] * K * b[None, :]
    mux0, mu0y = a * a, b * b
    u, v = _potentials(mux0, mu0y, n, m)
    return IpfpSolution(MatchingPatterns(muxy, mux0, mu0y), u, v, it, resid, tuple(history))


def ipfp_heteroskedastic(Phi, sigma, tau, q: Margins, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> IpfpSolution:
    """Stable matching of the logit model with type-specific scales.

    Couples satisfy ``(sigma_x + tau_y) log mu_xy = Phi_xy + sigma_x log mu_x0
    + tau_y log mu_0y``. Holding the women's singles fixed, each man type's
    margin is a monotone equation in ``mu_x0`` solved by ``solve_mux0_root``;
    then the same for women.
    """
    Phi = _check_inputs(Phi, q)
    sigma = np.asarray(sigma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if sigma.shape != q.n.shape or tau.shape != q.m.shape or np.any(sigma <= 0) or np.any(tau <= 0):
        raise InputError("scale parameters must be positive, one per type")
    n, m = q.n, q.m
    den = sigma[:, None] + tau[None, :]
    K = _guarded_exp(Phi / den)
    px = sigma[:, None] / den  # exponent of mu_x0 in mu_xy
    py = tau[None, :] / den
    mux0, mu0y = n / 2.0, m / 2.0
    history = []
    for it in range(1, max_iter + 1):
        mux0 = solve_mux0_root(K * mu0y[None, :] ** py, n, px)
        mu0y = solve_mux0_root((K * mux0[:, None] ** px).T, m, py.T)
        muxy = K * mux0[:, None] ** px * mu0y[None, :] ** py
        resid = float(np.max(np.abs(mux0 + muxy.sum(axis=1) - n) / n))
        history.append(resid)
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"heteroskedastic IPFP did not converge in {max_iter} sweeps (residual {resid:.3e})")
    u, v = _potentials(mux0, mu0y, n, m)
    return IpfpSolution(MatchingPatterns(muxy, mux0, mu0y), u, v, it, resid, tuple(history))


def solve_mux0_root(C, n_x, exponents, rtol=1e-13, max_iter=200):
    """Root of ``t + sum_k C_k t**p_k = n_x`` on ``(0, n_x]``.

    The left side increases from 0 to infinity, so the root is unique.
    ``C`` and ``exponents`` may be 1-d (one equation) or 2-d with one row per
    equation, in which case ``n_x`` is a vector.
    """
    C = np.asarray(C, dtype=float)
    P = np.broadcast_to(np.asarray(exponents, dtype=float), C.shape)
    scalar = C.ndim <= 1
    C2 = np.atleast_2d(C) if C.size else np.zeros((1, 0))
    P2 = np.atleast_2d(P) if C.size else np.zeros((1, 0))
    n = np.atleast_1d(np.asarray(n_x, dtype=float))
    if np.any(n <= 0) or np.any(C2 < 0):
        raise InputError("root-find needs a positive mass and nonnegative coefficients")
    root = _log_newton(C2, P2, n, n, rtol, max_iter)
    return float(root[0]) if scalar else root


def _log_newton(C, P, n, t0, rtol, max_iter):
    # in s = log t the left side is increasing and convex: any Newton step
    # lands at or above the root, and from there the iterates decrease to it
    cap = np.log(n)
    s = np.minimum(np.log(np.clip(t0, 1e-300, None)), cap)
    for _ in range(max_iter):
        t = np.exp(s)
        terms = C * np.exp(P * s[:, None])
        g = t + terms.sum(axis=1) - n
        gp = t + (P * terms).sum(axis=1)
        s_new = np.minimum(s - g / gp, cap)
        done = np.abs(s_new - s) <= rtol
        s = s_new
        if np.all(done):
            return np.minimum(np.exp(s), n)
    raise ConvergenceError("single-mass root-find did not converge")


class _NestedSystem:
    """Precomputed exponents and kernels for the nested-logit IPFP."""

    def __init__(self, Phi, spec: NestedLogitSpec):
        X, Y = Phi.shape
        if (X, Y) != (spec.X, spec.Y):
            raise InputError(f"nest structure is for a {spec.X}x{spec.Y} market, surplus is {X}x{Y}")
        self.nest_y = spec.nest_of_y()
        self.nest_x = spec.nest_of_x()
        self.rho = np.array(spec.rho)
        self.delta = np.array(spec.delta)
        self.rho_y = self.rho[self.nest_y]
        self.delta_x = self.delta[self.nest_x]
        self.E = self.rho_y[None, :] + self.delta_x[:, None]
        self.Phi = Phi
        self.K = _guarded_exp(Phi / self.E)
        self.Nm, self.Nw = len(self.rho), len(self.delta)

    def x_sweep(self, mu0y, mu_ny, n, mux0_prev):
        E = self.E
        terms = self.K * mu0y[None, :] ** (1.0 / E) * mu_ny[self.nest_x, :] ** ((self.delta_x[:, None] - 1.0) / E)
        S = np.zeros((terms.shape[0], self.Nm))
        np.add.at(S.T, self.nest_y, terms.T)
        E_xn = self.rho[None, :] + self.delta_x[:, None]
        C = S ** (E_xn / (self.delta_x[:, None] + 1.0))
        P = np.broadcast_to(1.0 / (self.delta_x[:, None] + 1.0), C.shape)
        mux0 = _log_newton(C, P, n, mux0_prev, 1e-13, 200)
        mu_xn = mux0[:, None] ** P * C
        return mux0, mu_xn

    def y_sweep(self, mux0, mu_xn, m, mu0y_prev):
        E = self.E
        terms = self.K * mux0[:, None] ** (1.0 / E) * mu_xn[:, self.nest_y] ** ((self.rho_y[None, :] - 1.0) / E)
        S = np.zeros((self.Nw, terms.shape[1]))
        np.add.at(S, self.nest_x, terms)
        E_ny = self.delta[:, None] + self.rho_y[None, :]
        C = S ** (E_ny / (self.rho_y[None, :] + 1.0))
        P = np.broadcast_to(1.0 / (self.rho_y[:, None] + 1.0), C.T.shape)
        mu0y = _log_newton(C.T, P, m, mu0y_prev, 1e-13, 200)
        mu_ny = C * mu0y[None, :] ** P.T
        return mu0y, mu_ny

    def couples(self, mux0, mu_xn, mu0y, mu_ny):
        logmu = (
            self.Phi
            + np.log(mux0)[:, None]
            + np.log(mu0y)[None, :]
            + (self.rho_y[None, :] - 1.0) * np.log(mu_xn[:, self.nest_y])
            + (self.delta_x[:, None] - 1.0) * np.log(mu_ny[self.nest_x, :])
        ) / self.E
        return _guarded_exp(logmu, "matching")

    def aggregates(self, muxy):
        mu_xn = np.zeros((muxy.shape[0], self.Nm))
        np.add.at(mu_xn.T, self.nest_y, muxy.T)
        mu_ny = np.zeros((self.Nw, muxy.shape[1]))
        np.add.at(mu_ny, self.nest_x, muxy)
        return mu_xn, mu_ny

    def fixed_point_residual(self, muxy, mux0, mu0y):
        """Max log-gap in ``mu_xy^(rho+delta) = e^Phi mu_x0 mu_0y mu_xn^(rho-1) mu_ny^(delta-1)``."""
        mu_xn, mu_ny = self.aggregates(muxy)
        lhs = self.E * np.log(muxy)
        rhs = (
            self.Phi
            + np.log(mux0)[:, None]
            + np.log(mu0y)[None, :]
            + (self.rho_y[None, :] - 1.0) * np.log(mu_xn[:, self.nest_y])
            + (self.delta_x[:, None] - 1.0) * np.log(mu_ny[self.nest_x, :])
        )
        return float(np.max(np.abs(lhs - rhs)))


def ipfp_nested_logit(
    Phi, spec: NestedLogitSpec, q: Margins, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER
) -> NestedIpfpSolution:
    """Stable matching of a nested logit model with type-independent nests.

    Alternates between the men's side, where each ``mu_x0`` solves its adding-up
    equation given the women's singles and nest aggregates, and the symmetric
    women's side. Couples are materialized from the fixed point at the end.
    """
    Phi = _check_inputs(Phi, q)
    sysm = _NestedSystem(Phi, spec)
    n, m = q.n, q.m
    mux0 = n / 2.0
    mu0y = m / 2.0
    nest_sizes_w = np.bincount(sysm.nest_x, minlength=sysm.Nw).astype(float)
    mu_ny = (nest_sizes_w / nest_sizes_w.sum())[:, None] * (m / 2.0)[None, :]
    history = []
    for it in range(1, max_iter + 1):
        mux0, mu_xn = sysm.x_sweep(mu0y, mu_ny, n, mux0)
        mu0y, mu_ny = sysm.y_sweep(mux0, mu_xn, m, mu0y)
        muxy = sysm.couples(mux0, mu_xn, mu0y, mu_ny)
        agg_xn, _ = sysm.aggregates(muxy)
        resid = float(
            max(
                np.max(np.abs(mux0 + muxy.sum(axis=1) - n) / n),
                np.max(np.abs(agg_xn - mu_xn).sum(axis=1) / n),
            )
        )
        history.append(resid)
        if resid < tol:
            break
    else:
        raise ConvergenceError(f"nested-logit IPFP did not converge in {max_iter} sweeps (residual {resid:.3e})")
    fp = sysm.fixed_point_residual(muxy, mux0, mu0y)
    if fp > max(1e3 * tol, 1e-8):
        raise ConvergenceError(f"nested-logit fixed point violated after convergence (log-gap {fp:.3e})")
    agg_xn, agg_ny = sysm.aggregates(muxy)
    u, v = _potentials(mux0, mu0y, n, m)
    return NestedIpfpSolution(
        MatchingPatterns(muxy, mux0, mu0y), u, v, it, resid, tuple(history),
        mu_xn=agg_xn, mu_ny=agg_ny, fixed_point_residual=fp,
    )


def brute_force_surplus_max(Phi, model: EntropyModel, q: Margins, tol=1e-10, max_iter=500) -> MatchingPatterns:
    """Maximize ``sum mu_xy Phi_xy + E(mu, q)`` directly over the couples.

    Singles are substituted out through the margins, and a damped Newton
    ascent keeps every mass strictly positive. Meant for markets with at most
    25 couple types; it is the independent oracle for the IPFP solvers.
    """
    Phi = _check_inputs(Phi, q)
    X, Y = Phi.shape
    if X * Y > 25:
        raise InputError("the brute-force oracle is limited to markets with at most 25 couple types")
    n, m = q.n, q.m
    muxy = np.outer(n, m) / (2.0 * max(n.sum(), m.sum()))

    def objective(mu):
        return float((mu * Phi).sum() + model.entropy(mu, n, m))

    def interior(mu):
        return np.all(mu > 0) and np.all(n - mu.sum(axis=1) > 0) and np.all(m - mu.sum(axis=0) > 0)

    f = objective(muxy)
    for _ in range(max_iter):
        g = Phi + model.gradient(muxy, n, m)
        if np.max(np.abs(g)) < tol:
            return MatchingPatterns(muxy, n - muxy.sum(axis=1), m - muxy.sum(axis=0))
        H = model.hessians(muxy, n, m)[0].toarray()
        H = 0.5 * (H + H.T)
        try:
            d = -np.linalg.solve(H, g.ravel())
            if d @ g.ravel() <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            d = g.ravel() * np.min(muxy)
        d = d.reshape(X, Y)
        t = 1.0
        slope = float((g * d).sum())
        while t > 1e-20:
            cand = muxy + t * d
            if interior(cand):
                fc = objective(cand)
                if fc >= f + 1e-4 * t * slope or np.max(np.abs(t * d)) < 1e-15 * np.max(muxy):
                    break
            t *= 0.5
        else:
            break
        muxy, f = cand, fc
    raise ConvergenceError("brute-force surplus maximization did not converge (oracle failure)")


def solve_model(Phi, model: EntropyModel, q: Margins, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER) -> IpfpSolution:
    """Stable matching for any supported family, picking the matching solver.

    Families without a dedicated IPFP fall back to the brute-force program,
    which only handles small markets.
    """
    from .entropy import ChooSiow, _LogitFamily

    Phi = _check_inputs(Phi, q)
    X, Y = Phi.shape
    if isinstance(model, ChooSiow):
        return ipfp_choo_siow(Phi, q, tol, max_iter)
    if isinstance(model, _LogitFamily):
        return ipfp_heteroskedastic(Phi, model.sigma_at(np.arange(X)), model.tau_at(np.arange(Y)), q, tol, max_iter)
    if isinstance(model, NestedLogit):
        return ipfp_nested_logit(Phi, model.spec, q, tol, max_iter)
    mu = brute_force_surplus_max(Phi, model, q, tol=tol)
    u, v = _potentials(mu.mu_x0, mu.mu_0y, q.n, q.m)
    return IpfpSolution(mu, u, v, 0, 0.0)

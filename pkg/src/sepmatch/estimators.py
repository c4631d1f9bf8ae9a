"""Estimators for semilinear separable matching models.

Two routes are implemented:

* minimum distance on the identification equation ``Phi + dE/dmu = 0``,
  linear in ``(alpha, beta)``, with a delta-method efficient weight and a
  chi-square specification test;
* for the Choo and Siow family, moment matching recast as a weighted Poisson
  regression with two-way fixed effects, with a sandwich variance.

Variances are reported for the observed frequencies, i.e. the asymptotic
matrices divided by the sample size ``N``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy import stats

from .core import (
    MatchingPatterns,
    TypeSpace,
    comoments,
    margins_from_matching,
    margins_operator,
    sample_covariance,
)
from .entropy import EntropyModel, model_hessians
from .exceptions import ConvergenceError, IdentificationError, InputError, ZeroCellError

log = logging.getLogger(__name__)

WEIGHTINGS = ("identity", "supplied", "efficient")
ZERO_CELL_POLICIES = ("drop", "shift")
EIGEN_FLOOR = 1e-12


@dataclass(frozen=True)
class MDEConfig:
    """Options for the minimum-distance estimator.

    ``shift_delta`` is in units of household share; ``None`` means half a
    household, ``0.5 / N``.
    """

    weighting: str = "efficient"
    S: np.ndarray | None = None
    zero_cell_policy: str = "drop"
    shift_delta: float | None = None

    def __post_init__(self):
        if self.weighting not in WEIGHTINGS:
            raise InputError(f"weighting must be one of {WEIGHTINGS}, got {self.weighting!r}")
        if self.weighting == "supplied" and self.S is None:
            raise InputError("supplied weighting needs a matrix S")
        if self.zero_cell_policy not in ZERO_CELL_POLICIES:
            raise InputError(f"zero_cell_policy must be one of {ZERO_CELL_POLICIES}")
        if self.shift_delta is not None and not self.shift_delta > 0:
            raise InputError("shift_delta must be positive")


@dataclass
class MDEResult:
    lambda_hat: np.ndarray
    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    param_names: tuple
    S_used: np.ndarray
    F_hat: np.ndarray
    e0_hat: np.ndarray
    Omega_hat: np.ndarray
    V_lambda: np.ndarray
    T_stat: float | None
    df: int
    p_value: float | None
    dropped_cells: list
    retained: np.ndarray
    N: float
    lambda_first_step: np.ndarray | None = None
    warnings: list = field(default_factory=list)

    @property
    def std_errors(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.V_lambda), 0.0, None))

    @property
    def residual(self) -> np.ndarray:
        return self.e0_hat + self.F_hat @ self.lambda_hat


def _null_direction(A):
    _, s, vt = np.linalg.svd(A)
    return vt[-1], s


def mde_solve(S, F_hat, e0_hat):
    """Solve ``(F' S F) lambda = -F' S e0`` for the minimum-distance estimate."""
    F_hat = np.atleast_2d(np.asarray(F_hat, dtype=float))
    e0_hat = np.atleast_1d(np.asarray(e0_hat, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if F_hat.shape[0] != e0_hat.size or S.shape != (e0_hat.size, e0_hat.size):
        raise InputError("inconsistent dimensions in the minimum-distance system")
    A = F_hat.T @ S @ F_hat
    rhs = -F_hat.T @ S @ e0_hat
    d, s = _null_direction(A)
    if s[-1] <= s[0] * 1e-13 * A.shape[0]:
        raise IdentificationError(
            f"F'SF is rank deficient (condition {s[0] / max(s[-1], 1e-300):.3e})", null_direction=d
        )
    try:
        c = scipy.linalg.cho_factor(A)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError("F'SF is not positive definite", null_direction=d) from exc
    return scipy.linalg.cho_solve(c, rhs)


def _floored_pinv(Omega, warnings):
    Omega = 0.5 * (Omega + Omega.T)
    vals, vecs = np.linalg.eigh(Omega)
    floor = EIGEN_FLOOR * vals.max()
    keep = vals > floor
    if not np.all(keep):
        warnings.append(
            f"Omega has {int((~keep).sum())} eigenvalue(s) below {floor:.3e}; using a pseudo-inverse"
        )
    inv = (vecs[:, keep] / vals[keep]) @ vecs[:, keep].T
    return 0.5 * (inv + inv.T)


def _prepare(mu_hat: MatchingPatterns, config: MDEConfig):
    """Normalized data, the matching the gradient is evaluated at, and retained rows."""
    base = mu_hat.normalized()
    X, Y = base.mu_xy.shape
    muxy, mux0, mu0y = base.mu_xy.copy(), base.mu_x0.copy(), base.mu_0y.copy()
    dropped = []
    if config.zero_cell_policy == "shift":
        delta = config.shift_delta if config.shift_delta is not None else 0.5 / mu_hat.N
        # empty single cells get the same shift; otherwise their logs are undefined
        mux0 = np.where(mux0 > 0, mux0, delta)
        mu0y = np.where(mu0y > 0, mu0y, delta)
        muxy = muxy + delta
        retained = np.ones((X, Y), dtype=bool)
    else:
        retained = (muxy > 0) & (mux0[:, None] > 0) & (mu0y[None, :] > 0)
        dropped = [(int(x) + 1, int(y) + 1) for x, y in np.argwhere(~retained)]
    evaluated = MatchingPatterns(muxy, mux0, mu0y, mu_hat.N)
    return base, evaluated, retained.ravel(), dropped


def _decompose_partial(model, mu: MatchingPatterns, retained):
    X, Y = mu.mu_xy.shape
    with np.errstate(divide="ignore", invalid="ignore"):
        e0, e = model.decompose(mu.mu_xy, mu.mu_x0, mu.mu_0y, check=bool(retained.all()))
    e0 = e0.reshape(X * Y)[retained]
    e = e.reshape(X * Y, model.d_alpha)[retained]
    if not (np.all(np.isfinite(e0)) and np.all(np.isfinite(e))):
        raise ZeroCellError((0, 0), "non-finite entropy gradient on a retained cell (empty nest?)")
    return e0, e


def delta_method_omega(model: EntropyModel, evaluated: MatchingPatterns, base: MatchingPatterns, retained):
    """Variance of the stacked residual ``D`` by the delta method.

    The Jacobian of the gradient with respect to the full frequency vector is
    ``H_mumu P + H_muq M``, with ``P`` picking the couples and ``M`` mapping
    frequencies to margins. The frequency covariance is the multinomial one
    divided by ``N``.
    """
    space = base.space
    X, Y = space.X, space.Y
    q = margins_from_matching(evaluated)
    with np.errstate(divide="ignore", invalid="ignore"):
        h_mumu, h_muq = model_hessians(model, evaluated, q, check=bool(retained.all()))
    J = sp.hstack([h_mumu, sp.csr_matrix((X * Y, X + Y))]).tocsr() + h_muq @ sp.csr_matrix(margins_operator(space))
    J = J.toarray()[retained]
    if not np.all(np.isfinite(J)):
        raise ZeroCellError((0, 0), "non-finite entropy Hessian on a retained cell")
    cov = sample_covariance(base)
    return J @ cov.finite_sample @ J.T


def build_residual_D(lam, mu_hat: MatchingPatterns, model: EntropyModel, phi, config: MDEConfig | None = None):
    """Stacked ``D = phi . beta + e0 + e . alpha`` on the retained cells.

    Returns ``(D, retained_mask)``.
    """
    config = config or MDEConfig()
    _, evaluated, retained, _ = _prepare(mu_hat, config)
    e0, e = _decompose_partial(model, evaluated, retained)
    phi = np.asarray(phi, dtype=float)[retained]
    lam = np.asarray(lam, dtype=float)
    return e0 + e @ lam[: model.d_alpha] + phi @ lam[model.d_alpha :], retained


def mde_two_step(
    mu_hat: MatchingPatterns, model: EntropyModel, phi, config: MDEConfig | None = None, beta_names=None
) -> MDEResult:
    """Minimum-distance estimate of ``(alpha, beta)``.

    With efficient weighting: solve once with the identity, evaluate the
    delta-method variance of ``D`` at that first-step estimate, re-solve with
    its inverse, and form the chi-square statistic. Identity or supplied
    weights skip the second step and use a sandwich variance.
    """
    config = config or MDEConfig()
    phi = np.asarray(phi, dtype=float)
    X, Y = mu_hat.mu_xy.shape
    if phi.ndim != 2 or phi.shape[0] != X * Y:
        raise InputError(f"basis matrix must have {X * Y} rows, got shape {phi.shape}")
    base, evaluated, retained, dropped = _prepare(mu_hat, config)
    e0, e = _decompose_partial(model, evaluated, retained)
    F = np.hstack([e, phi[retained]])
    d_alpha = model.d_alpha
    n_rows = int(retained.sum())
    df = n_rows - F.shape[1]
    if beta_names is None:
        beta_names = tuple(f"beta_{k + 1}" for k in range(phi.shape[1]))
    names = tuple(model.alpha_names) + tuple(beta_names)
    warnings = []
    if dropped:
        warnings.append(f"dropped {len(dropped)} cell(s) with zero mass")

    if config.weighting == "supplied":
        S1 = np.asarray(config.S, dtype=float)
        if S1.shape == (X * Y, X * Y):
            S1 = S1[np.ix_(retained, retained)]
        elif S1.shape != (n_rows, n_rows):
            raise InputError(f"supplied S has shape {S1.shape}, expected {(X * Y, X * Y)}")
    else:
        S1 = np.eye(n_rows)
    try:
        lam1 = mde_solve(S1, F, e0)
    except IdentificationError as exc:
        raise _named(exc, names) from None

    hess_model = model.with_alpha(lam1[:d_alpha])
    Omega = delta_method_omega(hess_model, evaluated, base, retained)
    if config.weighting == "efficient":
        S_star = _floored_pinv(Omega, warnings)
        try:
            lam = mde_solve(S_star, F, e0)
        except IdentificationError as exc:
            raise _named(exc, names) from None
        V = np.linalg.inv(F.T @ S_star @ F)
        D = e0 + F @ lam
        T = float(D @ S_star @ D)
        p = float(stats.chi2.sf(T, df)) if df >= 1 else None
        S_used = S_star
    else:
        lam = lam1
        bread = np.linalg.inv(F.T @ S1 @ F)
        V = bread @ F.T @ S1 @ Omega @ S1 @ F @ bread
        T, p, S_used = None, None, S1
    V = 0.5 * (V + V.T)
    return MDEResult(
        lambda_hat=lam,
        alpha_hat=lam[:d_alpha],
        beta_hat=lam[d_alpha:],
        param_names=names,
        S_used=S_used,
        F_hat=F,
        e0_hat=e0,
        Omega_hat=Omega,
        V_lambda=V,
        T_stat=T,
        df=df,
        p_value=p,
        dropped_cells=dropped,
        retained=retained,
        N=mu_hat.N,
        lambda_first_step=lam1,
        warnings=warnings,
    )


def _named(exc: IdentificationError, names):
    d = exc.null_direction
    if d is None:
        return exc
    terms = " + ".join(f"{c:+.3g}*{nm}" for c, nm in zip(d, names) if abs(c) > 1e-8)
    return IdentificationError(f"{exc}; unidentified combination: {terms}", null_direction=d)


# --------------------------------------------------------------------------
# Poisson regression with two-way fixed effects


@dataclass(frozen=True)
class PoissonDesign:
    """Regressors ``Z`` (one row per arrangement) and household sizes ``w``.

    Columns are ``(beta_1..beta_K, a_1..a_X, b_1..b_Y)``.
    """

    Z: np.ndarray
    w: np.ndarray
    space: TypeSpace
    K: int


def build_poisson_design(phi, space: TypeSpace) -> PoissonDesign:
    phi = np.asarray(phi, dtype=float)
    X, Y = space.X, space.Y
    if phi.ndim != 2 or phi.shape[0] != X * Y:
        raise InputError(f"basis matrix must have {X * Y} rows, got shape {phi.shape}")
    K = phi.shape[1]
    Z = np.zeros((space.n_arrangements, K + X + Y))
    Z[: X * Y, :K] = phi / 2.0
    Z[: X * Y, K : K + X] = -0.5 * np.kron(np.eye(X), np.ones((Y, 1)))
    Z[: X * Y, K + X :] = -0.5 * np.kron(np.ones((X, 1)), np.eye(Y))
    Z[X * Y : X * Y + X, K : K + X] = -np.eye(X)
    Z[X * Y + X :, K + X :] = -np.eye(Y)
    w = np.concatenate([np.full(X * Y, 2.0), np.ones(X + Y)])
    return PoissonDesign(Z, w, space, K)


@dataclass
class PoissonResult:
    gamma_hat: np.ndarray
    beta_hat: np.ndarray
    a_hat: np.ndarray
    b_hat: np.ndarray
    u_hat: np.ndarray
    v_hat: np.ndarray
    mu_fitted: MatchingPatterns
    loglik: float
    iterations: int
    comoment_residual: float
    gradient_norm: float
    scale: float
    N: float
    A_hat: np.ndarray | None = None
    B_hat: np.ndarray | None = None
    V_gamma: np.ndarray | None = None

    @property
    def std_errors(self):
        if self.V_gamma is None:
            return None
        return np.sqrt(np.clip(np.diag(self.V_gamma), 0.0, None))

    @property
    def beta_std_errors(self):
        se = self.std_errors
        return None if se is None else se[: self.beta_hat.size]


def _poisson_objective(gamma, Z, w, y):
    eta = Z @ gamma
    if np.max(eta) > 700:
        return -np.inf, eta
    return float(w @ (y * eta) - w @ np.exp(eta)), eta


def poisson_fit(mu_hat: MatchingPatterns, design: PoissonDesign, tol=1e-12, max_iter=200, gamma0=None) -> PoissonResult:
    """Weighted Poisson pseudo-likelihood fit by damped Newton.

    Maximizes ``sum_a w_a (mu_a (Z gamma)_a - exp((Z gamma)_a))`` on the
    unit-mass frequencies, starting from ``gamma = 0``. Zero cells are fine:
    no logarithm of the data is taken.
    """
    X, Y, K = design.space.X, design.space.Y, design.K
    if mu_hat.mu_xy.shape != (X, Y):
        raise InputError("matching and design disagree on the market size")
    scale = mu_hat.total_mass
    data = mu_hat.normalized()
    y = data.flatten()
    Z, w = design.Z, design.w
    if np.linalg.matrix_rank(Z) < Z.shape[1]:
        raise IdentificationError("Poisson design is not of full column rank")
    q = margins_from_matching(data)
    empty = [f"man type {x + 1}" for x in np.flatnonzero(q.n == 0)]
    empty += [f"woman type {y + 1}" for y in np.flatnonzero(q.m == 0)]
    if empty:
        raise IdentificationError(f"no households of {', '.join(empty)}: fixed effects not identified")
    gamma = np.zeros(Z.shape[1]) if gamma0 is None else np.asarray(gamma0, float).copy()
    L, eta = _poisson_objective(gamma, Z, w, y)
    for it in range(1, max_iter + 1):
        lam = np.exp(eta)
        grad = Z.T @ (w * (y - lam))
        gnorm = float(np.max(np.abs(grad)))
        if gnorm < tol:
            break
        H = Z.T @ ((w * lam)[:, None] * Z)
        # Jacobi scaling: basis columns differ by orders of magnitude
        d = 1.0 / np.sqrt(np.diag(H))
        try:
            step = d * scipy.linalg.solve(d[:, None] * H * d[None, :], d * grad, assume_a="pos")
        except np.linalg.LinAlgError:
            raise ConvergenceError(f"Poisson Hessian became singular at iteration {it}") from None
        if np.max(np.abs(step)) < 1e-13 * (1.0 + np.max(np.abs(gamma))):
            break
        t = 1.0
        slack = 1e-14 * abs(L)
        for _ in range(60):
            L_new, eta_new = _poisson_objective(gamma + t * step, Z, w, y)
            if L_new >= L - slack:
                break
            t *= 0.5
        else:
            raise ConvergenceError(
                f"Poisson Newton step failed to increase the objective; direction {np.round(step, 6).tolist()}"
            )
        gamma = gamma + t * step
        L, eta = L_new, eta_new
        if not np.all(np.isfinite(gamma)) or np.max(np.abs(gamma)) > 1e6:
            raise ConvergenceError(f"Poisson fit diverges along {np.round(step / np.linalg.norm(step), 6).tolist()}")
    else:
        raise ConvergenceError(f"Poisson fit did not converge in {max_iter} iterations (gradient {gnorm:.3e})")
    fitted = MatchingPatterns.from_flat(np.exp(eta), design.space, mu_hat.N)
    beta, a, b = gamma[:K], gamma[K : K + X], gamma[K + X :]
    phi = 2.0 * Z[: X * Y, :K]
    resid = float(np.max(np.abs(comoments(data, phi) - comoments(fitted, phi))))
    return PoissonResult(
        gamma_hat=gamma,
        beta_hat=beta,
        a_hat=a,
        b_hat=b,
        u_hat=a + np.log(q.n),
        v_hat=b + np.log(q.m),
        mu_fitted=fitted,
        loglik=L,
        iterations=it,
        comoment_residual=resid,
        gradient_norm=gnorm,
        scale=scale,
        N=mu_hat.N,
    )


def poisson_variance(result: PoissonResult, mu_hat: MatchingPatterns, design: PoissonDesign):
    """Sandwich variance ``A^-1 B A^-1 / N``; also stores ``A_hat`` and ``B_hat`` on the result."""
    Z, w = design.Z, design.w
    lam = np.exp(Z @ result.gamma_hat)
    A = Z.T @ ((w * lam)[:, None] * Z)
    cov = sample_covariance(mu_hat.normalized())
    WZ = w[:, None] * Z
    B = WZ.T @ cov.sigma @ WZ
    try:
        Ainv = np.linalg.inv(A)
    except np.linalg.LinAlgError as exc:
        raise IdentificationError("A_hat is singular") from exc
    V = Ainv @ B @ Ainv / mu_hat.N
    V = 0.5 * (V + V.T)
    result.A_hat, result.B_hat, result.V_gamma = A, B, V
    return V


def poisson_estimate(mu_hat: MatchingPatterns, phi, tol=1e-12, max_iter=200) -> PoissonResult:
    """Fit and variance in one call."""
    design = build_poisson_design(phi, mu_hat.space)
    res = poisson_fit(mu_hat, design, tol=tol, max_iter=max_iter)
    poisson_variance(res, mu_hat, design)
    return res

"""Generalized entropy of matching for several heterogeneity families.

Every family writes the derivative of the entropy with respect to ``mu_xy``
(margins held fixed, singles adjusting) as

    dE/dmu_xy = e0_xy + e_xy . alpha

and splits it into a men's part, which only depends on row ``x`` of the
matching and on ``n_x``, and a women's part, which only depends on column
``y`` and ``m_y``. The split is what makes the Hessians sparse and lets the
numeric Hessian difference one row and one column at a time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .core import Margins, MatchingPatterns, margins_from_matching
from .exceptions import ConvergenceError, InputError, ZeroCellError

FAMILIES = (
    "choo_siow",
    "gender_heteroskedastic",
    "full_heteroskedastic",
    "nested_logit",
    "mixed_logit",
)


def _check_interior(muxy, mux0, mu0y):
    if np.all(muxy > 0) and np.all(mux0 > 0) and np.all(mu0y > 0):
        return
    bad = np.argwhere(~(muxy > 0))
    if bad.size:
        x, y = bad[0]
        raise ZeroCellError((x + 1, y + 1))
    bad = np.flatnonzero(~(mux0 > 0))
    if bad.size:
        raise ZeroCellError((bad[0] + 1, 0))
    bad = np.flatnonzero(~(mu0y > 0))
    raise ZeroCellError((0, bad[0] + 1))


def _unpack(mu: MatchingPatterns, q: Margins | None):
    """Couples, singles and margins; singles come from ``q`` when given."""
    muxy = mu.mu_xy
    if q is None:
        q = margins_from_matching(mu)
        mux0, mu0y = mu.mu_x0, mu.mu_0y
    else:
        if q.n.shape != mu.mu_x0.shape or q.m.shape != mu.mu_0y.shape:
            raise InputError("margins do not match the dimensions of the matching")
        mux0 = q.n - muxy.sum(axis=1)
        mu0y = q.m - muxy.sum(axis=0)
    return muxy, mux0, mu0y, q.n, q.m


class EntropyModel:
    """A heterogeneity family with its current distributional parameters.

    Subclasses set ``family``, ``alpha`` (free parameters, possibly empty) and
    ``alpha_names``, and implement ``men_part``, ``women_part`` and
    ``decompose``. ``entropy`` is optional; it is used by the brute-force
    oracle and by finite-difference tests.
    """

    family: str = ""
    alpha: np.ndarray = np.zeros(0)
    alpha_names: tuple = ()

    @property
    def d_alpha(self) -> int:
        return len(self.alpha)

    def with_alpha(self, alpha) -> "EntropyModel":
        raise NotImplementedError

    def men_part(self, muxy, n, rows):
        """Men's share of the gradient for the given rows (``muxy`` is rows x Y)."""
        raise NotImplementedError

    def women_part(self, muxy, m, cols):
        """Women's share of the gradient for the given columns (``muxy`` is X x cols)."""
        raise NotImplementedError

    def decompose(self, muxy, mux0, mu0y, check=True):
        """Return ``(e0, e)`` with shapes ``(X, Y)`` and ``(X, Y, d_alpha)``.

        ``check=False`` skips the interior check; entries touching empty
        cells then come out non-finite.
        """
        raise NotImplementedError

    def entropy(self, muxy, n, m) -> float:
        raise NotImplementedError(f"no entropy value for family {self.family!r}")

    def gradient(self, muxy, n, m):
        X, Y = muxy.shape
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.men_part(muxy, n, np.arange(X)) + self.women_part(muxy, m, np.arange(Y))

    def hessians(self, muxy, n, m, check=True):
        return _numeric_hessians(self, muxy, n, m)


# --------------------------------------------------------------------------
# Heteroskedastic logit (Choo and Siow and its scaled variants)


class _LogitFamily(EntropyModel):
    """Type I extreme value shocks with scale ``sigma_x`` for men and ``tau_y`` for women."""

    def sigma_at(self, rows):
        raise NotImplementedError

    def tau_at(self, cols):
        raise NotImplementedError

    def men_part(self, muxy, n, rows):
        mux0 = n - muxy.sum(axis=1)
        return -self.sigma_at(rows)[:, None] * np.log(muxy / mux0[:, None])

    def women_part(self, muxy, m, cols):
        mu0y = m - muxy.sum(axis=0)
        return -self.tau_at(cols)[None, :] * np.log(muxy / mu0y[None, :])

    def entropy(self, muxy, n, m):
        X, Y = muxy.shape
        sigma, tau = self.sigma_at(np.arange(X)), self.tau_at(np.arange(Y))
        mux0 = n - muxy.sum(axis=1)
        mu0y = m - muxy.sum(axis=0)
        men = (muxy * np.log(muxy / n[:, None])).sum(axis=1) + mux0 * np.log(mux0 / n)
        women = (muxy * np.log(muxy / m[None, :])).sum(axis=0) + mu0y * np.log(mu0y / m)
        return float(-(sigma @ men) - (tau @ women))

    def hessians(self, muxy, n, m, check=True):
        X, Y = muxy.shape
        return _hetero_hessians(
            self.sigma_at(np.arange(X)), self.tau_at(np.arange(Y)),
            muxy, n - muxy.sum(axis=1), m - muxy.sum(axis=0), check,
        )


class ChooSiow(_LogitFamily):
    """Homoskedastic logit: all scale factors equal to one, no free parameter."""

    family = "choo_siow"

    def __init__(self):
        self.alpha = np.zeros(0)
        self.alpha_names = ()

    def with_alpha(self, alpha):
        if len(alpha):
            raise InputError("the Choo-Siow family has no distributional parameter")
        return ChooSiow()

    def sigma_at(self, rows):
        return np.ones(len(rows))

    def tau_at(self, cols):
        return np.ones(len(cols))

    def decompose(self, muxy, mux0, mu0y, check=True):
        if check:
            _check_interior(muxy, mux0, mu0y)
        e0 = -2.0 * np.log(muxy) + np.log(mux0)[:, None] + np.log(mu0y)[None, :]
        return e0, np.zeros(muxy.shape + (0,))


class GenderHeteroskedastic(_LogitFamily):
    """Men's scales fixed to one; all women share one free scale ``tau``."""

    family = "gender_heteroskedastic"

    def __init__(self, tau: float = 1.0, validate: bool = True):
        if validate and not tau > 0:
            raise InputError(f"tau must be positive, got {tau}")
        self.alpha = np.array([float(tau)])
        self.alpha_names = ("tau",)

    def with_alpha(self, alpha):
        return GenderHeteroskedastic(float(np.asarray(alpha)[0]), validate=False)

    def sigma_at(self, rows):
        return np.ones(len(rows))

    def tau_at(self, cols):
        return np.full(len(cols), self.alpha[0])

    def decompose(self, muxy, mux0, mu0y, check=True):
        if check:
            _check_interior(muxy, mux0, mu0y)
        e0 = -np.log(muxy / mux0[:, None])
        e = -np.log(muxy / mu0y[None, :])[..., None]
        return e0, e


class FullHeteroskedastic(_LogitFamily):
    """One scale per type; ``sigma_1`` is fixed to one for normalization.

    The free parameters are ordered ``(sigma_2, ..., sigma_X, tau_1, ..., tau_Y)``.
    """

    family = "full_heteroskedastic"

    def __init__(self, sigma, tau, validate: bool = True):
        sigma = np.asarray(sigma, dtype=float)
        tau = np.asarray(tau, dtype=float)
        if sigma.ndim != 1 or tau.ndim != 1 or sigma.size < 1 or tau.size < 1:
            raise InputError("sigma and tau must be non-empty vectors")
        if abs(sigma[0] - 1.0) > 1e-14:
            raise InputError(f"sigma_1 is the scale normalization and must equal 1, got {sigma[0]}")
        if validate and (np.any(sigma <= 0) or np.any(tau <= 0)):
            raise InputError("scale parameters must be positive")
        self.alpha = np.concatenate([sigma[1:], tau])
        self._nX = sigma.size
        self.alpha_names = tuple(f"sigma_{x}" for x in range(2, sigma.size + 1)) + tuple(
            f"tau_{y}" for y in range(1, tau.size + 1)
        )

    def with_alpha(self, alpha):
        alpha = np.asarray(alpha, dtype=float)
        X = self._nX
        return FullHeteroskedastic(np.concatenate([[1.0], alpha[: X - 1]]), alpha[X - 1 :], validate=False)

    @property
    def sigma(self):
        return np.concatenate([[1.0], self.alpha[: self._nX - 1]])

    @property
    def tau(self):
        return self.alpha[self._nX - 1 :]

    def sigma_at(self, rows):
        return self.sigma[np.asarray(rows, dtype=int)]

    def tau_at(self, cols):
        return self.tau[np.asarray(cols, dtype=int)]

    def _check(self, X, Y):
        if (X, Y) != (self._nX, self.tau.size):
            raise InputError(f"model has {self._nX} man types and {self.tau.size} woman types, market is {X}x{Y}")

    def decompose(self, muxy, mux0, mu0y, check=True):
        if check:
            _check_interior(muxy, mux0, mu0y)
        X, Y = muxy.shape
        self._check(X, Y)
        men = -np.log(muxy / mux0[:, None])
        women = -np.log(muxy / mu0y[None, :])
        e0 = np.zeros((X, Y))
        e0[0] = men[0]
        e = np.zeros((X, Y, X - 1 + Y))
        for x in range(1, X):
            e[x, :, x - 1] = men[x]
        for y in range(Y):
            e[:, y, X - 1 + y] = women[:, y]
        return e0, e


def _hetero_hessians(sigma, tau, muxy, mux0, mu0y, check=True):
    if check:
        _check_interior(muxy, mux0, mu0y)
    X, Y = muxy.shape
    rows, cols, vals = [], [], []
    for x in range(X):
        for y in range(Y):
            r = x * Y + y
            for t in range(Y):
                rows.append(r)
                cols.append(x * Y + t)
                vals.append(-sigma[x] / mux0[x])
            for z in range(X):
                rows.append(r)
                cols.append(z * Y + y)
                vals.append(-tau[y] / mu0y[y])
            rows.append(r)
            cols.append(r)
            vals.append(-(sigma[x] + tau[y]) / muxy[x, y])
    h_mumu = sp.csr_matrix((vals, (rows, cols)), shape=(X * Y, X * Y))
    r = np.arange(X * Y)
    xs, ys = np.divmod(r, Y)
    h_muq = sp.csr_matrix(
        (
            np.concatenate([sigma[xs] / mux0[xs], tau[ys] / mu0y[ys]]),
            (np.concatenate([r, r]), np.concatenate([xs, X + ys])),
        ),
        shape=(X * Y, X + Y),
    )
    return h_mumu, h_muq


def cs_hetero_hessians(sigma, tau, mu: MatchingPatterns, q: Margins | None = None):
    """Closed-form second derivatives of the heteroskedastic logit entropy.

    Returns ``(H_mumu, H_muq)`` as sparse matrices of shapes ``(XY, XY)`` and
    ``(XY, X + Y)``; the columns of ``H_muq`` are ``n_1..n_X, m_1..m_Y``.
    """
    muxy, mux0, mu0y, _, _ = _unpack(mu, q)
    return _hetero_hessians(np.asarray(sigma, float), np.asarray(tau, float), muxy, mux0, mu0y)


# --------------------------------------------------------------------------
# Nested logit


def _nest_lookup(nests, size, side):
    owner = np.full(size, -1)
    for k, members in enumerate(nests):
        if len(members) == 0:
            raise InputError(f"{side} nest {k + 1} is empty")
        for t in members:
            if not 1 <= t <= size:
                raise InputError(f"{side} nest {k + 1} contains type {t}, outside 1..{size}")
            if owner[t - 1] >= 0:
                raise InputError(f"type {t} belongs to two {side} nests")
            owner[t - 1] = k
    if np.any(owner < 0):
        missing = np.flatnonzero(owner < 0) + 1
        raise InputError(f"{side} nests do not cover types {missing.tolist()}")
    return owner


@dataclass(frozen=True)
class NestedLogitSpec:
    """Two-layer nests, identical for all types on a side.

    ``nests_men`` partitions the woman types ``1..Y`` (the options of men);
    ``nests_women`` partitions ``1..X``. Singlehood sits alone in its own nest
    with parameter one. ``rho_labels`` / ``delta_labels`` tie parameters: nests
    sharing a label share one free coordinate, and a ``None`` label keeps the
    parameter fixed at its given value.
    """

    nests_men: tuple
    nests_women: tuple
    rho: tuple
    delta: tuple
    rho_labels: tuple | None = None
    delta_labels: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "nests_men", tuple(tuple(int(t) for t in n) for n in self.nests_men))
        object.__setattr__(self, "nests_women", tuple(tuple(int(t) for t in n) for n in self.nests_women))
        object.__setattr__(self, "rho", tuple(float(r) for r in self.rho))
        object.__setattr__(self, "delta", tuple(float(d) for d in self.delta))
        if len(self.rho) != len(self.nests_men):
            raise InputError(f"{len(self.rho)} rho values for {len(self.nests_men)} men's nests")
        if len(self.delta) != len(self.nests_women):
            raise InputError(f"{len(self.delta)} delta values for {len(self.nests_women)} women's nests")
        for name, vals in (("rho", self.rho), ("delta", self.delta)):
            for v in vals:
                if not 0 < v <= 1:
                    raise InputError(f"{name} out of (0,1]: {v}")
        rl = self.rho_labels
        dl = self.delta_labels
        if rl is None:
            rl = tuple(f"rho_{k + 1}" for k in range(len(self.rho)))
        if dl is None:
            dl = tuple(f"delta_{k + 1}" for k in range(len(self.delta)))
        if len(rl) != len(self.rho) or len(dl) != len(self.delta):
            raise InputError("one tying label is needed per nest")
        object.__setattr__(self, "rho_labels", tuple(rl))
        object.__setattr__(self, "delta_labels", tuple(dl))
        values = {}
        for lab, v in zip(rl + dl, self.rho + self.delta):
            if lab is None:
                continue
            if lab in values and values[lab] != v:
                raise InputError(f"nests tied by label {lab!r} have different values {values[lab]} and {v}")
            values[lab] = v

    @property
    def X(self):
        return sum(len(n) for n in self.nests_women)

    @property
    def Y(self):
        return sum(len(n) for n in self.nests_men)

    @property
    def free_labels(self) -> tuple:
        out = []
        for lab in self.rho_labels + self.delta_labels:
            if lab is not None and lab not in out:
                out.append(lab)
        return tuple(out)

    def nest_of_y(self):
        return _nest_lookup(self.nests_men, self.Y, "men's")

    def nest_of_x(self):
        return _nest_lookup(self.nests_women, self.X, "women's")

    def with_free(self, alpha) -> "NestedLogitSpec":
        """Copy with the free (tied) coordinates set to ``alpha``."""
        val = dict(zip(self.free_labels, np.asarray(alpha, float)))
        rho = tuple(val[lab] if lab is not None else r for lab, r in zip(self.rho_labels, self.rho))
        delta = tuple(val[lab] if lab is not None else d for lab, d in zip(self.delta_labels, self.delta))
        # estimates may leave (0, 1]; the entropy formulas stay defined
        spec = object.__new__(NestedLogitSpec)
        for k, v in dict(
            nests_men=self.nests_men,
            nests_women=self.nests_women,
            rho=rho,
            delta=delta,
            rho_labels=self.rho_labels,
            delta_labels=self.delta_labels,
        ).items():
            object.__setattr__(spec, k, v)
        return spec


def _nest_aggregates(muxy, nest_y, nest_x, n_men_nests, n_women_nests):
    X, Y = muxy.shape
    mu_xn = np.zeros((X, n_men_nests))
    np.add.at(mu_xn.T, nest_y, muxy.T)
    mu_ny = np.zeros((n_women_nests, Y))
    np.add.at(mu_ny, nest_x, muxy)
    return mu_xn, mu_ny


class NestedLogit(EntropyModel):
    family = "nested_logit"

    def __init__(self, spec: NestedLogitSpec):
        self.spec = spec
        self._nest_y = spec.nest_of_y()
        self._nest_x = spec.nest_of_x()
        self._rho = np.array(spec.rho)
        self._delta = np.array(spec.delta)
        labels = spec.free_labels
        vals = dict(zip(spec.rho_labels + spec.delta_labels, spec.rho + spec.delta))
        self.alpha = np.array([vals[lab] for lab in labels])
        self.alpha_names = labels

    def with_alpha(self, alpha):
        return NestedLogit(self.spec.with_free(alpha))

    def men_part(self, muxy, n, rows):
        mux0 = n - muxy.sum(axis=1)
        mu_xn = np.zeros((muxy.shape[0], len(self._rho)))
        np.add.at(mu_xn.T, self._nest_y, muxy.T)
        rho = self._rho[self._nest_y][None, :]
        agg = mu_xn[:, self._nest_y]
        return -rho * np.log(muxy / mux0[:, None]) - (1.0 - rho) * np.log(agg / mux0[:, None])

    def women_part(self, muxy, m, cols):
        mu0y = m - muxy.sum(axis=0)
        mu_ny = np.zeros((len(self._delta), muxy.shape[1]))
        np.add.at(mu_ny, self._nest_x, muxy)
        delta = self._delta[self._nest_x][:, None]
        agg = mu_ny[self._nest_x, :]
        return -delta * np.log(muxy / mu0y[None, :]) - (1.0 - delta) * np.log(agg / mu0y[None, :])

    def aggregates(self, muxy):
        return _nest_aggregates(muxy, self._nest_y, self._nest_x, len(self._rho), len(self._delta))

    def decompose(self, muxy, mux0, mu0y, check=True):
        if check:
            _check_interior(muxy, mux0, mu0y)
        X, Y = muxy.shape
        if (X, Y) != (self.spec.X, self.spec.Y):
            raise InputError(f"nest structure is for a {self.spec.X}x{self.spec.Y} market, got {X}x{Y}")
        mu_xn, mu_ny = self.aggregates(muxy)
        agg_x = mu_xn[:, self._nest_y]
        agg_y = mu_ny[self._nest_x, :]
        e0 = -np.log(agg_x / mux0[:, None]) - np.log(agg_y / mu0y[None, :])
        rho_coef = -np.log(muxy / agg_x)
        delta_coef = -np.log(muxy / agg_y)
        labels = self.alpha_names
        e = np.zeros((X, Y, len(labels)))
        for k, lab in enumerate(self.spec.rho_labels):
            cells = self._nest_y == k
            if lab is None:
                e0[:, cells] += self._rho[k] * rho_coef[:, cells]
            else:
                e[:, cells, labels.index(lab)] += rho_coef[:, cells]
        for k, lab in enumerate(self.spec.delta_labels):
            cells = self._nest_x == k
            if lab is None:
                e0[cells, :] += self._delta[k] * delta_coef[cells, :]
            else:
                e[cells, :, labels.index(lab)] += delta_coef[cells, :]
        return e0, e

    def entropy(self, muxy, n, m):
        mux0 = n - muxy.sum(axis=1)
        mu0y = m - muxy.sum(axis=0)
        mu_xn, mu_ny = self.aggregates(muxy)
        rho_y = self._rho[self._nest_y]
        delta_x = self._delta[self._nest_x]
        men = (
            (rho_y[None, :] * muxy * np.log(muxy / n[:, None])).sum()
            + ((1 - self._rho)[None, :] * mu_xn * np.log(mu_xn / n[:, None])).sum()
            + (mux0 * np.log(mux0 / n)).sum()
        )
        women = (
            (delta_x[:, None] * muxy * np.log(muxy / m[None, :])).sum()
            + ((1 - self._delta)[:, None] * mu_ny * np.log(mu_ny / m[None, :])).sum()
            + (mu0y * np.log(mu0y / m)).sum()
        )
        return float(-men - women)


def nested_logit_gradient(spec: NestedLogitSpec, mu: MatchingPatterns, q: Margins | None = None):
    """Entropy gradient of a nested logit model and its linear decomposition.

    Returns ``(gradient, e0, e)``; the columns of ``e`` follow
    ``spec.free_labels``.
    """
    muxy, mux0, mu0y, _, _ = _unpack(mu, q)
    model = NestedLogit(spec)
    e0, e = model.decompose(muxy, mux0, mu0y)
    return e0 + e @ model.alpha, e0, e


# --------------------------------------------------------------------------
# Mixed logit with finitely many preference atoms

INVERSION_TOL = 1e-12
INVERSION_MAX_ITER = 10_000


@dataclass(frozen=True)
class MixedLogitSpec:
    """Random-coefficient logit for one side of the market.

    Attributes:
        Z: ``(n_options, d)`` characteristics of the partner types on offer;
            singlehood has zero characteristics.
        atoms: ``(A, d)`` support points of the preference distribution.
        weights: ``(A,)`` common weights, or ``(n_types, A)`` weights per
            chooser type.
        s: scale of the idiosyncratic extreme-value shock.
    """

    Z: np.ndarray
    atoms: np.ndarray
    weights: np.ndarray
    s: float = 1.0

    def __post_init__(self):
        Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=float))
        w = np.asarray(self.weights, dtype=float)
        if atoms.shape[1] != Z.shape[1]:
            raise InputError(f"atoms have dimension {atoms.shape[1]}, characteristics {Z.shape[1]}")
        if w.shape[-1] != atoms.shape[0] or w.ndim > 2:
            raise InputError("weights must have one entry per atom")
        if np.any(w < 0) or np.any(np.abs(w.sum(axis=-1) - 1.0) > 1e-12):
            raise InputError("mixture weights must be nonnegative and sum to 1")
        if not self.s > 0:
            raise InputError(f"shock scale s must be positive, got {self.s}")
        for name, v in (("Z", Z), ("atoms", atoms), ("weights", w)):
            v.setflags(write=False)
            object.__setattr__(self, name, v)

    @property
    def n_options(self):
        return self.Z.shape[0]

    def weights_for(self, type_index):
        if self.weights.ndim == 1:
            return self.weights
        if type_index is None:
            raise InputError("type-specific weights need a type index")
        return self.weights[type_index]


def mixed_logit_shares(spec: MixedLogitSpec, U, type_index=None):
    """Choice probabilities of the inside options given systematic utilities ``U``."""
    w = spec.weights_for(type_index)
    v = (np.asarray(U)[None, :] + spec.atoms @ spec.Z.T) / spec.s
    top = np.maximum(v.max(axis=1, keepdims=True), 0.0)
    ev = np.exp(v - top)
    p = ev / (np.exp(-top) + ev.sum(axis=1, keepdims=True))
    return w @ p


def _emax(spec, U, type_index):
    w = spec.weights_for(type_index)
    v = (np.asarray(U)[None, :] + spec.atoms @ spec.Z.T) / spec.s
    top = np.maximum(v.max(axis=1), 0.0)
    lse = top + np.log(np.exp(-top) + np.exp(v - top[:, None]).sum(axis=1))
    return float(spec.s * (w @ lse))


def mixed_logit_inverse(
    spec: MixedLogitSpec, nu, type_index=None, tol=INVERSION_TOL, max_iter=INVERSION_MAX_ITER
):
    """Utilities ``U`` (outside option at zero) that generate the shares ``nu``.

    Uses the share-inversion contraction ``U <- U + s (log nu - log nu(U))``
    started from the plain-logit inverse.
    """
    nu = np.asarray(nu, dtype=float)
    if nu.shape != (spec.n_options,):
        raise InputError(f"expected {spec.n_options} shares, got shape {nu.shape}")
    outside = 1.0 - nu.sum()
    if np.any(nu <= 0) or not outside > 0:
        raise InputError("shares must be positive with a positive outside share")
    log_nu = np.log(nu)
    U = spec.s * (log_nu - np.log(outside))
    for _ in range(max_iter):
        pred = mixed_logit_shares(spec, U, type_index)
        if np.max(np.abs(pred - nu)) < tol:
            return U
        U = U + spec.s * (log_nu - np.log(pred))
    raise ConvergenceError(
        f"share inversion did not converge in {max_iter} iterations "
        f"(residual {np.max(np.abs(pred - nu)):.3e})"
    )


class MixedLogit(EntropyModel):
    """Mixed logit on both sides; no free parameter at a fixed spec."""

    family = "mixed_logit"

    def __init__(self, men: MixedLogitSpec, women: MixedLogitSpec, tol=INVERSION_TOL):
        self.men = men
        self.women = women
        self.tol = tol
        self.alpha = np.zeros(0)
        self.alpha_names = ()

    def with_alpha(self, alpha):
        if len(alpha):
            raise InputError("the mixed logit family has no free parameter at a fixed spec")
        return self

    def _check(self, X, Y):
        if self.men.n_options != Y or self.women.n_options != X:
            raise InputError(
                f"mixed logit specs are for {self.women.n_options}x{self.men.n_options}, market is {X}x{Y}"
            )

    def men_part(self, muxy, n, rows):
        out = np.empty(muxy.shape)
        for i, x in enumerate(rows):
            out[i] = -mixed_logit_inverse(self.men, muxy[i] / n[i], int(x), tol=self.tol)
        return out

    def women_part(self, muxy, m, cols):
        out = np.empty(muxy.shape)
        for j, y in enumerate(cols):
            out[:, j] = -mixed_logit_inverse(self.women, muxy[:, j] / m[j], int(y), tol=self.tol)
        return out

    def decompose(self, muxy, mux0, mu0y, check=True):
        if check:
            _check_interior(muxy, mux0, mu0y)
        self._check(*muxy.shape)
        n = mux0 + muxy.sum(axis=1)
        m = mu0y + muxy.sum(axis=0)
        e0 = self.men_part(muxy, n, np.arange(muxy.shape[0])) + self.women_part(
            muxy, m, np.arange(muxy.shape[1])
        )
        return e0, np.zeros(muxy.shape + (0,))

    def entropy(self, muxy, n, m):
        X, Y = muxy.shape
        total = 0.0
        for x in range(X):
            nu = muxy[x] / n[x]
            U = mixed_logit_inverse(self.men, nu, x, tol=self.tol)
            total -= n[x] * (nu @ U - _emax(self.men, U, x))
        for y in range(Y):
            nu = muxy[:, y] / m[y]
            V = mixed_logit_inverse(self.women, nu, y, tol=self.tol)
            total -= m[y] * (nu @ V - _emax(self.women, V, y))
        return float(total)


def mixed_logit_gradient(spec_men, spec_women, mu: MatchingPatterns, q: Margins | None = None):
    """``dE/dmu_xy = -U_xy - V_xy`` from row-wise and column-wise share inversions."""
    muxy, mux0, mu0y, _, _ = _unpack(mu, q)
    e0, _ = MixedLogit(spec_men, spec_women).decompose(muxy, mux0, mu0y)
    return e0


# --------------------------------------------------------------------------
# Family-independent entry points


def gradient_decomposition(model: EntropyModel, mu: MatchingPatterns, q: Margins | None = None):
    """Split the entropy gradient into ``e0 + e @ alpha``.

    Returns ``e0`` as a length ``XY`` vector and ``e`` as an ``(XY, d_alpha)``
    matrix, both in row-major couple order.
    """
    muxy, mux0, mu0y, _, _ = _unpack(mu, q)
    e0, e = model.decompose(muxy, mux0, mu0y)
    X, Y = muxy.shape
    return e0.reshape(X * Y), e.reshape(X * Y, model.d_alpha)


def entropy_gradient(model: EntropyModel, mu: MatchingPatterns, q: Margins | None = None):
    """Entropy gradient at the model's current parameters, as an ``(X, Y)`` matrix."""
    e0, e = gradient_decomposition(model, mu, q)
    return (e0 + e @ model.alpha).reshape(mu.mu_xy.shape)


def _numeric_hessians(model, muxy, n, m, rel_step=1e-4):
    X, Y = muxy.shape
    mux0 = n - muxy.sum(axis=1)
    mu0y = m - muxy.sum(axis=0)
    if np.any(mux0 <= 0) or np.any(mu0y <= 0):
        _check_interior(np.ones_like(muxy), mux0, mu0y)
    XY = X * Y
    rows, cols, vals = [], [], []
    allx, ally = np.arange(X), np.arange(Y)
    with np.errstate(divide="ignore", invalid="ignore"):
        for z in range(X):
            for t in range(Y):
                room = min(mux0[z], mu0y[t])
                if muxy[z, t] > 0:
                    h = rel_step * min(muxy[z, t], room)
                    lo = -h
                else:
                    h = rel_step * room
                    lo = 0.0
                hi = h
                row_z = muxy[z].copy()
                col_t = muxy[:, t].copy()
                # men's part of row z and women's part of column t are the only pieces that move
                r_hi, r_lo = row_z.copy(), row_z.copy()
                r_hi[t] += hi
                r_lo[t] += lo
                d_men = (
                    model.men_part(r_hi[None, :], n[[z]], [z])[0] - model.men_part(r_lo[None, :], n[[z]], [z])[0]
                ) / (hi - lo)
                c_hi, c_lo = col_t.copy(), col_t.copy()
                c_hi[z] += hi
                c_lo[z] += lo
                d_women = (
                    model.women_part(c_hi[:, None], m[[t]], [t])[:, 0]
                    - model.women_part(c_lo[:, None], m[[t]], [t])[:, 0]
                ) / (hi - lo)
                c = z * Y + t
                for y in ally:
                    rows.append(z * Y + y)
                    cols.append(c)
                    vals.append(d_men[y] + (d_women[z] if y == t else 0.0))
                for x in allx:
                    if x != z:
                        rows.append(x * Y + t)
                        cols.append(c)
                        vals.append(d_women[x])
        h_mumu = sp.csr_matrix((vals, (rows, cols)), shape=(XY, XY))

        rows, cols, vals = [], [], []
        for z in range(X):
            h = rel_step * mux0[z]
            nz = n[[z]]
            d = (
                model.men_part(muxy[[z]], nz + h, [z])[0] - model.men_part(muxy[[z]], nz - h, [z])[0]
            ) / (2 * h)
            rows += [z * Y + y for y in ally]
            cols += [z] * Y
            vals += list(d)
        for t in range(Y):
            h = rel_step * mu0y[t]
            mt = m[[t]]
            d = (
                model.women_part(muxy[:, [t]], mt + h, [t])[:, 0]
                - model.women_part(muxy[:, [t]], mt - h, [t])[:, 0]
            ) / (2 * h)
            rows += [x * Y + t for x in allx]
            cols += [X + t] * X
            vals += list(d)
        h_muq = sp.csr_matrix((vals, (rows, cols)), shape=(XY, X + Y))
    return h_mumu, h_muq


def numeric_hessians(model: EntropyModel, mu: MatchingPatterns, q: Margins | None = None, rel_step=1e-4):
    """Finite-difference ``(H_mumu, H_muq)`` of the entropy gradient at the model's parameters.

    Steps are relative to the smallest mass touched by the perturbation.
    Central differences are used for positive cells; a zero couple cell gets
    a forward difference so that rows of its neighbours stay usable (its own
    row is meaningless and left to the caller to drop).
    """
    muxy, mux0, mu0y, n, m = _unpack(mu, q)
    return _numeric_hessians(model, muxy, n, m, rel_step)


def model_hessians(model: EntropyModel, mu: MatchingPatterns, q: Margins | None = None, check=True):
    """Closed-form Hessians when the family has them, numeric otherwise."""
    muxy, _, _, n, m = _unpack(mu, q)
    return model.hessians(muxy, n, m, check)

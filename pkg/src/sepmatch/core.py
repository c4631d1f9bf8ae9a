"""Market primitives: type spaces, matching patterns, margins and surplus.

All arrays use 0-based type indices internally. Files and reports use the
1-based convention, with 0 meaning "single" in the partner slot.

The flat layout of a matching over the arrangement set is the one used
everywhere in the package: the ``X*Y`` couples in row-major order, then the
``X`` single men, then the ``Y`` single women.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InputError

MASS_TOLERANCE = 1e-8


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TypeSpace:
    """Numbers of man types ``X`` and woman types ``Y``."""

    X: int
    Y: int

    def __post_init__(self):
        if int(self.X) != self.X or int(self.Y) != self.Y or self.X < 1 or self.Y < 1:
            raise InputError(f"type counts must be positive integers, got X={self.X}, Y={self.Y}")

    @property
    def n_arrangements(self) -> int:
        return self.X * self.Y + self.X + self.Y


@dataclass(frozen=True)
class ArrangementIndex:
    """Bijection between arrangements and flat positions.

    Arrangements are 1-based ``(x, y)`` pairs, ``(x, 0)`` for a single man and
    ``(0, y)`` for a single woman.
    """

    space: TypeSpace
    ordering: tuple = field(init=False)

    def __post_init__(self):
        X, Y = self.space.X, self.space.Y
        order = [(x, y) for x in range(1, X + 1) for y in range(1, Y + 1)]
        order += [(x, 0) for x in range(1, X + 1)]
        order += [(0, y) for y in range(1, Y + 1)]
        object.__setattr__(self, "ordering", tuple(order))

    def __len__(self):
        return len(self.ordering)

    def index(self, x: int, y: int) -> int:
        X, Y = self.space.X, self.space.Y
        if 1 <= x <= X and 1 <= y <= Y:
            return (x - 1) * Y + (y - 1)
        if 1 <= x <= X and y == 0:
            return X * Y + (x - 1)
        if x == 0 and 1 <= y <= Y:
            return X * Y + X + (y - 1)
        raise InputError(f"({x}, {y}) is not an arrangement of a {X}x{Y} market")

    def arrangement(self, i: int) -> tuple:
        return self.ordering[i]


def build_arrangement_index(space: TypeSpace) -> ArrangementIndex:
    return ArrangementIndex(space)


@dataclass(frozen=True)
class Margins:
    """Masses of men by type (``n``) and of women by type (``m``)."""

    n: np.ndarray
    m: np.ndarray

    def __post_init__(self):
        n, m = _frozen(self.n), _frozen(self.m)
        if n.ndim != 1 or m.ndim != 1 or n.size == 0 or m.size == 0:
            raise InputError("margins must be non-empty vectors")
        if np.any(n < 0) or np.any(m < 0) or not (np.all(np.isfinite(n)) and np.all(np.isfinite(m))):
            raise InputError("margins must be finite and nonnegative")
        object.__setattr__(self, "n", n)
        object.__setattr__(self, "m", m)

    @property
    def space(self) -> TypeSpace:
        return TypeSpace(self.n.size, self.m.size)

    def check_positive(self):
        if np.any(self.n <= 0) or np.any(self.m <= 0):
            raise InputError("all margins must be strictly positive")

    def scaled(self, c: float) -> "Margins":
        return Margins(self.n * c, self.m * c)


@dataclass(frozen=True)
class MatchingPatterns:
    """Type-level matching: couples ``mu_xy``, singles ``mu_x0`` and ``mu_0y``.

    ``N`` is the number of households behind the frequencies. It only enters
    variance formulas; exact (population) matchings may leave it at 1.
    """

    mu_xy: np.ndarray
    mu_x0: np.ndarray
    mu_0y: np.ndarray
    N: float = 1.0

    def __post_init__(self):
        muxy, mux0, mu0y = _frozen(self.mu_xy), _frozen(self.mu_x0), _frozen(self.mu_0y)
        if muxy.ndim != 2 or mux0.shape != (muxy.shape[0],) or mu0y.shape != (muxy.shape[1],):
            raise InputError(
                f"inconsistent shapes: mu_xy {muxy.shape}, mu_x0 {mux0.shape}, mu_0y {mu0y.shape}"
            )
        for name, a in (("mu_xy", muxy), ("mu_x0", mux0), ("mu_0y", mu0y)):
            if not np.all(np.isfinite(a)):
                raise InputError(f"{name} has non-finite entries")
            if np.any(a < 0):
                raise InputError(f"{name} has negative entries")
        if not self.N > 0:
            raise InputError(f"N must be positive, got {self.N}")
        object.__setattr__(self, "mu_xy", muxy)
        object.__setattr__(self, "mu_x0", mux0)
        object.__setattr__(self, "mu_0y", mu0y)

    @property
    def space(self) -> TypeSpace:
        return TypeSpace(*self.mu_xy.shape)

    @property
    def total_mass(self) -> float:
        return float(self.flatten().sum())

    def is_interior(self) -> bool:
        return bool(np.all(self.mu_xy > 0) and np.all(self.mu_x0 > 0) and np.all(self.mu_0y > 0))

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.mu_xy.ravel(), self.mu_x0, self.mu_0y])

    @classmethod
    def from_flat(cls, vec, space: TypeSpace, N: float = 1.0) -> "MatchingPatterns":
        vec = np.asarray(vec, dtype=float)
        X, Y = space.X, space.Y
        if vec.shape != (space.n_arrangements,):
            raise InputError(f"expected a vector of length {space.n_arrangements}, got {vec.shape}")
        return cls(vec[: X * Y].reshape(X, Y), vec[X * Y : X * Y + X], vec[X * Y + X :], N)

    def normalized(self) -> "MatchingPatterns":
        """Rescale so that the household masses sum to one."""
        return MatchingPatterns(*(a / self.total_mass for a in (self.mu_xy, self.mu_x0, self.mu_0y)), self.N)

    def with_N(self, N: float) -> "MatchingPatterns":
        return MatchingPatterns(self.mu_xy, self.mu_x0, self.mu_0y, N)


def margins_from_matching(mu: MatchingPatterns) -> Margins:
    return Margins(mu.mu_x0 + mu.mu_xy.sum(axis=1), mu.mu_0y + mu.mu_xy.sum(axis=0))


def margins_operator(space: TypeSpace) -> np.ndarray:
    """Matrix ``M`` with ``M @ mu.flatten() == concat(n, m)``."""
    X, Y = space.X, space.Y
    M = np.zeros((X + Y, space.n_arrangements))
    for x in range(X):
        M[x, x * Y : (x + 1) * Y] = 1.0
        M[x, X * Y + x] = 1.0
    for y in range(Y):
        M[X + y, y : X * Y : Y] = 1.0
        M[X + y, X * Y + X + y] = 1.0
    return M


@dataclass(frozen=True)
class SemilinearSurplus:
    """Joint surplus linear in ``beta`` over a fixed basis.

    ``phi`` has one row per couple type (row-major) and one column per basis
    function.
    """

    phi: np.ndarray
    beta: np.ndarray
    space: TypeSpace

    def __post_init__(self):
        phi, beta = _frozen(self.phi), _frozen(self.beta)
        if beta.ndim != 1 or beta.size < 1:
            raise InputError("beta must be a non-empty vector")
        if phi.shape != (self.space.X * self.space.Y, beta.size):
            raise InputError(
                f"basis matrix has shape {phi.shape}, expected "
                f"({self.space.X * self.space.Y}, {beta.size})"
            )
        if not np.all(np.isfinite(phi)):
            raise InputError("basis matrix has non-finite entries")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "beta", beta)


def surplus_matrix(s: SemilinearSurplus) -> np.ndarray:
    return (s.phi @ s.beta).reshape(s.space.X, s.space.Y)


@dataclass(frozen=True)
class SampleCovariance:
    """Multinomial covariance ``diag(mu) - mu mu'`` of a unit-mass matching.

    ``sigma`` is the asymptotic matrix; the covariance of the observed
    frequency vector is ``sigma / N``.
    """

    sigma: np.ndarray
    N: float

    @property
    def finite_sample(self) -> np.ndarray:
        return self.sigma / self.N


def sample_covariance(mu_hat: MatchingPatterns) -> SampleCovariance:
    p = mu_hat.flatten()
    total = p.sum()
    if abs(total - 1.0) > MASS_TOLERANCE:
        raise InputError(f"household masses must sum to 1 (got {total:.12g}); normalize first")
    return SampleCovariance(np.diag(p) - np.outer(p, p), mu_hat.N)


def comoments(mu: MatchingPatterns, phi: np.ndarray) -> np.ndarray:
    """Basis-function totals over couples, ``sum_xy mu_xy phi_xy``."""
    phi = np.asarray(phi, dtype=float)
    if phi.shape[0] != mu.mu_xy.size:
        raise InputError(f"basis matrix has {phi.shape[0]} rows for {mu.mu_xy.size} couple types")
    return mu.mu_xy.ravel() @ phi

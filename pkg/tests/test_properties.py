"""Property-based checks of the structural invariants."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from sepmatch.core import Margins, MatchingPatterns, build_arrangement_index, margins_from_matching, sample_covariance
from sepmatch.entropy import (
    ChooSiow,
    FullHeteroskedastic,
    GenderHeteroskedastic,
    MixedLogit,
    MixedLogitSpec,
    NestedLogit,
    NestedLogitSpec,
    model_hessians,
)
from sepmatch.estimators import mde_two_step
from sepmatch.montecarlo import draw_sample
from sepmatch.solvers import ipfp_choo_siow, ipfp_heteroskedastic, ipfp_nested_logit, solve_mux0_root

from conftest import random_interior

SETTINGS = settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])

dims = st.tuples(st.integers(1, 4), st.integers(1, 4))
seeds = st.integers(0, 2**32 - 1)


def _model(kind, X, Y, rng):
    if kind == "cs":
        return ChooSiow()
    if kind == "gender":
        return GenderHeteroskedastic(rng.uniform(0.5, 2.0))
    if kind == "full":
        return FullHeteroskedastic(np.r_[1.0, rng.uniform(0.5, 2.0, X - 1)], rng.uniform(0.5, 2.0, Y))
    if kind == "nested":
        # men's nests group women's types and vice versa
        cut_x, cut_y = rng.integers(1, X + 1), rng.integers(1, Y + 1)
        nx = tuple(p for p in (tuple(range(1, cut_x + 1)), tuple(range(cut_x + 1, X + 1))) if p)
        ny = tuple(p for p in (tuple(range(1, cut_y + 1)), tuple(range(cut_y + 1, Y + 1))) if p)
        return NestedLogit(NestedLogitSpec(ny, nx, tuple(rng.uniform(0.3, 1.0, len(ny))),
                                           tuple(rng.uniform(0.3, 1.0, len(nx)))))
    men = MixedLogitSpec(np.ones((Y, 1)), np.array([[0.0], [rng.uniform(0.1, 1.0)]]), [0.5, 0.5])
    women = MixedLogitSpec(np.ones((X, 1)), np.array([[0.0]]), [1.0])
    return MixedLogit(men, women)


families = st.sampled_from(["cs", "gender", "full", "nested", "mixed"])


@SETTINGS
@given(dims, seeds)
def test_flatten_round_trip(d, seed):
    rng = np.random.default_rng(seed)
    X, Y = d
    mu = MatchingPatterns(rng.uniform(size=(X, Y)), rng.uniform(size=X), rng.uniform(size=Y), N=rng.integers(1, 10**6))
    back = MatchingPatterns.from_flat(mu.flatten(), mu.space, mu.N)
    assert np.array_equal(back.mu_xy, mu.mu_xy) and np.array_equal(back.mu_x0, mu.mu_x0)
    assert np.array_equal(back.mu_0y, mu.mu_0y) and back.N == mu.N
    idx = build_arrangement_index(mu.space)
    flat = mu.flatten()
    for x in range(1, X + 1):
        assert flat[idx.index(x, 0)] == mu.mu_x0[x - 1]


@SETTINGS
@given(dims, seeds, st.integers(1, 500))
def test_sample_covariance_psd(d, seed, N):
    rng = np.random.default_rng(seed)
    X, Y = d
    mu = MatchingPatterns(rng.uniform(size=(X, Y)), rng.uniform(size=X), rng.uniform(size=Y)).normalized()
    # sampled frequencies may have zeros
    sample = draw_sample(mu, N, seed)
    for m in (mu, sample):
        assert np.linalg.eigvalsh(sample_covariance(m).sigma).min() >= -1e-12


@SETTINGS
@given(dims, seeds)
def test_ipfp_recovers_margins(d, seed):
    rng = np.random.default_rng(seed)
    X, Y = d
    Phi = rng.normal(scale=2.0, size=(X, Y))
    q = Margins(rng.uniform(0.1, 2.0, X), rng.uniform(0.1, 2.0, Y))
    sols = [
        ipfp_choo_siow(Phi, q, tol=1e-12),
        ipfp_heteroskedastic(Phi, np.r_[1.0, rng.uniform(0.5, 2, X - 1)], rng.uniform(0.5, 2, Y), q, tol=1e-12),
        ipfp_nested_logit(Phi, NestedLogitSpec((tuple(range(1, Y + 1)),), (tuple(range(1, X + 1)),),
                                               (rng.uniform(0.3, 1),), (rng.uniform(0.3, 1),)), q, tol=1e-12),
    ]
    for sol in sols:
        back = margins_from_matching(sol.mu)
        assert np.max(np.abs(back.n - q.n) / q.n) < 1e-9
        assert np.max(np.abs(back.m - q.m) / q.m) < 1e-9
        h = np.asarray(sol.history)
        assert np.all(np.diff(h[1:]) <= 1e-15 + 1e-9 * h[1:-1])


@SETTINGS
@given(dims, seeds, st.floats(0.01, 100.0))
def test_choo_siow_homogeneity(d, seed, c):
    rng = np.random.default_rng(seed)
    X, Y = d
    Phi = rng.normal(size=(X, Y))
    q = Margins(rng.uniform(0.5, 1.5, X), rng.uniform(0.5, 1.5, Y))
    a = ipfp_choo_siow(Phi, q, tol=1e-13).mu.flatten()
    b = ipfp_choo_siow(Phi, q.scaled(c), tol=1e-13).mu.flatten()
    np.testing.assert_allclose(b, c * a, rtol=1e-9)


@SETTINGS
@given(dims, seeds, families, st.floats(0.1, 10.0))
def test_row_and_column_scaling(d, seed, kind, c):
    # a type's own share of the gradient depends on its row (column) only through mu / n (mu / m)
    rng = np.random.default_rng(seed)
    X, Y = d
    model = _model(kind, X, Y, rng)
    muxy, q = random_interior(rng, X, Y)
    x, y = rng.integers(X), rng.integers(Y)
    row = np.array([x])
    before = model.men_part(muxy[row], q.n[row], row)
    after = model.men_part(c * muxy[row], c * q.n[row], row)
    np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-12)
    col = np.array([y])
    before = model.women_part(muxy[:, col], q.m[col], col)
    after = model.women_part(c * muxy[:, col], c * q.m[col], col)
    np.testing.assert_allclose(after, before, rtol=1e-9, atol=1e-12)
    # and through the full decomposition: scaling row x changes no men's entry of other rows
    muxy2, n2 = muxy.copy(), q.n.copy()
    muxy2[x] *= c
    n2[x] *= c
    g0 = model.men_part(muxy, q.n, np.arange(X))
    g1 = model.men_part(muxy2, n2, np.arange(X))
    np.testing.assert_allclose(g1, g0, rtol=1e-9, atol=1e-12)


@SETTINGS
@given(dims, seeds, families)
def test_entropy_concave(d, seed, kind):
    rng = np.random.default_rng(seed)
    X, Y = d
    model = _model(kind, X, Y, rng)
    muxy, q = random_interior(rng, X, Y)
    mu = MatchingPatterns(muxy, q.n - muxy.sum(1), q.m - muxy.sum(0))
    H = model_hessians(model, mu, q)[0]
    H = H.toarray() if hasattr(H, "toarray") else np.asarray(H)
    scale = max(1.0, np.abs(H).max())
    assert np.abs(H - H.T).max() < 1e-6 * scale
    assert np.linalg.eigvalsh(0.5 * (H + H.T)).max() <= 1e-8 * scale


@SETTINGS
@given(st.lists(st.tuples(st.floats(0.0, 1e3), st.floats(0.05, 1.0)), min_size=0, max_size=6), st.floats(1e-4, 1e3))
def test_root_plug_back(terms, n):
    C = np.array([c for c, _ in terms])
    P = np.array([p for _, p in terms])
    t = solve_mux0_root(C, n, P)
    assert 0 < t <= n
    assert abs(t + (C * t**P).sum() - n) <= 1e-11 * n


@SETTINGS
@given(st.integers(2, 4), seeds, st.floats(0.5, 2.0))
def test_mde_exact_data(X, seed, tau):
    # exact data gives back the truth for any design with enough couple cells
    rng = np.random.default_rng(seed)
    Y = X
    phi = np.column_stack([np.ones(X * Y), rng.normal(size=X * Y)])
    beta = rng.normal(size=2)
    Phi = (phi @ beta).reshape(X, Y)
    q = Margins(rng.uniform(0.5, 1.5, X), rng.uniform(0.5, 1.5, Y))
    sol = ipfp_heteroskedastic(Phi, np.ones(X), np.full(Y, tau), q, tol=1e-13)
    r = mde_two_step(sol.mu.normalized().with_N(1000), GenderHeteroskedastic(1.0), phi)
    np.testing.assert_allclose(r.lambda_hat, np.r_[tau, beta], atol=1e-7)
    assert r.df == X * Y - 3

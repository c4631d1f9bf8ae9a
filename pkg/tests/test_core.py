import numpy as np
import pytest

from sepmatch.core import (
    Margins,
    MatchingPatterns,
    SemilinearSurplus,
    TypeSpace,
    build_arrangement_index,
    comoments,
    margins_from_matching,
    margins_operator,
    sample_covariance,
    surplus_matrix,
)
from sepmatch.exceptions import InputError
from sepmatch.montecarlo import DESIGN_BETA, draw_sample, design_bases

from oracles import design_surplus


class TestArrangementIndex:
    def test_smallest_market(self):
        idx = build_arrangement_index(TypeSpace(1, 1))
        assert idx.ordering == ((1, 1), (1, 0), (0, 1))
        assert [idx.index(*a) for a in idx.ordering] == [0, 1, 2]

    def test_two_by_two(self):
        idx = build_arrangement_index(TypeSpace(2, 2))
        assert len(idx) == 8
        assert idx.index(2, 1) == 2

    def test_design_size(self):
        assert TypeSpace(20, 20).n_arrangements == 440
        assert len(build_arrangement_index(TypeSpace(20, 20))) == 440

    def test_index_formulas(self):
        X, Y = 3, 4
        idx = build_arrangement_index(TypeSpace(X, Y))
        for x in range(X):
            for y in range(Y):
                assert idx.index(x + 1, y + 1) == x * Y + y
            assert idx.index(x + 1, 0) == X * Y + x
        for y in range(Y):
            assert idx.index(0, y + 1) == X * Y + X + y
        assert sorted(idx.index(*a) for a in idx.ordering) == list(range(X * Y + X + Y))

    def test_rejects_bad(self):
        with pytest.raises(InputError):
            TypeSpace(0, 2)
        with pytest.raises(InputError):
            build_arrangement_index(TypeSpace(2, 2)).index(0, 0)


class TestSurplus:
    def test_zero_beta(self):
        sp = TypeSpace(3, 4)
        phi = np.random.default_rng(0).normal(size=(12, 5))
        assert np.all(surplus_matrix(SemilinearSurplus(phi, np.zeros(5), sp)) == 0)

    def test_design_formula(self):
        sp = TypeSpace(20, 20)
        Phi = surplus_matrix(SemilinearSurplus(design_bases(sp), np.array(DESIGN_BETA), sp))
        np.testing.assert_allclose(Phi, design_surplus(), atol=1e-12)

    def test_cell_3_5(self):
        sp = TypeSpace(20, 20)
        Phi = surplus_matrix(SemilinearSurplus(design_bases(sp), np.array(DESIGN_BETA), sp))
        assert Phi[2, 4] == pytest.approx(0.96, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            SemilinearSurplus(np.ones((4, 3)), np.ones(2), TypeSpace(2, 2))
        with pytest.raises(InputError):
            SemilinearSurplus(np.ones((5, 2)), np.ones(2), TypeSpace(2, 2))


class TestMargins:
    def test_one_by_one(self):
        q = margins_from_matching(MatchingPatterns([[0.25]], [0.25], [0.25]))
        assert q.n.tolist() == [0.5] and q.m.tolist() == [0.5]

    def test_all_singles(self):
        mu = MatchingPatterns(np.zeros((2, 3)), [0.1, 0.2], [0.3, 0.2, 0.2])
        q = margins_from_matching(mu)
        np.testing.assert_array_equal(q.n, mu.mu_x0)
        np.testing.assert_array_equal(q.m, mu.mu_0y)

    def test_recount_from_draw(self, cs_solution):
        mu = cs_solution.mu.normalized()
        N = 5000
        rng = np.random.default_rng(11)
        counts = rng.multinomial(N, mu.flatten())
        sample = draw_sample(mu, N, np.random.default_rng(11))
        np.testing.assert_array_equal(np.rint(sample.flatten() * N), counts)
        # recount each type from the raw draw
        X, Y = 20, 20
        men = np.zeros(X)
        women = np.zeros(Y)
        for i, c in enumerate(counts):
            if i < X * Y:
                men[i // Y] += c
                women[i % Y] += c
            elif i < X * Y + X:
                men[i - X * Y] += c
            else:
                women[i - X * Y - X] += c
        q = margins_from_matching(sample)
        np.testing.assert_allclose(q.n, men / N, atol=1e-15)
        np.testing.assert_allclose(q.m, women / N, atol=1e-15)

    def test_operator(self):
        rng = np.random.default_rng(2)
        mu = MatchingPatterns(rng.uniform(size=(3, 2)), rng.uniform(size=3), rng.uniform(size=2))
        q = margins_from_matching(mu)
        np.testing.assert_allclose(margins_operator(mu.space) @ mu.flatten(), np.concatenate([q.n, q.m]))

    def test_validation(self):
        with pytest.raises(InputError):
            Margins([1.0, -1.0], [1.0])
        with pytest.raises(InputError):
            MatchingPatterns([[-0.1]], [0.1], [0.1])
        with pytest.raises(InputError):
            MatchingPatterns([[0.1, 0.2]], [0.1, 0.2], [0.1])


class TestSampleCovariance:
    def test_two_cell(self):
        # a 1x1 market with no couples reduces to two cells
        mu = MatchingPatterns([[0.0]], [0.5], [0.5])
        sig = sample_covariance(mu).sigma
        np.testing.assert_allclose(sig[1:, 1:], [[0.25, -0.25], [-0.25, 0.25]])

    def test_row_sums(self, cs_solution):
        sig = sample_covariance(cs_solution.mu.normalized()).sigma
        assert np.abs(sig.sum(1)).max() < 1e-15

    def test_requires_unit_mass(self, cs_solution):
        with pytest.raises(InputError):
            sample_covariance(cs_solution.mu)

    def test_simulated_covariance(self):
        rng = np.random.default_rng(5)
        mu = MatchingPatterns(rng.uniform(0.5, 1, (2, 2)), rng.uniform(0.5, 1, 2), rng.uniform(0.5, 1, 2))
        mu = mu.normalized().with_N(200)
        p = mu.flatten()
        R = 10_000
        draws = rng.multinomial(200, p, size=R) / 200.0
        emp = np.cov(draws, rowvar=False)
        cov = sample_covariance(mu).finite_sample
        # standard error of a sample covariance entry, estimated from the draws
        c = draws - draws.mean(0)
        se = np.sqrt(np.var(c[:, :, None] * c[:, None, :], axis=0) / R)
        assert np.all(np.abs(emp - cov) <= 3 * se + 1e-12)


class TestComoments:
    def test_no_couples(self):
        mu = MatchingPatterns(np.zeros((2, 2)), [0.5, 0.5], [0.5, 0.5])
        assert np.all(comoments(mu, np.ones((4, 3))) == 0)

    def test_constant_basis(self, cs_solution):
        mu = cs_solution.mu
        assert comoments(mu, np.ones((400, 1)))[0] == pytest.approx(mu.mu_xy.sum(), rel=1e-15)

    def test_resummation(self, cs_solution, design_phi):
        mu = cs_solution.mu
        ref = np.zeros(8)
        for x in reversed(range(20)):
            for y in reversed(range(20)):
                ref += mu.mu_xy[x, y] * design_phi[x * 20 + y]
        np.testing.assert_allclose(comoments(mu, design_phi), ref, rtol=1e-14, atol=1e-14)


def test_flatten_roundtrip():
    rng = np.random.default_rng(3)
    mu = MatchingPatterns(rng.uniform(size=(4, 3)), rng.uniform(size=4), rng.uniform(size=3), N=17)
    back = MatchingPatterns.from_flat(mu.flatten(), mu.space, mu.N)
    assert np.array_equal(back.flatten(), mu.flatten()) and back.N == 17

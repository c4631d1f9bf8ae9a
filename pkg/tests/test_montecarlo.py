import csv
import json

import numpy as np
import pytest

from sepmatch.core import MatchingPatterns, TypeSpace
from sepmatch.entropy import GenderHeteroskedastic
from sepmatch.exceptions import InputError
from sepmatch.montecarlo import (
    JOBS_ENV,
    StudyConfig,
    _replicate,
    build_design,
    default_jobs,
    draw_sample,
    geometric_margins,
    design_bases,
    run_study,
)

from oracles import design_bases_loops

SMALL = dict(space=TypeSpace(4, 4), S_reps=6, N=5000, seed=3)


class TestGeometricMargins:
    def test_half(self):
        q = geometric_margins(3, 0.5)
        np.testing.assert_allclose(q.n, [4 / 7, 2 / 7, 1 / 7], rtol=1e-15)
        np.testing.assert_allclose(q.m, q.n)

    def test_uniform(self):
        q = geometric_margins(5, 1.0, 4)
        np.testing.assert_allclose(q.n, 0.2)
        np.testing.assert_allclose(q.m, 0.25)

    def test_twenty_types(self):
        q = geometric_margins(20, 0.8)
        assert q.n.sum() == pytest.approx(1.0) and q.n[1] / q.n[0] == pytest.approx(0.8)

    def test_bad_rate(self):
        with pytest.raises(InputError):
            geometric_margins(3, 0.0)
        with pytest.raises(InputError):
            geometric_margins(3, 1.5)


class TestBases:
    def test_cells(self):
        phi = design_bases(TypeSpace(20, 20))
        assert phi[2 * 20 + 4].tolist() == [1, 3, 5, 9, 15, 25, 0, 0]
        assert phi[4 * 20 + 2].tolist() == [1, 5, 3, 25, 15, 9, 1, 2]

    def test_against_loops(self):
        np.testing.assert_array_equal(design_bases(TypeSpace(20, 20)), design_bases_loops(20, 20))


@pytest.fixture(scope="module")
def mu():
    rng = np.random.default_rng(0)
    return MatchingPatterns(rng.uniform(size=(2, 3)), rng.uniform(size=2), rng.uniform(size=3)).normalized()


class TestDrawSample:
    def test_single_household(self, mu):
        s = draw_sample(mu, 1, 7).flatten()
        assert sorted(np.unique(s).tolist()) == [0.0, 1.0] and s.sum() == 1.0

    def test_deterministic(self, mu):
        a, b = draw_sample(mu, 1000, 11), draw_sample(mu, 1000, 11)
        assert np.array_equal(a.flatten(), b.flatten()) and a.N == 1000
        assert not np.array_equal(a.flatten(), draw_sample(mu, 1000, 12).flatten())

    def test_law_of_large_numbers(self, mu):
        p = mu.flatten()
        seeds = np.random.SeedSequence(5).spawn(10_000)
        mean = np.mean([draw_sample(mu, 50, s).flatten() for s in seeds], axis=0)
        se = np.sqrt(p * (1 - p) / 50 / 10_000)
        assert np.all(np.abs(mean - p) < 4 * se)

    def test_rejects(self, mu):
        with pytest.raises(InputError):
            draw_sample(MatchingPatterns(mu.mu_xy * 2, mu.mu_x0, mu.mu_0y), 10, 0)
        with pytest.raises(InputError):
            draw_sample(mu, 2.5, 0)


class TestConfig:
    def test_names(self):
        c = StudyConfig(model=GenderHeteroskedastic(1.2), estimators=("mde",))
        assert c.param_names[0] == "tau" and c.param_names[1:] == tuple(f"beta_{k}" for k in range(1, 9))
        assert c.truth[0] == 1.2

    def test_validation(self):
        with pytest.raises(InputError):
            StudyConfig(model=GenderHeteroskedastic(1.2))
        with pytest.raises(InputError):
            StudyConfig(N=0)
        with pytest.raises(InputError):
            StudyConfig(estimators=("ols",))
        with pytest.raises(InputError):
            StudyConfig(bases="splines")

    def test_jobs_env(self, monkeypatch):
        monkeypatch.setenv(JOBS_ENV, "3")
        assert default_jobs() == 3
        monkeypatch.setenv(JOBS_ENV, "many")
        with pytest.raises(InputError):
            default_jobs()


class TestStudy:
    def test_exact(self):
        cfg = StudyConfig(space=TypeSpace(20, 20), S_reps=1, exact=True, seed=0)
        res = run_study(cfg, histograms=False)
        for est in ("mde", "poisson"):
            for p in res.summary.params[est].values():
                assert abs(p.bias) < 1e-8 and p.sd == 0.0
        assert res.summary.T_mean < 1e-10 and res.summary.df_mean == 392

    def test_design_normalized(self):
        d = build_design(StudyConfig(**SMALL))
        assert d.mu.total_mass == pytest.approx(1.0, abs=1e-14) and d.mass_scale > 1

    def test_outputs(self, tmp_path):
        res = run_study(StudyConfig(**SMALL), out_dir=tmp_path)
        names = sorted(p.name for p in tmp_path.iterdir())
        assert "replications.csv" in names and "summary.json" in names
        assert "hist_beta_1.svg" in names and len([n for n in names if n.endswith(".svg")]) == 8
        with open(tmp_path / "replications.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 12 and {r["estimator"] for r in rows} == {"mde", "poisson"}
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["successes"] == {"mde": 6, "poisson": 6}
        assert summary["parameters"]["poisson"]["beta_1"]["true"] == 1.0
        mde = [float(r["beta_2"]) for r in rows if r["estimator"] == "mde"]
        assert res.summary.params["mde"]["beta_2"].mean == pytest.approx(np.mean(mde), rel=1e-14)
        svg = (tmp_path / "hist_beta_1.svg").read_text()
        assert svg.startswith("<?xml") and "<svg" in svg

    def test_reproducible_and_order_free(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        run_study(StudyConfig(**SMALL), a, jobs=1, histograms=False)
        run_study(StudyConfig(**SMALL), b, jobs=2, histograms=False)
        assert (a / "replications.csv").read_bytes() == (b / "replications.csv").read_bytes()

    def test_seed_changes_output(self):
        a = run_study(StudyConfig(**SMALL), histograms=False)
        b = run_study(StudyConfig(**{**SMALL, "seed": 4}), histograms=False)
        assert a.rows[0]["beta_1"] != b.rows[0]["beta_1"]

    def test_failures_recorded(self):
        # one household per sample leaves MDE with nothing to fit
        cfg = StudyConfig(space=TypeSpace(3, 3), S_reps=3, N=1, seed=1)
        res = run_study(cfg, histograms=False)
        assert res.summary.failures == {"mde": 3, "poisson": 3}
        assert np.isnan(res.summary.params["poisson"]["beta_1"].mean)
        assert all(r["message"] for r in res.rows if r["status"] == "failed")

    def test_replicate_catches(self):
        cfg = StudyConfig(space=TypeSpace(3, 3), S_reps=1, N=1, seed=1, estimators=("mde",))
        design = build_design(cfg)
        (row,) = _replicate((1, np.random.SeedSequence(0), design, cfg))
        assert row["status"] == "failed"

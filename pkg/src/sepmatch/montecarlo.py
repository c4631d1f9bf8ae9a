"""Simulation studies: build a design, draw samples, estimate, summarize.

Each replication draws its own substream from a ``SeedSequence`` spawned off
the root seed, so results do not depend on how replications are scheduled.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import Margins, MatchingPatterns, SemilinearSurplus, TypeSpace, surplus_matrix
from .entropy import ChooSiow, EntropyModel
from .estimators import MDEConfig, mde_two_step, poisson_estimate
from .exceptions import InputError, SepMatchError
from .solvers import DEFAULT_MAX_ITER, solve_model

log = logging.getLogger(__name__)

ESTIMATORS = ("mde", "poisson")
DESIGN_BETA = (1.0, 0.0, 0.0, -0.01, 0.02, -0.01, 0.5, 0.0)
JOBS_ENV = "SEPMATCH_JOBS"


def geometric_margins(X: int, rate: float, Y: int | None = None) -> Margins:
    """Margins proportional to ``rate**(x-1)``, each side summing to one."""
    if not 0 < rate <= 1:
        raise InputError(f"geometric rate must lie in (0, 1], got {rate}")
    Y = X if Y is None else Y
    n = rate ** np.arange(X, dtype=float)
    m = rate ** np.arange(Y, dtype=float)
    return Margins(n / n.sum(), m / m.sum())


def design_bases(space: TypeSpace) -> np.ndarray:
    """Eight bases on the type grid: 1, x, y, x^2, xy, y^2, 1(x>=y), max(x-y, 0)."""
    x = np.repeat(np.arange(1, space.X + 1, dtype=float), space.Y)
    y = np.tile(np.arange(1, space.Y + 1, dtype=float), space.X)
    return np.column_stack(
        [np.ones_like(x), x, y, x * x, x * y, y * y, (x >= y).astype(float), np.maximum(x - y, 0.0)]
    )


BASES = {"quadratic": design_bases}


def _generator(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def draw_sample(mu: MatchingPatterns, N: int, seed) -> MatchingPatterns:
    """One multinomial draw of ``N`` households; returns frequencies with ``N`` attached."""
    p = mu.flatten()
    if abs(p.sum() - 1.0) > 1e-8:
        raise InputError(f"sampling needs a unit-mass matching, got total {p.sum():.12g}")
    if int(N) != N or N < 1:
        raise InputError(f"N must be a positive integer, got {N}")
    counts = _generator(seed).multinomial(int(N), p / p.sum())
    return MatchingPatterns.from_flat(counts / N, mu.space, N)


@dataclass(frozen=True)
class StudyConfig:
    """Monte Carlo design.

    ``model`` is the true heterogeneity family, including its true ``alpha``.
    ``exact`` replaces every draw by the population matching.
    """

    space: TypeSpace = TypeSpace(20, 20)
    rate: float = 0.8
    bases: str = "quadratic"
    true_beta: tuple = DESIGN_BETA
    model: EntropyModel = field(default_factory=ChooSiow)
    N: int = 10_000
    S_reps: int = 100
    seed: int = 0
    estimators: tuple = ESTIMATORS
    zero_cell_policy: str = "drop"
    shift_delta: float | None = None
    exact: bool = False
    solver_tol: float = 1e-12

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise InputError(f"N must be a positive integer, got {self.N}")
        if int(self.S_reps) != self.S_reps or self.S_reps < 1:
            raise InputError(f"the replication count must be a positive integer, got {self.S_reps}")
        if self.bases not in BASES:
            raise InputError(f"unknown basis set {self.bases!r}; choose from {sorted(BASES)}")
        bad = set(self.estimators) - set(ESTIMATORS)
        if bad or not self.estimators:
            raise InputError(f"estimators must be a non-empty subset of {ESTIMATORS}, got {self.estimators}")
        if "poisson" in self.estimators and not isinstance(self.model, ChooSiow):
            raise InputError("the Poisson estimator only applies to the Choo-Siow family")
        object.__setattr__(self, "true_beta", tuple(float(b) for b in self.true_beta))
        object.__setattr__(self, "estimators", tuple(e for e in ESTIMATORS if e in self.estimators))
        MDEConfig(zero_cell_policy=self.zero_cell_policy, shift_delta=self.shift_delta)

    @property
    def beta_names(self) -> tuple:
        return tuple(f"beta_{k + 1}" for k in range(len(self.true_beta)))

    @property
    def param_names(self) -> tuple:
        return tuple(self.model.alpha_names) + self.beta_names

    @property
    def truth(self) -> np.ndarray:
        return np.concatenate([self.model.alpha, self.true_beta])


@dataclass(frozen=True)
class Design:
    """Solved population matching (unit mass) and the basis matrix."""

    mu: MatchingPatterns
    phi: np.ndarray
    mass_scale: float
    solver_iterations: int


def build_design(config: StudyConfig) -> Design:
    phi = BASES[config.bases](config.space)
    if phi.shape[1] != len(config.true_beta):
        raise InputError(f"{phi.shape[1]} bases but {len(config.true_beta)} true coefficients")
    Phi = surplus_matrix(SemilinearSurplus(phi, np.array(config.true_beta), config.space))
    q = geometric_margins(config.space.X, config.rate, config.space.Y)
    sol = solve_model(Phi, config.model, q, tol=config.solver_tol, max_iter=DEFAULT_MAX_ITER)
    scale = sol.mu.total_mass
    return Design(sol.mu.normalized().with_N(config.N), phi, scale, sol.iterations)


@dataclass(frozen=True)
class ParamSummary:
    true: float
    mean: float
    bias: float
    sd: float
    mc_se: float
    asd_mean: float
    coverage: float


@dataclass(frozen=True)
class StudySummary:
    """Per-estimator, per-parameter summaries over the successful replications."""

    params: dict
    T_mean: float | None
    df_mean: float | None
    successes: dict
    failures: dict
    S_reps: int
    mass_scale: float

    def to_dict(self) -> dict:
        def clean(v):
            return None if v is None or not np.isfinite(v) else float(v)

        return {
            "S_reps": self.S_reps,
            "successes": dict(self.successes),
            "failures": dict(self.failures),
            "T_mean": clean(self.T_mean),
            "df_mean": clean(self.df_mean),
            "dgp_mass_before_normalization": clean(self.mass_scale),
            "parameters": {
                est: {name: {k: clean(v) for k, v in vars(ps).items()} for name, ps in per.items()}
                for est, per in self.params.items()
            },
        }


@dataclass(frozen=True)
class StudyResult:
    config: StudyConfig
    summary: StudySummary
    rows: list = field(repr=False)


def _replicate(task):
    rep, seed_seq, design, config = task
    if config.exact:
        sample = design.mu
    else:
        sample = draw_sample(design.mu, config.N, seed_seq)
    names = config.param_names
    dA = config.model.d_alpha
    out = []
    for est in config.estimators:
        row = {"rep": rep, "estimator": est, "status": "ok", "message": ""}
        try:
            if est == "mde":
                cfg = MDEConfig(zero_cell_policy=config.zero_cell_policy, shift_delta=config.shift_delta)
                r = mde_two_step(sample, config.model, design.phi, cfg, beta_names=config.beta_names)
                values, ses = r.lambda_hat, r.std_errors
                row.update(T_stat=r.T_stat, df=r.df, p_value=r.p_value, iterations=0, dropped=len(r.dropped_cells))
            else:
                r = poisson_estimate(sample, design.phi)
                values = np.concatenate([np.full(dA, np.nan), r.beta_hat])
                ses = np.concatenate([np.full(dA, np.nan), r.beta_std_errors])
                row.update(T_stat=None, df=None, p_value=None, iterations=r.iterations, dropped=0)
            row.update({n: float(v) for n, v in zip(names, values)})
            row.update({f"se_{n}": float(s) for n, s in zip(names, ses)})
        except (SepMatchError, np.linalg.LinAlgError, FloatingPointError) as exc:
            row.update(status="failed", message=f"{type(exc).__name__}: {exc}")
        out.append(row)
    return out


def _summarize(config: StudyConfig, rows, mass_scale) -> StudySummary:
    names = config.param_names
    truth = config.truth
    params, succ, fail = {}, {}, {}
    T, df = [], []
    for est in config.estimators:
        ok = [r for r in rows if r["estimator"] == est and r["status"] == "ok"]
        succ[est] = len(ok)
        fail[est] = config.S_reps - len(ok)
        per = {}
        for name, t in zip(names, truth):
            if est == "poisson" and name in config.model.alpha_names:
                continue
            vals = np.array([r[name] for r in ok], dtype=float)
            ses = np.array([r[f"se_{name}"] for r in ok], dtype=float)
            if vals.size == 0:
                per[name] = ParamSummary(t, np.nan, np.nan, np.nan, np.nan, np.nan, np.nan)
                continue
            sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
            per[name] = ParamSummary(
                true=float(t),
                mean=float(vals.mean()),
                bias=float(vals.mean() - t),
                sd=sd,
                mc_se=sd / np.sqrt(vals.size),
                asd_mean=float(ses.mean()),
                coverage=float(np.mean(np.abs(vals - t) <= 1.959963984540054 * ses)),
            )
        params[est] = per
        if est == "mde":
            T = [r["T_stat"] for r in ok if r["T_stat"] is not None]
            df = [r["df"] for r in ok if r["df"] is not None]
    return StudySummary(
        params,
        float(np.mean(T)) if T else None,
        float(np.mean(df)) if df else None,
        succ,
        fail,
        config.S_reps,
        mass_scale,
    )


def default_jobs() -> int:
    try:
        return max(1, int(os.environ.get(JOBS_ENV, "1")))
    except ValueError:
        raise InputError(f"{JOBS_ENV} must be an integer") from None


def run_study(config: StudyConfig, out_dir=None, jobs: int | None = None, histograms: bool = True) -> StudyResult:
    """Solve the design once, then replicate draw and estimation ``S_reps`` times.

    Failed replications are kept in the table with their error and left out
    of the summary. With ``out_dir`` the table, the summary and (optionally)
    one histogram per parameter are written there.
    """
    design = build_design(config)
    seeds = np.random.SeedSequence(config.seed).spawn(config.S_reps)
    tasks = [(r + 1, seeds[r], design, config) for r in range(config.S_reps)]
    jobs = default_jobs() if jobs is None else int(jobs)
    if jobs > 1 and config.S_reps > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            chunks = list(pool.map(_replicate, tasks, chunksize=max(1, config.S_reps // (4 * jobs))))
    else:
        chunks = [_replicate(t) for t in tasks]
    rows = [row for chunk in chunks for row in chunk]
    n_failed = sum(r["status"] != "ok" for r in rows)
    if n_failed:
        log.warning("%d estimator run(s) failed and are excluded from the summary", n_failed)
    result = StudyResult(config, _summarize(config, rows, design.mass_scale), rows)
    if out_dir is not None:
        write_study_outputs(result, out_dir, histograms=histograms)
    return result


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return "" if np.isnan(v) else format(float(v), ".17g")
    return str(v)


def replication_columns(config: StudyConfig) -> list:
    names = list(config.param_names)
    return (
        ["rep", "estimator", "status"]
        + names
        + [f"se_{n}" for n in names]
        + ["T_stat", "df", "p_value", "iterations", "dropped", "message"]
    )


def write_replications_csv(result: StudyResult, path):
    cols = replication_columns(result.config)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for row in result.rows:
            w.writerow([_fmt(row.get(c)) for c in cols])


def write_study_outputs(result: StudyResult, out_dir, histograms: bool = True) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "replications.csv", out / "summary.json"]
    write_replications_csv(result, written[0])
    with open(written[1], "w") as fh:
        json.dump(result.summary.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if histograms:
        from .plotting import parameter_histograms

        written += parameter_histograms(result, out)
    return written

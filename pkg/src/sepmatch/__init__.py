"""Separable transferable-utility matching: equilibrium solvers and estimators.

The package works at the level of types. A market has ``X`` types of men and
``Y`` types of women; a matching gives the mass of each couple type and of
singles of each type. See the submodules:

``core``        type spaces, matchings, margins, surplus, sampling covariance
``entropy``     generalized-entropy gradients and Hessians per family
``solvers``     stable-matching solvers (IPFP variants, brute-force oracle)
``estimators``  minimum distance and Poisson fixed-effects estimators
``montecarlo``  simulation studies
``io``          file formats and configuration
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ArrangementIndex,
    Margins,
    MatchingPatterns,
    SampleCovariance,
    SemilinearSurplus,
    TypeSpace,
    build_arrangement_index,
    comoments,
    margins_from_matching,
    sample_covariance,
    surplus_matrix,
)
from .entropy import (  # noqa: E402
    ChooSiow,
    FullHeteroskedastic,
    GenderHeteroskedastic,
    MixedLogit,
    MixedLogitSpec,
    NestedLogit,
    NestedLogitSpec,
    gradient_decomposition,
)
from .estimators import MDEConfig, mde_two_step, poisson_estimate  # noqa: E402
from .exceptions import (  # noqa: E402
    ConvergenceError,
    IdentificationError,
    InputError,
    SepMatchError,
    ZeroCellError,
)
from .solvers import ipfp_choo_siow, ipfp_nested_logit, solve_model  # noqa: E402

__all__ = [
    "ArrangementIndex",
    "Margins",
    "MatchingPatterns",
    "SampleCovariance",
    "SemilinearSurplus",
    "TypeSpace",
    "build_arrangement_index",
    "comoments",
    "margins_from_matching",
    "sample_covariance",
    "surplus_matrix",
    "ChooSiow",
    "FullHeteroskedastic",
    "GenderHeteroskedastic",
    "MixedLogit",
    "MixedLogitSpec",
    "NestedLogit",
    "NestedLogitSpec",
    "gradient_decomposition",
    "MDEConfig",
    "mde_two_step",
    "poisson_estimate",
    "ConvergenceError",
    "IdentificationError",
    "InputError",
    "SepMatchError",
    "ZeroCellError",
    "ipfp_choo_siow",
    "ipfp_nested_logit",
    "solve_model",
]

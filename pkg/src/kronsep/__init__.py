"""Likelihood ratio test of Kronecker-product LEAR separability for unbalanced repeated measures."""

from .data import CsvOptions, Dataset, SubjectData, load_csv
from .errors import KronsepError
from .fit_alt import AltFitResult, MaxGridCov, fit_alt
from .fit_null import FitOptions, NullFitResult, fit_null
from .lear import LearParams, NullParams, lear_corr
from .lrt import LrtResult, dof_lear, k1_adjust, k2_adjust, run_test
from .simulate import SimConfig, SimResult, run_study

__version__ = "0.1.0"

__all__ = [
    "AltFitResult",
    "CsvOptions",
    "Dataset",
    "FitOptions",
    "KronsepError",
    "LearParams",
    "LrtResult",
    "MaxGridCov",
    "NullFitResult",
    "NullParams",
    "SimConfig",
    "SimResult",
    "SubjectData",
    "dof_lear",
    "fit_alt",
    "fit_null",
    "k1_adjust",
    "k2_adjust",
    "lear_corr",
    "load_csv",
    "run_study",
    "run_test",
]

"""Generalized additive latent and mixed models by Laplace-approximate marginal likelihood."""

__version__ = "0.1.0"

from .assembly import LoweredModel, lower  # noqa: E402
from .data import Dataset, DataError, load_dataset, write_dataset  # noqa: E402
from .estimation import FitResult, fit, laplace_loglik, pirls, result_at  # noqa: E402
from .inference import aic, latent_trajectory_bands, lrt, smooth_bands, variance_components  # noqa: E402
from .modelspec import ModelSpec, SpecError, dump_spec, load_spec, parse_spec  # noqa: E402

__all__ = [
    "DataError",
    "Dataset",
    "FitResult",
    "LoweredModel",
    "ModelSpec",
    "SpecError",
    "aic",
    "dump_spec",
    "fit",
    "laplace_loglik",
    "latent_trajectory_bands",
    "load_dataset",
    "load_spec",
    "lower",
    "lrt",
    "parse_spec",
    "pirls",
    "result_at",
    "smooth_bands",
    "variance_components",
    "write_dataset",
]

"""Phase-type variational autoencoders for heavy-tailed data."""

from .ph import (CanonicalPH, GeneralPH, UniformizationConfig, UniformizationError, ccdf, cdf,
                 expand_canonical, laplace, log_pdf, matexp_uniformized, moment, pdf, sample,
                 sample_multivariate)

__version__ = "0.1.0"

__all__ = [
    "CanonicalPH",
    "GeneralPH",
    "UniformizationConfig",
    "UniformizationError",
    "ccdf",
    "cdf",
    "expand_canonical",
    "laplace",
    "log_pdf",
    "matexp_uniformized",
    "moment",
    "pdf",
    "sample",
    "sample_multivariate",
]

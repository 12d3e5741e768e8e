"""Gradient reconstruction of a log-correlated field from its imaginary chaos."""

__version__ = "0.1.0"

from .chaos import ChaosParams, ChaosSample, build_cascade, build_chaos, reflection_witness, shift_cascade_weight
from .covariance import (
    GFFSquare,
    LogPlusG,
    MollifyConvolution,
    OffsetKernel,
    PureLog,
    Regularized,
    SpectralTruncation,
    kernel_eval,
    kernel_partial,
    psd_validate,
    regularized_covariance,
)
from .errors import (
    ConfigError,
    DiagonalSingularity,
    FactorizationFailure,
    ImchaosError,
    InfeasibleDimension,
    NonConverged,
    NotPositiveSemiDefinite,
    ScaleUnresolved,
    SupportViolation,
)
from .estimator import EstimatorConfig, Geometric, HEstimator, PaperDoubleExp, compute_A_N, compute_H_eta, compute_H_eta_fast
from .grid import Grid, TestFunction, build_grid
from .mollifier import Mollifier
from .sampler import FieldSample, SeedStream, grad_pairing, pairing, sample_cholesky, sample_gff_spectral

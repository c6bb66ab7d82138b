"""Learning path-dependent PDE solutions with log-signature driven neural ODEs."""

from .signatures import (
    LogSignature,
    PiecewisePath,
    TruncatedTensor,
    beta,
    logsig,
    path_signature,
    segment_signature,
    tensor_exp,
    tensor_log,
    tensor_mul,
)

__version__ = "0.1.0"

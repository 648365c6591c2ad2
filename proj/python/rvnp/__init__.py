"""Robust variational neural posterior estimation toolkit.

Thin python surface over the C++ core: numerics, conditional RQS flows,
error models, benchmark simulators, calibration metrics, and the training
pipeline. See the package README for the CLI and configuration schema.
"""

from ._core import (  # noqa: F401
    CholeskyResult,
    ConditionalFlow,
    ErrorModel,
    FlowConfig,
    Rng,
    __doc__ as _core_doc,
    build_datasets,
    cholesky,
    cs_simulate,
    epc_curve,
    gaussian_logpdf,
    hdr_contains,
    infomax_loss_value,
    logsumexp,
    lpp,
    nle_loss_value,
    nmse,
    npe_loss_value,
    pendulum_simulate,
    run_pipeline,
    run_sweep,
    rvnp_loss_value,
    sir_misspecify,
    sir_simulate,
)

__version__ = "0.1.0"

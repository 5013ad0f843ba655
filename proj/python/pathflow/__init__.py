"""Boltzmann-generator training engine.

Thin python surface over the native module: vector-field oracle, target
densities, flow transport, training gradients, importance-sampling metrics
and the analytic gradient-variance lab.
"""

from ._pathflow import (  # noqa: F401
    FieldArch,
    FieldOracle,
    FieldParams,
    IntegrationDiverged,
    augmented_inverse,
    cfm_grad,
    double_well,
    ess_p,
    ess_q,
    forward_kl,
    forward_map,
    gmm2d,
    init_params,
    inverse_map,
    lennard_jones,
    log_prob,
    log_z,
    mcmc_sample,
    ml_grad,
    nll,
    ot_pair,
    parameter_count,
    pg_grad,
    run_training,
    sample_flow,
    standard_normal,
    toy_fm_variance,
    toy_ml_variance,
    toy_pg_stats,
    trajectory_length,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

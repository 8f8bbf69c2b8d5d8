"""Continuous-time step-and-turn movement modelling and inference."""

from .gaussian import (
    DegenerateConstraintError,
    GaussianSpec,
    LinearObservationModel,
    brownian_bridge,
    condition_on_exact,
    condition_on_noisy,
    logpdf_degenerate,
    ou_bridge,
    sample_singular,
)
from .model import (
    ModelParams,
    ObservationSet,
    RefinedPath,
    bearing_transition,
    error_log_likelihood,
    initial_bearing_dist,
    initial_step_dist,
    joint_log_likelihood,
    path_log_likelihood,
    reconstruct_locations,
    simulate_path,
    snap_observations,
    speed_transition,
)
from .pathstate import (
    Section,
    choose_section,
    design_for_section,
    init_path_from_obs,
)
from .sampler import (
    ChainDiagnostics,
    PosteriorSample,
    SamplerConfig,
    credible_intervals,
    param_update,
    run_chain,
    section_update,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"

"""Metropolis-within-Gibbs engine.

Alternates truncated-Normal random-walk updates of the five movement and
error parameters with blockwise refined-path updates. A path update draws a
random section, proposes its interior bearings from the bearing bridge and
its interior steps from the step law conditioned on the endpoint-location
constraint and the interior observations, and accepts on the ratio of the
step-marginalized likelihood of the section's data: the fixed endpoint
displacement plus the interior observations, both given the bearings. The
bridge proposal density of the bearings cancels their prior exactly, so
nothing else enters the ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

from .gaussian import (
    DegenerateConstraintError,
    GaussianSpec,
    brownian_bridge_template,
    mvn_logpdf,
    ou_bridge_factors,
    sample_singular,
)
from .model import (
    PARAM_NAMES,
    ModelParams,
    ObservationSet,
    RefinedPath,
    joint_log_likelihood,
    reconstruct_locations,
)
from .pathstate import (
    Section,
    bearing_prior_law,
    choose_section,
    init_path_from_obs,
    section_step_proposal,
    step_prior_law,
)

ENDPOINT_TOL = 1e-6


@dataclass
class SamplerConfig:
    """Run schedule and tuning knobs for one chain.

    ``n_iterations`` counts post-burn-in Gibbs sweeps (one parameter update
    plus ``path_updates_per_param_update`` section updates each); the total
    number of section updates is reported in the diagnostics so both
    iteration notions are visible.
    """

    dt: float
    n_iterations: int
    burn_in: int
    thin: int = 1
    path_updates_per_param_update: int = 50
    section_len_min: int = 5
    section_len_max: int = 12
    proposal_scales: np.ndarray | None = None  # default: 10% of initial values
    tune_proposals: bool = True
    speed_prior_k: float | None = 2.0
    init_step_convention: str = "legacy"
    seed: int = 0
    keep_path_snapshots: bool = True
    path_snapshot_stride: int = 10  # in retained samples; 0 disables
    check_constraints: bool = False
    # Section updates run at the fixed initial parameters before the first
    # parameter update. The initial path interpolates the observations
    # exactly, which sits on the unbounded sigmaE2 -> 0 mode of the
    # augmented posterior; warming the path up to model-typical residuals
    # first keeps the error-variance update away from that trap.
    # None means 10 section updates per path edge.
    path_warmup_updates: int | None = None

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.n_iterations < 0 or self.burn_in < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")
        if self.path_updates_per_param_update < 0:
            raise ValueError("path_updates_per_param_update must be >= 0")
        if self.section_len_min < 3:
            raise ValueError("section_len_min must be >= 3")
        if self.section_len_max < self.section_len_min:
            raise ValueError("section_len_max < section_len_min")
        if self.proposal_scales is not None:
            self.proposal_scales = np.asarray(self.proposal_scales, dtype=float)
            if self.proposal_scales.shape != (5,) or np.any(self.proposal_scales <= 0):
                raise ValueError("proposal_scales must be five positive values")
        if self.path_warmup_updates is not None and self.path_warmup_updates < 0:
            raise ValueError("path_warmup_updates must be >= 0")


@dataclass(frozen=True)
class PosteriorSample:
    iteration: int
    params: ModelParams
    path: RefinedPath | None = None


@dataclass
class ChainDiagnostics:
    param_accept_rate: float
    section_accept_rate: float
    n_param_updates: int
    n_section_updates: int
    constraint_violations: int
    proposal_scales: np.ndarray
    trace_summary: dict  # per-parameter mean/sd/min/max of retained samples

    def as_rows(self):
        rows = [
            ("param_accept_rate", self.param_accept_rate),
            ("section_accept_rate", self.section_accept_rate),
            ("n_param_updates", self.n_param_updates),
            ("n_section_updates", self.n_section_updates),
            ("constraint_violations", self.constraint_violations),
        ]
        for name, scale in zip(PARAM_NAMES, self.proposal_scales):
            rows.append((f"proposal_scale_{name}", scale))
        for name, stats in self.trace_summary.items():
            for key, val in stats.items():
                rows.append((f"{name}_{key}", val))
        return rows


@dataclass
class ChainState:
    params: ModelParams
    path: RefinedPath
    locs: np.ndarray  # cached node locations, shape (n+1, 2)
    bridge_cache: "_BridgeCache | None" = None


# spectral factors of the unit Brownian-bridge covariance, keyed by interior
# length; parameter-free, so cached for the process lifetime
_BB_EIG: dict[int, tuple] = {}


def _bridge_eig(L: int):
    factors = _BB_EIG.get(L)
    if factors is None:
        w, v = np.linalg.eigh(brownian_bridge_template(L))
        factors = (np.clip(w, 0.0, None), v)
        _BB_EIG[L] = factors
    return factors


class _BridgeCache:
    """Per-parameter cache of OU-bridge factors keyed by interior length.

    Bridge covariances and endpoint gains depend only on the parameters and
    the section length, not on the endpoint values, so they are reused
    across the many section updates between parameter updates.
    """

    def __init__(self, params: ModelParams, dt: float):
        self.params = params
        self.dt = dt
        self._ou: dict[int, tuple] = {}

    def ou_factors(self, L: int):
        factors = self._ou.get(L)
        if factors is None:
            factors = ou_bridge_factors(L, self.params, self.dt)
            self._ou[L] = factors
        return factors


def log_prior(params: ModelParams, speed_prior_k: float | None) -> float:
    """Flat (improper) prior on the positive orthant, optionally with the
    speed-sign constraint mu >= k * sqrt(sigmaS2 / (2*lam)) that keeps the
    stationary speed distribution k standard deviations above zero."""
    if not params.all_positive():
        return -math.inf
    if speed_prior_k is not None:
        if params.mu < speed_prior_k * math.sqrt(params.sigmaS2 / (2.0 * params.lam)):
            return -math.inf
    return 0.0


def truncation_log_correction(current: np.ndarray, proposal: np.ndarray, scales) -> float:
    """Hastings correction for zero-truncated Normal random walks.

    log q(current | proposal) - log q(proposal | current)
    = sum_i [log Phi(current_i / s_i) - log Phi(proposal_i / s_i)].
    """
    scales = np.asarray(scales, dtype=float)
    return float(np.sum(log_ndtr(current / scales) - log_ndtr(proposal / scales)))


def sample_truncated_walk(current: np.ndarray, scales, rng: np.random.Generator) -> np.ndarray:
    """Propose each coordinate from N(current_i, s_i^2) truncated below at 0,
    via the inverse CDF so draws are deterministic in the rng stream."""
    scales = np.asarray(scales, dtype=float)
    alpha = ndtr(-current / scales)  # mass below zero
    u = rng.uniform(size=len(current))
    return current + scales * ndtri(alpha + u * (1.0 - alpha))


def truncated_rw_step(values: np.ndarray, log_target, scales, rng: np.random.Generator):
    """One MH step of the simultaneous zero-truncated random walk.

    ``log_target`` maps a parameter vector to an unnormalized log-density.
    Returns (new_values, accepted, proposal).
    """
    proposal = sample_truncated_walk(values, scales, rng)
    log_acc = (
        log_target(proposal)
        - log_target(values)
        + truncation_log_correction(values, proposal, scales)
    )
    u = rng.uniform()
    if math.log(u) < log_acc:
        return proposal, True, proposal
    return values, False, proposal


def param_update(
    state: ChainState,
    obs: ObservationSet,
    config: SamplerConfig,
    rng: np.random.Generator,
    scales=None,
) -> bool:
    """One truncated-random-walk update of the five parameters in place.

    Acceptance uses the joint likelihood of the observations and the full
    refined path times the prior, with the truncation correction. Returns
    whether the proposal was accepted.
    """
    if scales is None:
        scales = config.proposal_scales
    conv = config.init_step_convention

    def log_target(vec):
        try:
            p = ModelParams.from_array(vec)
        except ValueError:
            return -math.inf
        lp = log_prior(p, config.speed_prior_k)
        if lp == -math.inf:
            return -math.inf
        return lp + joint_log_likelihood(state.path, obs, p, conv)

    new, accepted, _ = truncated_rw_step(state.params.as_array(), log_target, scales, rng)
    if accepted:
        state.params = ModelParams.from_array(new)
        state.bridge_cache = None  # bridge factors depend on the parameters
    return accepted


def section_update(
    state: ChainState,
    obs: ObservationSet,
    config: SamplerConfig,
    rng: np.random.Generator,
    section: Section | None = None,
):
    """One blockwise refined-path update in place.

    Returns (accepted, constraint_violated). A degenerate endpoint
    constraint (e.g. collinear proposal bearings) auto-rejects.
    """
    path = state.path
    params = state.params
    n = path.n_steps
    if section is None:
        section = choose_section(n, config.section_len_min, config.section_len_max, rng)
    conv = config.init_step_convention
    L = section.n_interior
    interior = section.lo >= 0 and section.hi <= n - 1

    if interior:
        if state.bridge_cache is None:
            state.bridge_cache = _BridgeCache(params, path.dt)
        cache = state.bridge_cache
        # Brownian bridge between the frozen endpoint bearings, sampled via
        # the cached spectral factors of the unit-increment template
        ta = path.bearings[section.lo]
        tb = path.bearings[section.hi]
        N = L + 1
        bmean = ta + np.arange(1, N) / N * (tb - ta)
        w, v = _bridge_eig(L)
        vb = params.sigmaB2 * path.dt
        theta_new = bmean + v @ (np.sqrt(vb * w) * rng.standard_normal(L))
        # OU bridge between the frozen endpoint steps
        m0, gain, scov = cache.ou_factors(L)
        smean = m0 + gain @ np.array(
            [path.steps[section.lo] - m0, path.steps[section.hi] - m0]
        )
        step_prior = GaussianSpec(mean=smean, cov=scov)
    else:
        blaw = bearing_prior_law(path, section, params)
        theta_new = sample_singular(blaw, rng)
        step_prior = step_prior_law(path, section, params, conv)

    try:
        law_new = section_step_proposal(
            path, obs, params, section, theta_new, locs=state.locs,
            init_step_convention=conv, step_prior=step_prior,
        )
    except DegenerateConstraintError:
        return False, False
    nu_new = sample_singular(law_new.step_law, rng)

    # acceptance compares, new vs current bearings, the density of the data
    # the section must explain: the frozen endpoint displacement under the
    # unconstrained step prior, and the interior observations under the
    # constrained step law with error variance added
    has_constraint = section.hi <= n - 1
    if law_new.obs_marginal is None and not has_constraint:
        log_ratio = 0.0
    else:
        try:
            law_cur = section_step_proposal(
                path, obs, params, section, path.bearings[section.interior],
                locs=state.locs, init_step_convention=conv, want_step_law=False,
                step_prior=step_prior,
            )
        except DegenerateConstraintError:
            return False, False
        log_ratio = law_new.constraint_logpdf - law_cur.constraint_logpdf
        if law_new.obs_marginal is not None:
            log_ratio += mvn_logpdf(
                law_new.z, law_new.obs_marginal.mean, law_new.obs_marginal.cov
            ) - mvn_logpdf(law_cur.z, law_cur.obs_marginal.mean, law_cur.obs_marginal.cov)

    u = rng.uniform()
    if not (math.log(u) < log_ratio):
        return False, False

    path.bearings[section.interior] = theta_new
    path.steps[section.interior] = nu_new

    # refresh cached node locations over the moving range
    first = section.lo + 2
    last = section.hi if section.hi <= n - 1 else n + 1
    dx = np.cumsum(nu_new * np.cos(theta_new))
    dy = np.cumsum(nu_new * np.sin(theta_new))
    left = state.locs[section.lo + 1]
    if section.hi <= n - 1:
        state.locs[first:last, 0] = left[0] + dx[:-1]
        state.locs[first:last, 1] = left[1] + dy[:-1]
        violated = False
        if config.check_constraints:
            # endpoint node hi must be unmoved by the accepted update
            end = np.array([left[0] + dx[-1], left[1] + dy[-1]])
            violated = bool(np.abs(end - state.locs[section.hi]).max() > ENDPOINT_TOL)
    else:
        state.locs[first:, 0] = left[0] + dx
        state.locs[first:, 1] = left[1] + dy
        violated = False
    return True, violated


def estimate_initial_params(obs: ObservationSet, dt: float) -> ModelParams:
    """Data-driven starting parameters from the linear interpolation of the
    observed track: mean and variance of segment speeds set mu and sigmaS2
    (with lam = 1), and heading-change variance per unit time sets sigmaB2.

    sigmaE2 starts at the midpoint-deviation estimate: each observation's
    squared deviation from the midpoint of its neighbours has expectation
    1.5*sigmaE2 plus a nonnegative path-curvature term, so the estimate
    deliberately overshoots the error variance. Starting above the truth
    matters: the initial path interpolates the observations, and a chain
    entering the burn-in with the error variance below its posterior mass
    can slide into the degenerate zero-error mode and freeze there, whereas
    approaching from above is stable.
    """
    dts = np.diff(obs.times)
    dx = np.diff(obs.xs)
    dy = np.diff(obs.ys)
    dists = np.hypot(dx, dy)
    speeds = dists / dts
    mu0 = max(float(np.mean(speeds)), 1e-3)
    lam0 = 1.0
    sigmaS2_0 = max(2.0 * lam0 * float(np.var(speeds)), 1e-3)
    headings = np.arctan2(dy, dx)
    turns = np.diff(headings)
    turns = (turns + math.pi) % (2.0 * math.pi) - math.pi
    mean_gap = float(np.mean(dts))
    sigmaB2_0 = max(float(np.var(turns)) / mean_gap, 1e-4)
    if obs.n_obs >= 3:
        xy = np.column_stack([obs.xs, obs.ys])
        resid = xy[1:-1] - 0.5 * (xy[:-2] + xy[2:])
        sigmaE2_0 = max(float(np.mean(resid**2)) / 1.5, 1e-2)
    else:
        sigmaE2_0 = 25.0
    return ModelParams(
        sigmaB2=sigmaB2_0, mu=mu0, lam=lam0, sigmaS2=sigmaS2_0, sigmaE2=sigmaE2_0
    )


# proposal-scale adaptation (burn-in only): batch size and target window
TUNE_BATCH = 100
TUNE_TARGET = 0.3


def run_chain(
    obs: ObservationSet,
    config: SamplerConfig,
    initial_params: ModelParams | None = None,
):
    """Run one Metropolis-within-Gibbs chain.

    Returns (samples, diagnostics). Fully deterministic given the seed.
    Path warm-up section updates run before the first parameter update (see
    SamplerConfig.path_warmup_updates) and are included in the section
    counters. Proposal scales optionally adapt during burn-in in batches of
    100 sweeps, then freeze, so the post-burn-in kernel is fixed.
    """
    rng = np.random.default_rng(config.seed)
    path = init_path_from_obs(obs, config.dt)
    params = initial_params or estimate_initial_params(obs, config.dt)
    if not params.all_positive():
        raise ValueError("inference requires strictly positive parameters")
    state = ChainState(params=params, path=path, locs=reconstruct_locations(path))

    scales = (
        config.proposal_scales.copy()
        if config.proposal_scales is not None
        else 0.1 * params.as_array()
    )

    samples: list[PosteriorSample] = []
    n_param_acc = 0
    n_sec_acc = 0
    n_sec = 0
    violations = 0
    batch_acc = 0

    warmup = config.path_warmup_updates
    if warmup is None:
        warmup = 10 * path.n_steps
    for _ in range(warmup):
        accepted, violated = section_update(state, obs, config, rng)
        n_sec += 1
        n_sec_acc += accepted
        violations += violated

    total = config.burn_in + config.n_iterations
    for it in range(total):
        acc = param_update(state, obs, config, rng, scales=scales)
        n_param_acc += acc
        batch_acc += acc
        if (
            config.tune_proposals
            and it < config.burn_in
            and (it + 1) % TUNE_BATCH == 0
        ):
            rate = batch_acc / TUNE_BATCH
            scales *= math.exp(np.clip(rate - TUNE_TARGET, -0.5, 0.5))
            batch_acc = 0

        for _ in range(config.path_updates_per_param_update):
            accepted, violated = section_update(state, obs, config, rng)
            n_sec += 1
            n_sec_acc += accepted
            violations += violated

        post = it - config.burn_in
        if post >= 0 and post % config.thin == 0:
            idx = post // config.thin
            snap = None
            if (
                config.keep_path_snapshots
                and config.path_snapshot_stride > 0
                and idx % config.path_snapshot_stride == 0
            ):
                snap = state.path.copy()
            samples.append(PosteriorSample(iteration=it, params=state.params, path=snap))

    n_param = max(total, 1)
    summary = {}
    if samples:
        mat = np.array([s.params.as_array() for s in samples])
        for j, name in enumerate(PARAM_NAMES):
            col = mat[:, j]
            summary[name] = {
                "mean": float(np.mean(col)),
                "sd": float(np.std(col, ddof=1)) if len(col) > 1 else 0.0,
                "min": float(np.min(col)),
                "max": float(np.max(col)),
            }
    diags = ChainDiagnostics(
        param_accept_rate=n_param_acc / n_param,
        section_accept_rate=(n_sec_acc / n_sec) if n_sec else 0.0,
        n_param_updates=total,
        n_section_updates=n_sec,
        constraint_violations=violations,
        proposal_scales=scales,
        trace_summary=summary,
    )
    return samples, diags


def credible_intervals(samples, level: float):
    """Equal-tailed empirical credible intervals per parameter.

    ``samples`` is a sequence of PosteriorSample or a (k, 5) array. Returns
    a dict name -> (lo, hi) using linear-interpolation quantiles.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    if isinstance(samples, np.ndarray):
        mat = samples
    else:
        mat = np.array([s.params.as_array() for s in samples])
    a = (1.0 - level) / 2.0
    lo = np.quantile(mat, a, axis=0)
    hi = np.quantile(mat, 1.0 - a, axis=0)
    return {name: (float(lo[j]), float(hi[j])) for j, name in enumerate(PARAM_NAMES)}

"""Binding between a refined path and its observations.

Section bookkeeping for blockwise path updates: which fine-grid edges move,
which observations are affected, the Gaussian prior laws of the moving
bearings and steps given the frozen boundary, and the linear design that
makes observed locations linear in the moving steps.

Indexing convention: edge j (0-based) connects grid node j to node j+1, and
carries bearing[j] and step[j]. A section freezes edges ``lo`` and ``hi``
and updates the interior edges lo+1 .. hi-1. The sentinel lo = -1 marks a
section touching the path start (no frozen left edge; the origin node is
fixed), and hi = n_steps marks one touching the path end (no frozen right
edge and no right location constraint).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import (
    GaussianSpec,
    LinearObservationModel,
    brownian_bridge,
    condition_on_exact,
    condition_on_noisy,
    mvn_logpdf,
    ou_bridge,
)
from .model import (
    ModelParams,
    ObservationSet,
    RefinedPath,
    initial_step_variance,
    reconstruct_locations,
    step_transition_moments,
)


@dataclass(frozen=True)
class Section:
    """A contiguous block of fine-grid edges chosen for joint update."""

    lo: int
    hi: int

    def __post_init__(self):
        if self.hi - self.lo - 1 < 1:
            raise ValueError("section has no interior edges")

    @property
    def n_interior(self) -> int:
        return self.hi - self.lo - 1

    @property
    def interior(self) -> slice:
        return slice(self.lo + 1, self.hi)


def choose_section(
    n_steps: int, len_min: int, len_max: int, rng: np.random.Generator
) -> Section:
    """Draw a section uniformly: interior length uniform on [len_min, len_max],
    start uniform over all feasible placements (boundary placements included).
    """
    len_max = min(len_max, n_steps - 1)
    len_min = min(len_min, len_max)
    u = rng.random(2)
    L = len_min + int(u[0] * (len_max - len_min + 1))
    a = int(u[1] * (n_steps - L + 1))  # first interior edge
    return Section(lo=a - 1, hi=a + L)


def interior_observations(obs: ObservationSet, section: Section, n_steps: int) -> np.ndarray:
    """Indices of observations whose node moves when the section is updated.

    Moving nodes are lo+2 .. hi-1 for constrained sections and lo+2 .. n for
    sections touching the path end.
    """
    first_node = section.lo + 2
    last_node = section.hi - 1 if section.hi <= n_steps - 1 else n_steps
    lo_i = int(np.searchsorted(obs.grid_index, first_node, side="left"))
    hi_i = int(np.searchsorted(obs.grid_index, last_node, side="right"))
    return np.arange(lo_i, hi_i)


def bearing_prior_law(path: RefinedPath, section: Section, params: ModelParams) -> GaussianSpec:
    """Law of the interior bearings given the frozen boundary bearings.

    Interior sections use a Brownian bridge between the frozen endpoint
    bearings; boundary sections use the free Brownian chain conditioned on
    the single frozen side (time-reversed at the path start).
    """
    n = path.n_steps
    L = section.n_interior
    vb = params.sigmaB2 * path.dt
    if section.lo >= 0 and section.hi <= n - 1:
        return brownian_bridge(
            path.bearings[section.lo], path.bearings[section.hi], L, params.sigmaB2, path.dt
        )
    if section.lo < 0 and section.hi <= n - 1:
        # reversed Brownian chain pinned at the frozen right edge
        theta_hi = path.bearings[section.hi]
        i = np.arange(L)
        cov = vb * (section.hi - np.maximum.outer(i, i))
        return GaussianSpec(mean=np.full(L, theta_hi), cov=cov.astype(float))
    if section.lo >= 0 and section.hi >= n:
        # free forward chain from the frozen left edge
        theta_lo = path.bearings[section.lo]
        k = np.arange(1, L + 1)
        cov = vb * np.minimum.outer(k, k)
        return GaussianSpec(mean=np.full(L, theta_lo), cov=cov.astype(float))
    raise ValueError("section spans the entire path; no frozen edge to condition on")


def _ar1_forward_cov(offsets: np.ndarray, v0: float, phi: float, s: float) -> np.ndarray:
    """Covariance of a nu-chain at the given offsets from a start with
    variance v0; Var at offset k is s + phi^{2k} (v0 - s)."""
    var = s + phi ** (2.0 * offsets) * (v0 - s)
    lo = np.minimum.outer(offsets, offsets)
    gap = np.abs(np.subtract.outer(offsets, offsets))
    var_lo = s + phi ** (2.0 * lo) * (v0 - s)
    return phi ** gap * var_lo


def step_prior_law(
    path: RefinedPath,
    section: Section,
    params: ModelParams,
    init_step_convention: str = "legacy",
) -> GaussianSpec:
    """Law of the interior steps given the frozen boundary steps.

    Interior sections use the stationary AR(1) (OU) bridge between the
    frozen endpoint steps. A start section runs the chain from the initial
    step law conditioned on the frozen right edge; an end section runs the
    free chain forward from the frozen left edge.
    """
    n = path.n_steps
    L = section.n_interior
    dt = path.dt
    m0, phi, _ = step_transition_moments(params, dt)
    s = dt * dt * params.sigmaS2 / (2.0 * params.lam)
    if section.lo >= 0 and section.hi <= n - 1:
        return ou_bridge(
            path.steps[section.lo], path.steps[section.hi], L, params, dt
        )
    if section.lo < 0 and section.hi <= n - 1:
        v0 = initial_step_variance(params, dt, init_step_convention)
        offsets = np.arange(L + 1, dtype=float)  # edges 0..hi, offset L is frozen
        cov_full = _ar1_forward_cov(offsets, v0, phi, s)
        var_end = cov_full[L, L]
        gain = cov_full[:L, L] / var_end
        mean = m0 + gain * (path.steps[section.hi] - m0)
        cov = cov_full[:L, :L] - np.outer(gain, cov_full[L, :L])
        return GaussianSpec(mean=mean, cov=0.5 * (cov + cov.T))
    if section.lo >= 0 and section.hi >= n:
        offsets = np.arange(1, L + 1, dtype=float)
        cov = _ar1_forward_cov(offsets, 0.0, phi, s)
        mean = m0 + phi ** offsets * (path.steps[section.lo] - m0)
        return GaussianSpec(mean=mean, cov=cov)
    raise ValueError("section spans the entire path; no frozen edge to condition on")


def design_for_section(
    path: RefinedPath,
    obs: ObservationSet,
    section: Section,
    params: ModelParams,
    bearings: np.ndarray | None = None,
    locs: np.ndarray | None = None,
):
    """Linear structure of the section's constraints and observations.

    Returns (B, d, model, z): the exact endpoint-location constraint
    B nu_interior = d (two rows; zero rows for a section touching the path
    end, whose right side is unconstrained), and the noisy observation model
    for interior observations with the observed coordinates z interleaved as
    (x_1, y_1, x_2, y_2, ...). Row coefficients depend only on the interior
    bearings, which may be overridden with a proposal.

    The left frozen location is node lo+1, which already includes the
    contribution of frozen edge lo, so no fixed-step correction appears in d.
    """
    n = path.n_steps
    L = section.n_interior
    if bearings is None:
        bearings = path.bearings[section.interior]
    if locs is None:
        locs = reconstruct_locations(path)
    cos = np.cos(bearings)
    sin = np.sin(bearings)
    left = locs[section.lo + 1]

    if section.hi <= n - 1:
        B = np.vstack([cos, sin])
        d = locs[section.hi] - left
    else:
        B = np.zeros((0, L))
        d = np.zeros(0)

    obs_idx = interior_observations(obs, section, n)
    k = len(obs_idx)
    A = np.zeros((2 * k, L))
    offset = np.empty(2 * k)
    z = np.empty(2 * k)
    for r, oi in enumerate(obs_idx):
        upto = obs.grid_index[oi] - (section.lo + 1)  # edges lo+1 .. g-1
        A[2 * r, :upto] = cos[:upto]
        A[2 * r + 1, :upto] = sin[:upto]
        offset[2 * r] = left[0]
        offset[2 * r + 1] = left[1]
        z[2 * r] = obs.xs[oi]
        z[2 * r + 1] = obs.ys[oi]
    model = LinearObservationModel(
        design=A, offset=offset, noise_var=np.full(2 * k, params.sigmaE2)
    )
    return B, d, model, z


@dataclass
class SectionProposalLaw:
    """Gaussian pieces of one section proposal.

    ``step_law`` is the interior-step law after conditioning the step prior
    on the exact endpoint constraint and the noisy interior observations
    (rank-deficient when the exact constraint binds); it is None when only
    the observation marginal was requested. ``obs_marginal`` is
    the law of the interior observation vector given the bearings, i.e. the
    step law after the exact constraint only, pushed through the
    observation design with error variance added. None when the section has
    no interior observations. ``constraint_logpdf`` is the log-density of
    the frozen endpoint displacement d under the unconstrained step prior,
    log N(d; B m, B S B'); zero for sections touching the path end, which
    carry no displacement constraint. The acceptance ratio compares
    constraint_logpdf plus the observation marginal density, new versus
    current: both are data terms conditioned on the bearings, so together
    they form the bearing-marginal likelihood of everything the section
    must explain.
    """

    step_law: GaussianSpec | None
    obs_marginal: GaussianSpec | None
    z: np.ndarray
    constraint_logpdf: float


def section_step_proposal(
    path: RefinedPath,
    obs: ObservationSet,
    params: ModelParams,
    section: Section,
    bearings: np.ndarray,
    locs: np.ndarray | None = None,
    init_step_convention: str = "legacy",
    want_step_law: bool = True,
    step_prior: GaussianSpec | None = None,
) -> SectionProposalLaw:
    """Assemble the step proposal law and observation marginal for a section.

    Pass want_step_law=False when only the observation marginal is needed
    (evaluating the acceptance ratio at the current bearings), and
    ``step_prior`` to reuse an already-built interior-step prior.
    """
    B, d, model, z = design_for_section(path, obs, section, params, bearings, locs)
    prior = step_prior if step_prior is not None else step_prior_law(
        path, section, params, init_step_convention
    )
    if B.shape[0]:
        constrained = condition_on_exact(prior, B, d)
        constraint_logpdf = mvn_logpdf(d, B @ prior.mean, B @ prior.cov @ B.T)
    else:
        constrained = prior
        constraint_logpdf = 0.0

    if model.n_rows:
        A = model.design
        marg_mean = A @ constrained.mean + model.offset
        marg_cov = A @ constrained.cov @ A.T
        marg_cov.flat[:: marg_cov.shape[0] + 1] += model.noise_var
        obs_marginal = GaussianSpec(mean=marg_mean, cov=marg_cov)
        step_law = condition_on_noisy(constrained, model, z) if want_step_law else None
    else:
        obs_marginal = None
        step_law = constrained
    return SectionProposalLaw(
        step_law=step_law,
        obs_marginal=obs_marginal,
        z=z,
        constraint_logpdf=constraint_logpdf,
    )


def init_path_from_obs(obs: ObservationSet, dt: float) -> RefinedPath:
    """Piecewise-linear starting path through the observed locations.

    Each observation gap is split evenly into its fine-grid edges, with the
    segment direction as bearing (unwrapped so successive differences lie in
    (-pi, pi]) and the segment length split evenly over the steps. A
    zero-length segment carries the previous bearing forward with zero
    steps.
    """
    n = int(obs.grid_index[-1])
    bearings = np.empty(n)
    steps = np.empty(n)
    prev_bearing = 0.0
    for i in range(obs.n_obs - 1):
        a, b = obs.grid_index[i], obs.grid_index[i + 1]
        dx = obs.xs[i + 1] - obs.xs[i]
        dy = obs.ys[i + 1] - obs.ys[i]
        dist = math.hypot(dx, dy)
        if dist == 0.0:
            bearing = prev_bearing
        else:
            raw = math.atan2(dy, dx)
            # unwrap onto the branch nearest the previous bearing
            bearing = raw + 2.0 * math.pi * round((prev_bearing - raw) / (2.0 * math.pi))
        gap = b - a
        bearings[a:b] = bearing
        steps[a:b] = dist / gap
        prev_bearing = bearing
    origin = np.array([obs.xs[0], obs.ys[0]])
    return RefinedPath(origin=origin, dt=dt, bearings=bearings, steps=steps)

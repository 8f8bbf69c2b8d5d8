"""Continuous-time step-and-turn movement model.

Movement is described by an unwrapped bearing process following Brownian
motion with volatility ``sigmaB2`` and a speed process following a 1-D
Ornstein-Uhlenbeck (OU) diffusion with long-run mean ``mu``, reversion rate
``lambda`` and volatility ``sigmaS2``. On a fine time grid of spacing ``dt``
the path is stored as bearings ``theta_1..theta_n`` and steps
``nu_i = psi_i * dt``. Observed locations carry circular bivariate Normal
error with variance ``sigmaE2`` per coordinate.

All transition kernels here are exact Gaussian discretizations, so chaining
two half-steps reproduces one full step to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianSpec

LOG_TWO_PI = math.log(2.0 * math.pi)

# Conventions for the variance of the initial step nu_1. "legacy" is the
# printed formula dt^2*sigmaS2/lambda; "stationary" is the OU stationary
# variance dt^2*sigmaS2/(2*lambda). They differ by a factor of two; the
# legacy form is the default.
INIT_STEP_VARIANCE_CONVENTIONS = ("legacy", "stationary")


@dataclass(frozen=True)
class ModelParams:
    """The five scalar movement and error parameters.

    Units: sigmaB2 in rad^2/min, mu in m/min, lam in 1/min,
    sigmaS2 in m^2/min^3, sigmaE2 in m^2.

    mu and lam must be strictly positive. The three variances admit zero so
    that degenerate simulation cases (noise-free observation, frozen
    bearing) can be expressed; inference requires all five strictly
    positive and enforces that at ingestion.
    """

    sigmaB2: float
    mu: float
    lam: float
    sigmaS2: float
    sigmaE2: float

    def __post_init__(self):
        vals = (self.sigmaB2, self.mu, self.lam, self.sigmaS2, self.sigmaE2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"non-finite parameter in {vals}")
        if self.mu <= 0 or self.lam <= 0:
            raise ValueError("mu and lam must be strictly positive")
        if self.sigmaB2 < 0 or self.sigmaS2 < 0 or self.sigmaE2 < 0:
            raise ValueError("variance parameters must be non-negative")

    def all_positive(self) -> bool:
        return min(self.sigmaB2, self.mu, self.lam, self.sigmaS2, self.sigmaE2) > 0

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.sigmaB2, self.mu, self.lam, self.sigmaS2, self.sigmaE2]
        )

    @staticmethod
    def from_array(a) -> "ModelParams":
        return ModelParams(*(float(v) for v in a))


PARAM_NAMES = ("sigmaB2", "mu", "lambda", "sigmaS2", "sigmaE2")


@dataclass
class RefinedPath:
    """Fine-grid path: an anchor location plus aligned bearings and steps.

    ``bearings`` are unwrapped real angles (not reduced mod 2*pi); ``steps``
    are signed distances in metres. Step ``j`` (0-based) moves node ``j`` to
    node ``j+1``; node 0 is ``origin``.
    """

    origin: np.ndarray  # shape (2,)
    dt: float
    bearings: np.ndarray  # shape (n,)
    steps: np.ndarray  # shape (n,)

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float)
        self.bearings = np.asarray(self.bearings, dtype=float)
        self.steps = np.asarray(self.steps, dtype=float)
        if self.origin.shape != (2,):
            raise ValueError("origin must be a 2-vector")
        if self.bearings.shape != self.steps.shape or self.bearings.ndim != 1:
            raise ValueError("bearings and steps must be 1-D of equal length")
        if len(self.bearings) < 1:
            raise ValueError("path must contain at least one step")
        if not self.dt > 0:
            raise ValueError("dt must be positive")

    @property
    def n_steps(self) -> int:
        return len(self.bearings)

    def copy(self) -> "RefinedPath":
        return RefinedPath(
            self.origin.copy(), self.dt, self.bearings.copy(), self.steps.copy()
        )


@dataclass(frozen=True)
class ObservationSet:
    """Observed 2-D locations at times lying on the refined grid.

    ``grid_index[i]`` is the refined-grid node coinciding with observation
    time ``times[i]``; node 0 is the path origin at ``times[0]``.
    """

    times: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    grid_index: np.ndarray

    def __post_init__(self):
        for name in ("times", "xs", "ys"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        object.__setattr__(self, "grid_index", np.asarray(self.grid_index, dtype=int))
        m = len(self.times)
        if m < 2:
            raise ValueError("need at least two observations")
        if not (len(self.xs) == len(self.ys) == len(self.grid_index) == m):
            raise ValueError("observation arrays must have equal length")
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("observation times must be strictly increasing")
        if np.any(np.diff(self.grid_index) <= 0):
            raise ValueError("grid indices must be strictly increasing")

    @property
    def n_obs(self) -> int:
        return len(self.times)


# Relative tolerance for snapping observation times onto the refined grid.
GRID_SNAP_RTOL = 1e-6


def snap_observations(times, xs, ys, dt: float) -> ObservationSet:
    """Map observation times onto the refined grid of spacing dt.

    The grid starts at the first observation time. A time is accepted onto
    node k when |t - t_1 - k*dt| <= 1e-6*dt; otherwise a ValueError listing
    the offending rows is raised.
    """
    times = np.asarray(times, dtype=float)
    if len(times) < 2:
        raise ValueError("need at least two observations")
    rel = (times - times[0]) / dt
    idx = np.rint(rel).astype(int)
    bad = np.nonzero(np.abs(rel - idx) > GRID_SNAP_RTOL)[0]
    if bad.size:
        rows = ", ".join(str(i) for i in bad[:10])
        raise ValueError(
            f"observation times do not lie on the dt={dt} grid at rows: {rows}"
        )
    return ObservationSet(times=times, xs=xs, ys=ys, grid_index=idx)


def bearing_transition(theta_prev: float, params: ModelParams, dt: float) -> GaussianSpec:
    """One-step bearing kernel: N(theta_prev, sigmaB2*dt)."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return GaussianSpec(
        mean=np.array([theta_prev], dtype=float),
        cov=np.array([[params.sigmaB2 * dt]]),
    )


def _ou_coeffs(params: ModelParams, dt: float):
    """(phi, var) of the exact psi-space OU kernel over an increment dt."""
    phi = math.exp(-params.lam * dt)
    var = params.sigmaS2 / (2.0 * params.lam) * (1.0 - phi * phi)
    return phi, var


def speed_transition(psi_prev: float, params: ModelParams, dt: float) -> GaussianSpec:
    """Exact OU speed kernel.

    N(mu + e^{-lam*dt}(psi_prev - mu), sigmaS2/(2 lam)(1 - e^{-2 lam dt})).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    phi, var = _ou_coeffs(params, dt)
    mean = params.mu + phi * (psi_prev - params.mu)
    return GaussianSpec(mean=np.array([mean]), cov=np.array([[var]]))


def step_transition_moments(params: ModelParams, dt: float):
    """(long-run mean, AR coefficient, innovation variance) of the nu chain.

    nu_i | nu_{i-1} ~ N(dt*mu + phi*(nu_{i-1} - dt*mu), dt^2 * var_psi); this
    is the psi-space OU kernel pushed through nu = psi*dt, Jacobian included.
    """
    phi, var = _ou_coeffs(params, dt)
    return dt * params.mu, phi, dt * dt * var


class InitialBearingDistribution:
    """Uniform initial bearing on the circle, represented on [-pi, pi).

    The density is constant, 1/(2*pi); it is evaluated on the circle, so any
    unwrapped real representative gets the same log-density. This keeps the
    refined-path likelihood well defined when section updates shift the
    first bearing outside [-pi, pi).
    """

    LOG_DENSITY = -math.log(2.0 * math.pi)

    def density(self, theta: float) -> float:
        return 1.0 / (2.0 * math.pi)

    def log_density(self, theta: float) -> float:
        return self.LOG_DENSITY

    def sample(self, rng: np.random.Generator, size=None):
        return rng.uniform(-math.pi, math.pi, size=size)


def initial_bearing_dist() -> InitialBearingDistribution:
    return InitialBearingDistribution()


def initial_step_variance(params: ModelParams, dt: float, convention: str = "legacy") -> float:
    if convention == "legacy":
        return dt * dt * params.sigmaS2 / params.lam
    if convention == "stationary":
        return dt * dt * params.sigmaS2 / (2.0 * params.lam)
    raise ValueError(f"unknown initial-step variance convention {convention!r}")


def initial_step_dist(params: ModelParams, dt: float, convention: str = "legacy") -> GaussianSpec:
    """Law of the first step: N(dt*mu, dt^2*sigmaS2/lam) by default.

    The default variance is twice the OU stationary variance; pass
    convention="stationary" for dt^2*sigmaS2/(2*lam).
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    var = initial_step_variance(params, dt, convention)
    return GaussianSpec(mean=np.array([dt * params.mu]), cov=np.array([[var]]))


def simulate_path(
    params: ModelParams,
    n_steps: int,
    dt: float,
    origin,
    rng: np.random.Generator,
    init_step_convention: str = "legacy",
) -> RefinedPath:
    """Forward-simulate a refined path of n_steps fine-grid increments.

    theta_1 is uniform on the circle, nu_1 follows initial_step_dist, and
    subsequent values follow the exact transition kernels. The speed chain
    is simulated in psi-space and stored as steps nu = psi*dt.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    if not dt > 0:
        raise ValueError("dt must be positive")

    bearings = np.empty(n_steps)
    steps = np.empty(n_steps)

    bearings[0] = initial_bearing_dist().sample(rng)
    steps[0] = dt * params.mu + math.sqrt(
        initial_step_variance(params, dt, init_step_convention)
    ) * rng.standard_normal()

    if n_steps > 1:
        z = rng.standard_normal(size=(2, n_steps - 1))
        sd_b = math.sqrt(params.sigmaB2 * dt)
        bearings[1:] = bearings[0] + sd_b * np.cumsum(z[0])

        nu_mean, phi, nu_var = step_transition_moments(params, dt)
        sd_nu = math.sqrt(nu_var)
        nu = steps[0]
        for i in range(1, n_steps):
            nu = nu_mean + phi * (nu - nu_mean) + sd_nu * z[1, i - 1]
            steps[i] = nu

    return RefinedPath(np.asarray(origin, dtype=float), dt, bearings, steps)


def _gauss_logpdf(x, mean, var):
    return -0.5 * (LOG_TWO_PI + np.log(var) + (x - mean) ** 2 / var)


def path_log_likelihood(
    path: RefinedPath, params: ModelParams, init_step_convention: str = "legacy"
) -> float:
    """Log-likelihood of the refined path under the movement model.

    log pi(theta_1) + log pi(nu_1) + sum_{i>=2} [log pi(theta_i|theta_{i-1})
    + log pi(nu_i|nu_{i-1})], with step transitions in nu-space (the dt
    Jacobian of nu = psi*dt is kept, so the value is an absolute
    log-density, not just an MH-ratio kernel).
    """
    dt = path.dt
    total = initial_bearing_dist().log_density(path.bearings[0])
    v1 = initial_step_variance(params, dt, init_step_convention)
    total += float(_gauss_logpdf(path.steps[0], dt * params.mu, v1))

    if path.n_steps > 1:
        vb = params.sigmaB2 * dt
        total += float(
            np.sum(_gauss_logpdf(path.bearings[1:], path.bearings[:-1], vb))
        )
        nu_mean, phi, nu_var = step_transition_moments(params, dt)
        means = nu_mean + phi * (path.steps[:-1] - nu_mean)
        total += float(np.sum(_gauss_logpdf(path.steps[1:], means, nu_var)))
    return total


def reconstruct_locations(path: RefinedPath) -> np.ndarray:
    """Locations of all n+1 grid nodes, origin included, shape (n+1, 2)."""
    out = np.empty((path.n_steps + 1, 2))
    out[0] = path.origin
    np.cumsum(path.steps * np.cos(path.bearings), out=out[1:, 0])
    np.cumsum(path.steps * np.sin(path.bearings), out=out[1:, 1])
    out[1:] += path.origin
    return out


def error_log_likelihood(
    path: RefinedPath, obs: ObservationSet, params: ModelParams
) -> float:
    """Log-likelihood of the observations given the path as truth.

    Independent N(0, sigmaE2) error on each coordinate of each observation,
    evaluated at the reconstructed node locations.
    """
    if obs.grid_index[-1] > path.n_steps:
        raise IndexError("observation grid index beyond path length")
    if not params.sigmaE2 > 0:
        raise ValueError("error_log_likelihood requires sigmaE2 > 0")
    locs = reconstruct_locations(path)[obs.grid_index]
    rx = obs.xs - locs[:, 0]
    ry = obs.ys - locs[:, 1]
    m = obs.n_obs
    return float(
        -m * (LOG_TWO_PI + math.log(params.sigmaE2))
        - 0.5 * (rx @ rx + ry @ ry) / params.sigmaE2
    )


def joint_log_likelihood(
    path: RefinedPath,
    obs: ObservationSet,
    params: ModelParams,
    init_step_convention: str = "legacy",
) -> float:
    """Joint log-likelihood of observations and refined path given params."""
    return path_log_likelihood(path, params, init_step_convention) + error_log_likelihood(
        path, obs, params
    )

"""Dense multivariate Gaussian machinery.

Joint laws of the bearing and step chains, bridge constructions,
conditioning on exact linear constraints and on noisy linear observations,
and sampling from possibly rank-deficient covariances via spectral
factorization. Dimensions here are small (section updates touch at most a
few dozen coordinates), so everything is dense.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

LOG_TWO_PI = math.log(2.0 * math.pi)

# Singular values below RANK_RTOL times the largest are treated as zero.
RANK_RTOL = 1e-10

# Mahalanobis-orthogonal residual beyond which a point is off-support.
OFF_SUPPORT_TOL = 1e-6


class DegenerateConstraintError(np.linalg.LinAlgError):
    """Raised when an exact linear constraint is infeasible or degenerate."""


@dataclass
class GaussianSpec:
    """A multivariate Normal given by mean vector and covariance matrix.

    The covariance may be rank-deficient (supported on an affine subspace);
    ``rank`` is the number of spectral eigenvalues above the relative
    threshold RANK_RTOL.
    """

    mean: np.ndarray
    cov: np.ndarray
    _factor: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not (isinstance(self.mean, np.ndarray) and self.mean.ndim == 1 and self.mean.dtype == float):
            self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        if not (isinstance(self.cov, np.ndarray) and self.cov.ndim == 2 and self.cov.dtype == float):
            self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        n = len(self.mean)
        if self.cov.shape != (n, n):
            raise ValueError(f"covariance shape {self.cov.shape} != ({n}, {n})")

    @property
    def dim(self) -> int:
        return len(self.mean)

    def spectral(self):
        """Eigenvalues (ascending, clipped at zero) and eigenvectors.

        Tiny negative eigenvalues from round-off are clipped to zero before
        any sampling or density evaluation.
        """
        if self._factor is None:
            w, v = np.linalg.eigh(0.5 * (self.cov + self.cov.T))
            np.clip(w, 0.0, None, out=w)
            self._factor = (w, v)
        return self._factor

    @property
    def rank(self) -> int:
        w, _ = self.spectral()
        if w[-1] <= 0.0:
            return 0
        return int(np.count_nonzero(w > RANK_RTOL * w[-1]))

    def validate(self, rtol: float = 1e-10) -> None:
        scale = np.abs(self.cov).max() or 1.0
        if np.abs(self.cov - self.cov.T).max() > rtol * scale:
            raise ValueError("covariance not symmetric")
        w, _ = self.spectral()
        if not np.all(np.isfinite(w)) or not np.all(np.isfinite(self.mean)):
            raise ValueError("non-finite Gaussian spec")


@dataclass(frozen=True)
class LinearObservationModel:
    """Noisy linear observations z = A x + c + e, e ~ N(0, diag(noise_var)).

    Zero rows are allowed and mean "no observations".
    """

    design: np.ndarray
    offset: np.ndarray
    noise_var: np.ndarray

    def __post_init__(self):
        if not (isinstance(self.design, np.ndarray) and self.design.ndim == 2):
            object.__setattr__(self, "design", np.atleast_2d(np.asarray(self.design, dtype=float)))
        if not isinstance(self.offset, np.ndarray):
            object.__setattr__(self, "offset", np.atleast_1d(np.asarray(self.offset, dtype=float)))
        if not isinstance(self.noise_var, np.ndarray):
            object.__setattr__(self, "noise_var", np.atleast_1d(np.asarray(self.noise_var, dtype=float)))
        r = self.design.shape[0]
        if len(self.offset) != r or len(self.noise_var) != r:
            raise ValueError("offset/noise_var length must match design rows")
        if r and self.noise_var.min() <= 0:
            raise ValueError("noise variances must be strictly positive")

    @property
    def n_rows(self) -> int:
        return self.design.shape[0]


def brownian_bridge_template(n_interior: int) -> np.ndarray:
    """Unit-increment bridge covariance: C(i, j) = i*(N - j)/N for i <= j,
    N = n_interior + 1. The bridge covariance for increment variance v is
    v * C."""
    N = n_interior + 1
    i = np.arange(1, N, dtype=float)
    lo = np.minimum.outer(i, i)
    hi = np.maximum.outer(i, i)
    return lo * (N - hi) / N


def brownian_bridge(
    theta_a: float, theta_b: float, n_interior: int, sigmaB2: float, dt: float
) -> GaussianSpec:
    """Joint law of the interior bearings of a Brownian bridge.

    The bridge runs over n_interior + 1 increments of variance sigmaB2*dt
    between fixed endpoint values theta_a and theta_b. Interior point i
    (1-based) has mean theta_a + i/N * (theta_b - theta_a) with
    N = n_interior + 1, and cov(i, j) = sigmaB2*dt * i*(N - j)/N for i <= j.
    """
    if n_interior < 1:
        raise ValueError("n_interior must be >= 1")
    N = n_interior + 1
    i = np.arange(1, N, dtype=float)
    mean = theta_a + i / N * (theta_b - theta_a)
    cov = sigmaB2 * dt * brownian_bridge_template(n_interior)
    return GaussianSpec(mean=mean, cov=cov)


def stationary_ar1_cov(n: int, marginal_var: float, phi: float) -> np.ndarray:
    """Covariance of n consecutive values of a stationary AR(1) chain."""
    idx = np.arange(n)
    return marginal_var * phi ** np.abs(np.subtract.outer(idx, idx))


def ou_bridge_factors(n_interior: int, params, dt: float):
    """(long-run mean, endpoint gain, covariance) of the nu-space AR(1) bridge.

    The bridge mean is affine in the endpoint values:
    mean = m0 + gain @ (nu_a - m0, nu_b - m0); the covariance does not
    depend on them, so these factors can be cached per section length.
    """
    if n_interior < 1:
        raise ValueError("n_interior must be >= 1")
    phi = math.exp(-params.lam * dt)
    s = dt * dt * params.sigmaS2 / (2.0 * params.lam)
    m0 = dt * params.mu
    L = n_interior
    i = np.arange(1, L + 1, dtype=float)
    # cross-covariances of interior points with the two conditioned ends
    sig_io = s * np.column_stack([phi ** i, phi ** (L + 1 - i)])
    e = phi ** (L + 1)
    # gain = Sigma_io Sigma_oo^{-1} with Sigma_oo = s [[1, e], [e, 1]]
    det = s * (1.0 - e * e)
    gain = np.column_stack(
        [sig_io[:, 0] - e * sig_io[:, 1], sig_io[:, 1] - e * sig_io[:, 0]]
    ) / det
    cov = stationary_ar1_cov(L, s, phi) - gain @ sig_io.T
    return m0, gain, 0.5 * (cov + cov.T)


def ou_bridge(nu_a: float, nu_b: float, n_interior: int, params, dt: float) -> GaussianSpec:
    """Joint law of interior steps of the nu-space AR(1) chain given both ends.

    The free chain has long-run mean dt*mu, AR coefficient phi = e^{-lam*dt}
    and stationary variance dt^2*sigmaS2/(2*lam); the bridge is the
    conditional of the stationary joint given the values at positions 0 and
    n_interior + 1. The bridge is identical in psi-space and nu-space up to
    the fixed scalar dt, so fixing nu-space loses nothing.
    """
    m0, gain, cov = ou_bridge_factors(n_interior, params, dt)
    mean = m0 + gain @ np.array([nu_a - m0, nu_b - m0])
    return GaussianSpec(mean=mean, cov=cov)


def condition_on_noisy(
    prior: GaussianSpec, model: LinearObservationModel, z
) -> GaussianSpec:
    """Posterior of x given z = A x + c + e with independent Gaussian noise.

    mean = m + S A' (A S A' + D)^{-1} (z - A m - c);
    cov = S - S A' (A S A' + D)^{-1} A S, D = diag(noise_var).
    """
    if model.n_rows == 0:
        return prior
    z = np.atleast_1d(np.asarray(z, dtype=float))
    A = model.design
    r = model.n_rows
    if A.shape[1] != prior.dim or len(z) != r:
        raise ValueError("dimension mismatch in noisy conditioning")
    SAt = prior.cov @ A.T
    K = A @ SAt
    K.flat[:: r + 1] += model.noise_var
    innov = z - A @ prior.mean - model.offset
    if r == 2:
        a, b, c = K[0, 0], K[1, 1], K[0, 1]
        det = a * b - c * c
        if det <= 0.0:
            raise DegenerateConstraintError("observation covariance singular")
        gain = SAt @ np.array([[b, -c], [-c, a]])
        gain /= det
    else:
        try:
            gain = np.linalg.solve(K, SAt.T).T
        except np.linalg.LinAlgError as exc:
            raise DegenerateConstraintError("observation covariance singular") from exc
    mean = prior.mean + gain @ innov
    cov = prior.cov - gain @ SAt.T
    return GaussianSpec(mean=mean, cov=0.5 * (cov + cov.T))


def condition_on_exact(prior: GaussianSpec, B, d) -> GaussianSpec:
    """Condition on the exact linear constraint B x = d.

    The result is supported on the constraint subspace; its covariance is
    rank-deficient by row-rank(B). Raises DegenerateConstraintError when
    B S B' is singular beyond the rank tolerance (infeasible or degenerate
    constraint over the prior's support).
    """
    B = np.atleast_2d(np.asarray(B, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if B.shape[0] == 0:
        return prior
    if B.shape[1] != prior.dim or len(d) != B.shape[0]:
        raise ValueError("dimension mismatch in exact conditioning")
    SBt = prior.cov @ B.T
    K = B @ SBt
    K = 0.5 * (K + K.T)
    if K.shape[0] == 2:
        # closed-form eigenvalues of the 2x2 symmetric K
        a, b, c = K[0, 0], K[1, 1], K[0, 1]
        h = math.hypot(a - b, 2.0 * c)
        w_max = 0.5 * (a + b + h)
        w_min = 0.5 * (a + b - h)
    else:
        w = np.linalg.eigvalsh(K)
        w_min, w_max = w[0], w[-1]
    if w_max <= 0.0 or w_min <= RANK_RTOL * w_max:
        raise DegenerateConstraintError("constraint covariance B S B' is singular")
    innov = d - B @ prior.mean
    if K.shape[0] == 2:
        det = a * b - c * c
        gain = SBt @ np.array([[b, -c], [-c, a]])
        gain /= det
    else:
        gain = np.linalg.solve(K, SBt.T).T
    mean = prior.mean + gain @ innov
    cov = prior.cov - gain @ SBt.T
    return GaussianSpec(mean=mean, cov=0.5 * (cov + cov.T))


def sample_singular(spec: GaussianSpec, rng: np.random.Generator) -> np.ndarray:
    """Draw one sample, valid for rank-deficient covariances.

    Uses the spectral decomposition of the covariance (the singular value
    decomposition of a symmetric PSD matrix): x = mean + U_r sqrt(s_r) u
    with u ~ N(0, I_r) over the components above the rank threshold.
    """
    w, v = spec.spectral()
    if w[-1] <= 0.0:
        return spec.mean.copy()
    keep = w > RANK_RTOL * w[-1]
    u = rng.standard_normal(int(np.count_nonzero(keep)))
    return spec.mean + v[:, keep] @ (np.sqrt(w[keep]) * u)


def logpdf_degenerate(spec: GaussianSpec, x) -> float:
    """Log-density of x under spec, on the rank-r support.

    Uses pseudo-determinant and pseudo-inverse over the retained spectral
    components. Returns -inf when the residual orthogonal to the support
    exceeds OFF_SUPPORT_TOL * max(1, ||x - mean||).
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    w, v = spec.spectral()
    d = x - spec.mean
    coords = v.T @ d
    if w[-1] <= 0.0:
        keep = np.zeros(len(w), dtype=bool)
    else:
        keep = w > RANK_RTOL * w[-1]
    off = np.linalg.norm(coords[~keep])
    if off > OFF_SUPPORT_TOL * max(1.0, float(np.linalg.norm(d))):
        return -math.inf
    r = int(np.count_nonzero(keep))
    if r == 0:
        return 0.0
    wk = w[keep]
    quad = float(np.sum(coords[keep] ** 2 / wk))
    return -0.5 * (r * LOG_TWO_PI + float(np.sum(np.log(wk))) + quad)


def mvn_logpdf(x, mean, cov) -> float:
    """Dense full-rank Gaussian log-density via Cholesky (closed form for
    one- and two-dimensional inputs)."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    n = len(x)
    if n == 1:
        v = cov[0, 0]
        r = x[0] - mean[0]
        return -0.5 * (LOG_TWO_PI + math.log(v) + r * r / v)
    if n == 2:
        a, b, c = cov[0, 0], cov[1, 1], cov[0, 1]
        det = a * b - c * c
        r0 = x[0] - mean[0]
        r1 = x[1] - mean[1]
        quad = (b * r0 * r0 - 2.0 * c * r0 * r1 + a * r1 * r1) / det
        return -0.5 * (2.0 * LOG_TWO_PI + math.log(det) + quad)
    lower = np.linalg.cholesky(cov)
    d = np.linalg.solve(lower, x - mean)
    return float(
        -0.5 * (n * LOG_TWO_PI + d @ d) - np.sum(np.log(np.diag(lower)))
    )

"""Shared numerical kernels: seed streams, MVN machinery, regression draws.

Everything here is pure given an :class:`RngStream` value, so replicate
workers can call these functions concurrently without shared state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as _expit

# Relative tolerance on the smallest Cholesky pivot; catches config typos
# (e.g. zero variances) without rejecting the well-conditioned trial matrices.
_PIVOT_RTOL = 1e-10


class InvalidParameterError(ValueError):
    """A numeric parameter is outside its valid domain."""


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    """A covariance matrix failed its Cholesky factorization."""


@dataclass(frozen=True)
class RngStream:
    """Counter-style random stream descriptor.

    A stream is identified by ``(root_seed, path)``; identical descriptors
    reproduce identical draws and distinct paths give independent streams,
    so replicates can run in any order on any number of workers.
    """

    root_seed: int
    path: tuple[int, ...] = ()

    def child(self, *indices: int) -> "RngStream":
        return RngStream(self.root_seed, self.path + tuple(int(i) for i in indices))

    def generator(self) -> np.random.Generator:
        seq = np.random.SeedSequence(self.root_seed, spawn_key=self.path)
        return np.random.default_rng(seq)


def derive_seed(root_seed: int, *indices: int) -> int:
    """Collapse (root_seed, indices) into a single 64-bit seed."""
    seq = np.random.SeedSequence(root_seed, spawn_key=tuple(int(i) for i in indices))
    state = seq.generate_state(2, np.uint32)
    return int(state[0]) << 32 | int(state[1])


def expit(x):
    """Inverse logit, 1 / (1 + exp(-x))."""
    return _expit(x)


def spatial_power_cov(variances, visit_weeks, rho: float) -> np.ndarray:
    """Covariance with spatial-power correlation rho**(|t_i - t_j| / |t_1 - t_0|).

    The correlation at a lag of one unit (the gap between the first two
    visits) is exactly ``rho``; the diagonal equals ``variances``.
    """
    v = np.asarray(variances, dtype=float)
    t = np.asarray(visit_weeks, dtype=float)
    if v.ndim != 1 or t.shape != v.shape:
        raise InvalidParameterError("variances and visit_weeks must be equal-length vectors")
    if np.any(v <= 0):
        raise InvalidParameterError("variances must be strictly positive")
    if not 0 < rho < 1:
        raise InvalidParameterError(f"rho must be in (0, 1), got {rho}")
    if np.any(np.diff(t) <= 0):
        raise InvalidParameterError("visit_weeks must be strictly increasing")
    unit = t[1] - t[0]
    lags = np.abs(t[:, None] - t[None, :]) / unit
    sd = np.sqrt(v)
    return np.outer(sd, sd) * rho ** lags


def chol_pd(cov: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor, rejecting near-singular matrices."""
    cov = np.asarray(cov, dtype=float)
    try:
        L = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"covariance is not positive definite: {exc}") from exc
    pivots = np.diag(L) ** 2
    if pivots.min() <= _PIVOT_RTOL * np.diag(cov).max():
        raise NotPositiveDefiniteError(
            f"covariance is numerically singular (pivot ratio {pivots.min() / np.diag(cov).max():.3e})"
        )
    return L


def mvn_sample(mean, cov, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Draw from MVN(mean, cov); reproducible per stream.

    Returns shape ``(d,)`` when ``size`` is None, else ``(size, d)``.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if cov.shape != (mean.size, mean.size):
        raise InvalidParameterError("mean/cov dimension mismatch")
    L = chol_pd(cov)
    gen = rng.generator()
    if size is None:
        return mean + L @ gen.standard_normal(mean.size)
    z = gen.standard_normal((size, mean.size))
    return mean + z @ L.T


def mvn_condition(mean, cov, observed_idx, observed_values):
    """Gaussian conditional moments over the unobserved coordinates.

    Returns ``(missing_idx, cond_mean, cond_cov)`` where ``missing_idx`` is
    the sorted complement of ``observed_idx``.  Conditioning on nothing
    returns the inputs unchanged; conditioning on everything returns empty
    arrays.  The observed block is solved against, never inverted.
    """
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    obs = np.asarray(observed_idx, dtype=int)
    vals = np.asarray(observed_values, dtype=float)
    d = mean.size
    if obs.size != vals.size:
        raise InvalidParameterError("observed index/value length mismatch")
    if obs.size and (obs.min() < 0 or obs.max() >= d):
        raise InvalidParameterError("observed index out of range")
    if np.unique(obs).size != obs.size:
        raise InvalidParameterError("observed indices must be distinct")

    miss = np.setdiff1d(np.arange(d), obs)
    if obs.size == 0:
        return miss, mean.copy(), cov.copy()
    if miss.size == 0:
        return miss, np.empty(0), np.empty((0, 0))

    s_oo = cov[np.ix_(obs, obs)]
    s_mo = cov[np.ix_(miss, obs)]
    L = chol_pd(s_oo)
    # K = S_mo S_oo^{-1} via two triangular solves
    tmp = np.linalg.solve(L, s_mo.T)
    k = np.linalg.solve(L.T, tmp).T
    cond_mean = mean[miss] + k @ (vals - mean[obs])
    cond_cov = cov[np.ix_(miss, miss)] - k @ s_mo.T
    cond_cov = (cond_cov + cond_cov.T) / 2.0
    return miss, cond_mean, cond_cov


@dataclass(frozen=True)
class RegressionFit:
    """Least-squares summary carrying what a posterior draw needs."""

    coefficients: np.ndarray
    residual_variance: float
    scaled_inverse_gram: np.ndarray  # (X'X)^{-1}
    residual_df: int


def fit_ols(X: np.ndarray, y: np.ndarray) -> RegressionFit:
    """OLS fit with the (X'X)^{-1} factor kept for Bayesian draws."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    q, r = np.linalg.qr(X)
    rd = np.abs(np.diag(r))
    if rd.min() <= max(n, p) * np.finfo(float).eps * max(rd.max(), 1.0):
        raise np.linalg.LinAlgError("design matrix is rank deficient")
    coef = np.linalg.solve(r, q.T @ y)
    resid = y - X @ coef
    df = n - p
    if df < 1:
        raise InvalidParameterError(f"residual df {df} < 1 (n={n}, p={p})")
    s2 = float(resid @ resid) / df
    if s2 <= 1e-24 * max(1.0, float(y @ y) / n):  # exact fit up to roundoff
        s2 = 0.0
    rinv = np.linalg.solve(r, np.eye(p))
    xtx_inv = rinv @ rinv.T
    return RegressionFit(coef, s2, xtx_inv, df)


def bayes_lm_draw(fit: RegressionFit, rng: RngStream) -> tuple[np.ndarray, float]:
    """One posterior draw of (coefficients, residual variance).

    Standard noninformative-prior draw used by monotone regression
    imputation: sigma2* = df * s2 / chi2(df), beta* ~ N(beta_hat,
    sigma2* (X'X)^{-1}).  A zero residual variance short-circuits to the
    point estimates.
    """
    if fit.residual_df < 1:
        raise InvalidParameterError("cannot draw with residual_df < 1")
    gen = rng.generator()
    if fit.residual_variance <= 0.0:
        return fit.coefficients.copy(), 0.0
    sigma2 = fit.residual_df * fit.residual_variance / gen.chisquare(fit.residual_df)
    L = np.linalg.cholesky(
        sigma2 * fit.scaled_inverse_gram
        + np.eye(len(fit.coefficients)) * 1e-300
    )
    coef = fit.coefficients + L @ gen.standard_normal(len(fit.coefficients))
    return coef, float(sigma2)

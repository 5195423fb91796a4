"""Objective gradients computed from E-step statistics, plus a finite-difference oracle.

With C_j = sum_i h_ij (x_i - mu_j)(x_i - mu_j)^T = N_j (Sigma_j^EM - Sigma_j + d_j d_j^T) + N_j Sigma_j
and d_j = mu_j^EM - mu_j, the blocks are

    dL/da_j        = N_j / a_j
    grad_mu_j L    = Sigma_j^-1 (S1_j - N_j mu_j) = N_j Sigma_j^-1 d_j
    grad_Sigma_j L = 1/2 Sigma_j^-1 (C_j - N_j Sigma_j) Sigma_j^-1

so no extra pass over the data is needed. Covariances are stored as their
lower triangle, so off-diagonal entries of the matrix gradient are doubled
in the flat vector; the inner product with a flat direction is then the
exact directional derivative.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .em import EStepResult
from .model import (
    ConstraintViolation,
    Dataset,
    FlatVector,
    GmmParams,
    Layout,
    NumericError,
    Priors,
    objective,
    tril_indices,
    unpack,
)


def _alpha_block(params: GmmParams, stats: EStepResult, priors: Optional[Priors]) -> np.ndarray:
    g = stats.counts / params.weights
    if priors is not None:
        g = g + (priors.dirichlet_counts - 1.0) / params.weights
    return g


def omega_chain_rule(weights: np.ndarray, g_alpha: np.ndarray) -> np.ndarray:
    """dL/domega_j = a_j (dL/da_j - sum_k a_k dL/da_k)."""
    return weights * (g_alpha - weights @ g_alpha)


def project_alpha_gradient(g) -> np.ndarray:
    """Remove the mean so the weight step stays on the simplex."""
    g = np.asarray(g, dtype=float)
    return g - g.mean()


def _mean_and_cov_blocks(params: GmmParams, stats: EStepResult, priors: Optional[Priors]):
    mu = params.means
    counts = stats.counts
    resid = stats.sums - counts[:, None] * mu
    if params.mode == "diagonal":
        v = params.covariances
        if not np.all(v > 0):
            raise NumericError("non-positive variance in gradient evaluation")
        g_mu = resid / v
        scatter = stats.sq_sums - 2.0 * mu * stats.sums + counts[:, None] * mu**2
        g_cov = 0.5 * (scatter - counts[:, None] * v) / v**2
        if priors is not None and priors.variance_df > 0:
            df, s = priors.variance_df, priors.variance_scale
            g_cov = g_cov - (0.5 * df + 1.0) / v + 0.5 * df * s / v**2
        return g_mu, g_cov

    if priors is not None:
        raise ConstraintViolation("MAP gradients are defined for diagonal mode only")
    cov = params.covariances
    try:
        inv = np.linalg.inv(np.linalg.cholesky(cov))
    except np.linalg.LinAlgError:
        raise NumericError("singular covariance in gradient evaluation") from None
    prec = np.swapaxes(inv, 1, 2) @ inv
    g_mu = np.einsum("jab,jb->ja", prec, resid)
    scatter = (
        stats.sq_sums
        - stats.sums[:, :, None] * mu[:, None, :]
        - mu[:, :, None] * stats.sums[:, None, :]
        + counts[:, None, None] * mu[:, :, None] * mu[:, None, :]
    )
    G = 0.5 * prec @ (scatter - counts[:, None, None] * cov) @ prec
    rows, cols = tril_indices(params.d)
    g_cov = G[:, rows, cols] * np.where(rows == cols, 1.0, 2.0)
    return g_mu, g_cov


def gradient_from_em(
    params: GmmParams,
    stats: EStepResult,
    chart: str = "natural",
    priors: Optional[Priors] = None,
) -> FlatVector:
    """Gradient of the log-likelihood (or log-posterior) in ``chart``.

    The natural-chart weight block is the raw dL/da_j; use
    :func:`project_alpha_gradient` before stepping along it.
    """
    g_alpha = _alpha_block(params, stats, priors)
    if chart == "omega":
        g_alpha = omega_chain_rule(params.weights, g_alpha)
    g_mu, g_cov = _mean_and_cov_blocks(params, stats, priors)
    values = np.concatenate([g_alpha, g_mu.reshape(-1), g_cov.reshape(-1)])
    if not np.all(np.isfinite(values)):
        raise NumericError("non-finite gradient")
    return FlatVector(values, chart, params.layout)


def ascent_gradient(params: GmmParams, stats: EStepResult, chart: str, priors: Optional[Priors] = None) -> np.ndarray:
    """Gradient used by the optimizers: projected weight block in the natural chart."""
    g = gradient_from_em(params, stats, chart, priors).values
    if chart == "natural":
        g = g.copy()
        g[: params.M] = project_alpha_gradient(g[: params.M])
    return g


def finite_difference_gradient(f: Callable[[np.ndarray], float], v, step: float = 1e-6) -> np.ndarray:
    """Central differences with step ``step * max(1, |v_i|)`` per coordinate."""
    values = np.array(v.values if isinstance(v, FlatVector) else v, dtype=float).reshape(-1)
    grad = np.empty_like(values)
    for i in range(values.shape[0]):
        h = step * max(1.0, abs(values[i]))
        up = values.copy()
        dn = values.copy()
        up[i] += h
        dn[i] -= h
        try:
            fu, fd = f(up), f(dn)
        except (ArithmeticError, ValueError) as exc:
            raise NumericError(f"objective failed at probe of coordinate {i}: {exc}", index=i) from exc
        if not (np.isfinite(fu) and np.isfinite(fd)):
            raise NumericError(f"objective infeasible at probe of coordinate {i}", index=i)
        grad[i] = (fu - fd) / (up[i] - dn[i])
    if isinstance(v, FlatVector):
        return FlatVector(grad, v.chart, v.layout)
    return grad


def flat_objective(layout: Layout, chart: str, data: Dataset, priors: Optional[Priors] = None):
    """Objective as a function of the flat vector, without the simplex check."""

    def f(values: np.ndarray) -> float:
        return objective(unpack(values, layout, chart), data, priors, check=False)

    return f

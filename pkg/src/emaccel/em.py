"""E-step, M-steps (ML and MAP), EM direction and component pruning.

One call to :func:`e_step` is one pass over the data. It yields the
responsibilities, the expected sufficient statistics and the objective
value together, and everything downstream (M-step, EM direction, gradient)
is computed from that result without touching the data again.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .model import (
    ConstraintViolation,
    Dataset,
    FlatVector,
    GmmError,
    GmmParams,
    NumericError,
    Priors,
    _check_simplex,
    _cholesky_or_none,
    component_log_densities,
    log_prior,
    pack,
    row_logsumexp,
)

EMPTY_THRESHOLD = 1e-10
PRUNE_VARIANCE = 1e-100


class EmptyComponentError(GmmError):
    def __init__(self, component: int):
        super().__init__(f"component {component} received no responsibility")
        self.component = component


class SingularCovarianceError(GmmError):
    """M-step produced a covariance that is not positive definite.

    ``params`` holds the offending M-step result so a caller can repair it
    (see :func:`floor_covariances`).
    """

    def __init__(self, component: int, params: GmmParams):
        super().__init__(f"M-step covariance of component {component} is not positive definite")
        self.component = component
        self.params = params


class DegenerateModelError(GmmError):
    pass


@dataclass(frozen=True, eq=False)
class EStepResult:
    """Responsibilities and expected sufficient statistics from one data pass.

    ``sq_sums`` is (M, d, d) in full mode and (M, d) in diagonal mode.
    ``params`` are the parameters the pass was evaluated at.
    """

    responsibilities: np.ndarray
    counts: np.ndarray
    sums: np.ndarray
    sq_sums: np.ndarray
    log_likelihood: float
    objective: float
    params: GmmParams

    @property
    def N(self) -> int:
        return self.responsibilities.shape[0]

    @property
    def mode(self) -> str:
        return self.params.mode


def e_step(params: GmmParams, data: Dataset, priors: Optional[Priors] = None) -> EStepResult:
    _check_simplex(params.weights)
    logp = component_log_densities(params, data)
    lse = row_logsumexp(logp)
    bad = np.flatnonzero(~np.isfinite(lse))
    if bad.size:
        raise NumericError(f"non-finite normaliser for point {int(bad[0])}", index=int(bad[0]))
    h = np.exp(logp - lse[:, None])
    counts = h.sum(axis=0)
    hT = h.T
    sums = hT @ data.points
    if params.mode == "full":
        sq = (hT @ data.outer).reshape(params.M, params.d, params.d)
    else:
        sq = hT @ data.squares
    ll = float(lse.sum())
    obj = ll if priors is None else ll + log_prior(params, priors)
    return EStepResult(h, counts, sums, sq, ll, obj, params)


def _ml_moments(stats: EStepResult, data_size: int) -> GmmParams:
    counts = stats.counts
    empty = np.flatnonzero(counts < EMPTY_THRESHOLD)
    if empty.size:
        raise EmptyComponentError(int(empty[0]))
    w = counts / data_size
    mu = stats.sums / counts[:, None]
    if stats.mode == "full":
        cov = stats.sq_sums / counts[:, None, None] - mu[:, :, None] * mu[:, None, :]
        cov = 0.5 * (cov + np.swapaxes(cov, 1, 2))
    else:
        cov = stats.sq_sums / counts[:, None] - mu**2
    return GmmParams(w, mu, cov)


def _first_bad_covariance(params: GmmParams) -> Optional[int]:
    if params.mode == "diagonal":
        bad = np.flatnonzero(~np.all(params.covariances > 0, axis=1))
        return int(bad[0]) if bad.size else None
    try:
        np.linalg.cholesky(params.covariances)
        return None
    except np.linalg.LinAlgError:
        for j, c in enumerate(params.covariances):
            if _cholesky_or_none(c) is None:
                return j
    return None


def floor_covariances(params: GmmParams, floor) -> tuple[GmmParams, tuple[int, ...]]:
    """Raise variances below ``floor`` (scalar or per-dimension) to the floor.

    In full mode a component is repaired when a diagonal entry is below the
    floor or its Cholesky test fails: eigenvalues are clipped at the
    smallest floor value and the diagonal is then lifted where still short.
    Returns the repaired parameters and the indices that were touched.
    """
    floor = np.broadcast_to(np.asarray(floor, dtype=float), (params.d,))
    if params.mode == "diagonal":
        low = params.covariances < floor
        touched = tuple(int(j) for j in np.flatnonzero(low.any(axis=1)))
        if not touched:
            return params, ()
        return GmmParams(params.weights, params.means, np.maximum(params.covariances, floor)), touched
    cov = np.array(params.covariances)
    touched = []
    for j in range(params.M):
        c = cov[j]
        if np.all(np.diag(c) >= floor) and _cholesky_or_none(c) is not None:
            continue
        vals, vecs = np.linalg.eigh(c)
        c = (vecs * np.maximum(vals, floor.min())) @ vecs.T
        c = 0.5 * (c + c.T)
        lift = np.maximum(floor - np.diag(c), 0.0)
        cov[j] = c + np.diag(lift)
        touched.append(j)
    if not touched:
        return params, ()
    return GmmParams(params.weights, params.means, cov), tuple(touched)


def m_step(stats: EStepResult, data_size: Optional[int] = None, variance_floor=None) -> GmmParams:
    """Maximum-likelihood update from expected sufficient statistics.

    Raises EmptyComponentError for N_j < 1e-10 and SingularCovarianceError
    when a covariance is not positive definite, unless ``variance_floor`` is
    given, in which case low variances are floored instead.
    """
    N = stats.N if data_size is None else data_size
    params = _ml_moments(stats, N)
    if variance_floor is not None:
        return floor_covariances(params, variance_floor)[0]
    bad = _first_bad_covariance(params)
    if bad is not None:
        raise SingularCovarianceError(bad, params)
    return params


def m_step_map(stats: EStepResult, data_size: Optional[int], priors: Priors) -> GmmParams:
    """MAP update for diagonal mode under :class:`Priors`.

    a_j = (N_j + c_j - 1) / (N + sum(c) - M); means are the weighted means
    clipped to ``mean_box``; variances are (N_j s_j^2 + df * scale) /
    (N_j + df + 2) with s_j^2 taken about the clipped mean. A component with
    no responsibility keeps its previous mean.
    """
    if stats.mode != "diagonal":
        raise ConstraintViolation("MAP M-step is defined for diagonal mode only")
    N = stats.N if data_size is None else data_size
    counts = stats.counts
    M = counts.shape[0]
    c = np.asarray(priors.dirichlet_counts)
    if c.shape[0] != M:
        raise ConstraintViolation(f"priors have {c.shape[0]} Dirichlet counts for {M} components")
    num = counts + c - 1.0
    if np.any(num <= 0):
        raise EmptyComponentError(int(np.flatnonzero(num <= 0)[0]))
    w = num / (N + c.sum() - M)

    has_mass = counts > 0
    safe = np.where(has_mass, counts, 1.0)
    mu = np.where(has_mass[:, None], stats.sums / safe[:, None], stats.params.means)
    if priors.mean_box is not None:
        mu = np.clip(mu, priors.mean_box[0], priors.mean_box[1])

    # N_j * s_j^2 about the (possibly clipped) mean, without dividing by N_j
    scatter = stats.sq_sums - 2.0 * mu * stats.sums + counts[:, None] * mu**2
    scatter = np.maximum(scatter, 0.0)
    df = priors.variance_df
    if df > 0:
        var = (scatter + df * priors.variance_scale) / (counts[:, None] + df + 2.0)
    else:
        if np.any(counts < EMPTY_THRESHOLD):
            raise EmptyComponentError(int(np.flatnonzero(counts < EMPTY_THRESHOLD)[0]))
        var = scatter / counts[:, None]
    params = GmmParams(w, mu, var)
    bad = _first_bad_covariance(params)
    if bad is not None:
        raise SingularCovarianceError(bad, params)
    return params


def em_update(
    stats: EStepResult,
    data_size: Optional[int] = None,
    priors: Optional[Priors] = None,
    variance_floor=None,
) -> GmmParams:
    """The EM map: ML or MAP M-step depending on ``priors``."""
    if priors is None:
        return m_step(stats, data_size, variance_floor=variance_floor)
    return m_step_map(stats, data_size, priors)


def em_direction(
    current: GmmParams,
    stats: EStepResult,
    chart: str = "natural",
    priors: Optional[Priors] = None,
    variance_floor=None,
) -> FlatVector:
    """flatten(EM update) - flatten(current) in ``chart``."""
    target = em_update(stats, stats.N, priors, variance_floor)
    return FlatVector(pack(target, chart) - pack(current, chart), chart, current.layout)


def prune_components(params: GmmParams, data_size: int) -> tuple[GmmParams, list[int]]:
    """Drop components with weight below 1/N or any variance below 1e-100."""
    small_weight = params.weights < 1.0 / data_size
    tiny_var = np.any(params.variances() < PRUNE_VARIANCE, axis=1)
    pruned = [int(j) for j in np.flatnonzero(small_weight | tiny_var)]
    if not pruned:
        return params, []
    keep = [j for j in range(params.M) if j not in pruned]
    if not keep:
        raise DegenerateModelError("every component was pruned")
    return params.subset(keep), pruned

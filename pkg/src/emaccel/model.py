"""Mixture-of-Gaussians parameters, objectives, validation and flat charts.

Parameters live in :class:`GmmParams` (full or diagonal covariances). The
optimizers work on flat vectors; :func:`flatten` / :func:`unflatten` convert
between the two under either the natural chart (raw mixing weights) or the
omega chart (softmax logits with a zero-sum gauge).

Log-posterior convention
------------------------
:func:`log_prior` drops every additive constant that does not depend on the
parameters: the Dirichlet normaliser, the inverse-chi-squared normaliser and
the (uniform) mean-prior density. What remains is::

    sum_j (c_j - 1) log a_j
    + sum_{j,k} [ -(df/2 + 1) log v_jk - df * scale / (2 v_jk) ]

and ``-inf`` when a mean leaves ``mean_box``. Only differences of the
log-posterior are meaningful.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Optional, Sequence, Union

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
SIMPLEX_TOL = 1e-12

CHARTS = ("natural", "omega")
MODES = ("full", "diagonal")


class GmmError(Exception):
    """Base class for errors raised by this package."""


class ConstraintViolation(GmmError, ValueError):
    pass


class NumericError(GmmError, FloatingPointError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class LayoutError(GmmError, ValueError):
    pass


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


class Layout(NamedTuple):
    """Shape of a parameter set: component count, dimension and covariance mode."""

    M: int
    d: int
    mode: str = "full"

    @property
    def cov_size(self) -> int:
        return self.d * (self.d + 1) // 2 if self.mode == "full" else self.d

    @property
    def size(self) -> int:
        return self.M * (1 + self.d + self.cov_size)


@dataclass(frozen=True, eq=False)
class GmmParams:
    """Mixing weights (M,), means (M, d) and covariances.

    Covariances are (M, d, d) matrices in full mode or (M, d) variances in
    diagonal mode; the mode is read off their shape. Construction checks
    shapes only. Use :func:`validate` for the probabilistic constraints.
    """

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = _frozen(self.weights).reshape(-1)
        mu = _frozen(self.means)
        cov = _frozen(self.covariances)
        if mu.ndim != 2 or mu.shape[0] != w.shape[0]:
            raise LayoutError(f"means must be (M, d) with M={w.shape[0]}, got {mu.shape}")
        M, d = mu.shape
        if cov.shape not in ((M, d, d), (M, d)):
            raise LayoutError(f"covariances must be {(M, d, d)} or {(M, d)}, got {cov.shape}")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def M(self) -> int:
        return self.means.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    @property
    def mode(self) -> str:
        return "full" if self.covariances.ndim == 3 else "diagonal"

    @property
    def layout(self) -> Layout:
        return Layout(self.M, self.d, self.mode)

    def variances(self) -> np.ndarray:
        """Per-dimension variances, (M, d), in either mode."""
        if self.mode == "diagonal":
            return self.covariances
        return np.diagonal(self.covariances, axis1=1, axis2=2)

    def to_full(self) -> "GmmParams":
        if self.mode == "full":
            return self
        cov = np.zeros((self.M, self.d, self.d))
        idx = np.arange(self.d)
        cov[:, idx, idx] = self.covariances
        return GmmParams(self.weights, self.means, cov)

    def subset(self, keep: Sequence[int]) -> "GmmParams":
        """Components ``keep`` with weights renormalised to sum to one."""
        keep = np.asarray(keep, dtype=int)
        w = self.weights[keep]
        return GmmParams(w / w.sum(), self.means[keep], self.covariances[keep])

    def equals(self, other: "GmmParams") -> bool:
        """Exact (bitwise-valued) equality of all arrays."""
        return (
            self.layout == other.layout
            and np.array_equal(self.weights, other.weights)
            and np.array_equal(self.means, other.means)
            and np.array_equal(self.covariances, other.covariances)
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    points: np.ndarray

    def __post_init__(self):
        x = _frozen(self.points)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1))
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError("dataset needs at least one point")
        if not np.all(np.isfinite(x)):
            bad = int(np.argwhere(~np.isfinite(x))[0, 0])
            raise NumericError(f"non-finite value in point {bad}", index=bad)
        object.__setattr__(self, "points", x)

    @property
    def N(self) -> int:
        return self.points.shape[0]

    @property
    def d(self) -> int:
        return self.points.shape[1]

    @cached_property
    def outer(self) -> np.ndarray:
        """Per-point outer products flattened to (N, d*d)."""
        x = self.points
        return (x[:, :, None] * x[:, None, :]).reshape(self.N, self.d * self.d)

    @cached_property
    def squares(self) -> np.ndarray:
        return self.points**2

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.points.min(axis=0), self.points.max(axis=0)


@dataclass(frozen=True, eq=False)
class Priors:
    """Independent priors for diagonal-mode MAP estimation.

    ``variance_df == 0`` switches the variance prior off and ``mean_box=None``
    leaves the means unconstrained; together with unit Dirichlet counts this
    is the flat prior.
    """

    dirichlet_counts: np.ndarray
    mean_box: Optional[tuple[np.ndarray, np.ndarray]] = None
    variance_df: float = 0.0
    variance_scale: float = 1.0

    def __post_init__(self):
        counts = _frozen(self.dirichlet_counts).reshape(-1)
        if np.any(counts <= 0):
            raise ValueError("Dirichlet counts must be positive")
        object.__setattr__(self, "dirichlet_counts", counts)
        if self.mean_box is not None:
            lo, hi = (_frozen(b).reshape(-1) for b in self.mean_box)
            if lo.shape != hi.shape or np.any(lo >= hi):
                raise ValueError("mean_box needs lower < upper in every dimension")
            object.__setattr__(self, "mean_box", (lo, hi))
        if self.variance_df < 0 or self.variance_scale <= 0:
            raise ValueError("variance prior needs df >= 0 and scale > 0")

    @classmethod
    def paper_defaults(cls, M: int, data: Dataset) -> "Priors":
        """Counts (M+1)/M, data bounding box, 1/M degrees of freedom, scale 1."""
        return cls(
            dirichlet_counts=np.full(M, (M + 1.0) / M),
            mean_box=data.bounds(),
            variance_df=1.0 / M,
            variance_scale=1.0,
        )

    @classmethod
    def flat(cls, M: int) -> "Priors":
        return cls(dirichlet_counts=np.ones(M))

    def restrict(self, keep: Sequence[int]) -> "Priors":
        return Priors(
            np.asarray(self.dirichlet_counts)[np.asarray(keep, dtype=int)],
            self.mean_box,
            self.variance_df,
            self.variance_scale,
        )

    def means_in_box(self, means: np.ndarray) -> bool:
        if self.mean_box is None:
            return True
        lo, hi = self.mean_box
        return bool(np.all(means >= lo) and np.all(means <= hi))


# ----------------------------------------------------------------------------
# densities and objectives


def _cholesky_or_none(cov: np.ndarray) -> Optional[np.ndarray]:
    if not np.all(np.isfinite(cov)):
        return None
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None


def log_gaussian_density(x, mu, sigma) -> float:
    """ln g(x | mu, sigma); ``sigma`` is a (d, d) covariance or (d,) variances."""
    x = np.asarray(x, dtype=float).reshape(-1)
    mu = np.asarray(mu, dtype=float).reshape(-1)
    sigma = np.asarray(sigma, dtype=float)
    d = x.shape[0]
    diff = x - mu
    if sigma.ndim == 1:
        if np.any(~(sigma > 0)):
            raise ConstraintViolation("variances must be positive")
        return float(-0.5 * (d * LOG_2PI + np.sum(np.log(sigma)) + np.sum(diff**2 / sigma)))
    if not np.array_equal(sigma, sigma.T):
        raise ConstraintViolation("covariance is not symmetric")
    L = _cholesky_or_none(sigma)
    if L is None:
        raise ConstraintViolation("covariance is not positive definite")
    z = np.linalg.solve(L, diff)
    return float(-0.5 * (d * LOG_2PI + z @ z) - np.sum(np.log(np.diag(L))))


def component_log_densities(params: GmmParams, data: Dataset) -> np.ndarray:
    """(N, M) matrix of ln a_j + ln g(x_i | mu_j, Sigma_j).

    Raises ConstraintViolation when a covariance fails its Cholesky test.
    """
    x = data.points
    N, d = x.shape
    M = params.M
    if params.mode == "diagonal":
        v = params.covariances
        if not np.all(v > 0):
            raise ConstraintViolation("variances must be positive")
        diff = x[:, None, :] - params.means[None, :, :]
        quad = np.einsum("nmd,nmd->nm", diff, diff / v[None])
        logdet = np.log(v).sum(axis=1)
    else:
        cov = params.covariances
        try:
            if not np.all(np.isfinite(cov)):
                raise np.linalg.LinAlgError
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            bad = [j for j in range(M) if _cholesky_or_none(cov[j]) is None]
            raise ConstraintViolation(f"covariance of component(s) {bad} not positive definite")
        Linv = np.linalg.inv(L)
        quad = np.empty((N, M))
        for j in range(M):
            z = (x - params.means[j]) @ Linv[j].T
            quad[:, j] = np.einsum("nd,nd->n", z, z)
        logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    with np.errstate(divide="ignore"):
        logw = np.log(params.weights)
    return -0.5 * (quad + logdet + d * LOG_2PI) + logw


def row_logsumexp(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1)
    m = np.where(np.isfinite(m), m, 0.0)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def _check_simplex(weights: np.ndarray) -> None:
    if not np.all(weights > 0):
        raise ConstraintViolation("mixing weights must be positive")
    if abs(weights.sum() - 1.0) > SIMPLEX_TOL:
        raise ConstraintViolation(f"mixing weights sum to {weights.sum()!r}, not 1")


def _first_nonfinite(values: np.ndarray, what: str):
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise NumericError(f"non-finite {what} at point {int(bad[0])}", index=int(bad[0]))


def log_likelihood(params: GmmParams, data: Dataset, check: bool = True) -> float:
    """sum_i ln sum_j a_j g(x_i | mu_j, Sigma_j), inner sum via log-sum-exp.

    ``check=False`` skips the simplex test so that the weights can be probed
    off the simplex (finite-difference oracles use this).
    """
    if check:
        _check_simplex(params.weights)
    per_point = row_logsumexp(component_log_densities(params, data))
    _first_nonfinite(per_point, "log-likelihood term")
    return float(per_point.sum())


def log_prior(params: GmmParams, priors: Priors) -> float:
    """Parameter-dependent part of the log prior (see module docstring)."""
    if not priors.means_in_box(params.means):
        return -np.inf
    c = priors.dirichlet_counts
    with np.errstate(divide="ignore", invalid="ignore"):
        value = float(np.sum(np.where(c == 1.0, 0.0, (c - 1.0) * np.log(params.weights))))
    if priors.variance_df > 0:
        v = params.variances()
        df, s = priors.variance_df, priors.variance_scale
        value += float(np.sum(-(0.5 * df + 1.0) * np.log(v) - 0.5 * df * s / v))
    return value


def log_posterior(params: GmmParams, data: Dataset, priors: Priors, check: bool = True) -> float:
    """Log-likelihood plus :func:`log_prior`; ``-inf`` when a mean leaves the box."""
    if params.mode != "diagonal":
        raise ConstraintViolation("MAP estimation is defined for diagonal mode only")
    lp = log_prior(params, priors)
    if lp == -np.inf:
        return -np.inf
    return log_likelihood(params, data, check=check) + lp


def objective(params: GmmParams, data: Dataset, priors: Optional[Priors] = None, check: bool = True) -> float:
    if priors is None:
        return log_likelihood(params, data, check=check)
    return log_posterior(params, data, priors, check=check)


# ----------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class ValidityReport:
    weights_positive: bool
    weights_sum_to_one: bool
    covariance_ok: tuple[bool, ...]
    finite: bool

    @property
    def simplex(self) -> bool:
        return self.weights_positive and self.weights_sum_to_one

    @property
    def ok(self) -> bool:
        return self.simplex and all(self.covariance_ok) and self.finite


def validate(params: GmmParams) -> ValidityReport:
    w = params.weights
    finite = bool(np.all(np.isfinite(w)) and np.all(np.isfinite(params.means)))
    if params.mode == "diagonal":
        cov_ok = tuple(bool(np.all(v > 0) and np.all(np.isfinite(v))) for v in params.covariances)
    else:
        cov_ok = tuple(
            bool(np.array_equal(c, c.T)) and _cholesky_or_none(c) is not None for c in params.covariances
        )
    return ValidityReport(
        weights_positive=bool(np.all(w > 0)),
        weights_sum_to_one=bool(abs(w.sum() - 1.0) <= SIMPLEX_TOL),
        covariance_ok=cov_ok,
        finite=finite,
    )


def is_valid(params: GmmParams) -> bool:
    """Fast boolean form of :func:`validate`."""
    w = params.weights
    if not (np.all(w > 0) and abs(w.sum() - 1.0) <= SIMPLEX_TOL and np.all(np.isfinite(params.means))):
        return False
    cov = params.covariances
    if params.mode == "diagonal":
        return bool(np.all(cov > 0) and np.all(np.isfinite(cov)))
    if not np.all(np.isfinite(cov)):
        return False
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return False
    return True


# ----------------------------------------------------------------------------
# flat charts


@dataclass(frozen=True, eq=False)
class FlatVector:
    """Parameters packed into one vector.

    Layout: weight block (a_j, or omega_j with sum omega = 0), then the means
    row by row, then per component either the row-major lower triangle of
    the covariance (full mode) or the variances (diagonal mode).
    """

    values: np.ndarray
    chart: str
    layout: Layout

    def __post_init__(self):
        if self.chart not in CHARTS:
            raise LayoutError(f"unknown chart {self.chart!r}")
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if values.shape[0] != self.layout.size:
            raise LayoutError(f"vector of length {values.shape[0]} does not match layout {self.layout}")
        object.__setattr__(self, "values", values)

    def __add__(self, other):
        return FlatVector(self.values + _values(other), self.chart, self.layout)

    def __sub__(self, other):
        return FlatVector(self.values - _values(other), self.chart, self.layout)

    def __rmul__(self, scalar):
        return FlatVector(scalar * self.values, self.chart, self.layout)


def _values(v):
    return v.values if isinstance(v, FlatVector) else np.asarray(v, dtype=float)


_TRIL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def tril_indices(d: int) -> tuple[np.ndarray, np.ndarray]:
    if d not in _TRIL_CACHE:
        _TRIL_CACHE[d] = np.tril_indices(d)
    return _TRIL_CACHE[d]


def softmax(omega: np.ndarray) -> np.ndarray:
    e = np.exp(omega - omega.max())
    return e / e.sum()


def pack(params: GmmParams, chart: str = "natural") -> np.ndarray:
    """Raw-array form of :func:`flatten`."""
    if chart == "natural":
        head = params.weights
    elif chart == "omega":
        with np.errstate(divide="ignore"):
            logw = np.log(params.weights)
        head = logw - logw.mean()
    else:
        raise LayoutError(f"unknown chart {chart!r}")
    if params.mode == "full":
        rows, cols = tril_indices(params.d)
        cov = params.covariances[:, rows, cols]
    else:
        cov = params.covariances
    return np.concatenate([head, params.means.reshape(-1), cov.reshape(-1)])


def unpack(values: np.ndarray, layout: Layout, chart: str = "natural") -> GmmParams:
    """Raw-array form of :func:`unflatten`. No constraint checks."""
    M, d, mode = layout
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.shape[0] != layout.size:
        raise LayoutError(f"vector of length {values.shape[0]} does not match layout {layout}")
    head = values[:M]
    if chart == "natural":
        w = head
    elif chart == "omega":
        w = softmax(head)
    else:
        raise LayoutError(f"unknown chart {chart!r}")
    mu = values[M : M + M * d].reshape(M, d)
    tail = values[M + M * d :]
    if mode == "full":
        k = layout.cov_size
        rows, cols = tril_indices(d)
        cov = np.zeros((M, d, d))
        lower = tail.reshape(M, k)
        cov[:, rows, cols] = lower
        cov[:, cols, rows] = lower
    else:
        cov = tail.reshape(M, d)
    return GmmParams(w, mu, cov)


def flatten(params: GmmParams, chart: str = "natural") -> FlatVector:
    return FlatVector(pack(params, chart), chart, params.layout)


def unflatten(v: FlatVector, template: Optional[Layout] = None) -> GmmParams:
    if template is not None and tuple(template) != tuple(v.layout):
        raise LayoutError(f"vector layout {v.layout} does not match template {template}")
    return unpack(v.values, v.layout, v.chart)


# ----------------------------------------------------------------------------
# file formats
#
# Dataset: one point per line, whitespace-separated decimals, '#' comments.
#
# Parameters:
#     # comments allowed anywhere
#     M <int>
#     d <int>
#     mode full|diagonal
#     weights
#     <M numbers on one line>
#     means
#     <M lines of d numbers>
#     covariances
#     <full: M blocks of d lines of d numbers; diagonal: M lines of d numbers>
#
# Numbers are written with 17 significant digits so files round-trip exactly.

PathLike = Union[str, Path]


def _fmt_row(values) -> str:
    return " ".join(f"{float(v):.17g}" for v in values)


def save_dataset(data: Dataset, path: PathLike, header: Optional[str] = None) -> None:
    lines = []
    if header:
        lines.extend(f"# {h}" for h in header.splitlines())
    lines.extend(_fmt_row(row) for row in data.points)
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: PathLike) -> Dataset:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            rows.append([float(t) for t in line.split()])
    if not rows:
        raise ValueError(f"{path}: no data points")
    if len({len(r) for r in rows}) != 1:
        raise ValueError(f"{path}: rows have differing numbers of columns")
    return Dataset(np.array(rows))


def format_params(params: GmmParams) -> str:
    out = [f"M {params.M}", f"d {params.d}", f"mode {params.mode}", "weights", _fmt_row(params.weights), "means"]
    out.extend(_fmt_row(m) for m in params.means)
    out.append("covariances")
    if params.mode == "full":
        for c in params.covariances:
            out.extend(_fmt_row(r) for r in c)
    else:
        out.extend(_fmt_row(v) for v in params.covariances)
    return "\n".join(out) + "\n"


def parse_params(text: str) -> GmmParams:
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    it = iter(lines)

    def expect(key):
        try:
            line = next(it)
        except StopIteration:
            raise ValueError(f"parameter file ended before {key!r}") from None
        parts = line.split()
        if parts[0] != key:
            raise ValueError(f"expected {key!r}, found {line!r}")
        return parts[1:]

    def numbers(count):
        try:
            row = [float(t) for t in next(it).split()]
        except StopIteration:
            raise ValueError("parameter file truncated") from None
        if len(row) != count:
            raise ValueError(f"expected {count} numbers, got {len(row)}")
        return row

    M = int(expect("M")[0])
    d = int(expect("d")[0])
    mode = expect("mode")[0]
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    expect("weights")
    w = numbers(M)
    expect("means")
    mu = [numbers(d) for _ in range(M)]
    expect("covariances")
    if mode == "full":
        cov = [[numbers(d) for _ in range(d)] for _ in range(M)]
    else:
        cov = [numbers(d) for _ in range(M)]
    return GmmParams(np.array(w), np.array(mu), np.array(cov))


def save_params(params: GmmParams, path: PathLike) -> None:
    Path(path).write_text(format_params(params))


def load_params(path: PathLike) -> GmmParams:
    return parse_params(Path(path).read_text())

import dataclasses

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_data, random_params
from emaccel.em import e_step, m_step
from emaccel.gradient import (
    ascent_gradient,
    finite_difference_gradient,
    flat_objective,
    gradient_from_em,
    omega_chain_rule,
    project_alpha_gradient,
)
from emaccel.model import NumericError, Priors, flatten, tril_indices
from emaccel.optimizers import StoppingRule, run_em


def rel_err(g, fd):
    return np.max(np.abs(g - fd) / np.maximum(np.abs(fd), 1.0))


def test_fd_on_known_functions():
    f = lambda v: -0.5 * v @ v + 3.0 * v[0]
    v = np.array([1.0, -2.0, 4.0])
    assert np.allclose(finite_difference_gradient(f, v), [2.0, 2.0, -4.0], rtol=1e-8)
    assert np.allclose(finite_difference_gradient(lambda v: 2 * v.sum(), v), 2.0, rtol=1e-10)


def test_fd_names_failing_coordinate():
    f = lambda v: np.log(v[1]) if v[1] > 0 else -np.inf
    with pytest.raises(NumericError) as err:
        finite_difference_gradient(f, np.array([1.0, 1e-9]))
    assert err.value.index == 1


@pytest.mark.parametrize("chart", ["natural", "omega"])
@pytest.mark.parametrize("mode", ["full", "diagonal"])
def test_gradient_matches_finite_differences(rng, chart, mode):
    for _ in range(4):
        p = random_params(rng, 3, 2, mode)
        data = random_data(rng, 50, 2)
        g = gradient_from_em(p, e_step(p, data), chart).values
        fd = finite_difference_gradient(flat_objective(p.layout, chart, data), flatten(p, chart).values)
        assert rel_err(g, fd) < 1e-5


def test_map_gradient_matches_finite_differences(rng):
    for chart in ("natural", "omega"):
        p = random_params(rng, 3, 2, "diagonal", spread=0.5)
        data = random_data(rng, 50, 2)
        priors = Priors.paper_defaults(3, data)
        g = gradient_from_em(p, e_step(p, data, priors), chart, priors).values
        fd = finite_difference_gradient(flat_objective(p.layout, chart, data, priors), flatten(p, chart).values)
        assert rel_err(g, fd) < 1e-5


def test_gradient_uses_statistics_only(rng):
    # no per-point quantity is needed: drop the responsibilities entirely
    p = random_params(rng, 2, 3)
    stats = e_step(p, random_data(rng, 30, 3))
    bare = dataclasses.replace(stats, responsibilities=None)
    assert np.array_equal(gradient_from_em(p, bare).values, gradient_from_em(p, stats).values)


def test_blocks_expressed_through_em_update(rng):
    p = random_params(rng, 2, 2)
    stats = e_step(p, random_data(rng, 40, 2))
    em = m_step(stats)
    g = gradient_from_em(p, stats).values
    N = stats.counts
    assert np.allclose(g[:2], N / p.weights, rtol=1e-13)
    for j in range(2):
        inv = np.linalg.inv(p.covariances[j])
        want_mu = N[j] * inv @ (em.means[j] - p.means[j])
        assert np.allclose(g[2 + 2 * j: 4 + 2 * j], want_mu, rtol=1e-9)
        dm = em.means[j] - p.means[j]
        C = N[j] * (em.covariances[j] + np.outer(dm, dm))
        G = 0.5 * inv @ (C - N[j] * p.covariances[j]) @ inv
        rows, cols = tril_indices(2)
        flat = G[rows, cols] * np.where(rows == cols, 1, 2)
        assert np.allclose(g[6 + 3 * j: 9 + 3 * j], flat, rtol=1e-8, atol=1e-10)


def test_gradient_at_em_fixpoint(rng):
    data = random_data(rng, 100, 2)
    rec = run_em(random_params(rng, 2, 2), data, stop=StoppingRule("absolute", 1e-12), max_iters=20000)
    p = rec.final_params
    stats = e_step(p, data)
    g = gradient_from_em(p, stats).values
    # dL/da_j = N_j / a_j = N at a fixpoint
    assert np.allclose(g[:2], data.N, rtol=1e-6)
    tol = 1e-6 * data.N
    assert np.max(np.abs(g[2:])) < tol
    assert np.linalg.norm(gradient_from_em(p, stats, "omega").values) < tol
    assert np.linalg.norm(ascent_gradient(p, stats, "natural")) < tol


def test_projection_examples():
    assert np.array_equal(project_alpha_gradient([3.0, 3.0, 3.0]), [0.0, 0.0, 0.0])
    assert np.allclose(project_alpha_gradient([1.0, -1.0, 0.0]), [1.0, -1.0, 0.0])
    assert np.allclose(project_alpha_gradient([4.0, 0.0]), [2.0, -2.0])


@given(st.lists(st.floats(-1e3, 1e3), min_size=2, max_size=6), st.integers(0, 2**32 - 1))
def test_omega_gradient_sums_to_zero(g, seed):
    g = np.array(g)
    w = np.random.default_rng(seed).dirichlet(np.ones(g.size))
    out = omega_chain_rule(w, g)
    assert abs(out.sum()) <= 1e-9 * max(1.0, np.abs(g).max())
    # a constant raw gradient has no effect on the weights
    assert np.allclose(omega_chain_rule(w, np.full(g.size, 7.0)), 0.0, atol=1e-12)

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import random_data, random_params
from emaccel.model import Dataset, GmmParams, Priors, flatten, validate
from emaccel.optimizers import (
    EXACT_LINE_SEARCH,
    Accelerator,
    ConjugateGradient,
    ConjugateGradientEM,
    FixedPem,
    GradientAscent,
    GmmProblem,
    InfeasibleStepError,
    IterationLedger,
    LineSearchConfig,
    QuadraticProblem,
    RunRecord,
    StoppingRule,
    fit,
    line_search_secant,
    run_cg,
    run_em,
    run_gradient_ascent,
    run_hybrid,
    run_on_problem,
    run_pem,
    should_stop,
    step_shrink_to_feasible,
)


def values(rec):
    return [v for _, v in rec.accepted]


def two_cluster_data(rng, n=300, sep=4.0):
    a = rng.normal(size=(n // 2, 2))
    b = rng.normal(size=(n - n // 2, 2)) + sep
    return Dataset(np.vstack([a, b]))


def spd_quadratic(rng, n):
    """-1/2 x'Ax + b'x with A = G'G/n + I (eigenvalues roughly in [1, 5])."""
    G = rng.normal(size=(n, n))
    A = G.T @ G / n + np.eye(n)
    return 0.5 * (A + A.T), rng.normal(size=n)


# -- stopping rules -----------------------------------------------------------


def test_absolute_rule_examples():
    rule = StoppingRule("absolute", 1e-5)
    assert should_stop([99.0, 100.0, 100.000009], rule)
    assert not should_stop([99.0, 100.0, 100.00002], rule)
    assert not should_stop([100.0], rule)
    # a decrease is a change below the threshold
    assert should_stop([100.0, 99.0], rule)


def test_scaled_rule_example():
    trace = [0.0, 500.0, 1000.0 - 0.009, 1000.0]
    assert should_stop(trace, StoppingRule("scaled", 1e-5))
    assert not should_stop(trace, StoppingRule("absolute", 1e-5))


def test_stopping_rule_validation():
    with pytest.raises(ValueError):
        StoppingRule("relative")
    with pytest.raises(ValueError):
        StoppingRule("absolute", 0.0)


# -- feasibility shrinking ----------------------------------------------------


def test_shrink_examples():
    pos = lambda x: bool(np.all(x > 0))
    theta = np.array([0.5])
    assert step_shrink_to_feasible(theta, np.array([-1.0]), 4.0, pos) == 0.25
    assert step_shrink_to_feasible(theta, np.array([1.0]), 4.0, pos) == 4.0
    with pytest.raises(InfeasibleStepError):
        step_shrink_to_feasible(np.array([-1.0]), np.array([1.0]), 1.0, pos, max_halvings=10)


@given(st.floats(0.01, 1.0), st.floats(-10.0, -0.01), st.floats(0.1, 100.0))
def test_shrink_stops_at_first_feasible_halving(x0, direction, gamma0):
    pos = lambda x: bool(np.all(x > 0))
    g = step_shrink_to_feasible(np.array([x0]), np.array([direction]), gamma0, pos)
    assert x0 + g * direction > 0
    assert g == gamma0 or x0 + 2 * g * direction <= 0


# -- line search --------------------------------------------------------------


def test_line_search_on_quadratic():
    prob = QuadraticProblem(np.eye(1), np.array([3.0]))
    pt = prob.evaluate(np.zeros(1), charge=False)
    res = line_search_secant(prob, pt, np.array([1.0]))
    assert res.success and abs(res.gamma - 3.0) <= 0.3
    # maximum exactly at the first trial
    res = line_search_secant(prob, pt, np.array([3.0]))
    assert res.success and res.gamma == 1.0 and res.evals == 1


def test_line_search_rejects_descent_direction():
    prob = QuadraticProblem(np.eye(2), np.array([1.0, 0.0]))
    pt = prob.evaluate(np.zeros(2), charge=False)
    res = line_search_secant(prob, pt, np.array([-1.0, 0.0]))
    assert not res.success and res.evals == 0 and prob.ledger.count == 0


def test_line_search_against_grid(rng):
    data = two_cluster_data(rng, 200, 2.0)
    p = random_params(rng, 2, 2, spread=1.0)
    prob = GmmProblem(data, p.layout, "natural")
    pt = prob.evaluate(flatten(p).values, charge=False)
    pt = prob.evaluate(pt.em_target)
    d = pt.em_direction
    res = line_search_secant(prob, pt, d)
    assert res.success and res.point.value > pt.value
    grid = []
    for g in np.linspace(0.05, 6.0, 120):
        x = pt.x + g * d
        if prob.is_feasible(x):
            grid.append(prob.evaluate(x, charge=False).value)
    best_gain = max(grid) - pt.value
    assert res.point.value - pt.value >= 0.9 * best_gain


# -- EM and PEM ---------------------------------------------------------------


def test_em_accounting(rng):
    rec = run_em(random_params(rng, 2, 2), random_data(rng, 50, 2), max_iters=30)
    assert len(rec.trace) == rec.em_equivalent_count + 1
    assert rec.termination in ("converged", "max-iters")
    assert rec.em_equivalent_count <= 30


def test_em_at_fixpoint_stops_after_one_pass(rng):
    data = random_data(rng, 60, 2)
    tight = run_em(random_params(rng, 2, 2), data, stop=StoppingRule("absolute", 1e-12), max_iters=50000)
    again = run_em(tight.final_params, data)
    assert again.converged and again.em_equivalent_count == 1


def test_pem_unit_step_is_em(rng):
    for _ in range(4):
        p, data = random_params(rng, 3, 2), random_data(rng, 60, 2)
        em, pem = run_em(p, data, max_iters=200), run_pem(p, data, step=1.0, max_iters=200)
        assert values(em) == values(pem)
        assert em.em_equivalent_count == pem.em_equivalent_count
        assert em.final_params.equals(pem.final_params)


def test_standalone_pem_stops_on_decrease(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng)
    rec = run_pem(p, data, step=40.0, max_iters=200)
    assert rec.termination in ("objective-decrease", "infeasible")


def test_hybrid_pem_with_large_step_falls_back(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng)
    rec = run_hybrid(p, data, "pem-fixed", gamma=40.0, max_iters=3000)
    assert any(e["kind"] == "fallback" for e in rec.events)
    em = run_em(p, data)
    assert rec.final_objective == pytest.approx(em.final_objective, abs=1e-3)


def test_variance_floor_is_logged():
    rng = np.random.default_rng(3)
    pts = np.vstack([rng.normal(size=(60, 2)), np.full((4, 2), 10.0)])
    data = Dataset(pts)
    init = GmmParams([0.9, 0.1], [[0.0, 0.0], [10.0, 10.0]], np.stack([np.eye(2), 0.01 * np.eye(2)]))
    rec = run_em(init, data, max_iters=50)
    assert any(e["kind"] == "variance-floor" for e in rec.events)
    assert rec.termination in ("converged", "max-iters")
    assert validate(rec.final_params).ok


# -- gradient ascent ----------------------------------------------------------


def test_gradient_step_first_order(rng):
    p, data = random_params(rng, 2, 2), random_data(rng, 80, 2)
    prob = GmmProblem(data, p.layout, "natural")
    pt = prob.evaluate(flatten(p).values, charge=False)
    r = pt.grad
    for g in (1e-6, 1e-7):
        gain = prob.evaluate(pt.x + g * r, charge=False).value - pt.value
        assert gain / g == pytest.approx(r @ r, rel=100 * g * np.linalg.norm(r) + 1e-6)


def test_projected_ascent_stays_on_simplex(rng):
    p, data = random_params(rng, 3, 2), two_cluster_data(rng)
    prob = GmmProblem(data, p.layout, "natural")
    pt = prob.evaluate(flatten(p).values, charge=False)
    acc = GradientAscent(None)
    for _ in range(25):
        new, reason = acc.step(prob, pt)
        if new is None:
            break
        assert abs(new.params.weights.sum() - 1.0) < 1e-12
        assert validate(new.params).ok
        assert new.value >= pt.value
        pt = new


def test_omega_chart_ascent_runs(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng)
    rec = run_gradient_ascent(p, data, "optimized", "omega-chart", max_iters=100)
    v = values(rec)
    assert v[-1] > v[0] and validate(rec.final_params).ok


def test_optimized_ascent_reaches_em_solution(rng):
    data = two_cluster_data(rng, 200, 5.0)
    p = GmmParams([0.5, 0.5], [[0.5, 0.5], [4.5, 4.5]], np.stack([np.eye(2)] * 2))
    em = run_em(p, data)
    ga = run_gradient_ascent(p, data, "optimized", max_iters=20000)
    assert ga.final_objective == pytest.approx(em.final_objective, abs=1e-3)


# -- conjugate gradient -------------------------------------------------------


@pytest.mark.parametrize("n", [3, 10, 25])
def test_cg_finite_termination(n):
    A, b = spd_quadratic(np.random.default_rng(n), n)
    rec = run_cg(np.zeros(n), problem=QuadraticProblem(A, b), stop=StoppingRule("gradient", 1e-8),
                 line_search=EXACT_LINE_SEARCH, max_iters=100000)
    assert rec.converged and rec.steps <= n
    assert np.linalg.norm(b - A @ rec.final_x) < 1e-8


def test_cg_first_direction_is_gradient(rng):
    A, b = spd_quadratic(rng, 4)
    prob = QuadraticProblem(A, b)
    pt = prob.evaluate(np.zeros(4), charge=False)
    acc = ConjugateGradient()
    acc.start(prob, pt)
    assert np.array_equal(acc.d, pt.grad)


def test_cg_em_first_direction_is_em_step(rng):
    p, data = random_params(rng, 2, 2), random_data(rng, 60, 2)
    prob = GmmProblem(data, p.layout, "natural")
    pt = prob.evaluate(flatten(p).values, charge=False)
    acc = ConjugateGradientEM()
    acc.start(prob, pt)
    assert np.array_equal(acc.d, pt.em_target - pt.x)
    unit = prob.evaluate(pt.x + 1.0 * acc.d, charge=False)
    em_next = prob.evaluate(pt.em_target, charge=False)
    assert unit.value == pytest.approx(em_next.value, rel=1e-14)


def test_cg_em_zero_denominator_restarts(rng):
    p, data = random_params(rng, 2, 2), random_data(rng, 60, 2)
    prob = GmmProblem(data, p.layout, "natural")
    pt = prob.evaluate(flatten(p).values, charge=False)
    acc = ConjugateGradientEM()
    acc.start(prob, pt)
    assert np.isnan(acc._beta(pt))  # y = 0


# -- hybrid driver ------------------------------------------------------------


def test_hybrid_runs_em_first(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng, 300, 2.0)
    rec = run_hybrid(p, data, "cg-em")
    starts = [e["at"] for e in rec.events if e["kind"] == "acceleration-start"]
    assert starts and starts[0] >= 1


def test_hybrid_pem_unit_step_is_em(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng, 300, 2.0)
    em, hy = run_em(p, data), run_hybrid(p, data, "pem-fixed", gamma=1.0)
    assert values(em) == values(hy) and em.final_params.equals(hy.final_params)


class _SlowEm(QuadraticProblem):
    def evaluate(self, x, charge=True):
        pt = super().evaluate(x, charge)
        pt.em_target = pt.x + 0.01 * pt.grad
        return pt


class _AlwaysFails(Accelerator):
    name = "fails"

    def step(self, problem, point):
        return None, "line-search-failed"


def test_flat_region_after_repeated_fallbacks():
    prob = _SlowEm(np.eye(2), np.array([1.0, 1.0]))
    rec = run_on_problem(prob, np.zeros(2), _AlwaysFails(), StoppingRule("absolute", 1e-300), hybrid=True)
    assert rec.termination == "flat-region"
    assert sum(e["kind"] == "fallback" for e in rec.events) == 101


def test_accelerated_stop_is_confirmed_by_em(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng, 300, 2.0)
    rec = run_hybrid(p, data, "cg")
    assert rec.converged
    checks = [e for e in rec.events if e["kind"] == "stop-check"]
    assert checks and checks[-1]["at"] == rec.em_equivalent_count - 1


# -- records and MAP pipeline -------------------------------------------------


def test_run_record_round_trip(rng):
    rec = fit(random_params(rng, 2, 2), two_cluster_data(rng), "cg-em")
    back = RunRecord.loads(rec.dumps())
    assert back.dumps() == rec.dumps()
    assert back.final_params.equals(rec.final_params)


def test_deterministic_runs(rng):
    p, data = random_params(rng, 2, 2), two_cluster_data(rng)
    for method in ("cg", "pem-opt", "cg-em-rp"):
        assert fit(p, data, method).dumps() == fit(p, data, method).dumps()


def test_map_pruning_and_restart():
    rng = np.random.default_rng(7)
    centres = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    data = Dataset(np.vstack([c + rng.normal(size=(200, 2)) for c in centres]))
    M = 6
    means = np.vstack([centres, [[3.0, 3.0], [5.9, 5.9], [6.0, 6.0]]])
    init = GmmParams(np.full(M, 1 / M), means, np.ones((M, 2)))
    rec = run_em(init, data, priors=Priors.paper_defaults(M, data))
    assert rec.converged
    assert any(e["kind"] == "prune" for e in rec.events)
    assert rec.final_params.M < M
    for seg in rec.segments():
        assert np.all(np.diff(seg) >= -1e-10 * np.abs(np.array(seg[:-1])))

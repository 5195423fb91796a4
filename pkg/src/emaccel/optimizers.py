"""Iterative drivers: EM, gradient ascent, CG, CG+EM, parameterized EM and the hybrid scheme.

All optimizers work on flat vectors through a small problem interface:
``problem.evaluate(x)`` performs one full pass (objective, ascent gradient
and EM target together) and charges one EM-equivalent iteration to the
problem's :class:`IterationLedger`; ``problem.is_feasible(x)`` is a cheap
constraint check that never touches the data.

The hybrid driver runs EM until the per-iteration gain drops below the
closeness threshold (0.5), then hands over to an accelerator. An accelerator
step that fails (line search gave up, or a fixed step lowered the
objective) returns control to EM from the best accepted iterate.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Any, Callable, Optional, Union

import numpy as np

from .em import (
    DegenerateModelError,
    EmptyComponentError,
    EStepResult,
    SingularCovarianceError,
    e_step,
    floor_covariances,
    m_step,
    m_step_map,
    prune_components,
)
from .gradient import ascent_gradient
from .model import (
    Dataset,
    GmmError,
    GmmParams,
    Layout,
    Priors,
    is_valid,
    pack,
    unpack,
)

DEFAULT_MAX_ITERS = 50_000
CLOSENESS = 0.5
MAX_FALLBACKS = 100
DECREASE_SLACK = 1e-10
VARIANCE_FLOOR_FACTOR = 1e-6


class InfeasibleStepError(GmmError):
    pass


# ----------------------------------------------------------------------------
# bookkeeping


@dataclass(frozen=True)
class StoppingRule:
    """``absolute``: last gain < threshold. ``scaled``: last gain / total gain
    < threshold. ``gradient``: ascent-gradient norm < threshold."""

    kind: str = "absolute"
    threshold: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("absolute", "scaled", "gradient"):
            raise ValueError(f"unknown stopping rule {self.kind!r}")
        if not self.threshold > 0:
            raise ValueError("stopping threshold must be positive")


def should_stop(trace, rule: StoppingRule) -> bool:
    if len(trace) < 2:
        return False
    change = trace[-1] - trace[-2]
    if rule.kind == "absolute":
        return change < rule.threshold
    if rule.kind == "scaled":
        total = trace[-1] - trace[0]
        if not total > 0:
            return True
        return change / total < rule.threshold
    raise ValueError("gradient rule needs the gradient, not a trace")


@dataclass
class IterationLedger:
    """EM-equivalent cost accounting.

    ``trace`` holds the objective of every full pass (the uncharged initial
    evaluation first), so ``len(trace) == count + 1``. ``accepted`` holds
    (count, objective) for every accepted iterate.
    """

    count: int = 0
    trace: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    events: list = field(default_factory=list)

    def record(self, value: float, charge: bool = True) -> None:
        if charge:
            self.count += 1
        self.trace.append(float(value))

    def accept(self, value: float) -> None:
        self.accepted.append((self.count, float(value)))

    def event(self, kind: str, **info) -> None:
        self.events.append({"kind": kind, "at": self.count, **info})


@dataclass(eq=False)
class Point:
    """An evaluated iterate. ``em_target`` is the flattened EM update (or None)."""

    x: np.ndarray
    value: float
    grad: np.ndarray
    em_target: Optional[np.ndarray] = None
    params: Optional[GmmParams] = None
    stats: Optional[EStepResult] = None
    em_error: Optional[Exception] = None

    @property
    def em_direction(self) -> np.ndarray:
        if self.em_target is None:
            raise self.em_error or DegenerateModelError("no EM update available")
        return self.em_target - self.x


class Problem:
    chart = "natural"

    def __init__(self, ledger: Optional[IterationLedger] = None):
        self.ledger = ledger if ledger is not None else IterationLedger()

    def evaluate(self, x: np.ndarray, charge: bool = True) -> Point:
        raise NotImplementedError

    def is_feasible(self, x: np.ndarray) -> bool:
        return bool(np.all(np.isfinite(x)))


class GmmProblem(Problem):
    """Mixture objective over flat vectors in one chart."""

    def __init__(
        self,
        data: Dataset,
        layout: Layout,
        chart: str = "natural",
        priors: Optional[Priors] = None,
        variance_floor=None,
        ledger: Optional[IterationLedger] = None,
    ):
        super().__init__(ledger)
        self.data = data
        self.layout = Layout(*layout)
        self.chart = chart
        self.priors = priors
        self.variance_floor = variance_floor

    def params(self, x: np.ndarray) -> GmmParams:
        return unpack(x, self.layout, self.chart)

    def is_feasible(self, x: np.ndarray) -> bool:
        p = self.params(x)
        if not is_valid(p):
            return False
        return self.priors is None or self.priors.means_in_box(p.means)

    def _em_target(self, stats: EStepResult):
        N = self.data.N
        if self.priors is not None:
            return m_step_map(stats, N, self.priors)
        floor = self.variance_floor
        try:
            target = m_step(stats, N)
            needs_floor = False
        except SingularCovarianceError as exc:
            if floor is None:
                raise
            target, needs_floor = exc.params, True
        if floor is not None and (needs_floor or np.any(target.variances() < floor)):
            target, touched = floor_covariances(target, floor)
            if touched:
                self.ledger.event("variance-floor", components=list(touched))
        return target

    def evaluate(self, x: np.ndarray, charge: bool = True) -> Point:
        params = self.params(x)
        stats = e_step(params, self.data, self.priors)
        grad = ascent_gradient(params, stats, self.chart, self.priors)
        em_target, em_error = None, None
        try:
            em_target = pack(self._em_target(stats), self.chart)
        except (EmptyComponentError, SingularCovarianceError) as exc:
            em_error = exc
        self.ledger.record(stats.objective, charge)
        return Point(np.asarray(x, dtype=float), stats.objective, grad, em_target, params, stats, em_error)


class QuadraticProblem(Problem):
    """Concave quadratic -1/2 x'Ax + b'x with A symmetric positive definite."""

    def __init__(self, A, b, ledger: Optional[IterationLedger] = None):
        super().__init__(ledger)
        self.A = np.asarray(A, dtype=float)
        self.b = np.asarray(b, dtype=float)

    def evaluate(self, x: np.ndarray, charge: bool = True) -> Point:
        x = np.asarray(x, dtype=float)
        Ax = self.A @ x
        value = float(-0.5 * x @ Ax + self.b @ x)
        self.ledger.record(value, charge)
        return Point(x, value, self.b - Ax)


# ----------------------------------------------------------------------------
# step sizes


def step_shrink_to_feasible(
    theta: np.ndarray,
    direction: np.ndarray,
    gamma0: float,
    is_feasible: Callable[[np.ndarray], bool],
    max_halvings: int = 60,
    point_at: Optional[Callable[[float], np.ndarray]] = None,
) -> float:
    """Largest gamma in {gamma0, gamma0/2, ...} whose step stays feasible."""
    at = point_at or (lambda g: theta + g * direction)
    gamma = gamma0
    for _ in range(max_halvings + 1):
        if is_feasible(at(gamma)):
            return gamma
        gamma *= 0.5
    raise InfeasibleStepError(f"no feasible step found from gamma={gamma0} after {max_halvings} halvings")


@dataclass(frozen=True)
class LineSearchConfig:
    """Secant search on the directional derivative.

    A trial is accepted when it improves the objective and
    |slope| <= tolerance * slope(0). Each trial costs one EM-equivalent.
    When the bracket around the maximum shrinks below ``resolution``
    (relative) the slope test is beyond float resolution and the improving
    trial with the smallest |slope| is returned.
    """

    max_trials: int = 10
    tolerance: float = 0.1
    initial_step: float = 1.0
    max_expand: float = 10.0
    resolution: float = 1e-8


EXACT_LINE_SEARCH = LineSearchConfig(max_trials=50, tolerance=1e-10)


@dataclass
class LineSearchResult:
    gamma: float
    success: bool
    evals: int
    point: Optional[Point] = None


def line_search_secant(
    problem: Problem,
    point: Point,
    direction: np.ndarray,
    config: LineSearchConfig = LineSearchConfig(),
) -> LineSearchResult:
    slope0 = float(point.grad @ direction)
    if not (math.isfinite(slope0) and slope0 > 0):
        return LineSearchResult(0.0, False, 0)
    lo, hi = 0.0, math.inf
    prev_g, prev_s = 0.0, slope0
    gamma = config.initial_step
    evals = 0
    best = None
    for _ in range(config.max_trials):
        try:
            gamma = step_shrink_to_feasible(point.x, direction, gamma, problem.is_feasible)
        except InfeasibleStepError:
            break
        if gamma <= lo:
            break
        try:
            probe = problem.evaluate(point.x + gamma * direction)
        except GmmError:
            hi = gamma
            gamma = 0.5 * (lo + hi)
            continue
        evals += 1
        s = float(probe.grad @ direction)
        # near a solution the gain can fall below float resolution while the
        # slope test is met, so a change within the decrease slack is a tie
        improved = not _decreased(probe.value, point.value)
        if improved and abs(s) <= config.tolerance * slope0:
            return LineSearchResult(gamma, True, evals, probe)
        if improved and (best is None or abs(s) < best[2]):
            best = (gamma, probe, abs(s))
        if improved and s > 0:
            lo = gamma
        else:
            hi = gamma
        if best is not None and lo > 0 and math.isfinite(hi) and hi - lo <= config.resolution * hi:
            return LineSearchResult(best[0], True, evals, best[1])
        denom = s - prev_s
        nxt = gamma - s * (gamma - prev_g) / denom if denom != 0 else math.nan
        prev_g, prev_s = gamma, s
        if math.isinf(hi):
            upper = gamma * config.max_expand
            gamma = nxt if (lo < nxt <= upper) else upper
        else:
            gamma = nxt if (lo < nxt < hi) else 0.5 * (lo + hi)
    return LineSearchResult(0.0, False, evals)


# ----------------------------------------------------------------------------
# accelerators


class Accelerator:
    """One family of acceleration steps. ``step`` returns (point, None) on an
    accepted step or (None, reason) on failure."""

    name = "accelerator"
    # whether a stop signalled by this accelerator's step must be confirmed
    # by an EM step (true for searched directions, whose gain can be tiny)
    confirm_stop = True

    def start(self, problem: Problem, point: Point) -> None:
        pass

    def step(self, problem: Problem, point: Point):
        raise NotImplementedError

    def config(self) -> dict:
        return {"name": self.name}


def _decreased(new: float, old: float) -> bool:
    return new < old - DECREASE_SLACK * abs(old)


class FixedPem(Accelerator):
    """theta + gamma (theta_EM - theta), written as theta_EM + (gamma - 1) u
    so that gamma = 1 reproduces the EM update exactly.

    The gain of a fixed multiple of the EM step tracks EM's own progress, so
    its stops are not re-checked by an EM step."""

    confirm_stop = False

    def __init__(self, gamma: float):
        self.gamma = float(gamma)
        self.name = f"PEM({self.gamma:g})"

    def step(self, problem, point):
        target = point.em_target
        if target is None:
            return None, "degenerate"
        u = target - point.x
        at = lambda g: target + (g - 1.0) * u
        try:
            g = step_shrink_to_feasible(point.x, u, self.gamma, problem.is_feasible, point_at=at)
        except InfeasibleStepError:
            return None, "infeasible"
        if g != self.gamma:
            problem.ledger.event("step-shrunk", gamma=g)
        new = problem.evaluate(at(g))
        if _decreased(new.value, point.value):
            return None, "objective-decrease"
        return new, None

    def config(self):
        return {"name": self.name, "gamma": self.gamma}


class OptimizedPem(Accelerator):
    name = "PEM(opt)"

    def __init__(self, line_search: LineSearchConfig = LineSearchConfig()):
        self.line_search = line_search

    def step(self, problem, point):
        if point.em_target is None:
            return None, "degenerate"
        res = line_search_secant(problem, point, point.em_direction, self.line_search)
        if not res.success:
            return None, "line-search-failed"
        return res.point, None


class GradientAscent(Accelerator):
    """Steps along the ascent gradient: fixed ``step`` or a line search when ``step`` is None."""

    def __init__(self, step: Optional[float] = None, line_search: LineSearchConfig = LineSearchConfig()):
        self.fixed = step
        self.line_search = line_search
        self.name = "GA(opt)" if step is None else f"GA({step:g})"

    def step(self, problem, point):
        r = point.grad
        if self.fixed is None:
            res = line_search_secant(problem, point, r, self.line_search)
            if not res.success:
                return None, "line-search-failed"
            return res.point, None
        try:
            g = step_shrink_to_feasible(point.x, r, self.fixed, problem.is_feasible)
        except InfeasibleStepError:
            return None, "infeasible"
        new = problem.evaluate(point.x + g * r)
        if _decreased(new.value, point.value):
            return None, "objective-decrease"
        return new, None

    def config(self):
        return {"name": self.name, "gamma": self.fixed}


class ConjugateGradient(Accelerator):
    """Polak-Ribiere CG on the ascent gradient, restarted every ``restart_period`` steps
    (default: the flat parameter count)."""

    name = "CG"

    def __init__(self, restart_period: Optional[int] = None, line_search: LineSearchConfig = LineSearchConfig()):
        self.restart_period = restart_period
        self.line_search = line_search

    def _period(self, point):
        return self.restart_period or point.x.shape[0]

    def start(self, problem, point):
        self.k = 0
        self.r = point.grad
        self.d = point.grad.copy()

    def _beta(self, new):
        return float(new.grad @ (new.grad - self.r)) / float(self.r @ self.r)

    def _base(self, new):
        return new.grad

    def step(self, problem, point):
        res = line_search_secant(problem, point, self.d, self.line_search)
        if not res.success:
            return None, "line-search-failed"
        new = res.point
        self.k += 1
        base = self._base(new)
        if base is None:
            return None, "degenerate"
        if self.k % self._period(point) == 0:
            beta = 0.0
            problem.ledger.event("cg-restart", reason="period")
        else:
            beta = self._beta(new)
            if not math.isfinite(beta):
                beta = 0.0
                problem.ledger.event("cg-restart", reason="denominator")
        d = base + beta * self.d
        if not float(d @ new.grad) > 0:
            d = base.copy()
            problem.ledger.event("cg-restart", reason="not-ascent")
        self.r, self.d = new.grad, d
        return new, None

    def config(self):
        return {"name": self.name, "restart_period": self.restart_period}


class ConjugateGradientEM(ConjugateGradient):
    """CG whose directions are built from the EM step u = theta_EM - theta:
    beta = -u'(r' - r) / d'(r' - r), d' = u' + beta d, d0 = u0."""

    name = "CG+EM"

    def start(self, problem, point):
        self.k = 0
        self.r = point.grad
        self.d = point.em_direction

    def _base(self, new):
        return None if new.em_target is None else new.em_direction

    def _beta(self, new):
        y = new.grad - self.r
        den = float(self.d @ y)
        if abs(den) < 1e-300:
            return math.nan
        return -float(new.em_direction @ y) / den


# ----------------------------------------------------------------------------
# run records


@dataclass
class RunRecord:
    method: str
    termination: str
    em_equivalent_count: int
    final_objective: float
    trace: list
    accepted: list
    events: list
    final_params: Any = None
    init_params: Any = None
    config: dict = field(default_factory=dict)
    seed: Optional[int] = None
    dataset: Optional[str] = None
    init_index: Optional[int] = None
    steps: int = 0
    message: str = ""
    final_x: Any = None

    @property
    def converged(self) -> bool:
        return self.termination == "converged"

    def segments(self) -> list[list[float]]:
        """Accepted objective values split at restarts."""
        cuts = sorted(e["accepted_index"] for e in self.events if e["kind"] == "restart")
        values = [v for _, v in self.accepted]
        bounds = [0, *cuts, len(values)]
        return [values[a:b] for a, b in zip(bounds[:-1], bounds[1:]) if b > a]

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "dataset": self.dataset,
            "init_index": self.init_index,
            "seed": self.seed,
            "config": self.config,
            "termination": self.termination,
            "message": self.message,
            "em_equivalent_count": self.em_equivalent_count,
            "steps": self.steps,
            "final_objective": self.final_objective,
            "trace": self.trace,
            "accepted": [list(a) for a in self.accepted],
            "events": self.events,
            "init_params": _params_dict(self.init_params),
            "final_params": _params_dict(self.final_params),
        }
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(
            method=d["method"],
            termination=d["termination"],
            em_equivalent_count=int(d["em_equivalent_count"]),
            final_objective=float(d["final_objective"]),
            trace=list(d["trace"]),
            accepted=[tuple(a) for a in d["accepted"]],
            events=list(d["events"]),
            final_params=_params_from(d.get("final_params")),
            init_params=_params_from(d.get("init_params")),
            config=d.get("config", {}),
            seed=d.get("seed"),
            dataset=d.get("dataset"),
            init_index=d.get("init_index"),
            steps=int(d.get("steps", 0)),
            message=d.get("message", ""),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def loads(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))


def _params_dict(p: Optional[GmmParams]):
    if p is None:
        return None
    return {
        "mode": p.mode,
        "weights": p.weights.tolist(),
        "means": p.means.tolist(),
        "covariances": p.covariances.tolist(),
    }


def _params_from(d):
    if d is None:
        return None
    return GmmParams(np.array(d["weights"]), np.array(d["means"]), np.array(d["covariances"]))


# ----------------------------------------------------------------------------
# drivers


def _drive(
    problem: Problem,
    point: Point,
    accelerator: Optional[Accelerator],
    stop: StoppingRule,
    max_iters: int,
    hybrid: bool,
    closeness: float = CLOSENESS,
    max_fallbacks: int = MAX_FALLBACKS,
    on_accept: Optional[Callable[[Point], bool]] = None,
):
    """Run one segment from an evaluated ``point``.

    Returns (point, termination, steps); termination is "interrupted" when
    ``on_accept`` asked to stop (pruning).
    """
    ledger = problem.ledger
    values = [point.value]
    ledger.accept(point.value)
    steps = 0
    in_em = accelerator is None or hybrid
    if not in_em:
        accelerator.start(problem, point)
    immediate = 0
    fresh = False

    def stop_now(p):
        if stop.kind == "gradient":
            return float(np.linalg.norm(p.grad)) < stop.threshold
        return should_stop(values, stop)

    if stop.kind == "gradient" and stop_now(point):
        return point, "converged", steps

    while True:
        if ledger.count >= max_iters:
            return point, "max-iters", steps
        if in_em:
            if point.em_target is None:
                ledger.event("degenerate", message=str(point.em_error))
                return point, "degenerate", steps
            prev = point.value
            point = problem.evaluate(point.em_target)
        else:
            new, reason = accelerator.step(problem, point)
            if new is None:
                ledger.event("fallback", reason=reason)
                if not hybrid:
                    return point, reason, steps
                immediate = immediate + 1 if fresh else 0
                if immediate > max_fallbacks:
                    return point, "flat-region", steps
                in_em = True
                continue
            fresh = False
            immediate = 0
            prev = point.value
            point = new
        steps += 1
        values.append(point.value)
        ledger.accept(point.value)
        if on_accept is not None and on_accept(point):
            return point, "interrupted", steps
        if stop_now(point):
            if in_em or not hybrid or not accelerator.confirm_stop:
                return point, "converged", steps
            # an accelerator step can be tiny far from a solution (a poor
            # direction on a plateau); only an EM step may confirm the stop
            ledger.event("stop-check")
            in_em = True
            continue
        if in_em and accelerator is not None and point.value - prev < closeness:
            ledger.event("acceleration-start", accelerator=accelerator.name)
            accelerator.start(problem, point)
            in_em = False
            fresh = True


def default_variance_floor(data: Dataset) -> np.ndarray:
    return np.maximum(VARIANCE_FLOOR_FACTOR * data.points.var(axis=0), 1e-300)


def _run_gmm(
    init: GmmParams,
    data: Dataset,
    accelerator: Optional[Accelerator],
    hybrid: bool,
    method: str,
    priors: Optional[Priors] = None,
    chart: str = "natural",
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    variance_floor="auto",
    prune: Optional[bool] = None,
    closeness: float = CLOSENESS,
) -> RunRecord:
    if variance_floor == "auto":
        variance_floor = default_variance_floor(data) if priors is None else None
    if prune is None:
        prune = priors is not None
    ledger = IterationLedger()
    problem = GmmProblem(data, init.layout, chart, priors, variance_floor, ledger)
    config = {
        "accelerator": None if accelerator is None else accelerator.config(),
        "hybrid": hybrid,
        "chart": chart,
        "objective": "ml" if priors is None else "map",
        "stop": {"kind": stop.kind, "threshold": stop.threshold},
        "max_iters": max_iters,
        "prune": prune,
    }
    message = ""
    total_steps = 0
    point = None
    pending: dict = {}

    def check_prune(p: Point) -> bool:
        pruned_params, pruned = prune_components(p.params, data.N)
        if pruned:
            pending["params"], pending["pruned"] = pruned_params, pruned
            return True
        return False

    try:
        params = init
        charge = False
        while True:
            if prune:
                params, pruned = prune_components(params, data.N)
                if pruned:
                    ledger.event("prune", components=pruned, remaining=params.M)
                    if priors is not None:
                        keep = [j for j in range(problem.layout.M) if j not in pruned]
                        problem.priors = problem.priors.restrict(keep)
                    problem.layout = params.layout
            point = problem.evaluate(pack(params, chart), charge=charge)
            point, termination, steps = _drive(
                problem, point, accelerator, stop, max_iters, hybrid, closeness,
                on_accept=check_prune if prune else None,
            )
            total_steps += steps
            if termination != "interrupted":
                break
            ledger.event("prune", components=pending["pruned"], remaining=pending["params"].M)
            keep = [j for j in range(problem.layout.M) if j not in pending["pruned"]]
            if problem.priors is not None:
                problem.priors = problem.priors.restrict(keep)
            problem.layout = pending["params"].layout
            params = pending["params"]
            ledger.event("restart", accepted_index=len(ledger.accepted))
            charge = True
    except (GmmError, np.linalg.LinAlgError) as exc:
        termination = "degenerate"
        message = f"{type(exc).__name__}: {exc}"
        ledger.event("degenerate", message=message)

    final = point.params if point is not None and point.params is not None else None
    return RunRecord(
        method=method,
        termination=termination,
        em_equivalent_count=ledger.count,
        final_objective=float(point.value) if point is not None else float("nan"),
        trace=ledger.trace,
        accepted=ledger.accepted,
        events=ledger.events,
        final_params=final,
        init_params=init,
        config=config,
        steps=total_steps,
        message=message,
        final_x=None if point is None else point.x,
    )


def run_em(
    init: GmmParams,
    data: Dataset,
    priors: Optional[Priors] = None,
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    **kw,
) -> RunRecord:
    """Plain EM: alternate E- and M-steps until the stopping rule fires."""
    return _run_gmm(init, data, None, False, "EM", priors, stop=stop, max_iters=max_iters, **kw)


def run_pem(
    init: GmmParams,
    data: Dataset,
    step: Union[float, str] = 1.5,
    priors: Optional[Priors] = None,
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    line_search: LineSearchConfig = LineSearchConfig(),
    **kw,
) -> RunRecord:
    """Parameterized EM from the first iteration (no EM warm-up phase).

    ``step`` is a fixed gamma or ``"optimized"`` for a line search along the
    EM direction. A fixed step that lowers the objective ends the run.
    """
    acc = OptimizedPem(line_search) if step == "optimized" else FixedPem(float(step))
    return _run_gmm(init, data, acc, False, acc.name, priors, stop=stop, max_iters=max_iters, **kw)


def run_gradient_ascent(
    init: GmmParams,
    data: Dataset,
    step: Union[float, str] = "optimized",
    constraint_handling: str = "projection",
    priors: Optional[Priors] = None,
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    line_search: LineSearchConfig = LineSearchConfig(),
    **kw,
) -> RunRecord:
    """Gradient ascent with the projected weight gradient or in the omega chart."""
    chart = {"projection": "natural", "omega-chart": "omega", "omega": "omega"}[constraint_handling]
    acc = GradientAscent(None if step == "optimized" else float(step), line_search)
    return _run_gmm(init, data, acc, False, acc.name, priors, chart=chart, stop=stop, max_iters=max_iters, **kw)


def run_cg(
    init,
    data: Optional[Dataset] = None,
    priors: Optional[Priors] = None,
    chart: str = "natural",
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    restart_period: Optional[int] = None,
    line_search: LineSearchConfig = LineSearchConfig(),
    problem: Optional[Problem] = None,
    **kw,
) -> RunRecord:
    """Conjugate gradient on the ascent gradient.

    With ``problem`` given, ``init`` is a flat starting vector for that
    problem and no mixture machinery is involved.
    """
    acc = ConjugateGradient(restart_period, line_search)
    if problem is None:
        return _run_gmm(init, data, acc, False, "CG", priors, chart=chart, stop=stop, max_iters=max_iters, **kw)
    return run_on_problem(problem, init, acc, stop, max_iters, method="CG")


def run_cg_em(
    init: GmmParams,
    data: Dataset,
    priors: Optional[Priors] = None,
    chart: str = "natural",
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    restart_period: Optional[int] = None,
    line_search: LineSearchConfig = LineSearchConfig(),
    **kw,
) -> RunRecord:
    """CG+EM from the first iteration; ``chart="omega"`` gives CG+EM(rp)."""
    acc = ConjugateGradientEM(restart_period, line_search)
    name = "CG+EM(rp)" if chart == "omega" else "CG+EM"
    return _run_gmm(init, data, acc, False, name, priors, chart=chart, stop=stop, max_iters=max_iters, **kw)


def run_on_problem(problem: Problem, x0, accelerator: Optional[Accelerator], stop: StoppingRule,
                   max_iters: int = DEFAULT_MAX_ITERS, hybrid: bool = False, method: str = "") -> RunRecord:
    """Run an accelerator (or EM, when it is None) on any :class:`Problem`."""
    point = problem.evaluate(np.asarray(x0, dtype=float), charge=False)
    point, termination, steps = _drive(problem, point, accelerator, stop, max_iters, hybrid)
    ledger = problem.ledger
    return RunRecord(
        method=method or (accelerator.name if accelerator else "EM"),
        termination=termination,
        em_equivalent_count=ledger.count,
        final_objective=point.value,
        trace=ledger.trace,
        accepted=ledger.accepted,
        events=ledger.events,
        steps=steps,
        final_x=point.x,
    )


# ----------------------------------------------------------------------------
# method registry

METHODS = ("em", "ga-fixed", "ga-opt", "cg", "cg-em", "cg-em-rp", "pem-fixed", "pem-opt")


def make_accelerator(
    method: str,
    gamma: Optional[float] = None,
    restart_period: Optional[int] = None,
    line_search: LineSearchConfig = LineSearchConfig(),
) -> tuple[Optional[Accelerator], str]:
    """Accelerator and chart for a command-line method name."""
    if method == "em":
        return None, "natural"
    if method == "ga-fixed":
        return GradientAscent(1e-4 if gamma is None else gamma, line_search), "natural"
    if method == "ga-opt":
        return GradientAscent(None, line_search), "natural"
    if method == "cg":
        return ConjugateGradient(restart_period, line_search), "natural"
    if method == "cg-em":
        return ConjugateGradientEM(restart_period, line_search), "natural"
    if method == "cg-em-rp":
        acc = ConjugateGradientEM(restart_period, line_search)
        acc.name = "CG+EM(rp)"
        return acc, "omega"
    if method == "pem-fixed":
        return FixedPem(1.5 if gamma is None else gamma), "natural"
    if method == "pem-opt":
        return OptimizedPem(line_search), "natural"
    raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")


def run_hybrid(
    init: GmmParams,
    data: Dataset,
    accelerator: Union[str, Accelerator],
    priors: Optional[Priors] = None,
    stop: StoppingRule = StoppingRule(),
    max_iters: int = DEFAULT_MAX_ITERS,
    chart: Optional[str] = None,
    gamma: Optional[float] = None,
    restart_period: Optional[int] = None,
    line_search: LineSearchConfig = LineSearchConfig(),
    **kw,
) -> RunRecord:
    """EM until close to a solution, then accelerate; fall back to EM on failure."""
    if isinstance(accelerator, str):
        accelerator, default_chart = make_accelerator(accelerator, gamma, restart_period, line_search)
    else:
        default_chart = "natural"
    if accelerator is None:
        return run_em(init, data, priors, stop, max_iters, **kw)
    return _run_gmm(init, data, accelerator, True, accelerator.name, priors,
                    chart=chart or default_chart, stop=stop, max_iters=max_iters, **kw)


def fit(init: GmmParams, data: Dataset, method: str = "em", **kw) -> RunRecord:
    """Run a named method: ``em`` alone, everything else under the hybrid driver."""
    if method == "em":
        kw = {k: v for k, v in kw.items() if k not in ("gamma", "restart_period", "line_search", "chart")}
        return run_em(init, data, **kw)
    return run_hybrid(init, data, method, **kw)

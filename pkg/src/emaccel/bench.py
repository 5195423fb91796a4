"""Synthetic benchmark protocol: models, data, initialisations, run matrix and report.

Seeding: every random draw is keyed off the master seed through
``numpy.random.SeedSequence(master, spawn_key=(crc32(dataset), purpose, ...))``
with purpose 0 for the data set and 1 for initialisation ``i``, so any
(dataset, init) cell can be regenerated on its own.
"""
from __future__ import annotations

import json
import math
import os
import warnings
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .model import Dataset, GmmParams, Priors, load_dataset
from .optimizers import DEFAULT_MAX_ITERS, RunRecord, StoppingRule, fit

AGREEMENT_TOL = 1e-3
SIGNIFICANCE = 0.05


# ----------------------------------------------------------------------------
# models and data


@dataclass(frozen=True, eq=False)
class ModelSpec:
    name: str
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    default_n: int = 2000

    def params(self) -> GmmParams:
        return GmmParams(self.weights, self.means, self.covariances)

    @property
    def M(self) -> int:
        return len(self.weights)


def _two_gaussians(name: str, mu2) -> ModelSpec:
    return ModelSpec(name, np.array([0.5, 0.5]), np.array([[0.0, 0.0], mu2], dtype=float),
                     np.stack([np.eye(2), np.eye(2)]))


def random_model(name: str, M: int, d: int, separation: float, seed: int, default_n: int = 2000) -> ModelSpec:
    """Random mixture: means ~ separation * N(0, I), covariance eigenvalues in [0.5, 1.5],
    weights ~ Dirichlet(5, ..., 5). Smaller ``separation`` means more overlap."""
    rng = np.random.default_rng(seed)
    weights = rng.dirichlet(np.full(M, 5.0))
    means = separation * rng.standard_normal((M, d))
    covs = []
    for _ in range(M):
        q, _ = np.linalg.qr(rng.standard_normal((d, d)))
        c = (q * rng.uniform(0.5, 1.5, d)) @ q.T
        covs.append(0.5 * (c + c.T))
    return ModelSpec(name, weights, means, np.array(covs), default_n)


# Models 4-6 are not published; these are seeded stand-ins with the stated
# shapes (M=5; d=2 easy/hard, d=5) and sample sizes.
BUILTIN_MODELS = {
    "paper-1": _two_gaussians("paper-1", (3.0, 3.0)),
    "paper-2": _two_gaussians("paper-2", (2.0, 2.0)),
    "paper-3": _two_gaussians("paper-3", (1.0, 1.0)),
    "paper-4": random_model("paper-4", 5, 2, 4.0, seed=4, default_n=5000),
    "paper-5": random_model("paper-5", 5, 2, 1.2, seed=5, default_n=10000),
    "paper-6": random_model("paper-6", 5, 5, 2.5, seed=6, default_n=20000),
}


def generate_dataset(spec: ModelSpec, N: int, seed) -> Dataset:
    """N i.i.d. draws: categorical component, then mean + Cholesky factor @ standard normal."""
    if N < 1:
        raise ValueError("N must be at least 1")
    rng = np.random.default_rng(seed)
    params = spec.params().to_full()
    comp = rng.choice(spec.M, size=N, p=params.weights / params.weights.sum())
    z = rng.standard_normal((N, params.d))
    L = np.linalg.cholesky(params.covariances)
    x = params.means[comp] + np.einsum("nab,nb->na", L[comp], z)
    return Dataset(x)


def init_params(data: Dataset, M: int, seed, mode: str = "full", max_retries: int = 100) -> GmmParams:
    """Random start: weights ~ Dirichlet(1), means uniform in the data's bounding box,
    isotropic variances equal to the squared distance to the nearest other mean.

    With M = 1 the per-dimension data variance is used instead.
    """
    if data.N < 2:
        raise ValueError("initialisation needs at least two points")
    rng = np.random.default_rng(seed)
    lo, hi = data.bounds()
    if np.all(lo == hi):
        raise ValueError("all data points are identical")
    w = rng.dirichlet(np.ones(M))
    mu = rng.uniform(lo, hi, size=(M, data.d))
    if M == 1:
        var = np.maximum(data.points.var(axis=0), 1e-300)[None, :]
    else:
        for _ in range(max_retries + 1):
            dist = np.linalg.norm(mu[:, None, :] - mu[None, :, :], axis=2)
            np.fill_diagonal(dist, np.inf)
            r = dist.min(axis=1)
            clash = np.flatnonzero(r == 0)
            if clash.size == 0:
                break
            mu[clash[0]] = rng.uniform(lo, hi)
        else:
            raise ValueError("could not sample distinct initial centres")
        var = np.repeat((r**2)[:, None], data.d, axis=1)
    if mode == "diagonal":
        return GmmParams(w, mu, var)
    return GmmParams(w, mu, np.stack([np.diag(v) for v in var]))


# ----------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DatasetSpec:
    name: str
    model: Optional[str] = None
    path: Optional[str] = None
    n: Optional[int] = None
    M: Optional[int] = None


@dataclass(frozen=True)
class MethodSpec:
    label: str
    kind: str
    gamma: Optional[float] = None
    chart: Optional[str] = None
    restart_period: Optional[int] = None


@dataclass(frozen=True)
class BenchConfig:
    datasets: tuple
    methods: tuple
    n_inits: int = 40
    seed: int = 1999
    stop: StoppingRule = StoppingRule()
    max_iters: int = DEFAULT_MAX_ITERS
    objective: str = "ml"
    mode: str = "full"
    bootstrap_resamples: int = 10_000

    def __post_init__(self):
        if not self.datasets or not self.methods or self.n_inits < 1:
            raise ValueError("config needs at least one dataset, one method and one init")
        for ds in self.datasets:
            if ds.n is not None and ds.n < 1:
                raise ValueError(f"dataset {ds.name}: N must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["datasets"] = [asdict(x) for x in self.datasets]
        d["methods"] = [asdict(x) for x in self.methods]
        d["stop"] = {"kind": self.stop.kind, "threshold": self.stop.threshold}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BenchConfig":
        d = dict(d)
        d["datasets"] = tuple(DatasetSpec(**x) for x in d["datasets"])
        d["methods"] = tuple(MethodSpec(**x) for x in d["methods"])
        if "stop" in d:
            d["stop"] = StoppingRule(**d["stop"])
        return cls(**d)


TABLE1_METHODS = (
    MethodSpec("EM", "em"),
    MethodSpec("CG", "cg"),
    MethodSpec("CG+EM", "cg-em"),
    MethodSpec("CG+EM(rp)", "cg-em-rp"),
    MethodSpec("PEM(opt)", "pem-opt"),
    MethodSpec("PEM(1.5)", "pem-fixed", gamma=1.5),
    MethodSpec("PEM(1.9)", "pem-fixed", gamma=1.9),
)

BUILTIN_CONFIGS = {
    "paper-table1": BenchConfig(
        datasets=tuple(DatasetSpec(f"dataset-{i}", model=f"paper-{i}", n=2000) for i in (1, 2, 3)),
        methods=TABLE1_METHODS,
        n_inits=40,
    ),
    "paper-table2-style": BenchConfig(
        datasets=(
            DatasetSpec("dataset-6", model="paper-6", n=20000),
            DatasetSpec("dataset-4", model="paper-4", n=5000),
            DatasetSpec("dataset-5", model="paper-5", n=10000),
        ),
        methods=tuple(m for m in TABLE1_METHODS if m.label in ("EM", "CG+EM", "PEM(opt)", "PEM(1.5)", "PEM(1.9)")),
        n_inits=40,
    ),
}


def load_config(ref: str) -> BenchConfig:
    """A builtin config name or a JSON file."""
    if ref in BUILTIN_CONFIGS:
        return BUILTIN_CONFIGS[ref]
    return BenchConfig.from_dict(json.loads(Path(ref).read_text()))


def child_seed(master: int, dataset: str, *key: int) -> int:
    ss = np.random.SeedSequence(master, spawn_key=(zlib.crc32(dataset.encode()), *key))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def dataset_for(spec: DatasetSpec, master_seed: int) -> tuple[Dataset, int]:
    """The data set and the component count to fit."""
    if spec.path is not None:
        data = load_dataset(spec.path)
        if spec.M is None:
            raise ValueError(f"dataset {spec.name}: M is required for file data")
        return data, spec.M
    model = BUILTIN_MODELS[spec.model]
    n = spec.n or model.default_n
    return generate_dataset(model, n, child_seed(master_seed, spec.name, 0)), spec.M or model.M


# ----------------------------------------------------------------------------
# run matrix


def _run_cell(task) -> RunRecord:
    data, p0, method, cfg, ds_name, i, seed = task
    priors = Priors.paper_defaults(p0.M, data) if cfg.objective == "map" else None
    try:
        rec = fit(p0, data, method.kind, gamma=method.gamma, chart=method.chart,
                  restart_period=method.restart_period, priors=priors, stop=cfg.stop,
                  max_iters=cfg.max_iters)
    except Exception as exc:  # recorded, not fatal to the matrix
        rec = RunRecord(method.label, "error", 0, float("nan"), [], [], [], init_params=p0,
                        message=f"{type(exc).__name__}: {exc}")
    rec.method = method.label
    rec.dataset = ds_name
    rec.init_index = i
    rec.seed = seed
    rec.config = {**rec.config, "method": asdict(method)}
    rec.final_x = None
    return rec


def build_tasks(config: BenchConfig) -> list:
    tasks = []
    for ds in config.datasets:
        data, M = dataset_for(ds, config.seed)
        for i in range(config.n_inits):
            seed = child_seed(config.seed, ds.name, 1, i)
            p0 = init_params(data, M, seed, config.mode)
            for method in config.methods:
                tasks.append((data, p0, method, config, ds.name, i, seed))
    return tasks


def run_matrix(config: BenchConfig, jobs: int = 1) -> list[RunRecord]:
    """Every method from every shared initialisation on every data set.

    Results come back in (dataset, init, method) order regardless of ``jobs``.
    """
    tasks = build_tasks(config)
    if jobs <= 1:
        return [_run_cell(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_cell, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


# ----------------------------------------------------------------------------
# statistics


def speedups(records: Sequence[RunRecord]) -> dict:
    """Per-run EM iterations / method iterations, keyed by (dataset, method).

    Values are lists of (init_index, ratio). Pairs where either run did not
    converge are left out with a warning.
    """
    em = {(r.dataset, r.init_index): r for r in records if r.method == "EM"}
    out: dict = {}
    missing = 0
    for r in records:
        base = em.get((r.dataset, r.init_index))
        if base is None or not (base.converged and r.converged):
            missing += 1
            continue
        out.setdefault((r.dataset, r.method), []).append(
            (r.init_index, base.em_equivalent_count / r.em_equivalent_count))
    if missing:
        warnings.warn(f"{missing} run(s) without a converged EM pair were excluded from speed-ups")
    return out


def bootstrap_paired_test(best, other, K: int = 10_000, seed: int = 0) -> float:
    """One-sided shift-method bootstrap test that ``best`` exceeds ``other`` on average.

    The paired differences best - other are recentred to mean zero and
    resampled K times; the p-value is the fraction of resampled means that
    are >= the observed mean difference (ties count).
    """
    best = np.asarray(best, dtype=float)
    other = np.asarray(other, dtype=float)
    if best.shape != other.shape:
        raise ValueError("paired samples must have equal lengths")
    diffs = np.sort(best - other)
    observed = diffs.mean()
    centred = diffs - observed
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, diffs.size, size=(K, diffs.size))
    means = centred[idx].mean(axis=1)
    return float(np.mean(means >= observed))


def mean_ci(values, z: float = 1.96) -> tuple[float, float]:
    """Mean and normal-approximation half-width."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(z * v.std(ddof=1) / math.sqrt(v.size))


@dataclass
class MethodRow:
    method: str
    n_runs: int
    n_failed: int
    mean_iters: float
    speedups: list
    mean_speedup: float
    ci: float
    sd_speedup: float
    p_value: Optional[float]
    not_worse: bool


@dataclass
class DatasetReport:
    dataset: str
    rows: list
    best: str
    agreement: float
    flagged: list = field(default_factory=list)
    em_iters: dict = field(default_factory=dict)
    method_iters: dict = field(default_factory=dict)


@dataclass
class BenchReport:
    datasets: list

    def row(self, dataset: str, method: str) -> MethodRow:
        for ds in self.datasets:
            if ds.dataset == dataset:
                for r in ds.rows:
                    if r.method == method:
                        return r
        raise KeyError((dataset, method))

    def dataset(self, name: str) -> DatasetReport:
        return next(ds for ds in self.datasets if ds.dataset == name)


def _ordered(items):
    seen = []
    for it in items:
        if it not in seen:
            seen.append(it)
    return seen


def summarize(records: Sequence[RunRecord], K: int = 10_000, seed: int = 0) -> BenchReport:
    if not records:
        raise ValueError("no records to summarise")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        ratios = speedups(records)
    out = []
    for ds in _ordered(r.dataset for r in records):
        recs = [r for r in records if r.dataset == ds]
        methods = _ordered(r.method for r in recs)
        per_method = {}
        for m in methods:
            pairs = dict(ratios.get((ds, m), []))
            runs = [r for r in recs if r.method == m]
            ok = [r for r in runs if r.converged]
            per_method[m] = (runs, ok, pairs)

        means = {m: (np.mean(list(p.values())) if p else -np.inf) for m, (_, _, p) in per_method.items()}
        best = max(methods, key=lambda m: means[m])
        best_pairs = per_method[best][2]
        rows = []
        for m in methods:
            runs, ok, pairs = per_method[m]
            vals = list(pairs.values())
            mean_sp, ci = mean_ci(vals) if vals else (float("nan"), float("nan"))
            sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
            if m == best or not vals:
                p = None
            else:
                common = sorted(set(pairs) & set(best_pairs))
                p = bootstrap_paired_test([best_pairs[i] for i in common], [pairs[i] for i in common], K, seed)
            rows.append(MethodRow(
                method=m,
                n_runs=len(runs),
                n_failed=len(runs) - len(ok),
                mean_iters=float(np.mean([r.em_equivalent_count for r in ok])) if ok else float("nan"),
                speedups=[pairs[i] for i in sorted(pairs)],
                mean_speedup=mean_sp,
                ci=ci,
                sd_speedup=sd,
                p_value=p,
                not_worse=(m == best) or (p is not None and p > SIGNIFICANCE),
            ))

        flagged = []
        inits = _ordered(r.init_index for r in recs)
        for i in inits:
            finals = {r.method: r.final_objective for r in recs if r.init_index == i and r.converged}
            if len(finals) < 2:
                continue
            spread = max(finals.values()) - min(finals.values())
            if not spread <= AGREEMENT_TOL:
                flagged.append((i, spread))
        em_iters = {r.init_index: r.em_equivalent_count for r in recs if r.method == "EM" and r.converged}
        method_iters = {m: {r.init_index: r.em_equivalent_count for r in per_method[m][1]} for m in methods}
        out.append(DatasetReport(ds, rows, best, 1.0 - len(flagged) / max(1, len(inits)), flagged,
                                 em_iters, method_iters))
    return BenchReport(out)


# ----------------------------------------------------------------------------
# output


def _fmt(x, spec=".2f") -> str:
    if x is None:
        return "-"
    if isinstance(x, float) and math.isnan(x):
        return "nan"
    return format(x, spec)


def format_report(report: BenchReport) -> str:
    lines = []
    for ds in report.datasets:
        lines.append(f"== {ds.dataset} ==")
        lines.append(f"{'method':<12}{'iters':>10}{'speed-up':>20}{'p':>9}  best  failed")
        for r in ds.rows:
            sp = f"{_fmt(r.mean_speedup)} +- {_fmt(r.ci)}"
            lines.append(
                f"{r.method:<12}{_fmt(r.mean_iters, '.1f'):>10}{sp:>20}{_fmt(r.p_value, '.4f'):>9}"
                f"  {'*' if r.not_worse else ' ':^4}  {r.n_failed}"
            )
        lines.append(f"agreement within {AGREEMENT_TOL:g}: {ds.agreement:.3f} of inits")
        for i, spread in ds.flagged:
            lines.append(f"  flagged init {i}: final objectives spread {spread:.3g}")
        lines.append("")
    return "\n".join(lines)


def emit_report(records: Sequence[RunRecord], out_dir, fmt: str = "tsv", K: int = 10_000, seed: int = 0) -> str:
    """Write tables, scatter and histogram data; return the text summary.

    ``fmt`` is ``tsv`` or ``csv`` for the delimited tables (the text summary
    is always written to summary.txt).
    """
    sep = {"tsv": "\t", "csv": ","}[fmt]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = summarize(records, K, seed)
    for ds in report.datasets:
        header = ["method", "n_runs", "n_failed", "mean_iters", "mean_speedup", "ci95", "sd_speedup",
                  "p_value", "not_worse_than_best"]
        rows = [sep.join(header)]
        for r in ds.rows:
            rows.append(sep.join([
                r.method, str(r.n_runs), str(r.n_failed), _fmt(r.mean_iters, ".3f"), _fmt(r.mean_speedup, ".4f"),
                _fmt(r.ci, ".4f"), _fmt(r.sd_speedup, ".4f"), _fmt(r.p_value, ".4f"), str(int(r.not_worse)),
            ]))
        (out / f"table_{ds.dataset}.{fmt}").write_text("\n".join(rows) + "\n")
        for m, iters in ds.method_iters.items():
            if m == "EM":
                continue
            pts = [f"{ds.em_iters[i]}{sep}{iters[i]}" for i in sorted(iters) if i in ds.em_iters]
            safe = m.replace("(", "_").replace(")", "").replace("+", "p")
            (out / f"scatter_{ds.dataset}_{safe}.{fmt}").write_text(
                f"em_iters{sep}method_iters\n" + "\n".join(pts) + "\n")
        if ds.em_iters:
            counts, edges = np.histogram(list(ds.em_iters.values()), bins=20)
            hist = [f"{edges[k]:.1f}{sep}{counts[k]}" for k in range(len(counts))]
            (out / f"hist_{ds.dataset}_em.{fmt}").write_text(f"bin_start{sep}count\n" + "\n".join(hist) + "\n")
    text = format_report(report)
    (out / "summary.txt").write_text(text)
    return text


def record_filename(index: int, rec: RunRecord) -> str:
    safe = rec.method.replace("(", "_").replace(")", "").replace("+", "p")
    return f"{index:05d}__{rec.dataset}__{rec.init_index}__{safe}.json"


def save_records(records: Sequence[RunRecord], directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for k, rec in enumerate(records):
        (d / record_filename(k, rec)).write_text(rec.dumps())


def load_records(directory) -> tuple[list[RunRecord], list[tuple[str, str]]]:
    """Records from ``directory`` in file-name order, plus (file, error) for unreadable ones."""
    recs, bad = [], []
    for path in sorted(Path(directory).glob("*.json")):
        try:
            recs.append(RunRecord.loads(path.read_text()))
        except (ValueError, KeyError, TypeError) as exc:
            bad.append((path.name, f"{type(exc).__name__}: {exc}"))
    return recs, bad


def default_jobs() -> int:
    return max(1, (os.cpu_count() or 1))

import math
import warnings

import numpy as np
import pytest

from emaccel.bench import (
    BUILTIN_CONFIGS,
    BUILTIN_MODELS,
    BenchConfig,
    DatasetSpec,
    MethodSpec,
    bootstrap_paired_test,
    build_tasks,
    emit_report,
    generate_dataset,
    init_params,
    load_config,
    load_records,
    mean_ci,
    run_matrix,
    save_records,
    speedups,
    summarize,
)
from emaccel.model import Dataset, GmmParams
from emaccel.optimizers import RunRecord

from bench_helpers import fake_record, shift_test_oracle


# -- data ---------------------------------------------------------------------


def test_component_proportions():
    spec = BUILTIN_MODELS["paper-1"]
    data = generate_dataset(spec, 2000, 11)
    first = np.mean(np.linalg.norm(data.points - spec.means[0], axis=1)
                    < np.linalg.norm(data.points - spec.means[1], axis=1))
    # nearest-centre labels misclassify about 1.7% each way, symmetric in expectation
    assert abs(first - 0.5) < 3 * math.sqrt(0.25 / 2000)


def test_single_point():
    data = generate_dataset(BUILTIN_MODELS["paper-2"], 1, 0)
    assert data.points.shape == (1, 2)
    with pytest.raises(ValueError):
        generate_dataset(BUILTIN_MODELS["paper-2"], 0, 0)


def test_standard_normal_moments():
    from emaccel.bench import ModelSpec

    spec = ModelSpec("std", np.array([1.0]), np.zeros((1, 3)), np.eye(3)[None])
    N = 20000
    x = generate_dataset(spec, N, 5).points
    assert np.all(np.abs(x.mean(axis=0)) < 4 / math.sqrt(N))
    v = x.var(axis=0)
    assert np.all((v > 1 - 6 / math.sqrt(N)) & (v < 1 + 6 / math.sqrt(N)))


def test_generation_is_deterministic():
    a = generate_dataset(BUILTIN_MODELS["paper-4"], 300, 9)
    b = generate_dataset(BUILTIN_MODELS["paper-4"], 300, 9)
    assert np.array_equal(a.points, b.points)


def test_init_means_in_bounding_box(rng):
    data = Dataset(rng.uniform(size=(100, 2)))
    lo, hi = data.bounds()
    for seed in range(10):
        p = init_params(data, 4, seed)
        assert np.all(p.means >= lo) and np.all(p.means <= hi)
        assert p.weights.sum() == pytest.approx(1.0)


def test_init_variance_is_squared_nearest_distance(rng):
    data = Dataset(rng.normal(size=(50, 2)))
    for seed in range(5):
        p = init_params(data, 2, seed, mode="diagonal")
        r2 = np.sum((p.means[0] - p.means[1]) ** 2)
        assert np.allclose(p.covariances, r2, rtol=1e-12)
    # with three components each variance uses its own nearest neighbour
    p = init_params(data, 3, 0)
    dist = np.linalg.norm(p.means[:, None] - p.means[None], axis=2)
    np.fill_diagonal(dist, np.inf)
    assert np.allclose([c[0, 0] for c in p.covariances], dist.min(axis=1) ** 2)


def test_init_single_component_uses_data_variance(rng):
    data = Dataset(rng.normal(size=(50, 2)) * [1.0, 3.0])
    p = init_params(data, 1, 0, mode="diagonal")
    assert np.allclose(p.covariances[0], data.points.var(axis=0))


def test_init_is_deterministic(rng):
    data = Dataset(rng.normal(size=(50, 2)))
    assert init_params(data, 3, 42).equals(init_params(data, 3, 42))


# -- run matrix ---------------------------------------------------------------


def _tiny_config(n_inits=3, methods=("em", "pem-fixed")):
    return BenchConfig(
        datasets=(DatasetSpec("tiny", model="paper-1", n=150),),
        methods=tuple(MethodSpec(k.upper() if k == "em" else k, k, gamma=1.5 if k == "pem-fixed" else None)
                      for k in methods),
        n_inits=n_inits,
    )


def test_matrix_cardinality_and_pairing():
    cfg = _tiny_config()
    recs = run_matrix(cfg)
    assert len(recs) == 6
    assert [(r.init_index, r.method) for r in recs] == [(i, m) for i in range(3) for m in ("EM", "pem-fixed")]
    # every method shares the initialisation of its cell
    for i in range(3):
        a, b = [r for r in recs if r.init_index == i]
        assert a.init_params.equals(b.init_params)


def test_matrix_parallel_matches_serial():
    cfg = _tiny_config(2)
    a = [r.dumps() for r in run_matrix(cfg, jobs=1)]
    b = [r.dumps() for r in run_matrix(cfg, jobs=2)]
    assert a == b


def test_builtin_configs():
    t1 = BUILTIN_CONFIGS["paper-table1"]
    assert len(t1.methods) == 7 and t1.n_inits == 40
    assert [d.n for d in t1.datasets] == [2000] * 3
    assert len(build_tasks(_tiny_config())) == 6
    assert load_config("paper-table1") is t1


def test_config_json_round_trip(tmp_path):
    import json

    cfg = BUILTIN_CONFIGS["paper-table2-style"]
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    assert load_config(str(path)) == cfg


def test_config_rejects_zero_n():
    with pytest.raises(ValueError):
        BenchConfig(datasets=(DatasetSpec("x", model="paper-1", n=0),), methods=(MethodSpec("EM", "em"),))


# -- statistics ---------------------------------------------------------------


def test_speedup_examples():
    recs = [fake_record("EM", 0, 100), fake_record("X", 0, 50), fake_record("EM", 1, 80), fake_record("X", 1, 80)]
    s = speedups(recs)
    assert s[("d", "X")] == [(0, 2.0), (1, 1.0)]
    assert s[("d", "EM")] == [(0, 1.0), (1, 1.0)]


def test_speedup_excludes_unpaired():
    recs = [fake_record("EM", 0, 100, "max-iters"), fake_record("X", 0, 50)]
    with pytest.warns(UserWarning):
        assert ("d", "X") not in speedups(recs)


def test_bootstrap_symmetric_null():
    x = np.arange(1.0, 41.0)
    other = x[::-1].copy()  # same values, different pairing: observed shift exactly 0
    p = bootstrap_paired_test(x, other, 10000, 1)
    assert 0.4 < p < 0.6


def test_bootstrap_identical_samples():
    x = np.arange(10.0)
    assert bootstrap_paired_test(x, x, 1000, 0) == 1.0  # every resample ties


def test_bootstrap_constant_shift():
    x = np.arange(10.0)
    for K in (10, 1000):
        assert bootstrap_paired_test(x + 5.0, x, K, 0) <= 1.0 / K


def test_bootstrap_pair_order_invariance(rng):
    a, b = rng.normal(size=20), rng.normal(size=20)
    perm = rng.permutation(20)
    assert bootstrap_paired_test(a, b, 2000, 3) == bootstrap_paired_test(a[perm], b[perm], 2000, 3)


def test_bootstrap_length_mismatch():
    with pytest.raises(ValueError):
        bootstrap_paired_test([1.0, 2.0], [1.0], 10)


@pytest.mark.parametrize("effect", [1.0, 0.3])
def test_bootstrap_power_matches_oracle(effect):
    reps, n = 500, 40
    ours_rng = np.random.default_rng(100)
    oracle_rng = np.random.default_rng(200)
    ours = oracle = 0
    for r in range(reps):
        a = ours_rng.normal(size=n)
        ours += bootstrap_paired_test(a + effect, ours_rng.normal(size=n), 10000, r) <= 0.05
        b = oracle_rng.normal(size=n)
        oracle += shift_test_oracle(b + effect, oracle_rng.normal(size=n), 10000, oracle_rng) <= 0.05
    p1, p2 = ours / reps, oracle / reps
    se = math.sqrt(max(p2 * (1 - p2), 1.0 / reps) / reps)
    assert abs(p1 - p2) <= 3 * math.sqrt(2) * se


def test_mean_ci():
    m, h = mean_ci([1.0, 2.0, 3.0])
    assert m == 2.0 and h == pytest.approx(1.96 * 1.0 / math.sqrt(3))
    assert mean_ci([4.0]) == (4.0, 0.0)


# -- reports ------------------------------------------------------------------


def test_single_run_report(tmp_path):
    text = emit_report([fake_record("EM", 0, 10)], tmp_path)
    table = (tmp_path / "table_d.tsv").read_text().splitlines()
    assert len(table) == 2
    assert table[1].split("\t")[4] == "1.0000"
    assert "EM" in text and (tmp_path / "summary.txt").exists()


def test_dominance_marker():
    recs = []
    for i in range(20):
        recs += [fake_record("EM", i, 100), fake_record("A", i, 40 + i % 3), fake_record("B", i, 90 + i % 5)]
    rep = summarize(recs, K=2000)
    ds = rep.dataset("d")
    assert ds.best == "A"
    assert [r.method for r in ds.rows if r.not_worse] == ["A"]


def test_agreement_flagging():
    recs = [fake_record("EM", 0, 10, final=-5.0), fake_record("X", 0, 5, final=-5.0005),
            fake_record("EM", 1, 10, final=-5.0), fake_record("X", 1, 5, final=-5.1)]
    ds = summarize(recs, K=100).dataset("d")
    assert ds.agreement == 0.5
    assert [i for i, _ in ds.flagged] == [1]


def test_records_round_trip_and_corruption(tmp_path):
    recs = run_matrix(_tiny_config(2))
    save_records(recs, tmp_path)
    loaded, bad = load_records(tmp_path)
    assert bad == [] and [r.dumps() for r in loaded] == [r.dumps() for r in recs]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        assert emit_report(loaded, tmp_path / "a") == emit_report(recs, tmp_path / "b")
    (tmp_path / "00099__broken.json").write_text("{not json")
    loaded, bad = load_records(tmp_path)
    assert len(loaded) == 4 and bad[0][0] == "00099__broken.json"


def test_csv_output(tmp_path):
    emit_report([fake_record("EM", 0, 10), fake_record("X", 0, 5)], tmp_path, fmt="csv")
    assert (tmp_path / "table_d.csv").read_text().startswith("method,n_runs")
    assert (tmp_path / "scatter_d_X.csv").read_text().splitlines()[1] == "10,5"

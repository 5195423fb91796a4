import hypothesis
import numpy as np
import pytest

from emaccel.model import Dataset, GmmParams

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.register_profile("fast", max_examples=5, deadline=None)
hypothesis.settings.load_profile("default")


def random_spd(rng, d, lo=0.5, hi=2.0):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    c = (q * rng.uniform(lo, hi, d)) @ q.T
    return 0.5 * (c + c.T)


def random_params(rng, M, d, mode="full", spread=1.0):
    w = rng.dirichlet(np.full(M, 2.0))
    mu = spread * rng.standard_normal((M, d))
    if mode == "full":
        cov = np.stack([random_spd(rng, d) for _ in range(M)])
    else:
        cov = rng.uniform(0.5, 2.0, size=(M, d))
    return GmmParams(w, mu, cov)


def random_data(rng, N, d, scale=1.5):
    return Dataset(scale * rng.standard_normal((N, d)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)

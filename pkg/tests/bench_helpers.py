"""Shared fixtures for the bench tests: synthetic run records and an
independent implementation of the shift-method bootstrap test."""
import numpy as np

from emaccel.optimizers import RunRecord


def fake_record(method, init, iters, termination="converged", final=-1.0, dataset="d"):
    return RunRecord(method, termination, iters, final, [final] * (iters + 1), [(iters, final)], [],
                     dataset=dataset, init_index=init)


def shift_test_oracle(best, other, K, rng):
    """Resample raw differences; a bootstrap mean exceeding twice the observed
    mean is the same event as a recentred mean exceeding the observed one."""
    diffs = np.asarray(best) - np.asarray(other)
    obs = diffs.mean()
    boot = rng.choice(diffs, size=(K, diffs.size), replace=True).mean(axis=1)
    return np.mean(boot - obs >= obs)

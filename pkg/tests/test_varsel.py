import numpy as np
import pytest

from conftest import mixed_dataset
from mfamd.data import Kind
from mfamd.sampler import Priors, init_state
from mfamd.varsel import VarSelConfig, ZeroOverallVariance, selection_step, variance_ratio, write_trace


def test_vr_worked_example():
    # within = 0.5 + 0.5, overall = 5
    assert variance_ratio(np.array([1.0, 2.0, 3.0, 4.0]), np.array([0, 0, 1, 1])) == pytest.approx(0.2, abs=1e-15)


def test_vr_bounds():
    z = np.random.default_rng(0).standard_normal(50)
    assert variance_ratio(z, np.zeros(50, int)) == pytest.approx(1.0, abs=1e-15)
    sep = np.r_[np.full(5, 2.0), np.full(5, -1.0)]
    assert variance_ratio(sep, np.repeat([0, 1], 5)) == 0.0
    with pytest.raises(ZeroOverallVariance):
        variance_ratio(np.ones(4), np.array([0, 0, 1, 1]))


def test_vr_pools_columns():
    z = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 10.0], [4.0, 10.0]])
    alloc = np.array([0, 0, 1, 1])
    # numerators 1 + 0, denominators 5 + 100
    assert variance_ratio(z, alloc) == pytest.approx(1 / 105)


def test_fuzzy_with_hard_weights_matches_hard():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((30, 2))
    alloc = rng.integers(3, size=30)
    w = np.eye(3)[alloc]
    assert variance_ratio(z, alloc, 3) == pytest.approx(variance_ratio(z, None, weights=w), abs=1e-14)


def test_config_thresholds():
    c = VarSelConfig()
    assert c.threshold(Kind.CONTINUOUS) == 0.95
    assert c.threshold(Kind.BINARY) == c.threshold(Kind.NOMINAL) == 0.99
    with pytest.raises(ValueError):
        VarSelConfig(epsilon_continuous=1.5)


def state_for(ds, seed=0):
    return init_state(ds, 2, 1, Priors(), np.random.default_rng(seed))


def test_selection_step(tmp_path):
    ds = mixed_dataset(N=40, A=3, B=1, C=1, seed=4)
    s = state_for(ds)
    s.alloc = np.repeat([0, 1], 20)
    s.Z[:20, 0] += 10.0  # x0 strongly discriminating
    removed, trace = selection_step(s, ds, VarSelConfig(epsilon_continuous=0.5, epsilon_categorical=0.5))
    assert 0 not in removed and s.active[0]
    assert all(not s.active[j] for j in removed)
    assert len(trace) == ds.J
    write_trace(tmp_path / "t.csv", trace)
    assert (tmp_path / "t.csv").read_text().startswith("iteration,variable,vr,action\n")


def test_threshold_one_never_removes():
    ds = mixed_dataset(N=40, seed=6)
    s = state_for(ds)
    removed, _ = selection_step(s, ds, VarSelConfig(1.0, 1.0))
    assert removed == [] and s.active.all()


def test_all_below_threshold_removes_nothing():
    ds = mixed_dataset(N=40, A=2, B=0, C=0, seed=6)
    s = state_for(ds)
    s.alloc = np.repeat([0, 1], 20)
    s.Z[:20] += 50.0
    assert selection_step(s, ds, VarSelConfig())[0] == []


def test_removal_is_independent_across_variables():
    ds = mixed_dataset(N=40, A=3, B=2, C=1, seed=8)
    s = state_for(ds)
    cfg = VarSelConfig(0.9, 0.9)
    _, full = selection_step(s.copy(), ds, cfg)
    t = s.copy()
    t.active[[0, 3]] = False
    _, part = selection_step(t, ds, cfg)
    vr_full = {r.variable: r.vr for r in full}
    for r in part:
        assert r.vr == vr_full[r.variable]


def test_single_cluster_rejected():
    ds = mixed_dataset()
    s = init_state(ds, 1, 1, Priors(), np.random.default_rng(0))
    with pytest.raises(ValueError):
        selection_step(s, ds, VarSelConfig())

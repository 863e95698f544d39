import importlib
import math

import numpy as np
import pytest
from scipy import stats

from conftest import mixed_dataset
from mfamd.data import Kind, MixedDataset, VariableSpec
from mfamd.sampler import DegenerateModel, PhaseSchedule, Priors
from mfamd.select import (
    ApproxLikelihoodParts,
    FactorParams,
    approx_loglik,
    bic_mcmc,
    cell_seed,
    count_parameters,
    empirical_category_probs,
    fit_noise_fa,
    grid_search,
    parts_parameter_count,
    write_scores,
)

TINY = PhaseSchedule(burn_in_iters=30, varsel_check_every=10, varsel_stop_after_clean=1, posterior_iters=40, thin=10)


def test_empirical_probs():
    codes = np.array([0] * 8 + [1] * 2)
    np.testing.assert_allclose(empirical_category_probs(codes, 2, np.zeros(10, int), 1)[0], [0.8, 0.2])
    np.testing.assert_allclose(empirical_category_probs(np.tile([0, 1, 2], 4), 3), [1 / 3] * 3)
    # zero count -> add one half to every cell of that row
    np.testing.assert_allclose(empirical_category_probs(np.array([0, 0, 0]), 2), [3.5 / 4, 0.5 / 4])
    per = empirical_category_probs(np.array([0, 1, 0, 0]), 2, np.array([0, 0, 2, 2]), 3)
    np.testing.assert_allclose(per, [[0.5, 0.5], [0.5, 0.5], [2.5 / 3, 0.5 / 3]])


def tiny_ds():
    x = np.array([[0.1, 1.2], [-0.4, 0.3], [2.2, 1.9], [1.8, 2.5], [-1.0, -0.2], [2.9, 2.0]])
    schema = (
        VariableSpec("x1", Kind.CONTINUOUS),
        VariableSpec("x2", Kind.CONTINUOUS),
        VariableSpec("b", Kind.BINARY, ("n", "y")),
        VariableSpec("noise", Kind.BINARY, ("n", "y")),
    )
    codes = np.array([[0, 1], [0, 0], [1, 1], [1, 0], [0, 0], [0, 1]])
    return MixedDataset(schema=schema, continuous=x, codes=codes)


def test_approx_loglik_per_term_oracle(rng):
    ds = tiny_ds()
    active = np.array([True, True, True, False])
    parts = ApproxLikelihoodParts.build(ds, active, None)
    pi = np.array([0.4, 0.6])
    lam = rng.standard_normal((2, 4, 2))
    psi = np.array([0.5, 0.8, 1.0, 1.0])
    alloc = np.array([0, 0, 1, 1, 0, 1])
    got = approx_loglik(pi, lam, psi, alloc, ds, parts)

    # by hand: cluster 0 holds rows 0,1,4 with b = (0,0,0); cluster 1 rows 2,3,5 with b = (1,1,0)
    p_b = {0: [3.5 / 4, 0.5 / 4], 1: [1 / 3, 2 / 3]}
    p_noise = [3 / 6, 3 / 6]
    total = 0.0
    for i in range(6):
        like = 0.0
        for g in range(2):
            cov = np.outer(lam[g, :2, 1], lam[g, :2, 1]) + np.diag(psi[:2])
            like += pi[g] * stats.multivariate_normal(lam[g, :2, 0], cov).pdf(ds.continuous[i]) * p_b[g][ds.codes[i, 0]]
        total += math.log(like) + math.log(p_noise[ds.codes[i, 1]])
    assert abs(got - total) < 1e-10


def test_single_binary_single_cluster_is_entropy():
    codes = np.array([0, 0, 1, 0, 1, 1, 1, 1])[:, None]
    ds = MixedDataset(schema=(VariableSpec("b", Kind.BINARY, ("0", "1")),), continuous=np.zeros((8, 0)), codes=codes)
    parts = ApproxLikelihoodParts.build(ds, np.array([True]), None)
    got = approx_loglik(np.array([1.0]), np.zeros((1, 1, 2)), np.ones(1), np.zeros(8, int), ds, parts)
    assert got == pytest.approx(3 * math.log(3 / 8) + 5 * math.log(5 / 8), abs=1e-12)


def test_all_removed_equals_fa_loglik(rng):
    x = rng.standard_normal((10, 3))
    ds = MixedDataset(schema=tuple(VariableSpec(f"x{k}", Kind.CONTINUOUS) for k in range(3)), continuous=x, codes=np.zeros((10, 0)))
    fa = FactorParams(rng.standard_normal(3), rng.standard_normal((3, 1)), np.array([0.5, 1.0, 2.0]))
    parts = ApproxLikelihoodParts.build(ds, np.zeros(3, bool), fa)
    got = approx_loglik(np.array([0.5, 0.5]), np.zeros((2, 3, 2)), np.ones(3), np.zeros(10, int), ds, parts)
    want = stats.multivariate_normal(fa.mu, fa.covariance).logpdf(x).sum()
    assert got == pytest.approx(want, abs=1e-10)
    with pytest.raises(ValueError):
        ApproxLikelihoodParts.build(ds, np.zeros(3, bool), None)


def test_blocks_partition_variables():
    ds = mixed_dataset(N=30, A=3, B=2, C=2)
    active = np.array([True, False, True, False, True, True, False])
    fa = FactorParams(np.zeros(1), np.zeros((1, 1)), np.ones(1))
    p = ApproxLikelihoodParts.build(ds, active, fa)
    every = sorted([*p.disc_cont.tolist(), *p.disc_cat, *p.noise_cont.tolist(), *p.noise_cat])
    assert every == list(range(ds.J))
    for probs in p.noise_cat_probs:
        assert probs.sum() == pytest.approx(1.0)


def test_label_permutation_invariance(rng):
    ds = mixed_dataset(N=25, A=2, B=1, C=1, seed=9)
    parts = ApproxLikelihoodParts.build(ds, np.ones(ds.J, bool), None)
    D = ds.layout.D
    pi = np.array([0.2, 0.5, 0.3])
    lam = rng.standard_normal((3, D, 3))
    psi = np.r_[rng.uniform(0.5, 2, 2), np.ones(D - 2)]
    alloc = rng.integers(3, size=25)
    perm = np.array([1, 2, 0])
    inv = np.argsort(perm)
    a = approx_loglik(pi, lam, psi, alloc, ds, parts)
    b = approx_loglik(pi[inv], lam[inv], psi, perm[alloc], ds, parts)
    assert abs(a - b) < 1e-12


def test_bic_arithmetic():
    s = bic_mcmc([-100.0], 10, 100)
    assert s.bic_mcmc == pytest.approx(-246.0517, abs=1e-3)
    assert s.bic_mcmc == 2 * -100.0 - 10 * math.log(100)
    assert bic_mcmc([-100.0, -100.0, -120.0], 10, 100).bic_mcmc == s.bic_mcmc
    assert bic_mcmc([-100.0, -150.0], 10, 100).bic_mcmc == s.bic_mcmc
    assert bic_mcmc([-100.0], 11, 100).bic_mcmc < s.bic_mcmc


def test_parameter_count():
    # G=2, Q=2, 3 retained continuous, one binary and one 3-level retained,
    # 2 removed continuous, one removed 3-level
    nu = count_parameters(2, 2, 3, [2, 3], 2, [3])
    want = 1 + 2 * (3 + 3 * 2) + 3 + 2 * (1 + 2) + (2 + 2 * 2 + 2) + 2
    assert nu == want
    # loadings columns capped by the number of retained continuous variables
    assert count_parameters(1, 5, 2, [], 0, []) == 0 + (2 + 2 * 2) + 2
    ds = tiny_ds()
    parts = ApproxLikelihoodParts.build(ds, np.array([True, True, True, False]), None)
    assert parts_parameter_count(2, 1, ds, parts) == 1 + 2 * (2 + 2) + 2 + 2 * 1 + 1


def test_noise_fa_variances(rng):
    x = rng.standard_normal((1000, 3))
    sched = PhaseSchedule(burn_in_iters=200, varsel_check_every=1, varsel_stop_after_clean=1, posterior_iters=400, thin=4)
    fa = fit_noise_fa(x, 1, Priors(), sched, rng)
    np.testing.assert_allclose(np.diag(fa.covariance), 1.0, atol=0.1)
    assert fit_noise_fa(np.zeros((10, 0)), 1, Priors(), sched, rng) is None


def test_cell_seeds_are_distinct():
    a = np.random.default_rng(cell_seed(1, 2, 3)).random()
    assert a == np.random.default_rng(cell_seed(1, 2, 3)).random()
    assert a != np.random.default_rng(cell_seed(1, 3, 2)).random()


def test_grid_single_cell(tmp_path):
    ds = mixed_dataset(N=30, seed=1)
    best, scores, results, failures = grid_search(ds, [1], [1], Priors(), TINY, None, seed=0, progress_every=0)
    assert len(scores) == 1 and best == scores[0] and failures == {}
    assert best.bic_mcmc == 2 * best.max_loglik - best.nu * math.log(ds.N)
    write_scores(tmp_path / "s.csv", scores)
    assert (tmp_path / "s.csv").read_text().startswith("G,Q,max_loglik,nu,bic_mcmc,n_retained\n")


def test_grid_failed_cells_are_skipped(monkeypatch):
    # the package re-exports fit(), so reach the module itself
    fit_module = importlib.import_module("mfamd.fit")
    real = fit_module.fit

    def flaky(ds, G, Q, *a, **k):
        if G == 2:
            raise DegenerateModel("forced")
        return real(ds, G, Q, *a, **k)

    monkeypatch.setattr(fit_module, "fit", flaky)
    ds = mixed_dataset(N=30, seed=1)
    best, scores, _, failures = grid_search(ds, [1, 2], [1, 2], Priors(), TINY, None, seed=0, progress_every=0)
    assert len(scores) == 2 and set(failures) == {(2, 1), (2, 2)}
    assert best.G == 1

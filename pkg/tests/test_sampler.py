import numpy as np
import pytest
from scipy import stats

from conftest import mixed_dataset
from mfamd.data import Kind, MixedDataset, VariableSpec
from mfamd.sampler import (
    DimensionError,
    MCMCState,
    PhaseSchedule,
    Priors,
    allocation_logprobs,
    check_state,
    consistency_violations,
    decode_nominal,
    gibbs_sweep,
    init_state,
    item_posterior,
    permute_state,
    structure,
    trait_posterior,
    update_item_parameters,
    update_latent_data,
    update_latent_traits,
    update_mixing_proportions,
    update_uniquenesses,
)


def cont_state(z, lam, psi, alloc=None, pi=None, theta=None):
    """State over continuous-only data given explicit parameters."""
    z = np.atleast_2d(np.asarray(z, float))
    N, D = z.shape
    lam = np.asarray(lam, float)
    G, _, Qp1 = lam.shape
    return MCMCState(
        Z=z.copy(),
        theta=np.zeros((N, Qp1 - 1)) if theta is None else np.asarray(theta, float),
        alloc=np.zeros(N, np.int64) if alloc is None else np.asarray(alloc, np.int64),
        pi=np.full(G, 1.0 / G) if pi is None else np.asarray(pi, float),
        lam=lam.copy(),
        psi=np.asarray(psi, float).copy(),
        active=np.ones(D, bool),
    )


def cont_ds(z):
    z = np.atleast_2d(np.asarray(z, float))
    schema = tuple(VariableSpec(f"x{k}", Kind.CONTINUOUS) for k in range(z.shape[1]))
    return MixedDataset(schema=schema, continuous=z, codes=np.zeros((z.shape[0], 0)))


def test_defaults():
    p = Priors()
    np.testing.assert_array_equal(p.alpha(3), [0.5, 0.5, 0.5])
    m, S = p.lambda_moments(2)
    np.testing.assert_array_equal(S, 5 * np.eye(3))
    assert (p.psi_shape, p.psi_scale) == (7, 7)
    s = PhaseSchedule()
    assert (s.burn_in_iters, s.varsel_check_every, s.varsel_stop_after_clean, s.posterior_iters, s.thin) == (
        20000,
        1000,
        4,
        100000,
        100,
    )
    assert s.n_draws == 1000
    with pytest.raises(ValueError):
        PhaseSchedule(posterior_iters=1000, thin=300)
    with pytest.raises(ValueError):
        Priors(psi_shape=0)
    with pytest.raises(DimensionError):
        Priors(lambda_cov=((1.0, 0.0), (0.0, 1.0))).lambda_moments(2)


def test_init_state(small_ds, rng):
    s = init_state(small_ds, 1, 1, Priors(), rng)
    assert np.all(s.alloc == 0)
    s = init_state(small_ds, 3, 2, Priors(), rng)
    check_state(s, small_ds)
    assert s.lam.shape == (3, small_ds.layout.D, 3)
    a = init_state(small_ds, 2, 1, Priors(), np.random.default_rng(1), warm_start=True)
    b = init_state(small_ds, 2, 1, Priors(), np.random.default_rng(1), warm_start=True)
    for k in a.__dict__:
        assert getattr(a, k).tobytes() == getattr(b, k).tobytes()
    with pytest.raises(DimensionError):
        init_state(small_ds, 0, 1, Priors(), rng)


def test_latent_truncation_rules(rng):
    ds = mixed_dataset(N=60, A=1, B=1, C=1, K=3, seed=3)
    s = init_state(ds, 2, 1, Priors(), rng)
    st = structure(ds)
    for _ in range(20):
        s.lam = rng.normal(0, 2, s.lam.shape)
        s.theta = rng.standard_normal(s.theta.shape)
        update_latent_data(s, ds, rng)
        b = s.Z[:, st.binary_dims[0]]
        y = ds.codes_of(1)
        assert np.all(b[y == 0] < 0) and np.all(b[y == 1] > 0)
        _, dims, yn = st.nominal[0]
        z = s.Z[:, dims]
        assert np.all(z[yn == 0] < 0)
        two = yn == 2
        assert np.all(z[two, 1] > np.maximum(0, z[two, 0]))
        one = yn == 1
        assert np.all(z[one, 0] > np.maximum(0, z[one, 1]))
        np.testing.assert_array_equal(s.Z[:, 0], ds.continuous[:, 0])
        assert consistency_violations(s, ds) == 0


def test_decode_nominal():
    z = np.array([[-1.0, -2.0], [0.5, -1.0], [0.1, 0.3]])
    np.testing.assert_array_equal(decode_nominal(z), [0, 1, 2])


def test_traits_zero_loadings_give_prior(rng):
    s = cont_state([[3.0, -1.0]] * 4, np.zeros((1, 2, 3)), [1.0, 1.0])
    prec, means = trait_posterior(s, np.arange(2), 0, np.arange(4))
    np.testing.assert_array_equal(prec, np.eye(2))
    np.testing.assert_array_equal(means, 0.0)


def test_trait_posterior_against_grid(rng):
    # Q = D = 1, loading 1, uniqueness 1, z - mu = 2
    mu = 0.7
    s = cont_state([[mu + 2.0]], [[[mu, 1.0]]], [1.0])
    prec, means = trait_posterior(s, np.arange(1), 0, np.arange(1))
    grid = np.linspace(-8, 10, 200_001)
    w = stats.norm.pdf(grid) * stats.norm.pdf(2.0, grid, 1.0)
    w /= w.sum()
    gm = (w * grid).sum()
    gv = (w * (grid - gm) ** 2).sum()
    assert abs(means[0, 0] - gm) < 1e-8 and abs(1 / prec[0, 0] - gv) < 1e-8
    assert abs(gm - 1.0) < 1e-8 and abs(gv - 0.5) < 1e-8
    draws = np.empty(40_000)
    for k in range(draws.size):
        update_latent_traits(s, rng)
        draws[k] = s.theta[0, 0]
    assert abs(draws.mean() - 1.0) < 4 * np.sqrt(0.5 / draws.size)
    assert abs(draws.var() - 0.5) < 0.02


def test_item_posterior_empty_cluster_is_prior(rng):
    pri = Priors(lambda_mean=(0.3, -0.2), lambda_cov=((2.0, 0.5), (0.5, 1.0)))
    s = cont_state(rng.standard_normal((5, 1)), np.zeros((2, 1, 2)), [1.0], theta=rng.standard_normal((5, 1)))
    prec, means = item_posterior(s, pri, np.arange(1), 1)
    np.testing.assert_allclose(np.linalg.inv(prec[0]), pri.lambda_moments(1)[1], atol=1e-12)
    np.testing.assert_allclose(means[0], [0.3, -0.2], atol=1e-12)
    draws = np.empty((20_000, 2))
    for k in range(draws.shape[0]):
        update_item_parameters(s, pri, rng)
        draws[k] = s.lam[1, 0]
    np.testing.assert_allclose(draws.mean(axis=0), [0.3, -0.2], atol=0.04)
    # sd of the variance estimate is about 0.02 at this size
    np.testing.assert_allclose(np.cov(draws.T), [[2.0, 0.5], [0.5, 1.0]], atol=0.1)


def test_item_posterior_flat_prior_gives_sample_mean(rng):
    z = rng.normal(2.0, 1.0, (40, 1))
    s = cont_state(z, np.zeros((1, 1, 2)), [1.0])
    _, means = item_posterior(s, Priors(lambda_cov=1e12), np.arange(1), 0)
    assert abs(means[0, 0] - z.mean()) < 1e-8


def test_allocation_single_cluster():
    s = cont_state([[0.3], [4.0]], np.ones((1, 1, 2)), [1.0])
    np.testing.assert_array_equal(np.exp(allocation_logprobs(s)), [[1.0], [1.0]])


def test_allocation_mirror_symmetry():
    lam = np.array([[[-1.0, 0.4]], [[1.0, 0.4]]])
    s = cont_state([[0.0]], lam, [0.8])
    for marginal in (True, False):
        p = np.exp(allocation_logprobs(s, marginal=marginal))
        np.testing.assert_allclose(p, [[0.5, 0.5]], atol=1e-10)


def test_allocation_dense_oracle(rng):
    lam = rng.standard_normal((2, 2, 2))
    psi = np.array([0.7, 1.3])
    pi = np.array([0.3, 0.7])
    z = rng.standard_normal((5, 2))
    theta = rng.standard_normal((5, 1))
    s = cont_state(z, lam, psi, pi=pi, theta=theta)
    dens = np.stack(
        [pi[g] * stats.multivariate_normal(lam[g, :, 0], np.outer(lam[g, :, 1], lam[g, :, 1]) + np.diag(psi)).pdf(z) for g in range(2)],
        axis=1,
    )
    np.testing.assert_allclose(np.exp(allocation_logprobs(s)), dens / dens.sum(1, keepdims=True), atol=1e-10)
    cond = np.stack(
        [pi[g] * stats.norm.pdf(z, lam[g, :, 0] + theta * lam[g, :, 1], np.sqrt(psi)).prod(axis=1) for g in range(2)], axis=1
    )
    np.testing.assert_allclose(np.exp(allocation_logprobs(s, marginal=False)), cond / cond.sum(1, keepdims=True), atol=1e-10)


def test_allocation_permutation_equivariance(rng):
    ds = mixed_dataset(N=30, seed=2)
    s = init_state(ds, 3, 2, Priors(), rng)
    s.pi = np.array([0.2, 0.3, 0.5])
    perm = np.array([2, 0, 1])
    p = allocation_logprobs(s)
    q = allocation_logprobs(permute_state(s, perm))
    np.testing.assert_allclose(q[:, perm], p, atol=1e-12)


def test_mixing_concentration(rng):
    s = cont_state(np.zeros((2_000_000, 1)), np.zeros((2, 1, 2)), [1.0], alloc=np.repeat([0, 1], 1_000_000))
    update_mixing_proportions(s, Priors(), rng)
    np.testing.assert_allclose(s.pi, [0.5, 0.5], atol=0.001)


def test_mixing_prior_draw(rng):
    s = cont_state(np.zeros((1, 1)), np.zeros((2, 1, 2)), [1.0])
    draws = []
    s.alloc = np.zeros(0, np.int64)
    for _ in range(20_000):
        update_mixing_proportions(s, Priors(), rng)
        draws.append(s.pi[0])
    # Beta(0.5, 0.5) has mean 1/2 and variance 1/8
    assert abs(np.mean(draws) - 0.5) < 0.01 and abs(np.var(draws) - 0.125) < 0.005


def test_uniquenesses(rng):
    N = 10_000
    s = cont_state(np.zeros((N, 1)), np.zeros((1, 1, 2)), [1.0])
    ds = cont_ds(np.zeros((N, 1)))
    update_uniquenesses(s, ds, Priors(), rng)
    assert s.psi[0] < 7 / (7 + N / 2) * 3
    z = rng.normal(0, 2.0, (50, 1))
    s = cont_state(z, np.zeros((1, 1, 2)), [1.0])
    ds = cont_ds(z)
    draws = np.empty(20_000)
    for k in range(draws.size):
        update_uniquenesses(s, ds, Priors(), rng)
        draws[k] = s.psi[0]
    shape, scale = 7 + 25, 7 + 0.5 * (z**2).sum()
    assert abs(draws.mean() - scale / (shape - 1)) < 0.02 * scale / (shape - 1)


def test_categorical_uniquenesses_stay_fixed(small_ds, rng):
    s = init_state(small_ds, 2, 1, Priors(), rng)
    for _ in range(5):
        gibbs_sweep(s, small_ds, Priors(), rng)
    assert np.all(s.psi[~structure(small_ds).is_continuous] == 1.0)


def test_sweeps_preserve_invariants(rng):
    ds = mixed_dataset(N=40, A=3, B=2, C=2, K=4, seed=5)
    s = init_state(ds, 2, 2, Priors(), rng, warm_start=True)
    for _ in range(50):
        gibbs_sweep(s, ds, Priors(), rng)
        check_state(s, ds)
    s.active[3] = False  # retired variable: its latents are frozen
    frozen = s.Z[:, 3].copy()
    gibbs_sweep(s, ds, Priors(), rng)
    np.testing.assert_array_equal(s.Z[:, 3], frozen)


def test_sweep_determinism(small_ds):
    out = []
    for _ in range(2):
        rng = np.random.default_rng(99)
        s = init_state(small_ds, 2, 1, Priors(), rng)
        for _ in range(10):
            gibbs_sweep(s, small_ds, Priors(), rng)
        out.append(s)
    for k in out[0].__dict__:
        assert getattr(out[0], k).tobytes() == getattr(out[1], k).tobytes()

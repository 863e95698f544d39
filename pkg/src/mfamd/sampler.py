"""MFA-MD model state and the Gibbs full conditionals.

Latent vectors follow the dataset's canonical variable order: continuous
columns (equal to the observed data), then one latent per binary
variable, then ``K - 1`` latents per K-level nominal variable. Cluster
parameters are stored as augmented loadings ``lam[g]`` of shape
``(D, Q + 1)`` whose first column is the cluster mean.

Update functions modify the state in place and return it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from .data import Kind, MixedDataset
from .distributions import (
    lowrank_mvn_logpdf,
    rtruncnorm,
    sample_categorical_rows,
    sample_dirichlet,
    sample_inverse_gamma,
    sample_mvn_precision,
)


class DimensionError(ValueError):
    pass


class DegenerateModel(RuntimeError):
    pass


@dataclass(frozen=True)
class Priors:
    """Conjugate prior hyperparameters.

    Scalars broadcast: ``dirichlet_alpha=0.5`` means Dirichlet(0.5, ..., 0.5)
    and ``lambda_cov=5`` means 5 I.
    """

    dirichlet_alpha: float | tuple[float, ...] = 0.5
    lambda_mean: float | tuple[float, ...] = 0.0
    lambda_cov: float | tuple[tuple[float, ...], ...] = 5.0
    psi_shape: float = 7.0
    psi_scale: float = 7.0

    def __post_init__(self):
        if self.psi_shape <= 0 or self.psi_scale <= 0:
            raise ValueError("psi_shape and psi_scale must be positive")
        if np.any(np.asarray(self.dirichlet_alpha) <= 0):
            raise ValueError("dirichlet_alpha must be positive")

    def alpha(self, G: int) -> np.ndarray:
        a = np.broadcast_to(np.asarray(self.dirichlet_alpha, dtype=float), (G,))
        return a.copy()

    def lambda_moments(self, Q: int) -> tuple[np.ndarray, np.ndarray]:
        mean = np.broadcast_to(np.asarray(self.lambda_mean, dtype=float), (Q + 1,)).copy()
        cov = np.asarray(self.lambda_cov, dtype=float)
        if cov.ndim == 0:
            cov = float(cov) * np.eye(Q + 1)
        if cov.shape != (Q + 1, Q + 1):
            raise DimensionError(f"lambda_cov must be {(Q + 1, Q + 1)}, got {cov.shape}")
        return mean, cov


@dataclass(frozen=True)
class PhaseSchedule:
    burn_in_iters: int = 20000
    varsel_check_every: int = 1000
    varsel_stop_after_clean: int = 4
    posterior_iters: int = 100000
    thin: int = 100

    def __post_init__(self):
        for name in ("burn_in_iters", "varsel_check_every", "varsel_stop_after_clean", "posterior_iters", "thin"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.posterior_iters % self.thin:
            raise ValueError("thin must divide posterior_iters")

    @property
    def n_draws(self) -> int:
        return self.posterior_iters // self.thin


@dataclass
class MCMCState:
    Z: np.ndarray
    theta: np.ndarray
    alloc: np.ndarray
    pi: np.ndarray
    lam: np.ndarray
    psi: np.ndarray
    active: np.ndarray

    @property
    def G(self) -> int:
        return self.pi.shape[0]

    @property
    def Q(self) -> int:
        return self.theta.shape[1]

    @property
    def N(self) -> int:
        return self.Z.shape[0]

    def copy(self) -> "MCMCState":
        return MCMCState(**{k: v.copy() for k, v in self.__dict__.items()})


@dataclass(frozen=True)
class LatentStructure:
    """Static index bookkeeping derived from a dataset."""

    A: int
    D: int
    dim_owner: np.ndarray
    is_continuous: np.ndarray
    binary_vars: np.ndarray
    binary_dims: np.ndarray
    binary_y: np.ndarray
    nominal: tuple = field(default=())

    @classmethod
    def from_dataset(cls, ds: MixedDataset) -> "LatentStructure":
        layout = ds.layout
        kinds = [v.kind for v in ds.schema]
        bvars = np.array([j for j, k in enumerate(kinds) if k is Kind.BINARY], dtype=np.int64)
        nominal = tuple(
            (j, np.arange(layout.offsets[j], layout.offsets[j] + layout.widths[j]), ds.codes_of(j))
            for j, k in enumerate(kinds)
            if k is Kind.NOMINAL
        )
        owner = layout.owner()
        return cls(
            A=ds.A,
            D=layout.D,
            dim_owner=owner,
            is_continuous=owner < ds.A,
            binary_vars=bvars,
            binary_dims=layout.offsets[bvars] if bvars.size else np.zeros(0, dtype=np.int64),
            binary_y=np.stack([ds.codes_of(j) for j in bvars], axis=1) if bvars.size else np.zeros((ds.N, 0), np.int64),
            nominal=nominal,
        )

    def active_dims(self, active: np.ndarray) -> np.ndarray:
        return np.flatnonzero(active[self.dim_owner])


_STRUCT_CACHE: dict[int, tuple[MixedDataset, LatentStructure]] = {}


def structure(ds: MixedDataset) -> LatentStructure:
    hit = _STRUCT_CACHE.get(id(ds))
    if hit is not None and hit[0] is ds:
        return hit[1]
    st = LatentStructure.from_dataset(ds)
    if len(_STRUCT_CACHE) > 64:
        _STRUCT_CACHE.clear()
    _STRUCT_CACHE[id(ds)] = (ds, st)
    return st


def with_ones(theta: np.ndarray) -> np.ndarray:
    return np.hstack([np.ones((theta.shape[0], 1)), theta])


def fitted_means(state: MCMCState, dims: np.ndarray | None = None) -> np.ndarray:
    """Conditional latent means lam[g(i), d] . (1, theta_i) for every row."""
    tt = with_ones(state.theta)
    lam = state.lam if dims is None else state.lam[:, dims, :]
    out = np.empty((state.N, lam.shape[1]))
    for g in range(state.G):
        idx = state.alloc == g
        if idx.any():
            out[idx] = tt[idx] @ lam[g].T
    return out


def _draw_categorical_latents(Z, M, st: LatentStructure, active, rng):
    """Refresh every active categorical latent column of Z given means M (full width)."""
    bsel = active[st.binary_vars] if st.binary_vars.size else np.zeros(0, bool)
    if bsel.any():
        dims = st.binary_dims[bsel]
        y = st.binary_y[:, bsel]
        lo = np.where(y == 1, 0.0, -np.inf)
        hi = np.where(y == 1, np.inf, 0.0)
        Z[:, dims] = rtruncnorm(M[:, dims], 1.0, lo, hi, rng)

    for j, dims, y in st.nominal:
        if not active[j]:
            continue
        m = M[:, dims]
        z = Z[:, dims]
        zero = y == 0
        if zero.any():
            z[zero] = rtruncnorm(m[zero], 1.0, -np.inf, 0.0, rng)
        for k in range(1, dims.size + 1):
            rows = np.flatnonzero(y == k)
            if not rows.size:
                continue
            c = k - 1
            others = [l for l in range(dims.size) if l != c]
            # the chosen component must exceed 0 and the previous values of the rest
            tau = np.maximum(0.0, z[np.ix_(rows, others)].max(axis=1)) if others else np.zeros(rows.size)
            zc = rtruncnorm(m[rows, c], 1.0, tau, np.inf, rng)
            z[rows, c] = zc
            for l in others:
                z[rows, l] = rtruncnorm(m[rows, l], 1.0, -np.inf, zc, rng)
        Z[:, dims] = z


def init_state(
    ds: MixedDataset,
    G: int,
    Q: int,
    priors: Priors,
    rng: np.random.Generator,
    warm_start: bool = False,
) -> MCMCState:
    """Random starting configuration.

    Allocations are uniform, traits standard normal, loadings prior draws,
    and categorical latents truncated standard normals consistent with
    the observed codes.
    """
    st = structure(ds)
    if G < 1 or Q < 1:
        raise DimensionError(f"need G >= 1 and Q >= 1, got G={G}, Q={Q}")
    if st.D < 1:
        raise DimensionError("dataset has no variables")
    N, D = ds.N, st.D
    mean, cov = priors.lambda_moments(Q)
    Lc = np.linalg.cholesky(cov)

    alloc = rng.integers(G, size=N) if G > 1 else np.zeros(N, dtype=np.int64)
    theta = rng.standard_normal((N, Q))
    lam = mean + rng.standard_normal((G, D, Q + 1)) @ Lc.T
    Z = np.zeros((N, D))
    Z[:, : st.A] = ds.continuous
    active = np.ones(ds.J, dtype=bool)
    _draw_categorical_latents(Z, np.zeros((N, D)), st, active, rng)

    if warm_start and G > 1:
        from scipy.cluster.vq import kmeans2

        _, labels = kmeans2(Z, G, minit="++", seed=rng)
        alloc = labels.astype(np.int64)

    state = MCMCState(
        Z=Z,
        theta=theta,
        alloc=alloc.astype(np.int64),
        pi=np.full(G, 1.0 / G),
        lam=lam,
        psi=np.ones(D),
        active=active,
    )
    if warm_start:
        # prior draws (sd sqrt(5)) put categorical latents on a scale the
        # sign/argmax data barely constrain; start loadings at their
        # conditional given the starting latents instead
        update_item_parameters(state, priors, rng)
    return state


def update_latent_data(state: MCMCState, ds: MixedDataset, rng: np.random.Generator) -> MCMCState:
    """Truncated-normal refresh of latents underlying retained categorical variables.

    For a nominal response ``y = k > 0`` component ``k`` is drawn above
    ``max(0, other components)`` using their previous values, then each
    other component is drawn below the new value of component ``k``.
    Continuous columns are never touched.
    """
    st = structure(ds)
    M = fitted_means(state)
    _draw_categorical_latents(state.Z, M, st, state.active, rng)
    return state


def trait_posterior(state: MCMCState, dims: np.ndarray, g: int, rows: np.ndarray):
    """Precision (Q x Q) and means (n x Q) of theta_i | z_i, cluster g."""
    lam = state.lam[g][dims]
    mu, L = lam[:, 0], lam[:, 1:]
    w = L / state.psi[dims][:, None]
    prec = np.eye(state.Q) + L.T @ w
    rhs = (state.Z[np.ix_(rows, dims)] - mu) @ w
    means = linalg.cho_solve(linalg.cho_factor(prec, lower=True), rhs.T).T
    return prec, means


def update_latent_traits(state: MCMCState, rng: np.random.Generator, dims: np.ndarray | None = None) -> MCMCState:
    """theta_i ~ MVN(P^-1 L' Psi^-1 (z_i - mu_g), P^-1) with P = I + L' Psi^-1 L."""
    if dims is None:
        dims = np.arange(state.Z.shape[1])
    for g in range(state.G):
        rows = np.flatnonzero(state.alloc == g)
        if not rows.size:
            continue
        prec, means = trait_posterior(state, dims, g, rows)
        Lp = np.linalg.cholesky(prec)
        e = rng.standard_normal((rows.size, state.Q))
        state.theta[rows] = means + linalg.solve_triangular(Lp.T, e.T, lower=False).T
    return state


def item_posterior(state: MCMCState, priors: Priors, dims: np.ndarray, g: int):
    """Stacked precisions (d, Q+1, Q+1) and means (d, Q+1) for lam[g, dims]."""
    Q = state.Q
    m0, S0 = priors.lambda_moments(Q)
    P0 = np.linalg.inv(S0)
    b0 = P0 @ m0
    rows = state.alloc == g
    tt = with_ones(state.theta[rows])
    psi = state.psi[dims]
    prec = P0[None] + (tt.T @ tt)[None] / psi[:, None, None]
    rhs = b0[None] + (state.Z[np.ix_(rows, dims)].T @ tt) / psi[:, None]
    means = np.linalg.solve(prec, rhs[..., None])[..., 0]
    return prec, means


def update_item_parameters(
    state: MCMCState, priors: Priors, rng: np.random.Generator, dims: np.ndarray | None = None
) -> MCMCState:
    """Augmented loadings rows; empty clusters fall back to prior draws."""
    if dims is None:
        dims = np.arange(state.Z.shape[1])
    for g in range(state.G):
        prec, means = item_posterior(state, priors, dims, g)
        state.lam[g, dims] = sample_mvn_precision(means, prec, rng)
    return state


def update_uniquenesses(
    state: MCMCState, ds: MixedDataset, priors: Priors, rng: np.random.Generator, dims: np.ndarray | None = None
) -> MCMCState:
    """Inverse-gamma refresh of the continuous uniquenesses; categorical ones stay at 1."""
    st = structure(ds)
    if dims is None:
        dims = np.arange(st.D)
    cont = dims[st.is_continuous[dims]]
    if cont.size:
        resid = state.Z[:, cont] - fitted_means(state, cont)
        shape = priors.psi_shape + 0.5 * state.N
        scale = priors.psi_scale + 0.5 * (resid * resid).sum(axis=0)
        state.psi[cont] = sample_inverse_gamma(np.full(cont.size, shape), scale, rng)
    return state


def allocation_logprobs(state: MCMCState, dims: np.ndarray | None = None, marginal: bool = True) -> np.ndarray:
    """Normalized log membership probabilities, shape (N, G).

    ``marginal=True`` integrates theta out and scores z_i under
    MVN(mu_g, L_g L_g' + Psi); otherwise the score conditions on the
    current theta_i.
    """
    if dims is None:
        dims = np.arange(state.Z.shape[1])
    z = state.Z[:, dims]
    psi = state.psi[dims]
    with np.errstate(divide="ignore"):
        logpi = np.log(state.pi)
    logp = np.empty((state.N, state.G))
    if marginal:
        for g in range(state.G):
            lam = state.lam[g][dims]
            logp[:, g] = logpi[g] + lowrank_mvn_logpdf(z, lam[:, 0], lam[:, 1:], psi)
    else:
        tt = with_ones(state.theta)
        const = -0.5 * (dims.size * np.log(2 * np.pi) + np.log(psi).sum())
        for g in range(state.G):
            r = z - tt @ state.lam[g][dims].T
            logp[:, g] = logpi[g] + const - 0.5 * (r * r / psi).sum(axis=1)
    return logp - logsumexp(logp, axis=1, keepdims=True)


def update_allocations(
    state: MCMCState,
    rng: np.random.Generator,
    dims: np.ndarray | None = None,
    marginal: bool = True,
) -> MCMCState:
    """Draw cluster labels.

    In marginal mode the labels are drawn with theta integrated out and
    theta is then redrawn given the new labels, so the pair is updated as
    one block.
    """
    if state.G == 1:
        state.alloc[:] = 0
        return state
    probs = np.exp(allocation_logprobs(state, dims, marginal))
    state.alloc = sample_categorical_rows(probs, rng).astype(np.int64)
    if marginal:
        update_latent_traits(state, rng, dims)
    return state


def update_mixing_proportions(state: MCMCState, priors: Priors, rng: np.random.Generator) -> MCMCState:
    counts = np.bincount(state.alloc, minlength=state.G)
    pi = sample_dirichlet(priors.alpha(state.G) + counts, rng)
    # keep every weight strictly positive so log(pi) stays finite
    pi = np.maximum(pi, 1e-300)
    state.pi = pi / pi.sum()
    return state


def gibbs_sweep(
    state: MCMCState,
    ds: MixedDataset,
    priors: Priors,
    rng: np.random.Generator,
    marginal_alloc: bool = True,
) -> MCMCState:
    """One full scan: latent data, traits, item parameters, uniquenesses,
    allocations, mixing proportions. Only retained variables take part."""
    dims = structure(ds).active_dims(state.active)
    update_latent_data(state, ds, rng)
    update_latent_traits(state, rng, dims)
    update_item_parameters(state, priors, rng, dims)
    update_uniquenesses(state, ds, priors, rng, dims)
    update_allocations(state, rng, dims, marginal_alloc)
    update_mixing_proportions(state, priors, rng)
    return state


def consistency_violations(state: MCMCState, ds: MixedDataset) -> int:
    """Count retained categorical cells whose latents disagree with the observed code."""
    st = structure(ds)
    bad = 0
    if st.binary_vars.size:
        sel = state.active[st.binary_vars]
        z = state.Z[:, st.binary_dims[sel]]
        y = st.binary_y[:, sel]
        bad += int(np.count_nonzero((z > 0) != (y == 1)) + np.count_nonzero(z == 0))
    for j, dims, y in st.nominal:
        if not state.active[j]:
            continue
        bad += int(np.count_nonzero(decode_nominal(state.Z[:, dims]) != y))
    Zc = state.Z[:, : st.A]
    bad += int(np.count_nonzero(Zc != ds.continuous))
    return bad


def decode_nominal(z: np.ndarray) -> np.ndarray:
    """Observed category implied by nominal latents: 0 if all negative, else 1 + argmax."""
    top = z.max(axis=1)
    return np.where(top < 0, 0, 1 + z.argmax(axis=1))


def check_state(state: MCMCState, ds: MixedDataset) -> None:
    """Raise AssertionError if any structural invariant is broken."""
    st = structure(ds)
    assert abs(state.pi.sum() - 1.0) < 1e-12 and np.all(state.pi > 0)
    assert np.all(state.psi > 0)
    assert np.all(state.psi[~st.is_continuous] == 1.0)
    for arr in (state.Z, state.theta, state.lam, state.psi, state.pi):
        assert np.all(np.isfinite(arr))
    assert state.alloc.min() >= 0 and state.alloc.max() < state.G
    assert consistency_violations(state, ds) == 0


def permute_state(state: MCMCState, perm: np.ndarray) -> MCMCState:
    """Relabel clusters: old label g becomes ``perm[g]``."""
    perm = np.asarray(perm)
    inv = np.argsort(perm)
    return replace(state.copy(), alloc=perm[state.alloc], pi=state.pi[inv].copy(), lam=state.lam[inv].copy())

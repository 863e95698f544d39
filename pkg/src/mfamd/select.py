"""Approximate observed-data likelihood and BIC-MCMC model choice.

The approximation treats retained ("discriminating") and removed
("noise") variables as independent. Retained continuous variables keep
their cluster-specific factor-analytic Gaussian; retained categorical
variables contribute empirical within-cluster response probabilities.
Removed continuous variables get one shared factor analysis; removed
categorical variables contribute pooled empirical probabilities.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .data import Kind, MixedDataset, VariableSpec
from .data import format_number as _num
from .distributions import lowrank_mvn_logpdf
from .identify import procrustes_align
from .sampler import DegenerateModel, MCMCState, PhaseSchedule, Priors, gibbs_sweep, init_state

log = logging.getLogger(__name__)


@dataclass
class FactorParams:
    mu: np.ndarray
    loadings: np.ndarray
    psi: np.ndarray

    def logpdf(self, x: np.ndarray) -> np.ndarray:
        return lowrank_mvn_logpdf(x, self.mu, self.loadings, self.psi)

    @property
    def covariance(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.psi)


@dataclass
class ApproxLikelihoodParts:
    """Everything in the approximation that does not change between draws.

    Index lists hold variable indices into the dataset schema; because
    continuous variables come first with one latent each, a continuous
    variable's index is also its latent column.
    """

    disc_cont: np.ndarray
    disc_cat: list[int]
    noise_cont: np.ndarray
    noise_cat: list[int]
    noise_fa: FactorParams | None
    noise_cat_probs: list[np.ndarray]
    noise_logf: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, ds: MixedDataset, active: np.ndarray, noise_fa: FactorParams | None) -> "ApproxLikelihoodParts":
        idx = np.arange(ds.J)
        cont = idx < ds.A
        disc_cont = idx[active & cont]
        noise_cont = idx[~active & cont]
        disc_cat = [int(j) for j in idx[active & ~cont]]
        noise_cat = [int(j) for j in idx[~active & ~cont]]
        if noise_cont.size and noise_fa is None:
            raise ValueError("removed continuous variables need a fitted noise factor model")
        probs = [empirical_category_probs(ds.codes_of(j), ds.schema[j].n_levels) for j in noise_cat]
        logf = np.zeros(ds.N)
        if noise_cont.size:
            logf += noise_fa.logpdf(ds.continuous[:, noise_cont])
        for j, p in zip(noise_cat, probs):
            logf += np.log(p)[ds.codes_of(j)]
        return cls(disc_cont, disc_cat, noise_cont, noise_cat, noise_fa, probs, logf)


def empirical_category_probs(codes, n_levels: int, alloc=None, G: int | None = None) -> np.ndarray:
    """Relative response frequencies, pooled (K,) or per cluster (G, K).

    A row containing a zero count gets add-1/2 smoothing on every cell,
    so all log-probabilities stay finite (an empty cluster becomes uniform).
    """
    codes = np.asarray(codes, dtype=np.int64)
    if alloc is None:
        counts = np.bincount(codes, minlength=n_levels)[None, :].astype(float)
    else:
        G = int(np.max(alloc)) + 1 if G is None else G
        counts = np.bincount(np.asarray(alloc) * n_levels + codes, minlength=G * n_levels)
        counts = counts.reshape(G, n_levels).astype(float)
    counts = np.where((counts == 0).any(axis=1, keepdims=True), counts + 0.5, counts)
    probs = counts / counts.sum(axis=1, keepdims=True)
    return probs[0] if alloc is None else probs


def categorical_loglik_by_cluster(ds: MixedDataset, variables, alloc, G: int) -> np.ndarray:
    """(N, G) sums of log P(y_ij | cluster g) over the given categorical variables."""
    out = np.zeros((ds.N, G))
    for j in variables:
        y = ds.codes_of(j)
        p = empirical_category_probs(y, ds.schema[j].n_levels, alloc, G)
        out += np.log(p[:, y]).T
    return out


def approx_loglik(pi, lam, psi, alloc, ds: MixedDataset, parts: ApproxLikelihoodParts) -> float:
    """Approximate observed-data log-likelihood for one configuration.

    ``lam`` is (G, D, Q + 1) and ``psi`` (D,) over the full latent
    layout; only rows of retained continuous variables are read.
    Evaluated on observed data, never on latent draws.
    """
    G = len(pi)
    with np.errstate(divide="ignore"):
        terms = np.log(np.asarray(pi, dtype=float))[None, :].repeat(ds.N, axis=0)
    c = parts.disc_cont
    if c.size:
        x = ds.continuous[:, c]
        for g in range(G):
            terms[:, g] += lowrank_mvn_logpdf(x, lam[g, c, 0], lam[g, c, 1:], psi[c])
    terms += categorical_loglik_by_cluster(ds, parts.disc_cat, alloc, G)
    return float(logsumexp(terms, axis=1).sum() + parts.noise_logf.sum())


def state_loglik(state: MCMCState, ds: MixedDataset, parts: ApproxLikelihoodParts) -> float:
    return approx_loglik(state.pi, state.lam, state.psi, state.alloc, ds, parts)


def count_parameters(
    G: int,
    Q: int,
    n_disc_cont: int,
    disc_cat_levels,
    n_noise_cont: int,
    noise_cat_levels,
) -> int:
    """Number of free quantities in the approximate likelihood.

    Mixing weights, per-cluster means and loadings (loadings columns
    capped at the number of retained continuous variables), shared
    uniquenesses, per-cluster category probabilities, then the noise
    factor model and pooled noise category probabilities. Quantities
    fixed by the model (unit latent variances) are not counted.
    """
    a, a_dot = n_disc_cont, n_noise_cont
    q_eff = min(Q, a)
    nu = (G - 1) + G * (a + a * q_eff) + a
    nu += G * sum(k - 1 for k in disc_cat_levels)
    if a_dot:
        nu += a_dot + a_dot * Q + a_dot
    nu += sum(k - 1 for k in noise_cat_levels)
    return int(nu)


def parts_parameter_count(G: int, Q: int, ds: MixedDataset, parts: ApproxLikelihoodParts) -> int:
    levels = lambda js: [ds.schema[j].n_levels for j in js]  # noqa: E731
    return count_parameters(
        G, Q, parts.disc_cont.size, levels(parts.disc_cat), parts.noise_cont.size, levels(parts.noise_cat)
    )


@dataclass(frozen=True)
class ModelScore:
    G: int
    Q: int
    max_loglik: float
    nu: int
    bic_mcmc: float
    n: int
    retained: tuple[str, ...] = ()


def bic_mcmc(logliks, nu: int, N: int, G: int = 0, Q: int = 0, retained=()) -> ModelScore:
    """Score from the largest per-draw approximate log-likelihood."""
    best = float(np.max(logliks))
    return ModelScore(G, Q, best, int(nu), 2.0 * best - nu * math.log(N), int(N), tuple(retained))


def continuous_dataset(x: np.ndarray, names=None) -> MixedDataset:
    names = names or [f"v{k}" for k in range(x.shape[1])]
    schema = tuple(VariableSpec(n, Kind.CONTINUOUS) for n in names)
    return MixedDataset(schema=schema, continuous=x, codes=np.zeros((x.shape[0], 0), dtype=np.int64))


def fit_noise_fa(
    x: np.ndarray,
    Q: int,
    priors: Priors,
    schedule: PhaseSchedule,
    rng: np.random.Generator,
) -> FactorParams | None:
    """One-cluster Bayesian factor analysis of the removed continuous columns.

    Runs the same Gibbs sampler with G = 1, aligns the loadings draws to
    the highest-likelihood draw, and returns posterior means.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] == 0:
        return None
    ds = continuous_dataset(x)
    state = init_state(ds, 1, Q, priors, rng)
    for _ in range(schedule.burn_in_iters):
        gibbs_sweep(state, ds, priors, rng)
    lam, psi, ll = [], [], []
    for it in range(schedule.posterior_iters):
        gibbs_sweep(state, ds, priors, rng)
        if (it + 1) % schedule.thin == 0:
            lam.append(state.lam[0].copy())
            psi.append(state.psi.copy())
            ll.append(lowrank_mvn_logpdf(x, state.lam[0, :, 0], state.lam[0, :, 1:], state.psi).sum())
    lam = np.array(lam)
    best = int(np.argmax(ll))
    aligned, _ = procrustes_align(lam[:, :, 1:], lam[best, :, 1:])
    return FactorParams(mu=lam[:, :, 0].mean(axis=0), loadings=aligned.mean(axis=0), psi=np.mean(psi, axis=0))


def cell_seed(root_seed: int, G: int, Q: int) -> np.random.SeedSequence:
    """Seed for one grid cell, independent of scheduling order."""
    return np.random.SeedSequence([int(root_seed), int(G), int(Q)])


def _run_cell(args):
    from .fit import fit

    ds, G, Q, priors, schedule, varsel_config, root_seed, options = args
    rng = np.random.default_rng(cell_seed(root_seed, G, Q))
    try:
        return G, Q, fit(ds, G, Q, priors, schedule, varsel_config, rng, **options), None
    except DegenerateModel as exc:
        return G, Q, None, str(exc)


def grid_search(
    ds: MixedDataset,
    G_range,
    Q_range,
    priors: Priors,
    schedule: PhaseSchedule,
    varsel_config,
    seed: int,
    workers: int = 1,
    **fit_options,
):
    """Fit every (G, Q) cell and pick the largest BIC-MCMC.

    Returns ``(best_score, scores, results, failures)`` where ``results``
    maps (G, Q) to its FitResult and ``failures`` maps degenerate cells
    to their error message. Failed cells never abort the grid.
    """
    jobs = [(ds, G, Q, priors, schedule, varsel_config, seed, fit_options) for G in G_range for Q in Q_range]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_cell, jobs))
    else:
        outcomes = [_run_cell(job) for job in jobs]

    results, failures = {}, {}
    for G, Q, res, err in outcomes:
        if res is None:
            log.warning("cell G=%d Q=%d failed: %s", G, Q, err)
            failures[(G, Q)] = err
        else:
            results[(G, Q)] = res
    scores = [results[k].score for k in sorted(results)]
    if not scores:
        raise DegenerateModel("every grid cell failed")
    best = max(scores, key=lambda s: s.bic_mcmc)
    return best, scores, results, failures


def write_scores(path, scores) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["G", "Q", "max_loglik", "nu", "bic_mcmc", "n_retained"])
        for s in scores:
            w.writerow([s.G, s.Q, _num(s.max_loglik), s.nu, _num(s.bic_mcmc), len(s.retained)])

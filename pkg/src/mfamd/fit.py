"""Three-phase model fitting: burn-in, online variable selection, posterior sampling."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import MixedDataset
from .diagnostics import MembershipSummary, membership_summary
from .identify import RelabelingReport, RotationReport, identify
from .sampler import (
    DegenerateModel,
    MCMCState,
    PhaseSchedule,
    Priors,
    allocation_logprobs,
    consistency_violations,
    gibbs_sweep,
    init_state,
    structure,
)
from .select import (
    ApproxLikelihoodParts,
    ModelScore,
    bic_mcmc,
    fit_noise_fa,
    parts_parameter_count,
    state_loglik,
)
from .store import PosteriorSamples
from .varsel import VarSelConfig, VRRecord, selection_step

log = logging.getLogger(__name__)


@dataclass
class FitResult:
    G: int
    Q: int
    active: np.ndarray
    retained: tuple[str, ...]
    samples: PosteriorSamples
    score: ModelScore
    membership: MembershipSummary
    parts: ApproxLikelihoodParts
    final_state: MCMCState
    varsel_trace: list[VRRecord] = field(default_factory=list)
    relabeling: RelabelingReport | None = None
    rotation: RotationReport | None = None
    iterations: dict = field(default_factory=dict)
    raw_samples: PosteriorSamples | None = None  # draws before relabeling and rotation


def _heartbeat(phase, it, state, every):
    if every and it % every == 0:
        log.info("phase=%s iter=%d retained=%d", phase, it, int(state.active.sum()))


def fit(
    ds: MixedDataset,
    G: int,
    Q: int,
    priors: Priors,
    schedule: PhaseSchedule,
    varsel_config: VarSelConfig | None,
    rng: np.random.Generator,
    warm_start: bool = True,
    marginal_alloc: bool = True,
    store_latents: bool = True,
    progress_every: int | None = 1000,
    consistency_check: bool = False,
) -> "FitResult":
    """Fit one (G, Q) model.

    Variable selection runs only when ``G >= 2`` and ``varsel_config`` is
    given. Removal is permanent. The variable-selection phase ends after
    ``schedule.varsel_stop_after_clean`` successive checks remove nothing.

    ``warm_start`` seeds the allocations with k-means on the initial latent
    data; a uniform random start tends to settle in a one-cluster mode
    where a factor absorbs the cluster shift.

    With ``consistency_check`` every sweep is verified against the
    truncation rules and a violation raises ``AssertionError``.
    """
    state = init_state(ds, G, Q, priors, rng, warm_start=warm_start)
    iters = {"burn_in": 0, "varsel": 0, "posterior": 0}

    def sweep(phase):
        gibbs_sweep(state, ds, priors, rng, marginal_alloc=marginal_alloc)
        iters[phase] += 1
        if consistency_check:
            bad = consistency_violations(state, ds)
            assert bad == 0, f"{bad} truncation-rule violations in {phase} sweep {iters[phase]}"
        _heartbeat(phase, iters[phase], state, progress_every)

    for _ in range(schedule.burn_in_iters):
        sweep("burn_in")

    trace: list[VRRecord] = []
    if G >= 2 and varsel_config is not None:
        clean = 0
        while clean < schedule.varsel_stop_after_clean:
            for _ in range(schedule.varsel_check_every):
                sweep("varsel")
            membership = np.exp(allocation_logprobs(state, structure(ds).active_dims(state.active))) if varsel_config.fuzzy else None
            removed, records = selection_step(state, ds, varsel_config, iters["burn_in"] + iters["varsel"], membership)
            trace.extend(records)
            log.info("phase=varsel iter=%d removed=%d retained=%d", iters["varsel"], len(removed), int(state.active.sum()))
            clean = 0 if removed else clean + 1
            if state.active.sum() < 2:
                raise DegenerateModel(f"only {int(state.active.sum())} variable(s) retained")

    # removed set is now final; fit the noise block once
    names = [v.name for v in ds.schema]
    noise_cont = np.flatnonzero(~state.active[: ds.A])
    noise_fa = fit_noise_fa(ds.continuous[:, noise_cont], Q, priors, schedule, rng) if noise_cont.size else None
    parts = ApproxLikelihoodParts.build(ds, state.active, noise_fa)

    dims = structure(ds).active_dims(state.active)
    draws = {k: [] for k in ("alloc", "pi", "lam", "psi", "theta", "Z", "loglik")}
    for it in range(schedule.posterior_iters):
        sweep("posterior")
        if (it + 1) % schedule.thin == 0:
            draws["alloc"].append(state.alloc.copy())
            draws["pi"].append(state.pi.copy())
            draws["lam"].append(state.lam[:, dims].copy())
            draws["psi"].append(state.psi[dims].copy())
            if store_latents:
                draws["theta"].append(state.theta.copy())
                draws["Z"].append(state.Z[:, dims].copy())
            draws["loglik"].append(state_loglik(state, ds, parts))

    samples = PosteriorSamples(
        alloc=np.array(draws["alloc"]),
        pi=np.array(draws["pi"]),
        lam=np.array(draws["lam"]),
        psi=np.array(draws["psi"]),
        theta=np.array(draws["theta"]) if store_latents else None,
        Z=np.array(draws["Z"]) if store_latents else None,
        loglik=np.array(draws["loglik"]),
        dims=dims,
    )
    if G >= 2:
        occupied = np.zeros(G, dtype=bool)
        for a in samples.alloc:
            occupied[np.unique(a)] = True
        if not occupied.all():
            raise DegenerateModel(f"cluster(s) {np.flatnonzero(~occupied).tolist()} empty in every posterior draw")

    raw_samples = samples
    samples, relabeling, rotation = identify(samples)
    nu = parts_parameter_count(G, Q, ds, parts)
    retained = tuple(names[j] for j in np.flatnonzero(state.active))
    score = bic_mcmc(samples.loglik, nu, ds.N, G, Q, retained)
    return FitResult(
        G=G,
        Q=Q,
        active=state.active.copy(),
        retained=retained,
        samples=samples,
        score=score,
        membership=membership_summary(samples.alloc, G),
        parts=parts,
        final_state=state,
        varsel_trace=trace,
        relabeling=relabeling,
        rotation=rotation,
        iterations=iters,
        raw_samples=raw_samples,
    )

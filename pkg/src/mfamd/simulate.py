"""Forward simulation of MFA-MD data with known ground truth."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Kind, LatentLayout, MixedDataset, VariableSpec, canonical_order
from .sampler import decode_nominal


@dataclass
class TrueModel:
    """Generating parameters over the full latent layout.

    ``mu`` is (G, D), ``loadings`` (G, D, Q) and ``psi`` (D,), with
    ``psi`` equal to 1 on categorical latents. ``noise`` lists the
    indices of variables built to carry no cluster information.
    """

    schema: tuple[VariableSpec, ...]
    pi: np.ndarray
    mu: np.ndarray
    loadings: np.ndarray
    psi: np.ndarray
    noise: tuple[int, ...] = ()

    def __post_init__(self):
        self.schema = tuple(self.schema)
        if canonical_order(self.schema) != list(range(len(self.schema))):
            raise ValueError("schema must be in canonical order")
        layout = LatentLayout.from_schema(self.schema)
        G, D, Q = self.loadings.shape
        if self.mu.shape != (G, D) or self.psi.shape != (D,) or layout.D != D or self.pi.shape != (G,):
            raise ValueError("parameter shapes do not match the schema")
        if abs(self.pi.sum() - 1) > 1e-10 or np.any(self.pi <= 0) or np.any(self.psi <= 0):
            raise ValueError("invalid mixing weights or uniquenesses")
        cat = layout.owner() >= self.A
        if np.any(self.psi[cat] != 1.0):
            raise ValueError("categorical latents must have unit uniqueness")

    @property
    def G(self) -> int:
        return self.pi.shape[0]

    @property
    def Q(self) -> int:
        return self.loadings.shape[2]

    @property
    def A(self) -> int:
        return sum(v.kind is Kind.CONTINUOUS for v in self.schema)

    @property
    def layout(self) -> LatentLayout:
        return LatentLayout.from_schema(self.schema)

    @property
    def discriminating(self) -> tuple[int, ...]:
        return tuple(j for j in range(len(self.schema)) if j not in set(self.noise))


@dataclass
class SimulatedData:
    dataset: MixedDataset
    alloc: np.ndarray
    Z: np.ndarray
    theta: np.ndarray


def generate(tm: TrueModel, N: int, rng: np.random.Generator) -> SimulatedData:
    """Draw N observations: label, traits, latent vector, then observed codes."""
    G, D, Q = tm.loadings.shape
    alloc = rng.choice(G, size=N, p=tm.pi)
    theta = rng.standard_normal((N, Q))
    Z = tm.mu[alloc] + np.einsum("ndq,nq->nd", tm.loadings[alloc], theta)
    Z += rng.standard_normal((N, D)) * np.sqrt(tm.psi)

    layout = tm.layout
    A = tm.A
    codes = []
    for j in range(A, len(tm.schema)):
        z = Z[:, layout.offsets[j] : layout.offsets[j] + layout.widths[j]]
        if tm.schema[j].kind is Kind.BINARY:
            codes.append((z[:, 0] > 0).astype(np.int64))
        else:
            codes.append(decode_nominal(z))
    codes = np.stack(codes, axis=1) if codes else np.zeros((N, 0), dtype=np.int64)
    ds = MixedDataset(
        schema=tm.schema,
        continuous=Z[:, :A].copy(),
        codes=codes,
        ids=tuple(f"s{i + 1}" for i in range(N)),
    )
    return SimulatedData(ds, alloc, Z, theta)


def default_scenario(seed: int = 0, separation: float = 3.0) -> TrueModel:
    """Two clusters, two factors, 13 discriminating and 10 noise variables.

    Discriminating continuous means sit at +/- separation/2; categorical
    latent means are shifted by +/- 1 between clusters. Noise variables
    have zero loadings and means shared by both clusters.
    """
    rng = np.random.default_rng(seed)
    G, Q = 2, 2
    spec = (
        [(f"x{k + 1}", Kind.CONTINUOUS, 0) for k in range(5)]
        + [(f"noise_x{k + 1}", Kind.CONTINUOUS, 0) for k in range(4)]
        + [(f"b{k + 1}", Kind.BINARY, 2) for k in range(5)]
        + [(f"noise_b{k + 1}", Kind.BINARY, 2) for k in range(3)]
        + [(f"m{k + 1}", Kind.NOMINAL, 3) for k in range(3)]
        + [(f"noise_m{k + 1}", Kind.NOMINAL, 3) for k in range(3)]
    )
    schema = tuple(VariableSpec(n, kind, tuple(str(i) for i in range(k))) for n, kind, k in spec)
    noise = tuple(j for j, (n, _, _) in enumerate(spec) if n.startswith("noise"))
    layout = LatentLayout.from_schema(schema)
    D = layout.D
    owner = layout.owner()

    mu = np.zeros((G, D))
    loadings = np.zeros((G, D, Q))
    psi = np.ones(D)
    half = separation / 2.0
    for d in range(D):
        j = owner[d]
        kind = schema[j].kind
        if j in noise:
            shared = rng.uniform(-0.5, 0.5) if kind is not Kind.CONTINUOUS else 0.0
            mu[:, d] = shared
            continue
        sign = 1.0 if rng.random() < 0.5 else -1.0
        if kind is Kind.CONTINUOUS:
            mu[:, d] = (-sign * half, sign * half)
            loadings[:, d] = rng.uniform(-0.6, 0.6, size=(G, Q))
            psi[d] = 0.5
        else:
            mu[:, d] = (-sign, sign)
            loadings[:, d] = rng.uniform(-0.5, 0.5, size=(G, Q))
    return TrueModel(schema, np.array([0.5, 0.5]), mu, loadings, psi, noise)


def write_truth(path, sim: SimulatedData, tm: TrueModel) -> None:
    """Truth sidecar: one row per observation with its generating cluster (1-based)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "cluster"])
        for rid, g in zip(sim.dataset.row_ids(), sim.alloc):
            w.writerow([rid, int(g) + 1])

"""Online variance-ratio variable selection."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Kind, MixedDataset
from .data import format_number as _num


class ZeroOverallVariance(ValueError):
    def __init__(self, variable):
        super().__init__(f"variable {variable!r} has zero overall variance")
        self.variable = variable


@dataclass(frozen=True)
class VarSelConfig:
    epsilon_continuous: float = 0.95
    epsilon_categorical: float = 0.99
    fuzzy: bool = False

    def __post_init__(self):
        for eps in (self.epsilon_continuous, self.epsilon_categorical):
            if not 0.0 < eps <= 1.0:
                raise ValueError("variance-ratio thresholds must lie in (0, 1]")

    def threshold(self, kind: Kind) -> float:
        return self.epsilon_continuous if kind is Kind.CONTINUOUS else self.epsilon_categorical


@dataclass(frozen=True)
class VRRecord:
    iteration: int
    variable: str
    vr: float
    action: str


def variance_ratio(z: np.ndarray, alloc: np.ndarray, G: int | None = None, weights: np.ndarray | None = None) -> float:
    """Within-cluster over total sum of squares of latent column(s) ``z``.

    ``z`` is (N,) or (N, w); for several columns numerator and
    denominator are each pooled over the columns before dividing.
    ``weights`` (N, G) switches to the fuzzy version, where each
    observation contributes to every cluster in proportion to its
    membership probability and cluster means are weighted accordingly.
    """
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        z = z[:, None]
    total = ((z - z.mean(axis=0)) ** 2).sum()
    if not total > 0:
        raise ZeroOverallVariance(None)
    if weights is None:
        G = int(alloc.max()) + 1 if G is None else G
        weights = np.zeros((z.shape[0], G))
        weights[np.arange(z.shape[0]), alloc] = 1.0
    within = 0.0
    for g in range(weights.shape[1]):
        w = weights[:, g]
        ng = w.sum()
        if ng <= 0:
            continue
        mean = (w[:, None] * z).sum(axis=0) / ng
        within += (w[:, None] * (z - mean) ** 2).sum()
    return float(within / total)


def selection_step(
    state,
    ds: MixedDataset,
    config: VarSelConfig,
    iteration: int = 0,
    membership: np.ndarray | None = None,
) -> tuple[list[int], list[VRRecord]]:
    """Drop every retained variable whose variance ratio exceeds its threshold.

    All ratios are computed from the same snapshot before anything is
    removed. Updates ``state.active`` in place and returns the removed
    variable indices plus one trace record per variable examined.
    """
    if state.G < 2:
        raise ValueError("variable selection needs at least two clusters")
    layout = ds.layout
    weights = membership if config.fuzzy else None
    removed, trace = [], []
    for j in np.flatnonzero(state.active):
        v = ds.schema[j]
        cols = state.Z[:, layout.offsets[j] : layout.offsets[j] + layout.widths[j]]
        try:
            vr = variance_ratio(cols, state.alloc, state.G, weights)
        except ZeroOverallVariance:
            vr = float("nan")
        drop = not vr <= config.threshold(v.kind)
        trace.append(VRRecord(iteration, v.name, vr, "removed" if drop else "retained"))
        if drop:
            removed.append(int(j))
    state.active[removed] = False
    return removed, trace


def write_trace(path, records) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "variable", "vr", "action"])
        for r in records:
            w.writerow([r.iteration, r.variable, _num(r.vr), r.action])

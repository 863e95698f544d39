"""Posterior summaries: membership, uncertainty, residuals, partition agreement."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import MixedDataset
from .data import format_number as _num


@dataclass
class MembershipSummary:
    probs: np.ndarray  # (N, G)
    hard: np.ndarray  # (N,), 0-based
    uncertainty: np.ndarray  # (N,)


def membership_summary(alloc: np.ndarray, G: int) -> MembershipSummary:
    """Allocation frequencies across (relabeled) draws.

    Hard labels take the most frequent cluster; uncertainty is one minus
    that frequency, so it never exceeds 1 - 1/G.
    """
    alloc = np.atleast_2d(alloc)
    S, N = alloc.shape
    probs = np.zeros((N, G))
    for g in range(G):
        probs[:, g] = (alloc == g).sum(axis=0)
    probs /= S
    return MembershipSummary(probs, probs.argmax(axis=1), 1.0 - probs.max(axis=1))


def _conditional_means(samples, cols):
    """(S, N, len(cols)) array of lam[g(i), d] . (1, theta_i) per draw."""
    S, N = samples.alloc.shape
    lam = samples.lam[:, :, cols, :]  # (S, G, c, Q+1)
    tt = np.concatenate([np.ones((S, N, 1)), samples.theta], axis=2)
    per = lam[np.arange(S)[:, None], samples.alloc]  # (S, N, c, Q+1)
    return np.einsum("sncq,snq->snc", per, tt)


def _positions(samples, dims):
    where = {int(d): k for k, d in enumerate(samples.dims)}
    return np.array([where[int(d)] for d in dims], dtype=np.int64)


def bayesian_residual_continuous(samples, ds: MixedDataset, strict_paper: bool = False):
    """Standardized residuals (z - fitted) / sqrt(psi) for retained continuous variables.

    Returns ``(names, residuals)`` with residuals shaped (S, N, n_vars).
    ``strict_paper=True`` divides by psi itself instead of its square root.
    """
    if samples.theta is None or samples.Z is None:
        raise ValueError("residuals need stored latent traits and latent data")
    dims = [int(d) for d in samples.dims if d < ds.A]
    cols = _positions(samples, dims)
    resid = samples.Z[:, :, cols] - _conditional_means(samples, cols)
    psi = samples.psi[:, cols][:, None, :]
    scale = psi if strict_paper else np.sqrt(psi)
    return [ds.schema[d].name for d in dims], resid / scale


def bayesian_latent_residual(samples, ds: MixedDataset) -> dict[str, np.ndarray]:
    """Latent residuals z - fitted for retained categorical variables.

    Maps variable name to an (S, N, width) array; nominal variables with
    K levels have K - 1 components.
    """
    if samples.theta is None or samples.Z is None:
        raise ValueError("residuals need stored latent traits and latent data")
    layout = ds.layout
    kept = set(int(d) for d in samples.dims)
    out = {}
    for j in range(ds.A, ds.J):
        dims = list(range(layout.offsets[j], layout.offsets[j] + layout.widths[j]))
        if not all(d in kept for d in dims):
            continue
        cols = _positions(samples, dims)
        out[ds.schema[j].name] = samples.Z[:, :, cols] - _conditional_means(samples, cols)
    return out


def contingency(p1, p2) -> np.ndarray:
    p1 = np.asarray(p1)
    p2 = np.asarray(p2)
    if p1.shape != p2.shape:
        raise ValueError("partitions must have equal length")
    _, a = np.unique(p1, return_inverse=True)
    _, b = np.unique(p2, return_inverse=True)
    table = np.zeros((a.max() + 1, b.max() + 1), dtype=np.int64)
    np.add.at(table, (a, b), 1)
    return table


def _pairs(n):
    n = np.asarray(n, dtype=np.int64)
    return (n * (n - 1) // 2).sum()


def rand_index_table(table) -> float:
    """Rand index from a contingency table of two partitions."""
    table = np.asarray(table, dtype=np.int64)
    n = int(table.sum())
    total = n * (n - 1) // 2
    both = _pairs(table)
    rows, cols = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    agree = total + 2 * both - rows - cols
    return agree / total


def adjusted_rand_index_table(table) -> float:
    table = np.asarray(table, dtype=np.int64)
    n = int(table.sum())
    total = n * (n - 1) // 2
    both = _pairs(table)
    rows, cols = _pairs(table.sum(axis=1)), _pairs(table.sum(axis=0))
    expected = rows * cols / total
    top = 0.5 * (rows + cols)
    if top == expected:
        return 1.0
    return float((both - expected) / (top - expected))


def rand_index(p1, p2) -> float:
    return rand_index_table(contingency(p1, p2))


def adjusted_rand_index(p1, p2) -> float:
    return adjusted_rand_index_table(contingency(p1, p2))


def write_membership(path, ids, summary: MembershipSummary) -> None:
    G = summary.probs.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *[f"p_{g + 1}" for g in range(G)], "hard", "uncertainty"])
        for i, rid in enumerate(ids):
            w.writerow([rid, *map(_num, summary.probs[i]), int(summary.hard[i]) + 1, _num(summary.uncertainty[i])])


def pick_participants(N: int, n: int | None, rng: np.random.Generator) -> np.ndarray:
    if n is None or n >= N:
        return np.arange(N)
    return np.sort(rng.choice(N, size=n, replace=False))


def write_residuals_continuous(path, ids, names, resid, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "variable", "draw", "residual"])
        for i in rows:
            for k, name in enumerate(names):
                for s in range(resid.shape[0]):
                    w.writerow([ids[i], name, s, _num(resid[s, i, k])])


def write_residuals_latent(path, ids, latent: dict, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "variable", "component", "draw", "residual"])
        for name, r in latent.items():
            for i in rows:
                for c in range(r.shape[2]):
                    for s in range(r.shape[0]):
                        w.writerow([ids[i], name, c + 1, s, _num(r[s, i, c])])


def write_agreement(path, pairs: dict) -> None:
    """``pairs`` maps a name to a (partition_a, partition_b) tuple."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["comparison", "rand_index", "adjusted_rand_index"])
        for name, (a, b) in pairs.items():
            w.writerow([name, _num(rand_index(a, b)), _num(adjusted_rand_index(a, b))])


def flag_shifted(residuals: np.ndarray, z_crit: float = 3.0) -> np.ndarray:
    """Participants whose residual draws are centred away from zero.

    ``residuals`` is (S, N, w). A participant is flagged when any
    component's posterior mean residual lies more than ``z_crit``
    Monte-Carlo standard errors from zero and more than one unit away.
    """
    mean = residuals.mean(axis=0)
    se = residuals.std(axis=0, ddof=1) / np.sqrt(residuals.shape[0]) + 1e-12
    return ((np.abs(mean) > z_crit * se) & (np.abs(mean) > 1.0)).any(axis=1)


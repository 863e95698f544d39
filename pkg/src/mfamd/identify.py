"""Procrustes alignment of loadings draws and label-switching correction."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment


class RankDeficientTemplate(UserWarning):
    pass


@dataclass
class RotationReport:
    rotations: np.ndarray  # (S, G, Q, Q)
    template_draw: int


@dataclass
class RelabelingReport:
    permutations: np.ndarray  # (S, G); old label g -> permutations[s, g]
    loss: np.ndarray  # (S,) misclassifications against the reference
    reference_draw: int


def orthogonal_procrustes(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Orthogonal R minimizing ||A R - B||_F."""
    U, _, Vt = np.linalg.svd(A.T @ B)
    return U @ Vt


def procrustes_align(draws: np.ndarray, template: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Rotate each (D, Q) loadings draw onto ``template``.

    Returns the aligned draws and the (S, Q, Q) rotations applied.
    """
    draws = np.asarray(draws, dtype=float)
    if np.linalg.matrix_rank(template) < template.shape[1]:
        warnings.warn("Procrustes template is rank deficient; alignment is partial", RankDeficientTemplate)
    rots = np.stack([orthogonal_procrustes(d, template) for d in draws])
    return draws @ rots, rots


def _permutation(alloc: np.ndarray, ref: np.ndarray, G: int) -> tuple[np.ndarray, int]:
    agree = np.zeros((G, G), dtype=np.int64)
    np.add.at(agree, (alloc, ref), 1)
    rows, cols = linear_sum_assignment(-agree)
    perm = np.empty(G, dtype=np.int64)
    perm[rows] = cols
    return perm, int(alloc.size - agree[rows, cols].sum())


def relabel(alloc: np.ndarray, reference: np.ndarray, G: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-draw label permutations minimizing disagreement with ``reference``.

    Solves the assignment problem exactly for each draw. Returns
    (S, G) permutations and the (S,) misclassification loss after
    relabeling.
    """
    perms = np.empty((alloc.shape[0], G), dtype=np.int64)
    loss = np.empty(alloc.shape[0], dtype=np.int64)
    for s, a in enumerate(alloc):
        perms[s], loss[s] = _permutation(a, reference, G)
    return perms, loss


def apply_permutations(samples, perms: np.ndarray):
    """Permute cluster labels of every draw in a :class:`~mfamd.store.PosteriorSamples`."""
    inv = np.argsort(perms, axis=1)
    S = perms.shape[0]
    alloc = np.take_along_axis(perms, samples.alloc, axis=1)
    pi = np.take_along_axis(samples.pi, inv, axis=1)
    lam = samples.lam[np.arange(S)[:, None], inv]
    return samples.replace(alloc=alloc, pi=pi, lam=lam)


def identify(samples) -> tuple[object, RelabelingReport | None, RotationReport]:
    """Relabel, then rotate, every posterior draw.

    The anchor is the draw with the largest approximate log-likelihood:
    its allocation is the relabeling reference and, after relabeling,
    its per-cluster loadings are the Procrustes templates. Each theta_i
    is rotated with its own cluster's rotation so that fitted means are
    unchanged. Stored log-likelihoods are carried over untouched.
    """
    best = int(np.argmax(samples.loglik))
    G = samples.pi.shape[1]
    relabel_report = None
    if G > 1:
        perms, loss = relabel(samples.alloc, samples.alloc[best], G)
        samples = apply_permutations(samples, perms)
        relabel_report = RelabelingReport(perms, loss, best)

    S, _, _, Qp1 = samples.lam.shape
    Q = Qp1 - 1
    lam = samples.lam.copy()
    rots = np.empty((S, G, Q, Q))
    for g in range(G):
        template = samples.lam[best, g, :, 1:]
        lam[:, g, :, 1:], rots[:, g] = procrustes_align(samples.lam[:, g, :, 1:], template)
    theta = samples.theta
    if theta is not None:
        # theta_i -> R_g' theta_i for its cluster g, written for row vectors
        R = rots[np.arange(S)[:, None], samples.alloc]  # (S, N, Q, Q)
        theta = np.einsum("snq,snqr->snr", theta, R)
    samples = samples.replace(lam=lam, theta=theta)
    return samples, relabel_report, RotationReport(rots, best)

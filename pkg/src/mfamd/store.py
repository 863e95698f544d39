"""Posterior draw container and its on-disk layout.

A sample store is a directory holding one ``.npy`` file per field plus
``manifest.json``. Arrays are written with :func:`numpy.save`, so a
seeded sequential run reproduces every file byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FIELDS = ("alloc", "pi", "lam", "psi", "theta", "Z", "loglik", "dims")


@dataclass
class PosteriorSamples:
    """Thinned posterior draws over the retained latent dimensions.

    ``dims`` lists the latent columns kept in ``lam``, ``psi`` and ``Z``.
    ``theta`` and ``Z`` may be ``None`` when latents were not stored.
    """

    alloc: np.ndarray  # (S, N)
    pi: np.ndarray  # (S, G)
    lam: np.ndarray  # (S, G, d, Q + 1)
    psi: np.ndarray  # (S, d)
    theta: np.ndarray | None  # (S, N, Q)
    Z: np.ndarray | None  # (S, N, d)
    loglik: np.ndarray  # (S,)
    dims: np.ndarray  # (d,)

    @property
    def n_draws(self) -> int:
        return self.alloc.shape[0]

    @property
    def G(self) -> int:
        return self.pi.shape[1]

    @property
    def Q(self) -> int:
        return self.lam.shape[-1] - 1

    def replace(self, **changes) -> "PosteriorSamples":
        return dataclasses.replace(self, **changes)


def save_samples(path, samples: PosteriorSamples, manifest: dict) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    stored = []
    for name in FIELDS:
        arr = getattr(samples, name)
        if arr is None:
            continue
        np.save(path / f"{name}.npy", np.ascontiguousarray(arr), allow_pickle=False)
        stored.append(name)
    doc = {**manifest, "fields": stored}
    with open(path / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_samples(path) -> tuple[PosteriorSamples, dict]:
    path = Path(path)
    with open(path / "manifest.json") as fh:
        manifest = json.load(fh)
    arrays = {name: None for name in FIELDS}
    for name in manifest["fields"]:
        arrays[name] = np.load(path / f"{name}.npy", allow_pickle=False)
    return PosteriorSamples(**arrays), manifest

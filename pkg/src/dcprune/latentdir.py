"""Perturbation directions in W: principal components of sampled latents, or
isotropic Gaussian draws."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import HeaderMismatchError, read_container, write_container

PCA = "PCA"
RANDOM = "RANDOM"


class RankDeficientError(ValueError):
    pass


@dataclass
class DirectionSet:
    directions: np.ndarray       # [V, w_dim]
    variance_ratios: np.ndarray  # [V], sums to 1
    w_mean: np.ndarray           # [w_dim]
    mode: str = PCA

    @property
    def w_dim(self) -> int:
        return self.w_mean.shape[0]

    def save(self, path) -> None:
        write_container(path, {"directions": self.directions, "variance_ratios": self.variance_ratios,
                               "w_mean": self.w_mean},
                        config={"w_dim": int(self.w_dim), "n_directions": int(self.directions.shape[0])},
                        extra={"kind": "directions", "mode": self.mode})

    @classmethod
    def load(cls, path) -> "DirectionSet":
        header, t = read_container(path)
        if header.get("kind") != "directions":
            raise HeaderMismatchError(f"{path}: not a direction set (kind={header.get('kind')!r})")
        return cls(t["directions"], t["variance_ratios"], t["w_mean"], header["mode"])


def estimate_w_stats(gen, K: int, seed: int):
    """Map K standard-normal z through the mapping network.

    Returns (w_mean, samples[K, w_dim]).
    """
    cfg = gen.config
    if K < cfg.w_dim + 1:
        raise ValueError(f"K={K} too small, need at least w_dim + 1 = {cfg.w_dim + 1}")
    from .synthnet import map_latent

    rng = np.random.default_rng(seed)
    z = rng.standard_normal((K, cfg.z_dim))
    with T.no_grad():
        w = map_latent(gen, z).data
    return w.mean(axis=0), w


def pca_directions(samples: np.ndarray, V: int, rank_tol: float = 1e-12) -> DirectionSet:
    samples = np.asarray(samples, dtype=np.float64)
    K, D = samples.shape
    if V > D:
        raise ValueError(f"V={V} exceeds dimension {D}")
    if K <= V:
        raise ValueError(f"need more samples than components (K={K}, V={V})")
    mean = samples.mean(axis=0)
    centered = samples - mean
    cov = centered.T @ centered / (K - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    scale = max(float(evals[0]), 0.0)
    n_pos = int(np.sum(evals > rank_tol * max(scale, 1.0)))
    if n_pos < V:
        raise RankDeficientError(f"covariance has only {n_pos} positive eigenvalues; attainable V <= {n_pos}")
    dirs = evecs[:, :V].T.copy()
    for row in dirs:
        nz = np.flatnonzero(np.abs(row) > 1e-12)
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    kept = evals[:V]
    return DirectionSet(dirs, kept / kept.sum(), mean, PCA)


def random_directions(w_dim: int, w_mean=None) -> DirectionSet:
    """Placeholder set for RANDOM mode; ``sample_direction`` draws fresh vectors."""
    mean = np.zeros(w_dim) if w_mean is None else np.asarray(w_mean, dtype=np.float64)
    return DirectionSet(np.zeros((0, w_dim)), np.zeros(0), mean, RANDOM)


def sample_direction(ds: DirectionSet, rng: np.random.Generator) -> np.ndarray:
    if ds.mode == RANDOM:
        return rng.standard_normal(ds.w_dim)
    i = rng.choice(len(ds.variance_ratios), p=ds.variance_ratios)
    return ds.directions[i].copy()


def default_n_components(w_dim: int) -> int:
    return min(32, w_dim)

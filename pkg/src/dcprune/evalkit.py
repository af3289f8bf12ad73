"""Pretrained-network-free fidelity and diversity metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from . import tensor as T
from .synthnet import Generator, sample_w, synthesize


@dataclass(frozen=True)
class DiversityStats:
    min_nn_distance: float
    avg_distance: float
    n_samples: int


def generate(gen: Generator, w: np.ndarray, chunk: int = 64) -> np.ndarray:
    out = []
    with T.no_grad():
        for i in range(0, len(w), chunk):
            out.append(synthesize(gen, w[i:i + chunk]).data)
    return np.concatenate(out)


def teacher_student_l1(teacher: Generator, student: Generator, n: int, seed: int,
                       psi: float | None = None, w_mean=None) -> float:
    """Mean over n shared latents of the per-image mean absolute pixel difference.

    Latents come from the teacher's mapping (truncated when psi < 1).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if teacher.config.resolution != student.config.resolution:
        raise ValueError(f"resolution mismatch: teacher {teacher.config.resolution}, "
                         f"student {student.config.resolution}")
    if teacher.config.w_dim != student.config.w_dim:
        raise ValueError("teacher and student w_dim differ")
    w = sample_w(teacher, n, seed, w_mean, psi)
    a, b = generate(teacher, w), generate(student, w)
    per_image = np.abs(a - b).reshape(n, -1).mean(axis=1)
    return float(per_image.mean())


def diversity_from_images(images: np.ndarray, chunk: int = 512) -> DiversityStats:
    """RMS-normalized L2 nearest-neighbour and mean pairwise distances.

    Every one of the n(n-1)/2 pairs is evaluated.
    """
    x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
    n, P = x.shape
    if n < 2:
        raise ValueError("need at least 2 samples")
    nn = np.empty(n)
    pair_sum = 0.0
    for s in range(0, n, chunk):
        d = cdist(x[s:s + chunk], x) / np.sqrt(P)
        rows = np.arange(d.shape[0])
        # strict upper triangle only, so each pair is counted once
        mask = np.arange(n)[None, :] > (s + rows)[:, None]
        pair_sum += float(d[mask].sum())
        d[rows, s + rows] = np.inf
        nn[s:s + d.shape[0]] = d.min(axis=1)
    return DiversityStats(float(nn.mean()), pair_sum / (n * (n - 1) / 2), n)


def pairwise_diversity(gen: Generator, n: int, seed: int, psi: float | None = None, w_mean=None) -> DiversityStats:
    if n < 2:
        raise ValueError("n must be >= 2")
    return diversity_from_images(generate(gen, sample_w(gen, n, seed, w_mean, psi)))

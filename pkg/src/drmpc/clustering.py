"""Scenario reduction by K-means with a guarantee-preserving radius inflation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError
from .geometry import Polytope
from .risk import AmbiguitySet, DiscreteDistribution

MAX_LLOYD_ITER = 100


@dataclass(frozen=True, eq=False)
class ClusteredDistribution:
    """Cluster centers with empirical weights, the sample-to-center map and ``d_bar``."""

    base: DiscreteDistribution
    assignment: np.ndarray
    inflation: float

    @property
    def n_clusters(self) -> int:
        return len(self.base)

    def sse(self, samples) -> float:
        samples = np.asarray(samples, dtype=float)
        diff = samples - self.base.atoms[self.assignment]
        return float(np.sum(diff * diff))


def _nearest(samples, centers):
    d2 = np.sum((samples[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    # argmin returns the lowest index on ties
    return np.argmin(d2, axis=1), d2


def _kmeanspp(samples, k, rng):
    n = samples.shape[0]
    centers = [samples[rng.integers(n)]]
    for _ in range(1, k):
        d2 = np.min(np.sum((samples[:, None, :] - np.asarray(centers)[None]) ** 2, axis=2), axis=1)
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centers.append(samples[idx])
    return np.array(centers)


def _lloyd(samples, centers):
    labels = None
    for _ in range(MAX_LLOYD_ITER):
        new_labels, d2 = _nearest(samples, centers)
        counts = np.bincount(new_labels, minlength=centers.shape[0])
        for c in np.flatnonzero(counts == 0):
            # empty cluster: re-seed at the sample farthest from its center
            far = int(np.argmax(d2[np.arange(len(samples)), new_labels]))
            centers[c] = samples[far]
            new_labels, d2 = _nearest(samples, centers)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for c in range(centers.shape[0]):
            members = samples[labels == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    labels, _ = _nearest(samples, centers)
    return centers, labels


def cluster(samples, k: int, seed: int, support: Polytope | None = None, n_init: int = 10) -> ClusteredDistribution:
    """K-means (k-means++ seeding, Lloyd updates) keeping the lowest-SSE restart.

    Args:
        samples: Array of shape ``(N, n)``.
        k: Number of clusters, ``1 <= k <= N``.
        seed: Seed for the restart generator; results are deterministic in it.
        support: If given, centers are projected onto it.
        n_init: Number of k-means++ restarts.

    Returns:
        The clustered distribution with weights ``count / N`` and the
        inflation ``max_i ||w_i - center(i)||``.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    n = samples.shape[0]
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= n):
        raise InputError(f"need 1 <= k <= N, got k={k}, N={n}")
    if n_init < 1:
        raise InputError("n_init must be at least 1")
    rng = np.random.default_rng(seed)

    best = None
    for _ in range(n_init):
        centers, labels = _lloyd(samples, _kmeanspp(samples, k, rng))
        if support is not None:
            centers = np.array([support.project(c) for c in centers])
            labels, _ = _nearest(samples, centers)
        sse = float(np.sum((samples - centers[labels]) ** 2))
        if best is None or sse < best[0]:
            best = (sse, centers, labels)
    _, centers, labels = best

    # Drop clusters that ended up without members, then relabel compactly.
    used = np.unique(labels)
    remap = np.full(k, -1)
    remap[used] = np.arange(used.size)
    labels = remap[labels]
    centers = centers[used]
    counts = np.bincount(labels, minlength=used.size)
    inflation = float(np.max(np.linalg.norm(samples - centers[labels], axis=1)))
    return ClusteredDistribution(DiscreteDistribution(centers, counts / n), labels, inflation)


def inflated_ambiguity(cd: ClusteredDistribution, theta: float) -> AmbiguitySet:
    """Ball around the cluster centers with radius ``theta + d_bar``."""
    return AmbiguitySet(cd.base, theta + cd.inflation)

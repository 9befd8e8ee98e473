"""Clustering head: k-means seeding, Student-t soft assignment, self-training target."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from dceac.autodiff.tape import record, unwrap


@dataclass
class ClusterState:
    centers: np.ndarray
    inertia: float = float("nan")

    @property
    def n_clusters(self):
        return self.centers.shape[0]


def _sq_dists(x, centers):
    diff = x[:, None, :] - centers[None, :, :]
    return np.einsum("nkc,nkc->nk", diff, diff)


def _kmeanspp(x, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=x.dtype)
    centers[0] = x[rng.integers(n)]
    closest = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        tot = closest.sum()
        if tot > 0:
            idx = rng.choice(n, p=closest / tot)
        else:
            idx = rng.integers(n)
        centers[j] = x[idx]
        closest = np.minimum(closest, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def _lloyd(x, centers, max_iter, tol):
    k = centers.shape[0]
    prev = np.inf
    for _ in range(max_iter):
        d = _sq_dists(x, centers)
        labels = d.argmin(axis=1)
        nearest = d[np.arange(x.shape[0]), labels]
        inertia = nearest.sum()
        new = np.empty_like(centers)
        taken = np.zeros(x.shape[0], dtype=bool)
        for j in range(k):
            members = labels == j
            if members.any():
                new[j] = x[members].mean(axis=0)
            else:
                # empty cluster: move it to the point worst served by its centre
                far = np.where(taken, -1.0, nearest).argmax()
                taken[far] = True
                new[j] = x[far]
        centers = new
        if inertia == 0 or (np.isfinite(prev) and prev - inertia <= tol * prev):
            break
        prev = inertia
    d = _sq_dists(x, centers)
    return centers, float(d.min(axis=1).sum())


def kmeans_init(embeddings, k, seed=0, restarts=20, max_iter=300, tol=1e-4):
    """k-means++ seeded Lloyd iterations, best of ``restarts`` by inertia."""
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be N x C, got shape {x.shape}")
    if k < 2:
        raise ValueError("need at least two clusters")
    if x.shape[0] < k:
        raise ValueError(f"cannot form {k} clusters from {x.shape[0]} samples")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, restarts)):
        centers, inertia = _lloyd(x, _kmeanspp(x, k, rng), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = ClusterState(centers, inertia)
    return best


def soft_assign(embeddings, centers):
    """Student-t (one degree of freedom) similarity normalised per sample.

    Differentiable with respect to both ``embeddings`` (N x C) and
    ``centers`` (K x C) when either is a watched tensor.
    """
    z, mu = unwrap(embeddings), unwrap(centers)
    if z.ndim != 2 or mu.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ValueError(f"incompatible shapes {z.shape} and {mu.shape}")
    diff = z[:, None, :] - mu[None, :, :]
    kernel = 1.0 / (1.0 + np.einsum("nkc,nkc->nk", diff, diff))
    norm = kernel.sum(axis=1, keepdims=True)
    q = kernel / norm

    def vjp(g, needs):
        # through the normalisation, then through (1 + d)^-1, then d = |z - mu|^2
        gk = (g - (g * q).sum(axis=1, keepdims=True)) / norm
        gd = -gk * kernel * kernel
        gz = gmu = None
        if needs[0]:
            gz = 2.0 * np.einsum("nk,nkc->nc", gd, diff)
        if needs[1]:
            gmu = -2.0 * np.einsum("nk,nkc->kc", gd, diff)
        return gz, gmu

    return record(q, (embeddings, centers), vjp)


def target_distribution(q):
    """Sharpened, frequency-normalised targets; always a constant array."""
    q = np.asarray(unwrap(q))
    weight = q * q / q.sum(axis=0)
    return weight / weight.sum(axis=1, keepdims=True)


def kl_loss(p, q):
    """Summed KL(P || Q); gradient flows to ``q`` only."""
    pa = np.asarray(unwrap(p))
    qa = unwrap(q)
    if pa.shape != qa.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {qa.shape}")
    support = pa > 0
    if np.any(support & (qa <= 0)):
        raise ValueError("q has zero mass where p is positive")
    safe_q = np.where(support, qa, 1)
    safe_p = np.where(support, pa, 1)
    value = np.asarray((pa * np.log(safe_p / safe_q)).sum(), dtype=qa.dtype)

    def vjp(g, needs):
        return None, -g * np.where(support, pa / safe_q, 0).astype(qa.dtype)

    return record(value, (p, q), vjp)


def predict_labels(q):
    """Row argmax; ties go to the lowest cluster index."""
    return np.asarray(unwrap(q)).argmax(axis=1)

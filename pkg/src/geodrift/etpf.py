"""Ensemble transform particle filter step (deterministic OT resampling)."""

from __future__ import annotations

import os

import numpy as np

# POT probes every installed array backend at import time; only numpy is used here.
for _backend in ("PYTORCH", "TENSORFLOW", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_backend}", "1")

import ot  # noqa: E402


class TransportError(RuntimeError):
    pass


def etpf_transform(particles, weights, max_iter: int = 1_000_000) -> np.ndarray:
    """Move an equally weighted ensemble onto a weighted one by optimal transport.

    Solves the exact discrete OT problem from masses ``w = W / sum(W)`` to
    uniform masses ``1/N`` on the same support with squared Euclidean cost,
    and returns ``N * P^T X``: every new particle is the coupling-weighted
    barycentre of the old ones. The weighted mean is preserved.
    """
    X = np.asarray(particles, dtype=float)
    W = np.asarray(weights, dtype=float)
    if X.ndim != 2 or W.shape != (X.shape[0],):
        raise ValueError("expected particles (N, d) and weights (N,)")
    if np.any(W < 0) or not np.all(np.isfinite(W)):
        raise TransportError("weights must be finite and non-negative")
    total = W.sum()
    if not total > 0:
        raise TransportError("weights sum to zero")
    N = X.shape[0]
    if np.all(W == W[0]):
        return X.copy()
    w = W / total
    target = np.full(N, 1.0 / N)
    cost = ot.dist(X, X, metric="sqeuclidean")
    coupling, log = ot.emd(w, target, cost, numItermax=max_iter, log=True)
    if log.get("warning"):
        raise TransportError(f"optimal transport solver failed: {log['warning']}")
    return (N * coupling).T @ X


def etpf_batch(particles, weights) -> np.ndarray:
    """Apply :func:`etpf_transform` independently to each ensemble of ``(B, N, d)``."""
    out = np.empty_like(particles)
    for b in range(particles.shape[0]):
        out[b] = etpf_transform(particles[b], weights[b])
    return out

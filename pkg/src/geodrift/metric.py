"""Diagonal Riemannian metric estimated from the observations.

The metric at ``x`` is the inverse of a Gaussian-weighted local diagonal
covariance of the observations around ``x``::

    H_dd(x) = 1 / (sum_k w_k(x) (O_k[d] - x[d])**2 + epsilon)
    w_k(x)  = exp(-|O_k - x|**2 / (2 sigma_M**2))

Small entries mark observation-dense regions, so curves of small metric
energy are pulled onto the data.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

DEFAULT_EPSILON = 1e-4
CUTOFF_SIGMAS = 6.0


def knn_bandwidth(observations: np.ndarray, k: int = 10) -> float:
    """Median distance from each observation to its k-th nearest neighbour."""
    obs = np.asarray(observations, dtype=float)
    if len(obs) < 2:
        return 1.0
    k = min(k, len(obs) - 1)
    dist, _ = cKDTree(obs).query(obs, k=k + 1)
    scale = float(np.median(dist[:, k]))
    if scale <= 0:
        scale = float(np.median(dist[:, -1][dist[:, -1] > 0])) if np.any(dist[:, -1] > 0) else 1.0
    return scale


@dataclass(frozen=True)
class MetricField:
    observations: np.ndarray
    sigma_M: float
    epsilon: float
    cutoff: bool = False

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def _terms(self, x: np.ndarray):
        # x: (P, d) -> weights (P, K) and one (P, K) delta array per dimension
        delta = [self.observations[None, :, i] - x[:, i, None] for i in range(self.dim)]
        sq = delta[0] * delta[0]
        for dl in delta[1:]:
            sq += dl * dl
        w = np.exp(sq * (-0.5 / self.sigma_M**2))
        if self.cutoff:
            w[sq > (CUTOFF_SIGMAS * self.sigma_M) ** 2] = 0.0
        return w, delta

    def covariance(self, x) -> np.ndarray:
        """Weighted local diagonal covariance (without epsilon), shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dim)
        out = np.empty_like(flat)
        for sl in _chunks(len(flat), self.observations.shape[0]):
            w, delta = self._terms(flat[sl])
            for i, dl in enumerate(delta):
                out[sl, i] = np.sum(w * dl * dl, axis=1)
        return out.reshape(x.shape)

    def __call__(self, x) -> np.ndarray:
        return metric_at(self, x)


def _chunks(n_points: int, n_obs: int, budget: int = 2**17):
    step = max(1, budget // max(n_obs, 1))
    for start in range(0, n_points, step):
        yield slice(start, min(start + step, n_points))


def build_metric(observations, sigma_M: float | None = None,
                 epsilon: float = DEFAULT_EPSILON, cutoff: bool = False) -> MetricField:
    obs = np.array(observations, dtype=float, copy=True)
    if obs.ndim != 2:
        raise ValueError("need a (K, d) observation array")
    # canonical (lexicographic) order fixes the summation order
    obs = obs[np.lexsort(obs.T[::-1])]
    if sigma_M is None:
        sigma_M = knn_bandwidth(obs)
    if not sigma_M > 0 or not epsilon > 0:
        raise ValueError("sigma_M and epsilon must be positive")
    obs.setflags(write=False)
    return MetricField(obs, float(sigma_M), float(epsilon), cutoff)


def metric_at(field: MetricField, x) -> np.ndarray:
    """Diagonal of ``H(x)``; accepts a single state or a batch ``(..., d)``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite query point")
    return 1.0 / (field.covariance(x) + field.epsilon)


def metric_grad_at(field: MetricField, x) -> np.ndarray:
    """Analytic derivatives ``G[..., d, j] = dH_dd / dx_j``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite query point")
    d = field.dim
    flat = x.reshape(-1, d)
    out = np.empty((len(flat), d, d))
    s2 = field.sigma_M**2
    for sl in _chunks(len(flat), field.observations.shape[0]):
        w, delta = field._terms(flat[sl])
        for i in range(d):
            wdsq = w * delta[i] * delta[i]
            H = 1.0 / (np.sum(wdsq, axis=1) + field.epsilon)
            for j in range(d):
                # sum_k dw_k/dx_j * delta_ki^2, with dw_k/dx_j = w_k delta_kj / s2
                dcov = np.sum(wdsq * delta[j], axis=1) / s2
                if i == j:
                    dcov -= 2.0 * np.sum(w * delta[i], axis=1)
                out[sl, i, j] = -(H**2) * dcov
    return out.reshape(x.shape[:-1] + (d, d))

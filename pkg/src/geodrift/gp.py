"""Gaussian-process drift estimators.

Two estimators share one squared-exponential kernel (shared across the
output dimensions):

* :func:`naive_gp_drift` regresses rescaled increments ``(O_{k+1}-O_k)/tau``
  on ``O_k`` with observation noise ``sigma^2 / tau``;
* :func:`sparse_posterior_drift` turns Monte Carlo integrals over augmented
  paths into the sparse posterior ``f(x) = k(x, Z)(I + Lam K_S)^-1 d``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import linalg, optimize

log = logging.getLogger(__name__)

KS_RIDGE = 1e-3
COND_LIMIT = 1e12
NAIVE_JITTER = 1e-8
DENSE_LIMIT = 1000
DEFAULT_S = 300
INDUCING_INFLATE = 0.10
MEDIAN_POINTS = 2000


class GPError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# kernel


@dataclass(frozen=True)
class KernelConfig:
    """Squared-exponential kernel ``v * exp(-1/2 sum_i (x_i - y_i)^2 / l_i^2)``."""

    lengthscales: tuple
    variance: float

    def __post_init__(self):
        ls = tuple(float(v) for v in np.atleast_1d(self.lengthscales))
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "variance", float(self.variance))
        if not all(v > 0 for v in ls) or not self.variance > 0:
            raise ValueError("kernel lengthscales and variance must be positive")

    @property
    def ell(self) -> np.ndarray:
        return np.asarray(self.lengthscales)

    def __call__(self, X, Y) -> np.ndarray:
        return se_kernel(X, Y, self)

    def to_dict(self) -> dict:
        return {"family": "squared_exponential", "lengthscales": list(self.lengthscales),
                "variance": self.variance}

    @classmethod
    def from_dict(cls, data: dict) -> "KernelConfig":
        if data.get("family", "squared_exponential") != "squared_exponential":
            raise ValueError("only the squared-exponential kernel is supported")
        return cls(tuple(data["lengthscales"]), data["variance"])


def se_kernel(X, Y, kernel: KernelConfig) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float)) / kernel.ell
    Y = np.atleast_2d(np.asarray(Y, dtype=float)) / kernel.ell
    # in place: large temporaries dominate the cost otherwise
    K = X @ Y.T
    K *= -2.0
    K += np.einsum("ij,ij->i", X, X)[:, None]
    K += np.einsum("ij,ij->i", Y, Y)[None, :]
    np.maximum(K, 0.0, out=K)
    K *= -0.5
    np.exp(K, out=K)
    K *= kernel.variance
    return K


def increments(observations, tau: float):
    obs = np.asarray(observations, dtype=float)
    return obs[:-1], (obs[1:] - obs[:-1]) / tau


def default_kernel(observations, tau: float) -> KernelConfig:
    """Data-driven kernel: per-dimension median heuristic and increment variance.

    Lengthscale ``i`` is the median of ``|x_i - x'_i|`` over observation
    pairs (an evenly strided subsample of at most ``MEDIAN_POINTS``
    observations for long records); the signal variance is the mean
    variance of the rescaled increments, i.e. the spread of the regression
    targets.
    """
    obs = np.asarray(observations, dtype=float)
    sub = obs[::-(-len(obs) // MEDIAN_POINTS)]
    iu = np.triu_indices(len(sub), k=1)
    ls = []
    for i in range(obs.shape[1]):
        diff = np.abs(sub[iu[0], i] - sub[iu[1], i])
        m = float(np.median(diff))
        ls.append(m if m > 0 else 1.0)
    _, Y = increments(obs, tau)
    var = float(np.mean(np.var(Y, axis=0)))
    return KernelConfig(tuple(ls), var if var > 0 else 1.0)


def _chol(A, what: str):
    try:
        return linalg.cho_factor(A, lower=True)
    except linalg.LinAlgError:
        jitter = NAIVE_JITTER * max(float(np.mean(np.diag(A))), 1.0)
        try:
            log.info("%s not positive definite; retrying with jitter %.1e", what, jitter)
            return linalg.cho_factor(A + jitter * np.eye(len(A)), lower=True)
        except linalg.LinAlgError as err:
            raise GPError(f"{what} is singular even after jitter") from err


# ---------------------------------------------------------------------------
# naive baseline


@dataclass
class NaiveGPDrift:
    """GP regression of rescaled increments (dense, or DTC-sparse for large K)."""

    X: np.ndarray  # regressors (dense) or inducing points (sparse)
    alpha: np.ndarray  # (n, d)
    kernel: KernelConfig
    noise: float  # sigma^2 / tau
    sparse: bool = False
    _var_factor: Optional[tuple] = field(default=None, repr=False)
    train_X: Optional[np.ndarray] = field(default=None, repr=False)  # sparse variant only

    def __call__(self, x) -> np.ndarray:
        return self.drift_eval(x)

    def drift_eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = np.empty((len(flat), self.alpha.shape[1]))
        for sl in _chunks(len(flat), len(self.X)):
            out[sl] = se_kernel(flat[sl], self.X, self.kernel) @ self.alpha
        return out.reshape(x.shape[:-1] + (self.alpha.shape[1],))

    def drift_var(self, x) -> np.ndarray:
        """Posterior variance (shared by all components), shape ``(..., d)``."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        k = se_kernel(flat, self.X, self.kernel)
        if self.sparse:
            # DTC: k_xx - k Kzz^-1 k + k (Kzz + KzxKxz/noise)^-1 k
            Kzz_f, Sig_f = self._var_factor
            q = np.sum(k * linalg.cho_solve(Kzz_f, k.T).T, axis=1)
            s = np.sum(k * linalg.cho_solve(Sig_f, k.T).T, axis=1)
            v = self.kernel.variance - q + s
        else:
            v = self.kernel.variance - np.sum(k * linalg.cho_solve(self._var_factor, k.T).T, axis=1)
        v = np.maximum(v, 0.0)
        v = np.repeat(v[:, None], self.alpha.shape[1], axis=1)
        return v.reshape(x.shape[:-1] + (self.alpha.shape[1],))

    def to_dict(self) -> dict:
        return {"model": "naive_gp", "sparse": self.sparse, "kernel": self.kernel.to_dict(),
                "noise": self.noise, "X": self.X.tolist(), "alpha": self.alpha.tolist(),
                "train_X": None if self.train_X is None else self.train_X.tolist()}


def _chunks(n_points: int, n_basis: int, budget: int = 2**17):
    # small blocks stay in cache and avoid page-faulting fresh buffers
    step = max(1, budget // max(n_basis, 1))
    for start in range(0, n_points, step):
        yield slice(start, min(start + step, n_points))


def naive_gp_drift(observations, kernel: Optional[KernelConfig], sigma: float, tau: float,
                   S: int = DEFAULT_S, inducing: Optional[np.ndarray] = None) -> NaiveGPDrift:
    """Posterior mean ``k(x, X)(K + sigma^2/tau I)^-1 Y`` of the increment regression."""
    obs = np.asarray(getattr(observations, "observations", observations), dtype=float)
    if len(obs) < 2:
        raise ValueError("need at least two observations")
    if not sigma > 0 or not tau > 0:
        raise ValueError("sigma and tau must be positive")
    kernel = kernel or default_kernel(obs, tau)
    X, Y = increments(obs, tau)
    noise = sigma**2 / tau
    if len(X) <= DENSE_LIMIT:
        K = se_kernel(X, X, kernel) + noise * np.eye(len(X))
        fac = _chol(K, "increment kernel matrix")
        alpha = linalg.cho_solve(fac, Y)
        return NaiveGPDrift(X.copy(), alpha, kernel, noise, False, fac)
    Z = grid_inducing(obs, S) if inducing is None else np.asarray(inducing, dtype=float)
    Kzz = se_kernel(Z, Z, kernel)
    Kzx = se_kernel(Z, X, kernel)
    Sig = Kzz + Kzx @ Kzx.T / noise
    Kzz_f = _chol(Kzz + NAIVE_JITTER * kernel.variance * np.eye(len(Z)), "inducing kernel matrix")
    Sig_f = _chol(Sig, "sparse increment system")
    alpha = linalg.cho_solve(Sig_f, Kzx @ Y) / noise
    return NaiveGPDrift(Z, alpha, kernel, noise, True, (Kzz_f, Sig_f), X.copy())


def refine_kernel(observations, kernel: KernelConfig, sigma: float, tau: float,
                  max_points: int = 1000) -> KernelConfig:
    """Maximise the naive-GP marginal likelihood over log lengthscales and log variance."""
    obs = np.asarray(getattr(observations, "observations", observations), dtype=float)
    X, Y = increments(obs, tau)
    X, Y = X[:max_points], Y[:max_points]
    noise = sigma**2 / tau
    d = X.shape[1]

    def nll(theta):
        kc = KernelConfig(tuple(np.exp(theta[:d])), float(np.exp(theta[d])))
        K = se_kernel(X, X, kc) + noise * np.eye(len(X))
        try:
            c, low = linalg.cho_factor(K, lower=True)
        except linalg.LinAlgError:
            return 1e25
        a = linalg.cho_solve((c, low), Y)
        return 0.5 * np.sum(Y * a) + Y.shape[1] * np.sum(np.log(np.diag(c)))

    theta0 = np.log(np.r_[kernel.ell, kernel.variance])
    res = optimize.minimize(nll, theta0, method="L-BFGS-B",
                            bounds=[(t - 3.0, t + 3.0) for t in theta0])
    return KernelConfig(tuple(np.exp(res.x[:d])), float(np.exp(res.x[d])))


# ---------------------------------------------------------------------------
# sparse posterior from augmented paths


def grid_inducing(observations, S: int = DEFAULT_S, inflate: float = INDUCING_INFLATE) -> np.ndarray:
    """Regular grid of about ``S`` points over the inflated observation box.

    Points per axis are proportional to the box side lengths.
    """
    obs = np.asarray(observations, dtype=float)
    lo, hi = obs.min(0), obs.max(0)
    pad = inflate * (hi - lo) / 2.0
    lo, hi = lo - pad, hi + pad
    ext = np.maximum(hi - lo, 1e-12)
    d = obs.shape[1]
    scale = (S / np.prod(ext)) ** (1.0 / d)
    counts = np.maximum(2, np.round(ext * scale).astype(int))
    axes = [np.linspace(lo[i], hi[i], counts[i]) for i in range(d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


@dataclass
class BridgeIntegrals:
    I1: np.ndarray  # (d, S, S)
    I2: np.ndarray  # (d, S)
    dt: float
    n_particles: int
    n_bridges: int


def accumulate_integrals(particle_slices, drift_slices, inducing, kernel: KernelConfig,
                         dt: float, n_particles: int, d: Optional[int] = None) -> BridgeIntegrals:
    """Sum ``K_l K_l^T`` and ``K_l g_i`` over slices, then scale by ``dt / N``.

    ``particle_slices`` and ``drift_slices`` are sequences (one entry per
    bridge) of arrays ``(L, N, d)``; they are reduced in order.
    """
    Zs = np.asarray(inducing, dtype=float)
    S = len(Zs)
    dim = Zs.shape[1] if d is None else d
    I1 = np.zeros((S, S))
    I2 = np.zeros((dim, S))
    count = 0
    for X, G in zip(particle_slices, drift_slices):
        X = np.asarray(X, dtype=float)
        G = np.asarray(G, dtype=float)
        if X.shape != G.shape or X.shape[-1] != dim:
            raise ValueError("particle and drift slices differ in shape or dimension")
        if not np.all(np.isfinite(G)):
            raise GPError("non-finite effective drift values")
        Xf = X.reshape(-1, dim)
        Gf = G.reshape(-1, dim)
        for sl in _chunks(len(Xf), S):
            Kl = se_kernel(Zs, Xf[sl], kernel)
            I1 += Kl @ Kl.T
            I2 += (Kl @ Gf[sl]).T
        count += 1
    scale = dt / n_particles
    I1 = 0.5 * (I1 + I1.T) * scale
    return BridgeIntegrals(np.repeat(I1[None], dim, axis=0), I2 * scale, dt, n_particles, count)


def accumulate_bridge_integrals(bridges, inducing, kernel: KernelConfig) -> BridgeIntegrals:
    """Integrals over the controlled particles of all non-failed bridges."""
    good = [b for b in bridges if not b.failed]
    Zs = np.asarray(inducing, dtype=float)
    if not good:
        S, d = Zs.shape
        return BridgeIntegrals(np.zeros((d, S, S)), np.zeros((d, S)), 0.0, 0, 0)
    dt = good[0].dt
    N = good[0].F.shape[1]
    return accumulate_integrals((b.F[:-1] for b in good), (b.G for b in good),
                                Zs, kernel, dt, N)


@dataclass
class SparseGPDrift:
    inducing: np.ndarray  # (S, d)
    kernel: KernelConfig
    sigma: float
    coef: np.ndarray  # (S, d): (I + Lam_i K_S)^-1 d_i in column i
    Lam: np.ndarray  # (d, S, S)
    ridge: float = KS_RIDGE
    _W: Optional[np.ndarray] = field(default=None, repr=False)

    def __call__(self, x) -> np.ndarray:
        return self.drift_eval(x)

    @property
    def K_S(self) -> np.ndarray:
        return se_kernel(self.inducing, self.inducing, self.kernel)

    def _var_matrix(self) -> np.ndarray:
        if self._W is None:
            KS = self.K_S
            S = len(KS)
            self._W = np.stack([np.linalg.solve(np.eye(S) + L @ KS, L) for L in self.Lam])
        return self._W

    def drift_eval(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        out = np.empty((len(flat), self.coef.shape[1]))
        for sl in _chunks(len(flat), len(self.inducing)):
            out[sl] = se_kernel(flat[sl], self.inducing, self.kernel) @ self.coef
        return out.reshape(x.shape)

    def drift_var(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        W = self._var_matrix()
        v = np.empty((len(flat), len(W)))
        for sl in _chunks(len(flat), len(self.inducing)):
            k = se_kernel(flat[sl], self.inducing, self.kernel)
            v[sl] = np.stack([self.kernel.variance - np.sum((k @ Wi) * k, axis=1) for Wi in W], axis=1)
        return np.maximum(v, 0.0).reshape(x.shape)

    def divergence(self, x) -> np.ndarray:
        """``sum_i d f_i / d x_i`` from the analytic kernel gradient."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        ell2 = self.kernel.ell**2
        out = np.zeros(len(x))
        for sl in _chunks(len(x), len(self.inducing)):
            k = se_kernel(x[sl], self.inducing, self.kernel)  # (P, S)
            for i in range(x.shape[1]):
                # d k / d x_i = -(x_i - z_i) / l_i^2 k, split to avoid a (P, S) temporary
                kc = k @ self.coef[:, i]
                kzc = k @ (self.inducing[:, i] * self.coef[:, i])
                out[sl] -= (x[sl, i] * kc - kzc) / ell2[i]
        return out

    def to_dict(self) -> dict:
        return {"model": "sparse_gp", "kernel": self.kernel.to_dict(), "sigma": self.sigma,
                "ridge": self.ridge, "inducing": self.inducing.tolist(),
                "coef": self.coef.T.tolist(), "Lambda": self.Lam.tolist()}


def sparse_posterior_drift(ints: BridgeIntegrals, inducing, kernel: KernelConfig, sigma: float,
                           ridge: float = KS_RIDGE) -> SparseGPDrift:
    """Sparse drift posterior from the path integrals ``I1``, ``I2``."""
    Zs = np.asarray(inducing, dtype=float)
    S = len(Zs)
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    KS = se_kernel(Zs, Zs, kernel)
    KS_inv = linalg.cho_solve(_chol(KS + ridge * np.eye(S), "K_S"), np.eye(S))
    KS_inv = 0.5 * (KS_inv + KS_inv.T)
    s2 = sigma**2
    dim = ints.I2.shape[0]
    Lam = np.empty((dim, S, S))
    coef = np.empty((S, dim))
    for i in range(dim):
        # Gram form W W^T with W = K_S^-1 I1^(1/2) keeps Lambda PSD in floating point
        e, V = np.linalg.eigh(0.5 * (ints.I1[i] + ints.I1[i].T))
        W = KS_inv @ (V * np.sqrt(np.clip(e, 0.0, None)))
        L = W @ W.T / s2
        dvec = KS_inv @ ints.I2[i] / s2
        A = np.eye(S) + L @ KS
        cond = np.linalg.cond(A)
        if not cond < COND_LIMIT:
            raise GPError(f"I + Lambda K_S ill-conditioned in dimension {i} (condition {cond:.3e})")
        Lam[i] = L
        coef[:, i] = np.linalg.solve(A, dvec)
    return SparseGPDrift(Zs.copy(), kernel, float(sigma), coef, Lam, ridge)


def path_likelihood_diagnostic(model, bridges) -> dict:
    """Expected path objective of a drift model under the augmented paths.

    ``literal`` is ``dt/N (1/2 S_f + S_div + S_fg)``; ``consistent`` is the
    negative log-likelihood of the continuous path,
    ``dt/N (1/2 S_f - S_fg) / sigma^2``, whose signs follow from the
    quadratic path likelihood.
    """
    Sf = Sdiv = Sfg = 0.0
    dt = N = None
    for b in bridges:
        if b.failed:
            continue
        X = b.F[:-1].reshape(-1, b.F.shape[-1])
        G = b.G.reshape(-1, b.G.shape[-1])
        f = np.asarray(model(X))
        Sf += float(np.sum(f**2))
        Sfg += float(np.sum(f * G))
        Sdiv += float(np.sum(_divergence(model, X)))
        dt, N = b.dt, b.F.shape[1]
    if dt is None:
        return {"literal": float("nan"), "consistent": float("nan")}
    c = dt / N
    sigma = getattr(model, "sigma", None) or bridges[0].sigma
    return {"literal": c * (0.5 * Sf + Sdiv + Sfg),
            "consistent": c * (0.5 * Sf - Sfg) / sigma**2}


def _divergence(model, X, h: float = 1e-5):
    if hasattr(model, "divergence"):
        return model.divergence(X)
    out = np.zeros(len(X))
    for i in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[i] = h
        out += (np.asarray(model(X + e))[:, i] - np.asarray(model(X - e))[:, i]) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# serialisation


def save_model(model, path) -> None:
    """Write a drift model as JSON; floats use their shortest exact repr."""
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh)


def model_from_dict(data: dict):
    kernel = KernelConfig.from_dict(data["kernel"])
    if data["model"] == "sparse_gp":
        return SparseGPDrift(np.array(data["inducing"], dtype=float), kernel, float(data["sigma"]),
                             np.array(data["coef"], dtype=float).T.copy(),
                             np.array(data["Lambda"], dtype=float), float(data["ridge"]))
    if data["model"] == "naive_gp":
        X = np.array(data["X"], dtype=float)
        alpha = np.array(data["alpha"], dtype=float)
        noise = float(data["noise"])
        if data["sparse"]:
            Xt = np.array(data["train_X"], dtype=float)
            Kzz = se_kernel(X, X, kernel)
            Kzx = se_kernel(X, Xt, kernel)
            Kzz_f = _chol(Kzz + NAIVE_JITTER * kernel.variance * np.eye(len(X)), "inducing kernel matrix")
            Sig_f = _chol(Kzz + Kzx @ Kzx.T / noise, "sparse increment system")
            return NaiveGPDrift(X, alpha, kernel, noise, True, (Kzz_f, Sig_f), Xt)
        fac = _chol(se_kernel(X, X, kernel) + noise * np.eye(len(X)), "increment kernel matrix")
        return NaiveGPDrift(X, alpha, kernel, noise, False, fac)
    raise ValueError(f"unknown model type {data['model']!r}")


def load_model(path):
    with open(path) as fh:
        return model_from_dict(json.load(fh))

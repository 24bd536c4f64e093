"""Geodesic-constrained diffusion bridges via deterministic particle flows.

For one interval ``[t_k, t_{k+1}]`` with prior drift ``f`` and noise
``sigma`` (``D = sigma**2``) three particle ensembles are propagated:

* ``Z`` (forward filter, density ``rho_t``): probability-flow ODE of the
  prior, ``dZ/dt = f(Z) - D/2 grad log rho_t(Z)``, reweighted towards the
  constraint path with ``W = exp(-beta |Gamma(t) - Z|^2 dt)`` and
  resampled deterministically by optimal transport;
* ``B`` (time-reversed flow, density ``q_t``): started at the terminal
  observation and integrated backwards with
  ``B <- B - dt (f(B) - D grad log rho_t(B) + D/2 grad log q_t(B))``;
* ``F`` (controlled paths): forward flow of the controlled process with
  control ``u = D (grad log q_t - grad log rho_t)``.

The effective drift ``g = f + u`` along ``F`` is what the drift regression
consumes. All routines run on a batch of bridges at once; every bridge owns
its random stream, so results do not depend on how bridges are batched.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .etpf import etpf_transform
from .score import (BANDWIDTH_FACTOR, DEFAULT_LAMBDA, DEFAULT_M, ScoreEstimate,
                    ScoreFitError, fit_scores, score_at)

log = logging.getLogger(__name__)

EPS_INIT = 1e-3
N_PARTICLES = 100
BETA = 0.5
MAX_FAILED_FRACTION = 0.10
_UNDERFLOW = np.log(1e-300)


class BridgeError(RuntimeError):
    pass


def bridge_seed(master_seed: int, iteration: int, interval: int) -> np.random.SeedSequence:
    """Seed of one bridge, derived from the run seed, EM iteration and interval index."""
    return np.random.SeedSequence([int(master_seed), int(iteration), int(interval)])


@dataclass
class BridgeProblem:
    drift: Callable[[np.ndarray], np.ndarray]
    sigma: float
    start: np.ndarray
    end: np.ndarray
    t0: float
    t1: float
    dt: float
    constraint: Optional[np.ndarray] = None  # Gamma on the (L+1)-point slice grid
    beta: float = BETA
    n_particles: int = N_PARTICLES
    eps_init: float = EPS_INIT
    n_inducing: int = DEFAULT_M
    score_lambda: float = DEFAULT_LAMBDA
    bandwidth_factor: float = BANDWIDTH_FACTOR
    seed: object = 0

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float)
        self.end = np.asarray(self.end, dtype=float)
        if self.constraint is not None:
            self.constraint = np.asarray(self.constraint, dtype=float)

    @property
    def n_steps(self) -> int:
        return int(round((self.t1 - self.t0) / self.dt))

    def validate(self) -> None:
        if not self.t1 > self.t0:
            raise ValueError("t1 must exceed t0")
        L = (self.t1 - self.t0) / self.dt
        if abs(L - round(L)) > 1e-6 or round(L) < 1:
            raise ValueError("interval length must be an integer number of steps")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if self.n_particles < 10:
            raise ValueError("need at least 10 particles")
        if not self.eps_init > 0:
            raise ValueError("eps_init must be positive")
        if not 2 <= self.n_inducing <= self.n_particles:
            raise ValueError("need 2 <= n_inducing <= n_particles")
        if self.constraint is not None and self.constraint.shape != (self.n_steps + 1, self.start.size):
            raise ValueError("constraint must hold one point per slice")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class BridgeSolution:
    """Particle representation of one solved bridge.

    Slices are indexed ``0..L``; ``G[l]`` is the effective drift recorded
    at ``F[l]`` for ``l < L``. ``rho_fits[0]`` and ``q_fits[L]`` are
    ``None``: those ends use the analytic Gaussian pinning score.
    """

    F: np.ndarray
    G: np.ndarray
    start: np.ndarray
    end: np.ndarray
    sigma: float
    dt: float
    eps_init: float
    t0: float = 0.0
    Z: Optional[np.ndarray] = None
    B: Optional[np.ndarray] = None
    rho_fits: Optional[list] = None
    q_fits: Optional[list] = None
    failed: bool = False
    reason: str = ""
    terminal_error: float = float("nan")
    drift: Optional[Callable] = field(default=None, repr=False)

    @property
    def converged(self) -> bool:
        return not self.failed

    @property
    def n_steps(self) -> int:
        return self.F.shape[0] - 1

    def rho_score(self, x, t_index: int) -> np.ndarray:
        if t_index == 0:
            return -(np.asarray(x) - self.start) / self.eps_init
        return score_at(self.rho_fits[t_index], x)

    def q_score(self, x, t_index: int) -> np.ndarray:
        if t_index == self.n_steps:
            return -(np.asarray(x) - self.end) / self.eps_init
        return score_at(self.q_fits[t_index], x)


def control_at(solution: BridgeSolution, x, t_index: int) -> np.ndarray:
    """Optimal control ``u = sigma^2 (grad log q - grad log rho)`` at slice ``t_index``."""
    if not 0 <= t_index <= solution.n_steps:
        raise IndexError("t_index outside the interval grid")
    if solution.rho_fits is None or solution.q_fits is None:
        raise BridgeError("score fits were discarded for this solution")
    D = solution.sigma**2
    if solution.n_steps == 1:
        x = np.asarray(x, dtype=float)
        g = (solution.end - x) / solution.dt
        if solution.drift is None:
            return g
        return g - np.asarray(solution.drift(np.atleast_2d(x))).reshape(x.shape)
    tc = min(max(t_index, 1), solution.n_steps - 1)
    return D * (solution.q_score(x, tc) - solution.rho_score(x, tc))


# ---------------------------------------------------------------------------
# batched passes


@dataclass
class _Batch:
    drift: Callable
    sigma: float
    dt: float
    L: int
    N: int
    eps: float
    beta: float
    M: int
    lam: float
    bw: float
    starts: np.ndarray  # (B, d)
    ends: np.ndarray
    constraints: Optional[np.ndarray]  # (B, L+1, d)
    rngs: list
    failed: np.ndarray = field(default=None)
    reasons: list = field(default=None)

    def __post_init__(self):
        n = len(self.starts)
        if self.failed is None:
            self.failed = np.zeros(n, dtype=bool)
        if self.reasons is None:
            self.reasons = [""] * n

    def f(self, x):
        shape = x.shape
        return np.asarray(self.drift(x.reshape(-1, shape[-1]))).reshape(shape)

    def fail(self, mask, reason):
        for b in np.flatnonzero(mask & ~self.failed):
            self.reasons[b] = reason
        self.failed |= mask

    def fit(self, particles):
        """Score fits for all bridges; degenerate ensembles mark their bridge failed."""
        X = particles
        spread = np.max(np.ptp(X, axis=1), axis=1)
        bad = ~(spread > 1e-10) | ~np.all(np.isfinite(X), axis=(1, 2))
        if np.any(bad):
            self.fail(bad, "degenerate ensemble in score fit")
            X = X.copy()
            # substitute a harmless cloud so the batch keeps a regular shape
            X[bad] = self.starts[bad][:, None, :] + np.linspace(-1, 1, self.N)[None, :, None]
        try:
            return fit_scores(X, self.rngs, M=self.M, lam=self.lam, bandwidth_factor=self.bw)
        except ScoreFitError as err:
            raise BridgeError(str(err)) from err

    def guard(self, new, old, reason):
        bad = ~np.all(np.isfinite(new), axis=(1, 2))
        if np.any(bad):
            self.fail(bad, reason)
            new[bad] = old[bad]
        return new


def _batch_from(problems: Sequence[BridgeProblem]) -> _Batch:
    if not problems:
        raise ValueError("no bridge problems")
    p0 = problems[0]
    for p in problems:
        p.validate()
        same = (p.sigma == p0.sigma and p.dt == p0.dt and p.n_steps == p0.n_steps
                and p.n_particles == p0.n_particles and p.eps_init == p0.eps_init
                and p.beta == p0.beta and p.n_inducing == p0.n_inducing
                and p.drift is p0.drift)
        if not same:
            raise ValueError("batched bridges must share drift, sigma, grid and solver settings")
    has_constraint = all(p.constraint is not None for p in problems)
    return _Batch(
        drift=p0.drift, sigma=float(p0.sigma), dt=float(p0.dt), L=p0.n_steps,
        N=p0.n_particles, eps=float(p0.eps_init), beta=float(p0.beta),
        M=p0.n_inducing, lam=p0.score_lambda, bw=p0.bandwidth_factor,
        starts=np.stack([p.start for p in problems]),
        ends=np.stack([p.end for p in problems]),
        constraints=np.stack([p.constraint for p in problems]) if has_constraint else None,
        rngs=[p.rng() for p in problems],
    )


def _pinned_cloud(batch: _Batch, centres):
    noise = np.stack([r.standard_normal((batch.N, centres.shape[1])) for r in batch.rngs])
    return centres[:, None, :] + np.sqrt(batch.eps) * noise


def _forward(batch: _Batch):
    D = batch.sigma**2
    L, dt = batch.L, batch.dt
    Z0 = _pinned_cloud(batch, batch.starts)
    Z = np.empty((L + 1,) + Z0.shape)
    Z[0] = Z0
    fits: list = [None] * (L + 1)
    for ti in range(L):
        cur = Z[ti]
        if ti == 0:
            s = -(cur - batch.starts[:, None, :]) / batch.eps
        else:
            fits[ti] = batch.fit(cur)
            s = score_at(fits[ti], cur)
        nxt = cur + dt * (batch.f(cur) - 0.5 * D * s)
        nxt = batch.guard(nxt, cur, "non-finite forward particles")
        if batch.beta > 0 and ti >= 1 and batch.constraints is not None:
            nxt = _reweight(batch, nxt, batch.constraints[:, ti + 1])
        Z[ti + 1] = nxt
    fits[L] = batch.fit(Z[L])
    return Z, fits


def _reweight(batch: _Batch, particles, target):
    sq = np.sum((target[:, None, :] - particles) ** 2, axis=-1)
    logw = -batch.beta * sq * batch.dt
    underflow = np.all(logw < _UNDERFLOW, axis=1)
    if np.any(underflow):
        batch.fail(underflow, "constraint too stiff: all weights below 1e-300")
    W = np.exp(logw - logw.max(axis=1, keepdims=True))
    out = particles.copy()
    for b in range(len(particles)):
        if not batch.failed[b]:
            out[b] = etpf_transform(particles[b], W[b])
    return out


def _backward(batch: _Batch, rho_fits):
    D = batch.sigma**2
    L, dt = batch.L, batch.dt
    BL = _pinned_cloud(batch, batch.ends)
    Bs = np.empty((L + 1,) + BL.shape)
    Bs[L] = BL
    fits: list = [None] * (L + 1)
    for ti in range(L, 0, -1):
        cur = Bs[ti]
        s_rho = score_at(rho_fits[ti], cur)
        if ti == L:
            s_q = -(cur - batch.ends[:, None, :]) / batch.eps
        else:
            fits[ti] = batch.fit(cur)
            s_q = score_at(fits[ti], cur)
        prev = cur - dt * (batch.f(cur) - D * s_rho + 0.5 * D * s_q)
        Bs[ti - 1] = batch.guard(prev, cur, "non-finite backward particles")
    fits[0] = batch.fit(Bs[0])
    return Bs, fits


def _controlled(batch: _Batch, rho_fits, q_fits):
    D = batch.sigma**2
    L, dt = batch.L, batch.dt
    F0 = _pinned_cloud(batch, batch.starts)
    F = np.empty((L + 1,) + F0.shape)
    G = np.empty((L,) + F0.shape)
    F[0] = F0
    for ti in range(L):
        cur = F[ti]
        if ti == 0:
            s_self = -(cur - batch.starts[:, None, :]) / batch.eps
        else:
            s_self = score_at(batch.fit(cur), cur)
        # the pinned slice has no usable score pair; the control is smooth in
        # time, so the first interior slice stands in for it
        if L > 1:
            tc = max(ti, 1)
            g = batch.f(cur) + D * (score_at(q_fits[tc], cur) - score_at(rho_fits[tc], cur))
        else:
            # single-step interval: the bridge drift reduces to (end - x) / dt
            g = (batch.ends[:, None, :] - cur) / dt
        G[ti] = g
        nxt = cur + dt * (g - 0.5 * D * s_self)
        F[ti + 1] = batch.guard(nxt, cur, "non-finite controlled particles")
    return F, G


def _split_fits(fits, b):
    return [None if f is None else ScoreEstimate(
        f.inducing[b], f.coef[b], float(f.lengthscale[b]), f.lam,
        None if f.mean is None else f.mean[b], None if f.precision is None else f.precision[b])
        for f in fits]


def terminal_tolerance(sigma: float, dt: float, eps_init: float) -> float:
    """Distance of the final ensemble mean from the target beyond which a bridge fails."""
    return 5.0 * (np.sqrt(eps_init) + sigma * np.sqrt(dt))


def solve_bridges(problems: Sequence[BridgeProblem], keep_full: bool = True) -> list[BridgeSolution]:
    """Solve a batch of bridge problems that share drift, noise and grid."""
    batch = _batch_from(problems)
    Z, rho_fits = _forward(batch)
    Bs, q_fits = _backward(batch, rho_fits)
    F, G = _controlled(batch, rho_fits, q_fits)
    tol = terminal_tolerance(batch.sigma, batch.dt, batch.eps)
    miss = np.linalg.norm(F[-1].mean(axis=1) - batch.ends, axis=1)
    batch.fail(~(miss <= tol), "terminal miss")
    out = []
    for b, p in enumerate(problems):
        sol = BridgeSolution(
            F=F[:, b].copy(), G=G[:, b].copy(), start=p.start, end=p.end, sigma=batch.sigma,
            dt=batch.dt, eps_init=batch.eps, t0=p.t0, failed=bool(batch.failed[b]),
            reason=batch.reasons[b], terminal_error=float(miss[b]), drift=batch.drift,
        )
        if keep_full:
            sol.Z = Z[:, b].copy()
            sol.B = Bs[:, b].copy()
            sol.rho_fits = _split_fits(rho_fits, b)
            sol.q_fits = _split_fits(q_fits, b)
        out.append(sol)
    return out


def solve_bridge(problem: BridgeProblem) -> BridgeSolution:
    return solve_bridges([problem])[0]


# single-bridge stage API ----------------------------------------------------


def forward_filter(problem: BridgeProblem):
    """Forward filtering pass; returns ``(Z, rho_fits)`` for one bridge."""
    batch = _batch_from([problem])
    Z, fits = _forward(batch)
    if batch.failed[0]:
        raise BridgeError(batch.reasons[0])
    return Z[:, 0], _split_fits(fits, 0)


def _stack_fits(fits):
    return [None if f is None else ScoreEstimate(
        f.inducing[None], f.coef[None], np.array([f.lengthscale]), f.lam,
        None if f.mean is None else f.mean[None], None if f.precision is None else f.precision[None])
        for f in fits]


def backward_flow(problem: BridgeProblem, Z, rho_fits):
    """Time-reversed pass; returns ``(B, q_fits)``.

    The random stream continues after the forward pass, exactly as in a
    full solve, so the staged and batched results coincide.
    """
    batch = _batch_from([problem])
    _advance_forward_stream(batch)
    Bs, fits = _backward(batch, _stack_fits(rho_fits))
    if batch.failed[0]:
        raise BridgeError(batch.reasons[0])
    return Bs[:, 0], _split_fits(fits, 0)


def controlled_paths(problem: BridgeProblem, solution: BridgeSolution) -> np.ndarray:
    """Controlled pass using the stored score fits; fills ``solution.F``/``G``."""
    batch = _batch_from([problem])
    _advance_forward_stream(batch)
    _advance_backward_stream(batch)
    F, G = _controlled(batch, _stack_fits(solution.rho_fits), _stack_fits(solution.q_fits))
    solution.F, solution.G = F[:, 0], G[:, 0]
    miss = float(np.linalg.norm(solution.F[-1].mean(axis=0) - problem.end))
    solution.terminal_error = miss
    if batch.failed[0] or not miss <= terminal_tolerance(problem.sigma, problem.dt, problem.eps_init):
        solution.failed = True
        solution.reason = batch.reasons[0] or "terminal miss"
    return solution.F


def _advance_forward_stream(batch: _Batch):
    d = batch.starts.shape[1]
    for r in batch.rngs:
        r.standard_normal((batch.N, d))
        for _ in range(batch.L):  # fits at slices 1..L
            r.choice(batch.N, size=batch.M, replace=False)


def _advance_backward_stream(batch: _Batch):
    d = batch.starts.shape[1]
    for r in batch.rngs:
        r.standard_normal((batch.N, d))
        for _ in range(batch.L):  # fits at slices L-1..0
            r.choice(batch.N, size=batch.M, replace=False)


# ---------------------------------------------------------------------------


@dataclass
class BridgeParams:
    sigma: float
    beta: float = BETA
    n_particles: int = N_PARTICLES
    eps_init: float = EPS_INIT
    n_inducing: int = DEFAULT_M
    score_lambda: float = DEFAULT_LAMBDA
    bandwidth_factor: float = BANDWIDTH_FACTOR
    max_failed_fraction: float = MAX_FAILED_FRACTION
    batch_size: int = 512


@dataclass
class Augmentation:
    bridges: list
    n_failed: int

    @property
    def failed_indices(self) -> list[int]:
        return [i for i, b in enumerate(self.bridges) if b.failed]


def make_problems(observations, schedule, drift, params: BridgeParams, dt: float,
                  seed: int = 0, iteration: int = 0, intervals=None) -> list[BridgeProblem]:
    obs = np.asarray(observations, dtype=float)
    K = len(obs)
    if schedule is not None and schedule.n_intervals != K - 1:
        raise ValueError("schedule does not cover all intervals")
    tau = schedule.tau if schedule is not None else None
    intervals = range(K - 1) if intervals is None else intervals
    problems = []
    for k in intervals:
        if schedule is not None:
            t0 = float(schedule.t_starts[k])
            L = int(round(tau / dt))
            gamma = schedule.slice_points(k, L)
        else:
            raise ValueError("a geodesic schedule is required")
        problems.append(BridgeProblem(
            drift=drift, sigma=params.sigma, start=obs[k], end=obs[k + 1], t0=t0, t1=t0 + L * dt,
            dt=dt, constraint=gamma, beta=params.beta, n_particles=params.n_particles,
            eps_init=params.eps_init, n_inducing=params.n_inducing,
            score_lambda=params.score_lambda, bandwidth_factor=params.bandwidth_factor,
            seed=bridge_seed(seed, iteration, k),
        ))
    return problems


def write_bridge_dump(path, interval: int, F) -> None:
    """Dump controlled slices as flat little-endian float64.

    The first four values are ``interval, L, N, d``; the ``(L+1) x N x d``
    slice array follows in C order.
    """
    F = np.asarray(F, dtype="<f8")
    L1, N, d = F.shape
    header = np.array([interval, L1 - 1, N, d], dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(F).tobytes())


def read_bridge_dump(path):
    """Inverse of :func:`write_bridge_dump`; returns ``(interval, F)``."""
    raw = np.fromfile(path, dtype="<f8")
    interval, L, N, d = (int(v) for v in raw[:4])
    return interval, raw[4:].reshape(L + 1, N, d)


def augment_all(observations, schedule, drift, params: BridgeParams, dt: float,
                seed: int = 0, iteration: int = 0, keep_full: bool = False,
                dump_dir=None) -> Augmentation:
    """Solve one bridge per observation interval.

    Bridges are processed in fixed-size batches in interval order; each one
    is seeded from ``(seed, iteration, interval)`` so any interval can be
    replayed alone. Raises :class:`BridgeError` if more than
    ``max_failed_fraction`` of the bridges fail. With ``dump_dir`` set, the
    controlled slices of every bridge are written there as binary dumps.
    """
    problems = make_problems(observations, schedule, drift, params, dt, seed, iteration)
    bridges: list = []
    for start in range(0, len(problems), params.batch_size):
        bridges.extend(solve_bridges(problems[start:start + params.batch_size], keep_full=keep_full))
    if dump_dir is not None:
        os.makedirs(dump_dir, exist_ok=True)
        for k, b in enumerate(bridges):
            write_bridge_dump(os.path.join(dump_dir, f"bridge_{iteration}_{k}.bin"), k, b.F)
    n_failed = sum(b.failed for b in bridges)
    aug = Augmentation(bridges, n_failed)
    if n_failed > params.max_failed_fraction * len(bridges):
        err = BridgeError(f"{n_failed} of {len(bridges)} bridges failed")
        err.augmentation = aug
        raise err
    if n_failed:
        log.info("%d of %d bridges failed and are excluded", n_failed, len(bridges))
    return aug

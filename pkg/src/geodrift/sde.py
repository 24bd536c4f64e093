"""Benchmark drift fields, Euler-Maruyama simulation and subsampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

Array = np.ndarray


class SimulationError(RuntimeError):
    """Raised when a simulated state becomes non-finite."""


@dataclass(frozen=True)
class DriftField:
    """A deterministic, vectorised drift ``f: R^d -> R^d``.

    ``func`` maps an array of shape ``(..., d)`` to the same shape. The
    optional derivative callables use the same leading batch shape:

    * ``jacobian``  -> ``(..., d, d)`` with ``J[i, j] = df_i / dx_j``
    * ``hessian``   -> ``(..., d, d, d)`` with ``H[i, j, k] = d2 f_i / dx_j dx_k``
    * ``grad_laplacian`` -> ``(..., d, d)`` with ``G[i, k] = d/dx_k (Laplacian f_i)``
    """

    func: Callable[[Array], Array]
    dim: int
    label: str = "custom"
    jacobian: Optional[Callable[[Array], Array]] = None
    hessian: Optional[Callable[[Array], Array]] = None
    grad_laplacian: Optional[Callable[[Array], Array]] = None
    params: dict = field(default_factory=dict)

    def __call__(self, x: Array) -> Array:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim:
            raise ValueError(f"expected states of dimension {self.dim}, got {x.shape[-1]}")
        return self.func(x)


@dataclass(frozen=True)
class SimConfig:
    dt: float
    T: float
    sigma: float
    x0: tuple
    seed: int = 0

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not self.T >= self.dt:
            raise ValueError("T must be at least dt")
        if not self.sigma >= 0:
            raise ValueError("sigma must be non-negative")

    @property
    def n_steps(self) -> int:
        # guard against T/dt landing a hair below an integer
        return int(np.floor(self.T / self.dt + 1e-9))


@dataclass(frozen=True)
class Trajectory:
    times: Array
    states: Array

    def __post_init__(self):
        if len(self.times) != len(self.states):
            raise ValueError("times and states must have the same length")

    @property
    def dt(self) -> float:
        if len(self.times) < 2:
            return float("nan")
        return float(self.times[1] - self.times[0])

    @property
    def dim(self) -> int:
        return self.states.shape[1]


@dataclass(frozen=True)
class ObservationSet:
    observations: Array
    tau: float
    dt: float
    stride: int

    def __post_init__(self):
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")

    @property
    def times(self) -> Array:
        return np.arange(len(self.observations)) * self.tau

    @property
    def dim(self) -> int:
        return self.observations.shape[1]

    def __len__(self) -> int:
        return len(self.observations)


# ---------------------------------------------------------------------------
# benchmark systems


def _vdp(mu: float) -> DriftField:
    def f(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([mu * (x1 - x1**3 / 3.0 - x2), x1 / mu], axis=-1)

    def jac(x):
        x1 = x[..., 0]
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = mu * (1.0 - x1**2)
        J[..., 0, 1] = -mu
        J[..., 1, 0] = 1.0 / mu
        return J

    def hess(x):
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 0, 0, 0] = -2.0 * mu * x[..., 0]
        return H

    def glap(x):
        G = np.zeros(x.shape[:-1] + (2, 2))
        G[..., 0, 0] = -2.0 * mu
        return G

    return DriftField(f, 2, f"vdp(mu={mu})", jac, hess, glap, {"mu": mu})


def _hopf(mu: float) -> DriftField:
    def f(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack([x2, -x1 + (mu - x1**2) * x2], axis=-1)

    def jac(x):
        x1, x2 = x[..., 0], x[..., 1]
        J = np.zeros(x.shape[:-1] + (2, 2))
        J[..., 0, 1] = 1.0
        J[..., 1, 0] = -1.0 - 2.0 * x1 * x2
        J[..., 1, 1] = mu - x1**2
        return J

    def hess(x):
        x1, x2 = x[..., 0], x[..., 1]
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 1, 0, 0] = -2.0 * x2
        H[..., 1, 0, 1] = -2.0 * x1
        H[..., 1, 1, 0] = -2.0 * x1
        return H

    def glap(x):
        G = np.zeros(x.shape[:-1] + (2, 2))
        G[..., 1, 1] = -2.0
        return G

    return DriftField(f, 2, f"hopf(mu={mu})", jac, hess, glap, {"mu": mu})


def _selkov(alpha: float) -> DriftField:
    def f(x):
        x1, x2 = x[..., 0], x[..., 1]
        return np.stack(
            [-x1 + alpha * x2 + x1**2 * x2, 0.6 - alpha * x2 - x1**2 * x2], axis=-1
        )

    def jac(x):
        x1, x2 = x[..., 0], x[..., 1]
        J = np.empty(x.shape[:-1] + (2, 2))
        J[..., 0, 0] = -1.0 + 2.0 * x1 * x2
        J[..., 0, 1] = alpha + x1**2
        J[..., 1, 0] = -2.0 * x1 * x2
        J[..., 1, 1] = -alpha - x1**2
        return J

    def hess(x):
        x1, x2 = x[..., 0], x[..., 1]
        H = np.zeros(x.shape[:-1] + (2, 2, 2))
        H[..., 0, 0, 0] = 2.0 * x2
        H[..., 0, 0, 1] = H[..., 0, 1, 0] = 2.0 * x1
        H[..., 1, 0, 0] = -2.0 * x2
        H[..., 1, 0, 1] = H[..., 1, 1, 0] = -2.0 * x1
        return H

    def glap(x):
        G = np.zeros(x.shape[:-1] + (2, 2))
        G[..., 0, 1] = 2.0
        G[..., 1, 1] = -2.0
        return G

    return DriftField(f, 2, f"selkov(alpha={alpha})", jac, hess, glap, {"alpha": alpha})


_OMEGA = np.array([[2.0, 2.0], [-2.0, 2.0]])


def _outofeq(alpha: float, obstacle_width: float) -> DriftField:
    s2 = obstacle_width**2

    def f(x):
        bump = alpha * np.exp(-np.sum(x**2, axis=-1) / (2.0 * s2))
        return -x @ _OMEGA.T + bump[..., None] * x

    def jac(x):
        bump = alpha * np.exp(-np.sum(x**2, axis=-1) / (2.0 * s2))
        eye = np.eye(2)
        outer = x[..., :, None] * x[..., None, :]
        return -_OMEGA + bump[..., None, None] * (eye - outer / s2)

    label = f"outofeq(alpha={alpha}, width={obstacle_width})"
    params = {"alpha": alpha, "obstacle_width": obstacle_width}
    return DriftField(f, 2, label, jac, params=params)


def _linear(A) -> DriftField:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    d = A.shape[0]

    def f(x):
        return x @ A.T

    def jac(x):
        return np.broadcast_to(A, x.shape[:-1] + (d, d)).copy()

    def hess(x):
        return np.zeros(x.shape[:-1] + (d, d, d))

    def glap(x):
        return np.zeros(x.shape[:-1] + (d, d))

    return DriftField(f, d, "linear", jac, hess, glap, {"A": A.tolist()})


def _zero(dim: int) -> DriftField:
    def f(x):
        return np.zeros_like(x)

    def jac(x):
        return np.zeros(x.shape[:-1] + (dim, dim))

    def hess(x):
        return np.zeros(x.shape[:-1] + (dim, dim, dim))

    def glap(x):
        return np.zeros(x.shape[:-1] + (dim, dim))

    return DriftField(f, dim, "zero", jac, hess, glap, {"dim": dim})


SYSTEMS = ("vdp", "hopf", "selkov", "outofeq", "linear", "zero", "custom")


def make_drift(system_name: str, params: Optional[dict] = None) -> DriftField:
    """Build one of the benchmark drift fields.

    Parameters per system (defaults in brackets): ``vdp`` mu [1.0];
    ``hopf`` mu [0.35]; ``selkov`` alpha [0.06]; ``outofeq`` alpha [10.0]
    and obstacle_width [0.5]; ``linear`` A (square matrix, or scalar for
    ``A * I`` with ``dim``); ``zero`` dim [2]; ``custom`` func and dim.
    """
    params = dict(params or {})
    for key, val in params.items():
        if isinstance(val, (int, float)) and not np.isfinite(val):
            raise ValueError(f"parameter {key!r} is not finite")
    if system_name == "vdp":
        return _vdp(float(params.get("mu", 1.0)))
    if system_name == "hopf":
        return _hopf(float(params.get("mu", 0.35)))
    if system_name == "selkov":
        return _selkov(float(params.get("alpha", 0.06)))
    if system_name == "outofeq":
        return _outofeq(float(params.get("alpha", 10.0)), float(params.get("obstacle_width", 0.5)))
    if system_name == "linear":
        A = params.get("A", -1.0)
        if np.isscalar(A):
            A = float(A) * np.eye(int(params.get("dim", 2)))
        A = np.asarray(A, dtype=float)
        if not np.all(np.isfinite(A)):
            raise ValueError("linear drift matrix is not finite")
        return _linear(A)
    if system_name == "zero":
        return _zero(int(params.get("dim", 2)))
    if system_name == "custom":
        if "func" not in params or "dim" not in params:
            raise ValueError("custom drift needs 'func' and 'dim'")
        return DriftField(params["func"], int(params["dim"]), params.get("label", "custom"),
                          params.get("jacobian"))
    raise ValueError(f"unknown system {system_name!r}; expected one of {SYSTEMS}")


# ---------------------------------------------------------------------------
# simulation


def euler_maruyama(drift: DriftField, cfg: SimConfig) -> Trajectory:
    """Integrate ``dX = f(X) dt + sigma dW`` with the explicit Euler-Maruyama scheme."""
    x0 = np.asarray(cfg.x0, dtype=float)
    if x0.shape != (drift.dim,):
        raise ValueError(f"x0 has shape {x0.shape}, drift expects ({drift.dim},)")
    n = cfg.n_steps
    rng = np.random.default_rng(cfg.seed)
    noise = rng.standard_normal((n, drift.dim))
    noise *= cfg.sigma * np.sqrt(cfg.dt)
    states = np.empty((n + 1, drift.dim))
    states[0] = x0
    x = x0
    for i in range(n):
        x = x + drift.func(x) * cfg.dt + noise[i]
        if not np.all(np.isfinite(x)):
            raise SimulationError(f"non-finite state at step {i + 1}")
        states[i + 1] = x
    times = np.arange(n + 1) * cfg.dt
    return Trajectory(times, states)


def subsample(traj: Trajectory, stride: int) -> ObservationSet:
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if stride >= len(traj.states) and len(traj.states) > 1:
        raise ValueError("stride exceeds trajectory length")
    dt = traj.dt if len(traj.times) > 1 else 1.0
    obs = traj.states[::stride].copy()
    return ObservationSet(obs, tau=stride * dt, dt=dt, stride=stride)


def subsample_observations(obs: ObservationSet, stride: int) -> ObservationSet:
    """Coarsen an observation set further; strides compose multiplicatively."""
    stride = int(stride)
    if stride < 1 or stride >= len(obs):
        raise ValueError("invalid stride")
    return ObservationSet(obs.observations[::stride].copy(), tau=obs.tau * stride,
                          dt=obs.dt, stride=obs.stride * stride)


# ---------------------------------------------------------------------------
# CSV export


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(format(float(v), ".17g") for v in row) + "\n")


def write_trajectory_csv(path, traj: Trajectory) -> None:
    header = ["t"] + [f"x{i + 1}" for i in range(traj.dim)]
    _write_rows(path, header, np.column_stack([traj.times, traj.states]))


def write_observations_csv(path, obs: ObservationSet) -> None:
    header = ["t"] + [f"x{i + 1}" for i in range(obs.dim)]
    _write_rows(path, header, np.column_stack([obs.times, obs.observations]))


def read_csv_states(path) -> tuple[Array, Array]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 0], data[:, 1:]


def read_observations_csv(path, dt: float) -> ObservationSet:
    times, states = read_csv_states(path)
    tau = float(times[1] - times[0]) if len(times) > 1 else dt
    stride = int(round(tau / dt))
    return ObservationSet(states, tau=stride * dt, dt=dt, stride=stride)

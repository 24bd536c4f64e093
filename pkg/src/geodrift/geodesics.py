"""Minimum-energy curves between consecutive observations under a learned metric.

Curves are discretised with ``n`` segments on the rescaled time ``t' in [0, 1]``
and the discrete energy

    E = 1/2 * sum_i dg_i^T H(mid_i) dg_i / dt',   dt' = 1/n,

is minimised over the interior nodes with the endpoints pinned. The descent
direction is the gradient preconditioned by the energy's Hessian at frozen
metric (a tridiagonal system per dimension), followed by an Armijo
backtracking line search, so accepted iterates never increase the energy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .metric import MetricField, metric_at, metric_grad_at

log = logging.getLogger(__name__)

TOL = 1e-6
MAX_ITERS = 5000
# also stop once the relative energy decrease stays below ETOL for STALL_ITERS steps
ETOL = 1e-10
STALL_ITERS = 3


class GeodesicError(RuntimeError):
    pass


@dataclass
class Geodesic:
    nodes: np.ndarray
    ts: np.ndarray
    energy: float
    converged: bool = True
    n_iter: int = 0
    energy_trace: list = field(default_factory=list, repr=False)

    def reversed(self) -> "Geodesic":
        return Geodesic(self.nodes[::-1].copy(), self.ts, self.energy, self.converged, self.n_iter)


def discrete_energy(metric: MetricField, nodes: np.ndarray) -> np.ndarray:
    """Discrete kinetic energy of one path ``(n+1, d)`` or a batch ``(P, n+1, d)``."""
    nodes = np.asarray(nodes, dtype=float)
    n = nodes.shape[-2] - 1
    seg = np.diff(nodes, axis=-2)
    mid = 0.5 * (nodes[..., 1:, :] + nodes[..., :-1, :])
    H = metric_at(metric, mid)
    return 0.5 * n * np.sum(H * seg**2, axis=(-1, -2))


def path_length(metric: MetricField, nodes: np.ndarray) -> np.ndarray:
    """Riemannian length with midpoint quadrature per segment."""
    nodes = np.asarray(nodes, dtype=float)
    seg = np.diff(nodes, axis=-2)
    mid = 0.5 * (nodes[..., 1:, :] + nodes[..., :-1, :])
    H = metric_at(metric, mid)
    return np.sum(np.sqrt(np.sum(H * seg**2, axis=-1)), axis=-1)


def _energy_and_grad(metric, nodes):
    # nodes (P, n+1, d); gradient only for the interior nodes
    n = nodes.shape[1] - 1
    seg = np.diff(nodes, axis=1)
    mid = 0.5 * (nodes[:, 1:] + nodes[:, :-1])
    H = metric_at(metric, mid)
    dH = metric_grad_at(metric, mid)  # (P, n, d, d): dH_dd / dx_j
    energy = 0.5 * n * np.sum(H * seg**2, axis=(1, 2))
    flux = n * H * seg  # d E / d seg
    # each midpoint moves by half the displacement of either endpoint
    dmid = 0.25 * n * np.einsum("pid,pidj->pij", seg**2, dH)
    grad = flux[:, :-1] - flux[:, 1:] + dmid[:, :-1] + dmid[:, 1:]
    return energy, grad, n * H


def _solve_tridiagonal(h, rhs):
    """Solve ``A x = rhs`` for the interior-node stiffness matrix of each path/dim.

    ``h`` has shape (P, n, d) (segment coefficients); ``rhs`` (P, n-1, d).
    A_jj = h_j + h_{j+1}, A_{j,j+1} = A_{j+1,j} = -h_{j+1} (interior node j).
    """
    diag = h[:, :-1] + h[:, 1:]
    off = -h[:, 1:-1]
    m = rhs.shape[1]
    c = np.empty_like(rhs)
    x = np.empty_like(rhs)
    denom = diag[:, 0].copy()
    c_prev = None
    x[:, 0] = rhs[:, 0] / denom
    for j in range(1, m):
        c_prev = off[:, j - 1] / denom
        c[:, j - 1] = c_prev
        denom = diag[:, j] - off[:, j - 1] * c_prev
        x[:, j] = (rhs[:, j] - off[:, j - 1] * x[:, j - 1]) / denom
    for j in range(m - 2, -1, -1):
        x[:, j] -= c[:, j] * x[:, j + 1]
    return x


def geodesics_between(metric: MetricField, starts, ends, n: int, tol: float = TOL,
                      max_iters: int = MAX_ITERS, trace: bool = False) -> list[Geodesic]:
    """Solve many independent boundary-value problems at once."""
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    ends = np.atleast_2d(np.asarray(ends, dtype=float))
    if n < 2:
        raise ValueError("need at least two segments")
    if starts.shape != ends.shape:
        raise ValueError("start/end arrays differ in shape")
    if not (np.all(np.isfinite(starts)) and np.all(np.isfinite(ends))):
        raise ValueError("non-finite endpoints")
    P, d = starts.shape
    ts = np.linspace(0.0, 1.0, n + 1)
    nodes = starts[:, None, :] + ts[None, :, None] * (ends - starts)[:, None, :]
    nodes[:, 0] = starts
    nodes[:, -1] = ends
    energy, grad, h = _energy_and_grad(metric, nodes)
    if not np.all(np.isfinite(energy)):
        raise GeodesicError("NaN in metric evaluation")
    traces = [[float(e)] for e in energy] if trace else [[] for _ in range(P)]
    active = np.ones(P, dtype=bool)
    converged = np.zeros(P, dtype=bool)
    n_iter = np.zeros(P, dtype=int)
    step = np.ones(P)
    stall = np.zeros(P, dtype=int)

    for it in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = grad[idx]
        direction = -_solve_tridiagonal(h[idx], g)
        slope = np.sum(direction * g, axis=(1, 2))
        alpha = np.minimum(1.0, 2.0 * step[idx])
        base = nodes[idx]
        e0 = energy[idx]
        accepted = np.zeros(idx.size, dtype=bool)
        new_nodes = base.copy()
        new_e = e0.copy()
        pending = np.arange(idx.size)
        for _ in range(40):
            trial = base[pending].copy()
            trial[:, 1:-1] += alpha[pending, None, None] * direction[pending]
            e_trial = discrete_energy(metric, trial)
            ok = e_trial <= e0[pending] + 1e-4 * alpha[pending] * slope[pending]
            ok &= np.isfinite(e_trial)
            good = pending[ok]
            new_nodes[good] = trial[ok]
            new_e[good] = e_trial[ok]
            accepted[good] = True
            pending = pending[~ok]
            if pending.size == 0:
                break
            alpha[pending] *= 0.5
        step[idx] = alpha
        moved = np.max(np.abs(new_nodes - base), axis=(1, 2))
        nodes[idx] = new_nodes
        energy[idx] = new_e
        n_iter[idx] += 1
        if trace:
            for j, p in enumerate(idx):
                if accepted[j]:
                    traces[p].append(float(new_e[j]))
        flat = (e0 - new_e) <= ETOL * np.maximum(np.abs(e0), 1e-300)
        stall[idx] = np.where(flat, stall[idx] + 1, 0)
        done = (moved < tol) | ~accepted | (stall[idx] >= STALL_ITERS)
        converged[idx[done]] = True
        active[idx[done]] = False
        still = idx[~done]
        if still.size:
            e_s, g_s, h_s = _energy_and_grad(metric, nodes[still])
            energy[still] = e_s
            grad[still] = g_s
            h[still] = h_s

    if np.any(active):
        log.warning("%d geodesic(s) did not converge in %d iterations", int(active.sum()), max_iters)
    out = []
    for p in range(P):
        out.append(Geodesic(nodes[p].copy(), ts.copy(), float(energy[p]),
                            bool(converged[p] and not active[p]), int(n_iter[p]), traces[p]))
    return out


def geodesic_between(metric: MetricField, a, b, n: int, tol: float = TOL,
                     max_iters: int = MAX_ITERS, trace: bool = False) -> Geodesic:
    return geodesics_between(metric, np.asarray(a, float)[None], np.asarray(b, float)[None],
                             n, tol=tol, max_iters=max_iters, trace=trace)[0]


def geodesic_acceleration(metric: MetricField, x, v) -> np.ndarray:
    """Right-hand side of the geodesic ODE for a diagonal metric.

    Follows ``gamma'' = -1/2 H^-1 (2 (I kron v^T) dvecH/dx v - dvecH/dx^T (v kron v))``;
    for a diagonal ``H`` only the diagonal entries of vec(H) contribute.
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    H = metric_at(metric, x)
    G = metric_grad_at(metric, x)  # (..., d, j) = dH_dd/dx_j
    # first term row i: sum_j v_i dH_ii/dx_j v_j ; second term row i: sum_d dH_dd/dx_i v_d^2
    first = v * np.einsum("...ij,...j->...i", G, v)
    second = np.einsum("...di,...d->...i", G, v**2)
    return -0.5 / H * (2.0 * first - second)


# ---------------------------------------------------------------------------


@dataclass
class GeodesicSchedule:
    """Piecewise-linear constraint path ``Gamma(t)`` over the observation window."""

    geodesics: list
    t_starts: np.ndarray
    tau: float

    @property
    def n_intervals(self) -> int:
        return len(self.geodesics)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        t = np.atleast_1d(t)
        t_end = self.t_starts[-1] + self.tau
        if np.any(t < self.t_starts[0] - 1e-12) or np.any(t > t_end + 1e-12):
            raise ValueError("time outside the schedule")
        k = np.clip(np.floor((t - self.t_starts[0]) / self.tau + 1e-12).astype(int), 0, self.n_intervals - 1)
        out = np.empty((t.size, self.geodesics[0].nodes.shape[1]))
        for i, (ki, ti) in enumerate(zip(k, t)):
            out[i] = self.interval_point(ki, (ti - self.t_starts[ki]) / self.tau)
        return out[0] if scalar else out

    def interval_point(self, k: int, tprime: float) -> np.ndarray:
        nodes = self.geodesics[k].nodes
        n = nodes.shape[0] - 1
        s = min(max(tprime, 0.0), 1.0) * n
        i = min(int(np.floor(s)), n - 1)
        frac = s - i
        if frac == 0.0:
            return nodes[i].copy()
        return (1.0 - frac) * nodes[i] + frac * nodes[i + 1]

    def slice_points(self, k: int, n_slices: int) -> np.ndarray:
        """``Gamma`` on the bridge grid of interval ``k`` (``n_slices + 1`` points)."""
        nodes = self.geodesics[k].nodes
        if nodes.shape[0] == n_slices + 1:
            return nodes
        return np.array([self.interval_point(k, i / n_slices) for i in range(n_slices + 1)])


def build_schedule(geodesics: Sequence[Geodesic], t_grid_per_interval) -> GeodesicSchedule:
    """Assemble per-interval geodesics on the augmentation time grid.

    ``t_grid_per_interval`` is a list with one increasing time array per
    interval (from ``t_k`` to ``t_{k+1}``), or a ``(K-1, L+1)`` array.
    """
    grids = [np.asarray(g, dtype=float) for g in t_grid_per_interval]
    if len(grids) != len(geodesics):
        raise ValueError(f"{len(geodesics)} geodesics but {len(grids)} interval grids")
    if not grids:
        raise ValueError("empty schedule")
    taus = np.array([g[-1] - g[0] for g in grids])
    tau = float(taus[0])
    if not np.allclose(taus, tau, rtol=1e-9, atol=1e-12):
        raise ValueError("intervals of unequal length")
    t_starts = np.array([g[0] for g in grids])
    return GeodesicSchedule(list(geodesics), t_starts, tau)


def write_geodesics_csv(path, schedule: GeodesicSchedule) -> None:
    d = schedule.geodesics[0].nodes.shape[1]
    with open(path, "w") as fh:
        fh.write(",".join(["interval", "k", "tprime"] + [f"x{i + 1}" for i in range(d)]) + "\n")
        for j, geo in enumerate(schedule.geodesics):
            for i, (tp, node) in enumerate(zip(geo.ts, geo.nodes)):
                vals = [format(float(v), ".17g") for v in (tp, *node)]
                fh.write(f"{j},{i}," + ",".join(vals) + "\n")

"""Drift-estimate scoring and curvature diagnostics.

The score is a density-weighted RMSE on a regular grid spanning the
observations; the weights come from a Gaussian product-kernel density
estimate with Silverman bandwidths. The diagnostics evaluate the flow
curvature ``kappa = P_perp J f / |f|^2`` and the leading bias of the
Euler-Maruyama increment estimator,
``(tau/2) [J_{Jf f} f + grad(D/2 Lap f) f]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

GRID_N = 50
GRID_INFLATE = 0.05
EQUILIBRIUM_TOL = 1e-8
FD_STEP = 1e-4


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalGrid:
    nodes: np.ndarray  # (n_nodes, d)
    weights: np.ndarray  # (n_nodes,), sum 1
    shape: tuple
    lower: np.ndarray
    upper: np.ndarray
    bandwidths: np.ndarray

    def to_dict(self) -> dict:
        return {"shape": list(self.shape), "lower": self.lower.tolist(), "upper": self.upper.tolist(),
                "inflate": GRID_INFLATE, "bandwidth_rule": "silverman",
                "bandwidths": self.bandwidths.tolist()}


def silverman_bandwidths(obs: np.ndarray) -> np.ndarray:
    n, d = obs.shape
    std = np.std(obs, axis=0, ddof=1) if n > 1 else np.ones(d)
    std = np.where(std > 0, std, 1.0)
    return std * (4.0 / ((d + 2) * n)) ** (1.0 / (d + 4))


def kde_weights(observations, grid_nodes, bandwidths=None) -> np.ndarray:
    """Gaussian product-kernel density at the nodes, normalised to sum to 1."""
    obs = np.atleast_2d(np.asarray(observations, dtype=float))
    nodes = np.atleast_2d(np.asarray(grid_nodes, dtype=float))
    if len(nodes) == 0:
        raise ValueError("empty grid")
    h = silverman_bandwidths(obs) if bandwidths is None else np.asarray(bandwidths, dtype=float)
    dens = np.zeros(len(nodes))
    step = max(1, 2_000_000 // max(len(obs), 1))
    for s in range(0, len(nodes), step):
        u = (nodes[s:s + step, None, :] - obs[None, :, :]) / h
        dens[s:s + step] = np.sum(np.exp(-0.5 * np.sum(u**2, axis=-1)), axis=1)
    total = dens.sum()
    if not total > 0:
        raise EvaluationError("density vanishes on the whole grid")
    return dens / total


def make_grid(observations, n: int = GRID_N, inflate: float = GRID_INFLATE) -> EvalGrid:
    obs = np.asarray(getattr(observations, "observations", observations), dtype=float)
    lo, hi = obs.min(0), obs.max(0)
    pad = inflate * (hi - lo) / 2.0
    lo, hi = lo - pad, hi + pad
    axes = [np.linspace(lo[i], hi[i], n) for i in range(obs.shape[1])]
    mesh = np.meshgrid(*axes, indexing="ij")
    nodes = np.stack([m.ravel() for m in mesh], axis=1)
    h = silverman_bandwidths(obs)
    return EvalGrid(nodes, kde_weights(obs, nodes, h), tuple([n] * obs.shape[1]), lo, hi, h)


def _field_values(f, nodes):
    vals = np.asarray(f(nodes), dtype=float)
    if vals.shape != nodes.shape:
        raise EvaluationError("drift field returned the wrong shape")
    if not np.all(np.isfinite(vals)):
        raise EvaluationError("non-finite drift values on the evaluation grid")
    return vals


def wrmse(f_true, f_est, grid: EvalGrid) -> float:
    """``sqrt(sum_m w_m |f_true(x_m) - f_est(x_m)|^2)``."""
    diff = _field_values(f_true, grid.nodes) - _field_values(f_est, grid.nodes)
    return float(np.sqrt(np.sum(grid.weights * np.sum(diff**2, axis=1))))


def wrmse_per_component(f_true, f_est, grid: EvalGrid) -> float:
    """Variant averaging the squared error over the d drift components."""
    return wrmse(f_true, f_est, grid) / np.sqrt(grid.nodes.shape[1])


def wrmse_node_normalised(f_true, f_est, grid: EvalGrid) -> float:
    """Alternative normalisation with weights summing to the node count."""
    return wrmse(f_true, f_est, grid) * np.sqrt(len(grid.nodes))


# ---------------------------------------------------------------------------
# curvature and bias


def _jacobian(f, x, h: float = 1e-5):
    jac = getattr(f, "jacobian", None)
    if jac is not None:
        return np.asarray(jac(x))
    x = np.asarray(x, dtype=float)
    d = x.shape[-1]
    J = np.empty(x.shape + (d,))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        J[..., j] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


def flow_curvature(f, x) -> np.ndarray:
    """Curvature vector of the flow lines, ``P_perp J_f f / |f|^2``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    fx = np.asarray(f(xs))
    n2 = np.sum(fx**2, axis=-1)
    if np.any(np.sqrt(n2) <= EQUILIBRIUM_TOL):
        raise EvaluationError("curvature undefined at an equilibrium point (|f| <= 1e-8)")
    acc = np.einsum("pij,pj->pi", _jacobian(f, xs), fx)
    along = np.sum(acc * fx, axis=-1) / n2
    kappa = (acc - along[:, None] * fx) / n2[:, None]
    return kappa[0] if single else kappa


def _bias_analytic(f, xs, sigma):
    fx = np.asarray(f(xs))
    J = np.asarray(f.jacobian(xs))
    H = np.asarray(f.hessian(xs))
    G = np.asarray(f.grad_laplacian(xs))
    # d/dx_k (J f)_i = sum_j H_ijk f_j + (J J)_ik
    dJf = np.einsum("pijk,pj->pik", H, fx) + J @ J
    term1 = np.einsum("pik,pk->pi", dJf, fx)
    term2 = 0.5 * sigma**2 * np.einsum("pik,pk->pi", G, fx)
    return term1 + term2


def _bias_fd(f, xs, sigma, h=FD_STEP):
    fx = np.asarray(f(xs))
    d = xs.shape[1]

    def jf_f(y):
        v = np.asarray(f(y))
        return (np.asarray(f(y + h * v)) - np.asarray(f(y - h * v))) / (2 * h)

    term1 = (jf_f(xs + h * fx) - jf_f(xs - h * fx)) / (2 * h)

    hl = 10 * h  # third derivatives need a coarser inner step

    def lap(y):
        out = -2.0 * d * np.asarray(f(y))
        for j in range(d):
            e = np.zeros(d)
            e[j] = hl
            out = out + np.asarray(f(y + e)) + np.asarray(f(y - e))
        return out / hl**2

    term2 = 0.5 * sigma**2 * (lap(xs + hl * fx) - lap(xs - hl * fx)) / (2 * hl)
    return term1 + term2


def em_bias_estimate(f, sigma: float, tau: float, x, method: str = "auto") -> np.ndarray:
    """Leading-order bias of the increment-regression drift estimate at ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    fx = np.asarray(f(xs))
    if np.any(np.linalg.norm(fx, axis=-1) <= EQUILIBRIUM_TOL):
        raise EvaluationError("bias undefined at an equilibrium point (|f| <= 1e-8)")
    analytic = all(getattr(f, a, None) is not None for a in ("jacobian", "hessian", "grad_laplacian"))
    if method == "analytic" and not analytic:
        raise ValueError("field lacks analytic derivatives")
    use_analytic = analytic if method == "auto" else method == "analytic"
    br = _bias_analytic(f, xs, sigma) if use_analytic else _bias_fd(f, xs, sigma)
    out = 0.5 * tau * br
    return out[0] if single else out


@dataclass
class CurvatureReport:
    nodes: np.ndarray
    kappa: np.ndarray  # NaN at equilibria
    bias: np.ndarray

    def summary(self) -> dict:
        kn = np.linalg.norm(self.kappa, axis=1)
        bn = np.linalg.norm(self.bias, axis=1)
        ok = np.isfinite(kn)
        return {"kappa_norm_mean": float(np.mean(kn[ok])), "kappa_norm_max": float(np.max(kn[ok])),
                "bias_norm_mean": float(np.mean(bn[ok])), "bias_norm_max": float(np.max(bn[ok])),
                "n_equilibrium_nodes": int(np.sum(~ok))}


def curvature_report(f, sigma: float, tau: float, nodes) -> CurvatureReport:
    nodes = np.asarray(nodes, dtype=float)
    kappa = np.full(nodes.shape, np.nan)
    bias = np.full(nodes.shape, np.nan)
    fn = np.linalg.norm(np.asarray(f(nodes)), axis=1)
    ok = fn > EQUILIBRIUM_TOL
    if np.any(ok):
        kappa[ok] = flow_curvature(f, nodes[ok])
        bias[ok] = em_bias_estimate(f, sigma, tau, nodes[ok])
    return CurvatureReport(nodes, kappa, bias)


# ---------------------------------------------------------------------------
# output files


def write_metrics(path, metrics: dict) -> None:
    with open(path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)


def write_drift_grid(path, grid: EvalGrid, f_true, f_est) -> None:
    d = grid.nodes.shape[1]
    ft = _field_values(f_true, grid.nodes)
    fe = _field_values(f_est, grid.nodes)
    header = ([f"x{i + 1}" for i in range(d)] + [f"ftrue{i + 1}" for i in range(d)]
              + [f"fest{i + 1}" for i in range(d)] + ["weight"])
    data = np.column_stack([grid.nodes, ft, fe, grid.weights])
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")


def write_curvature_grid(path, report: CurvatureReport) -> None:
    d = report.nodes.shape[1]
    header = ([f"x{i + 1}" for i in range(d)] + [f"kappa{i + 1}" for i in range(d)]
              + [f"bias{i + 1}" for i in range(d)])
    data = np.column_stack([report.nodes, report.kappa, report.bias])
    np.savetxt(path, data, delimiter=",", header=",".join(header), comments="", fmt="%.17g")

"""Command-line entry point: ``python -m geodrift <command> --config run.json``.

Commands: ``simulate``, ``infer``, ``eval``, ``diagnose``, ``fullrun``.
Exit codes: 0 ok, 2 invalid config or missing inputs, 3 numerical
failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import config as config_mod
from .em import EMError, EMHistory, EMRecord, run_em, write_run_directory
from .evaluation import (curvature_report, make_grid, wrmse, wrmse_node_normalised,
                         wrmse_per_component, write_curvature_grid, write_drift_grid,
                         write_metrics)
from .gp import GPError, model_from_dict, naive_gp_drift, default_kernel, refine_kernel
from .sde import (SimulationError, euler_maruyama, make_drift,
                  read_observations_csv, subsample, write_observations_csv,
                  write_trajectory_csv)

log = logging.getLogger("geodrift")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class MissingInput(Exception):
    pass


# outputs each command owns; a directory holding any of them is not rewritten
_OWNED = {
    "simulate": ("trajectory.csv", "observations.csv"),
    "infer": ("history.json", "drift_iter0.json"),
    "fullrun": ("summary.csv",),
}


def _prepare_out(path, command: str, force: bool) -> None:
    taken = [f for f in _OWNED[command] if os.path.exists(os.path.join(path, f))]
    if taken and not force:
        raise FileExistsError(f"{path} already holds {taken[0]}; use --force to overwrite")
    os.makedirs(path, exist_ok=True)


def _truth(cfg):
    return make_drift(cfg["system"]["name"], cfg["system"]["params"])


def _simulate(cfg, seed):
    traj = euler_maruyama(_truth(cfg), config_mod.sim_config(cfg, seed))
    return subsample(traj, cfg["observation"]["stride"]), traj


def _observations(cfg, seed, run_dir=None):
    """Observations of ``run_dir`` if present, else the configured file, else simulated."""
    dt = cfg["simulation"]["dt"]
    if run_dir is not None and os.path.exists(os.path.join(run_dir, "observations.csv")):
        return read_observations_csv(os.path.join(run_dir, "observations.csv"), dt)
    obs_file = cfg["observation"].get("file")
    if obs_file:
        if not os.path.exists(obs_file):
            raise MissingInput(f"observation file {obs_file} not found")
        return read_observations_csv(obs_file, dt)
    return _simulate(cfg, seed)[0]


def cmd_simulate(cfg, out, seed):
    obs, traj = _simulate(cfg, seed)
    write_trajectory_csv(os.path.join(out, "trajectory.csv"), traj)
    write_observations_csv(os.path.join(out, "observations.csv"), obs)
    with open(os.path.join(out, "config.json"), "w") as fh:
        json.dump(dict(cfg, seed=seed), fh, indent=2, sort_keys=True)


def _baseline(cfg, obs, truth):
    emc = config_mod.em_config(cfg)
    kernel = default_kernel(obs.observations, obs.tau)
    if emc.kernel_policy == "marginal_likelihood":
        kernel = refine_kernel(obs.observations, kernel, emc.sigma, obs.tau)
    model = naive_gp_drift(obs.observations, kernel, emc.sigma, obs.tau, S=emc.n_inducing_gp)
    grid = make_grid(obs.observations, cfg["eval"]["grid_n"])
    hist = EMHistory(metadata={"mode": "baseline", "kernel": kernel.to_dict()})
    hist.records.append(EMRecord(0, model, wrmse=wrmse(truth, model, grid),
                                 wrmse_per_component=wrmse_per_component(truth, model, grid)))
    return hist


def cmd_infer(cfg, out, seed):
    obs = _observations(cfg, seed, out)
    truth = _truth(cfg)
    resolved = dict(cfg, seed=seed)
    if cfg["mode"] == "baseline":
        hist = _baseline(cfg, obs, truth)
    else:
        grid = make_grid(obs.observations, cfg["eval"]["grid_n"])
        try:
            _, hist = run_em(obs, config_mod.em_config(cfg, seed), truth=truth, grid=grid)
        except EMError as err:
            write_run_directory(out, resolved, obs, err.history)
            raise
        resolved["derived"] = {"kernel": hist.metadata.get("kernel"),
                               "sigma_M": hist.metadata.get("sigma_M")}
    write_run_directory(out, resolved, obs, hist)
    return hist


def load_drift(path):
    """Drift model file: a fitted GP, or ``{"model": "system", "name", "params"}``
    naming one of the built-in analytic systems."""
    with open(path) as fh:
        data = json.load(fh)
    if data.get("model") == "system":
        return make_drift(data["name"], data.get("params", {}))
    return model_from_dict(data)


def _final_model_path(out):
    files = sorted((f for f in os.listdir(out) if f.startswith("drift_iter") and f.endswith(".json")),
                   key=lambda f: int(f[len("drift_iter"):-len(".json")]))
    if not files:
        raise MissingInput(f"no drift model found in {out}")
    return os.path.join(out, files[-1])


def cmd_eval(cfg, out, seed, model_path=None):
    model_path = model_path or _final_model_path(out)
    if not os.path.exists(model_path):
        raise MissingInput(f"model file {model_path} not found")
    obs = _observations(cfg, seed, out)
    truth = _truth(cfg)
    model = load_drift(model_path)
    grid = make_grid(obs.observations, cfg["eval"]["grid_n"])
    metrics = {
        "wrmse": wrmse(truth, model, grid),
        "wrmse_per_component": wrmse_per_component(truth, model, grid),
        "wrmse_node_normalised": wrmse_node_normalised(truth, model, grid),
        "grid": grid.to_dict(),
        "model": os.path.basename(model_path),
        "seed": seed,
    }
    write_metrics(os.path.join(out, "metrics.json"), metrics)
    write_drift_grid(os.path.join(out, "drift_grid.csv"), grid, truth, model)
    return metrics


def cmd_diagnose(cfg, out, seed):
    truth = _truth(cfg)
    obs = _observations(cfg, seed, out)
    tau = obs.tau
    grid = make_grid(obs.observations, cfg["eval"]["grid_n"])
    report = curvature_report(truth, cfg["simulation"]["sigma"], tau, grid.nodes)
    write_curvature_grid(os.path.join(out, "curvature_grid.csv"), report)
    summary = dict(report.summary(), tau=tau, sigma=cfg["simulation"]["sigma"], grid=grid.to_dict())
    write_metrics(os.path.join(out, "diagnostics.json"), summary)
    return summary


def _one_seed(args):
    cfg, out, seed = args
    os.makedirs(out, exist_ok=True)
    try:
        hist = cmd_infer(cfg, out, seed)
        metrics = cmd_eval(cfg, out, seed)
        return seed, [r.wrmse for r in hist.records], metrics["wrmse"], None
    except Exception as err:  # recorded per seed
        return seed, None, None, f"{type(err).__name__}: {err}"


def cmd_fullrun(cfg, out, seed, threads=1):
    seeds = cfg["eval"]["seeds"]
    jobs = [(cfg, os.path.join(out, f"seed_{s}"), s) for s in seeds]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_one_seed, jobs))
    else:
        results = [_one_seed(j) for j in jobs]
    n_iter = 1 if cfg["mode"] == "baseline" else cfg["em"]["iterations"] + 1
    header = ["seed"] + [f"wrmse_iter{j}" for j in range(n_iter)] + ["status"]
    rows = []
    for s, hist, _, err in results:
        if hist is None:
            rows.append([str(s)] + [""] * n_iter + [err])
        else:
            rows.append([str(s)] + [repr(float(v)) for v in hist] + ["ok"])
    ok = np.array([[float(v) for v in r[1:-1]] for r in rows if r[-1] == "ok"])
    with open(os.path.join(out, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
        if len(ok):
            w.writerow(["mean"] + [repr(float(v)) for v in ok.mean(0)] + [""])
            w.writerow(["std"] + [repr(float(v)) for v in ok.std(0)] + [""])
        else:
            w.writerow(["mean"] + [""] * n_iter + [""])
            w.writerow(["std"] + [""] * n_iter + [""])
    if not len(ok):
        raise RuntimeError("all seeds failed")
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geodrift", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=["simulate", "infer", "eval", "diagnose", "fullrun"])
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", help="output directory (default: runs/<name>)")
    p.add_argument("--seed", type=int, help="override the master seed")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
    p.add_argument("--threads", type=int, default=1, help="worker processes for fullrun")
    p.add_argument("--model", help="model file for eval (default: last drift_iter file)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_mod.load(args.config)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except config_mod.ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    seed = cfg["seed"] if args.seed is None else args.seed
    if seed < 0 or seed >= 2**64:
        print("error: seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    cfg["seed"] = seed
    out = args.out or os.path.join("runs", cfg["name"])
    try:
        if args.command in _OWNED:
            _prepare_out(out, args.command, args.force)
        elif args.command == "eval" and not os.path.isdir(out):
            raise MissingInput(f"run directory {out} not found")
        else:
            os.makedirs(out, exist_ok=True)
        if args.command == "simulate":
            cmd_simulate(cfg, out, seed)
        elif args.command == "infer":
            cmd_infer(cfg, out, seed)
        elif args.command == "eval":
            cmd_eval(cfg, out, seed, args.model)
        elif args.command == "diagnose":
            cmd_diagnose(cfg, out, seed)
        else:
            cmd_fullrun(cfg, out, seed, max(1, args.threads))
    except (config_mod.ConfigError, MissingInput, ValueError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (EMError, GPError, SimulationError, np.linalg.LinAlgError, ArithmeticError) as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FileExistsError) as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    except RuntimeError as err:
        print(f"failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

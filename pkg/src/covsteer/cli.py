"""Command-line pipeline: solve -> retrieve -> simulate, with flat-file outputs.

Commands:
    covsteer solve <config.json>        run the steering solver, write
                                        report.json, policy.csv, moments.csv
    covsteer simulate <config.json> --policy-dir <dir>
                                        Monte Carlo validation, write
                                        ensemble.json, ensemble.csv
    covsteer check <config.json>        validate the config only

Exit codes: 0 success/converged, 2 solver hit max iterations without
converging (artifacts still written), 1 error.

All CSV files carry a header row; matrices are flattened row-major; numbers
use the shortest decimal representation that round-trips to the same float.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import prox_steering, simulate
from .errors import ConfigError, CovSteerError
from .linear_steering import AffinePolicy
from .models import (
    GaussianMarginal,
    ManipulatorParams,
    NonlinearModel,
    double_integrator_drag,
    lti_test_model,
    manipulator_3link,
)
from .numerics import TimeGrid
from .prox_steering import MomentTrajectory, SolverConfig


@dataclass
class RunConfig:
    """Validated contents of a run configuration file."""

    model: NonlinearModel
    grid: TimeGrid
    rho0: GaussianMarginal
    rho1: GaussianMarginal
    solver: SolverConfig
    n_paths: int = 10000
    seed: int = 0
    dump_paths: int = 20
    containment_coords: Optional[tuple] = None
    output_dir: Optional[str] = None
    raw: dict = field(default_factory=dict, repr=False)


def _build_model(spec: dict) -> NonlinearModel:
    name = spec.get("name")
    params = dict(spec.get("params", {}))
    if name == "double_integrator_drag":
        return double_integrator_drag(
            c_d=float(params.pop("c_d", 0.005)),
            eps=float(params.pop("eps", 0.1)),
            drag_form=params.pop("drag_form", "quadratic"),
            tracking_weight=float(params.pop("tracking_weight", 0.2)),
        )
    if name == "manipulator_3link":
        eps = float(params.pop("eps", 0.1))
        mp = ManipulatorParams(
            masses=tuple(params.pop("masses", (1.0, 1.0, 1.0))),
            lengths=tuple(params.pop("lengths", (1.0, 1.0, 1.0))),
            com=tuple(params["com"]) if "com" in params and params.pop("com") else None,
            inertias=tuple(params.pop("inertias")) if "inertias" in params else None,
            gravity=float(params.pop("gravity", 9.81)),
        )
        return manipulator_3link(mp, eps=eps)
    if name == "lti":
        return lti_test_model(
            A=np.asarray(params.pop("A"), dtype=float),
            B=np.asarray(params.pop("B"), dtype=float),
            Q=np.asarray(params.pop("Q"), dtype=float),
            eps=float(params.pop("eps", 0.1)),
        )
    raise ConfigError(f"unknown model name {name!r}")


def _marginal(doc: dict, mean_key: str, cov_key: str, n: int) -> GaussianMarginal:
    if mean_key not in doc or cov_key not in doc:
        raise ConfigError(f"config must provide {mean_key} and {cov_key}")
    mean = np.asarray(doc[mean_key], dtype=float)
    cov = np.asarray(doc[cov_key], dtype=float)
    if mean.shape != (n,):
        raise ConfigError(f"{mean_key} must be a length-{n} vector, got shape {mean.shape}")
    if cov.shape != (n, n):
        raise ConfigError(f"{cov_key} must be {n}x{n}, got shape {cov.shape}")
    try:
        return GaussianMarginal(mean=mean, cov=cov)
    except ConfigError as e:
        raise ConfigError(f"{cov_key}: {e}") from e


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a JSON run configuration."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e

    for key in ("model", "horizon", "n_steps"):
        if key not in doc:
            raise ConfigError(f"config is missing required field {key!r}")
    model_spec = dict(doc["model"])
    if "eps" in doc:
        model_spec["params"] = {**model_spec.get("params", {}), "eps": doc["eps"]}
    model = _build_model(model_spec)
    grid = TimeGrid(0.0, float(doc["horizon"]), int(doc["n_steps"]))
    n = model.state_dim
    rho0 = _marginal(doc, "m0", "Sigma0", n)
    rho1 = _marginal(doc, "m1", "Sigma1", n)

    solver = SolverConfig(
        grid=grid,
        eta=float(doc.get("eta", 1.0)),
        max_iters=int(doc.get("max_iters", 100)),
        conv_tol=float(doc.get("conv_tol", 1e-5)),
        init_mode=doc.get("init_mode", "zero-prior"),
        fd_step=doc.get("fd_step"),
        mean_tol=doc.get("mean_tol"),
        cov_tol=float(doc.get("cov_tol", 1e-5)),
    )
    sim = doc.get("simulate", {})
    coords = sim.get("containment_coords")
    return RunConfig(
        model=model,
        grid=grid,
        rho0=rho0,
        rho1=rho1,
        solver=solver,
        n_paths=int(sim.get("n_paths", 10000)),
        seed=int(sim.get("seed", 0)),
        dump_paths=int(sim.get("dump_paths", 20)),
        containment_coords=tuple(coords) if coords is not None else None,
        output_dir=doc.get("output_dir"),
        raw=doc,
    )


# ---------------------------------------------------------------------------
# CSV round-trip helpers
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: np.ndarray) -> None:
    with path.open("w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        data = []
        for line in fh:
            line = line.strip()
            if line:
                data.append([float(tok) for tok in line.split(",")])
    return header, np.asarray(data, dtype=float)


def write_policy_csv(path: Path, policy: AffinePolicy) -> None:
    nn, p, n = policy.K.shape
    header = ["t"]
    header += [f"K_{i}_{j}" for i in range(p) for j in range(n)]
    header += [f"d_{i}" for i in range(p)]
    rows = np.hstack(
        [policy.grid.nodes[:, None], policy.K.reshape(nn, p * n), policy.d]
    )
    _write_csv(path, header, rows)


def read_policy_csv(path: Path, grid: TimeGrid, n: int, p: int) -> AffinePolicy:
    header, data = _read_csv(path)
    want = 1 + p * n + p
    if data.ndim != 2 or data.shape[1] != want or header[0] != "t":
        raise ConfigError(f"{path} does not match the policy schema ({want} columns)")
    bad = np.nonzero(~np.isfinite(data).all(axis=1))[0]
    if bad.size:
        raise ConfigError(f"{path}: non-finite value in data row {bad[0]}")
    if data.shape[0] != grid.n_nodes or np.max(np.abs(data[:, 0] - grid.nodes)) > 1e-9 * max(
        1.0, grid.t1
    ):
        raise ConfigError(f"{path}: time column does not match the configured grid")
    K = data[:, 1 : 1 + p * n].reshape(-1, p, n)
    d = data[:, 1 + p * n :]
    return AffinePolicy(grid=grid, K=K, d=d)


def write_moments_csv(path: Path, moments: MomentTrajectory) -> None:
    nn, n = moments.z.shape
    header = ["t"]
    header += [f"z_{i}" for i in range(n)]
    header += [f"Sigma_{i}_{j}" for i in range(n) for j in range(n)]
    rows = np.hstack(
        [moments.grid.nodes[:, None], moments.z, moments.Sigma.reshape(nn, n * n)]
    )
    _write_csv(path, header, rows)


def read_moments_csv(path: Path, grid: TimeGrid, n: int) -> MomentTrajectory:
    header, data = _read_csv(path)
    want = 1 + n + n * n
    if data.ndim != 2 or data.shape[1] != want:
        raise ConfigError(f"{path} does not match the moments schema ({want} columns)")
    bad = np.nonzero(~np.isfinite(data).all(axis=1))[0]
    if bad.size:
        raise ConfigError(f"{path}: non-finite value in data row {bad[0]}")
    if data.shape[0] != grid.n_nodes or np.max(np.abs(data[:, 0] - grid.nodes)) > 1e-9 * max(
        1.0, grid.t1
    ):
        raise ConfigError(f"{path}: time column does not match the configured grid")
    z = data[:, 1 : 1 + n]
    Sigma = data[:, 1 + n :].reshape(-1, n, n)
    return MomentTrajectory(grid=grid, z=z, Sigma=Sigma)


def write_ensemble_csv(path: Path, ens: simulate.EnsembleResult) -> None:
    nn, n = ens.node_mean.shape
    header = ["t"]
    header += [f"mean_{i}" for i in range(n)]
    header += [f"cov_{i}_{j}" for i in range(n) for j in range(n)]
    cols = [ens.grid.nodes[:, None], ens.node_mean, ens.node_cov.reshape(nn, n * n)]
    if ens.sample_paths is not None and ens.sample_paths.shape[0] > 0:
        for k in range(ens.sample_paths.shape[0]):
            header += [f"path{k}_{i}" for i in range(n)]
            cols.append(ens.sample_paths[k])
    _write_csv(path, header, np.hstack(cols))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_solve(config_path: str, out_dir: Optional[str] = None) -> int:
    """Solve the steering problem and write report.json, policy.csv, moments.csv."""
    cfg = load_config(config_path)
    out = Path(out_dir or cfg.output_dir or Path(config_path).parent)
    out.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    dyn, report = prox_steering.solve(cfg.model, cfg.rho0, cfg.rho1, cfg.solver)
    policy = prox_steering.retrieve_policy(cfg.model, dyn, cfg.rho0, cfg.rho1, cfg.solver)
    input_fn = cfg.model.g if cfg.model.state_dependent_input else None
    moments = prox_steering.propagate_moments(
        dyn, cfg.model.eps, cfg.rho0, cfg.grid, input_fn=input_fn
    )
    wall = time.perf_counter() - t0

    write_policy_csv(out / "policy.csv", policy)
    write_moments_csv(out / "moments.csv", moments)
    report_doc = {
        "converged": report.converged,
        "iterations": report.iterations,
        "objective_trace": report.objective_trace,
        "stopping_trace": report.stopping_trace,
        "mean_residual_trace": report.mean_residual_trace,
        "cov_residual_trace": report.cov_residual_trace,
        "objective_quadrature_trace": report.objective_quadrature_trace,
        "max_descent_violation": report.max_descent_violation(),
        "descent_slack": report.descent_slack(),
        "solve_wall_time_s": report.wall_time,
        "wall_time_s": wall,
    }
    (out / "report.json").write_text(json.dumps(report_doc, indent=2) + "\n")
    print(
        f"solve: {'converged' if report.converged else 'NOT converged'} "
        f"in {report.iterations} iterations ({wall:.2f}s); artifacts in {out}"
    )
    return 0 if report.converged else 2


def cmd_simulate(
    config_path: str,
    policy_dir: str,
    out_dir: Optional[str] = None,
    workers: int = 1,
    seed: Optional[int] = None,
) -> int:
    """Run closed-loop Monte Carlo against policy/moment files on disk."""
    cfg = load_config(config_path)
    pdir = Path(policy_dir)
    n, p = cfg.model.state_dim, cfg.model.input_dim
    policy = read_policy_csv(pdir / "policy.csv", cfg.grid, n, p)
    moments = read_moments_csv(pdir / "moments.csv", cfg.grid, n)
    out = Path(out_dir or cfg.output_dir or pdir)
    out.mkdir(parents=True, exist_ok=True)

    coords = cfg.containment_coords
    if coords is None:
        coords = tuple(range(n // 2))
    ens = simulate.sample_paths(
        cfg.model,
        policy,
        cfg.rho0,
        cfg.model.eps,
        cfg.grid,
        n_paths=cfg.n_paths,
        seed=seed if seed is not None else cfg.seed,
        cost_reference=moments.z if cfg.model.tracking_weight is not None else None,
        reference_moments=moments,
        containment_coords=coords,
        store_paths=cfg.dump_paths,
        workers=workers,
    )
    verdict = simulate.empirical_check(ens, cfg.rho1)

    write_ensemble_csv(out / "ensemble.csv", ens)
    ens_doc = {
        "n_paths": ens.n_paths,
        "seed": ens.seed,
        "cost_mean": ens.cost_mean,
        "cost_stderr": ens.cost_stderr,
        "n_diverged": ens.n_diverged,
        "containment_fraction": ens.containment_fraction,
        "containment_coords": list(coords),
        "verdict": {
            "mean_z_scores": [float(z) for z in verdict.mean_z_scores],
            "cov_rel_error": float(verdict.cov_rel_error),
            "cov_threshold": float(verdict.cov_threshold),
            "mean_passed": bool(verdict.mean_passed),
            "cov_passed": bool(verdict.cov_passed),
            "passed": bool(verdict.passed),
        },
    }
    (out / "ensemble.json").write_text(json.dumps(ens_doc, indent=2) + "\n")
    print(
        f"simulate: cost {ens.cost_mean:.4f} +/- {ens.cost_stderr:.4f}, "
        f"terminal check {'passed' if verdict.passed else 'FAILED'}; artifacts in {out}"
    )
    return 0


def cmd_check(config_path: str) -> int:
    cfg = load_config(config_path)
    print(
        f"config ok: model={cfg.model.name} n={cfg.model.state_dim} p={cfg.model.input_dim} "
        f"horizon={cfg.grid.t1} n_steps={cfg.grid.n_steps}"
    )
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        prog="covsteer",
        description="Covariance steering for nonlinear control-affine systems.",
        epilog=(
            "Output files: report.json, policy.csv (t, K row-major, d), "
            "moments.csv (t, z, Sigma row-major), ensemble.json, ensemble.csv "
            "(t, empirical mean/cov, optional sample paths)."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_solve = sub.add_parser("solve", help="solve a steering problem from a config file")
    p_solve.add_argument("config")
    p_solve.add_argument("--out", default=None, help="output directory")

    p_sim = sub.add_parser("simulate", help="Monte Carlo validation of solved artifacts")
    p_sim.add_argument("config")
    p_sim.add_argument("--policy-dir", required=True, help="directory with policy.csv and moments.csv")
    p_sim.add_argument("--out", default=None, help="output directory")
    p_sim.add_argument("--workers", type=int, default=1)
    p_sim.add_argument("--seed", type=int, default=None, help="override the config seed")

    p_check = sub.add_parser("check", help="validate a config file")
    p_check.add_argument("config")

    args = parser.parse_args(argv)
    try:
        if args.command == "solve":
            return cmd_solve(args.config, out_dir=args.out)
        if args.command == "simulate":
            return cmd_simulate(
                args.config,
                args.policy_dir,
                out_dir=args.out,
                workers=args.workers,
                seed=args.seed,
            )
        if args.command == "check":
            return cmd_check(args.config)
    except CovSteerError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())

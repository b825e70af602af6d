"""Experiment runner: lml projection, generic optimization, regression and
cartpole experiments as subcommands with deterministic file outputs.

Config resolution order: dataclass defaults, then a JSON config file, then
explicit command-line flags. Output directories default under
$DIFFCEM_OUTPUT_ROOT (or ./runs) and are deterministic per seed so reruns
can be compared byte for byte.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import __version__
from . import autodiff as ad
from . import control as ct
from . import ebm
from .lml import BracketingError, LmlProblem, SaturationError, lml_project
from .optimizers import (DcemConfig, GaussianDistribution,
                         NonFiniteValueError, TrainingDivergedError, cem,
                         dcem, hard_topk_indicator)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigError(ValueError):
    pass


def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return format(float(value), ".17g")


def write_csv(path, header, rows):
    """Comma-separated, header row, LF endings, 17 significant digits."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_manifest(path, experiment, config, metrics, status="ok",
                   error=None):
    doc = {
        "experiment": experiment,
        "version": f"v{__version__}",
        "config": asdict(config),
        "metrics": metrics,
        "status": status,
    }
    if error is not None:
        doc["error"] = error
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def output_root() -> str:
    return os.environ.get("DIFFCEM_OUTPUT_ROOT", "runs")


def resolve_out_dir(flag_value, experiment, seed) -> str:
    out = flag_value or os.path.join(output_root(),
                                     f"{experiment}-seed{seed}")
    os.makedirs(out, exist_ok=True)
    return out


def apply_config(cls, json_path, flag_values: dict):
    """Merge defaults < JSON file < flags into a config dataclass."""
    values = {}
    if json_path:
        try:
            with open(json_path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {json_path}: {e}")
        known = {f.name for f in fields(cls)}
        unknown = set(loaded) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for key, val in flag_values.items():
        if val is not None:
            values[key] = val
    try:
        return cls(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e))


# ---------------------------------------------------------------------------
# lml-proj / topk


def cmd_lml(args) -> int:
    x = np.array([float(v) for v in args.x.split(",")])
    if args.tau == 0.0:
        print("lml-proj requires tau > 0; for the hard assignment use "
              "`diffcem topk`", file=sys.stderr)
        return EXIT_CONFIG
    try:
        sol = lml_project(LmlProblem(x=x, k=args.k, tau=args.tau))
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    if args.json:
        print(json.dumps({"y": sol.y.tolist(), "nu": sol.nu,
                          "residual": sol.residual,
                          "iterations": sol.iterations}))
    else:
        print("y:", ", ".join(f"{v:.5f}" for v in sol.y))
        print(f"nu: {sol.nu:.6g}")
        print(f"residual: {sol.residual:.3e} ({sol.iterations} iterations)")
    return EXIT_OK


def cmd_topk(args) -> int:
    x = np.array([float(v) for v in args.x.split(",")])
    try:
        ind = hard_topk_indicator(-x, args.k)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    print("indicator:", ", ".join(str(int(v)) for v in ind))
    return EXIT_OK


# ---------------------------------------------------------------------------
# optimize


@dataclass
class OptimizeConfig:
    objective: str = "quadratic"
    method: str = "dcem"
    dim: int = 1
    N: int = 100
    k: int = 10
    T: int = 10
    tau: float = 1.0
    seed: int = 0
    theta: float = 3.0
    mu0: float = 0.0
    sigma0_sq: float = 25.0

    def __post_init__(self):
        if self.method not in ("cem", "dcem"):
            raise ValueError(f"unknown method: {self.method}")
        if self.method == "cem" and self.tau != 0:
            raise ValueError("method cem requires tau=0")
        if self.method == "dcem" and not self.tau > 0:
            raise ValueError("method dcem requires tau > 0")


def _objective(cfg: OptimizeConfig):
    if cfg.objective == "quadratic":
        target = 3.0
    elif cfg.objective == "shifted-quadratic":
        target = cfg.theta
    elif cfg.objective == "multimodal":
        if cfg.dim != 1:
            raise ConfigError("multimodal objective is 1-D")

        def rastrigin_like(X):
            x = ad.reshape(X, (-1,))
            return ad.add(ad.sub(ad.square(x),
                                 ad.mul(ad.cos(ad.mul(x, 2 * np.pi)), 10.0)),
                          10.0)

        return rastrigin_like
    else:
        raise ConfigError(f"unknown objective: {cfg.objective!r}; choices: "
                          "quadratic, shifted-quadratic, multimodal")

    def quad(X):
        return ad.sum_axis(ad.square(ad.sub(X, target)), 1)

    return quad


def cmd_optimize(args) -> int:
    cfg = apply_config(OptimizeConfig, args.config, {
        "objective": args.objective, "method": args.method, "dim": args.dim,
        "N": args.N, "k": args.k, "T": args.T, "tau": args.tau,
        "seed": args.seed, "theta": args.theta, "mu0": args.mu0,
        "sigma0_sq": args.sigma0_sq,
    })
    obj = _objective(cfg)
    run_cfg = DcemConfig(N=cfg.N, k=cfg.k, T=cfg.T, tau=cfg.tau,
                         seed=cfg.seed)
    init = GaussianDistribution(mu=np.full(cfg.dim, cfg.mu0),
                                sigma2=np.full(cfg.dim, cfg.sigma0_sq))
    if cfg.method == "cem":
        x_hat, trace = cem(obj, init, run_cfg)
        x_hat = np.asarray(x_hat)
    else:
        point, trace = dcem(obj, init, run_cfg)
        x_hat = np.asarray(point.value)
        point.tape.release()
    f_val = float(np.asarray(obj(x_hat[None, :]))[0])
    result = {
        "x_hat": x_hat.tolist(),
        "f_x_hat": f_val,
        "iterations": len(trace),
        "mean_value_per_iteration": [float(np.mean(v))
                                     for v in trace.values],
        "best_value_per_iteration": [float(np.min(v)) for v in trace.values],
    }
    out = resolve_out_dir(args.out, "optimize", cfg.seed)
    with open(os.path.join(out, "result.json"), "w") as fh:
        json.dump({"config": asdict(cfg), "result": result,
                   "version": f"v{__version__}"}, fh, indent=2,
                  sort_keys=True)
        fh.write("\n")
    print(json.dumps(result))
    return EXIT_OK


# ---------------------------------------------------------------------------
# regress


@dataclass
class RegressConfig:
    method: str = "both"
    outer_steps: int = 2000
    batch: int = 32
    lr: float = 1e-3
    seed: int = 0
    n_train: int = 1000
    n_val: int = 200
    val_every: int = 250
    gd_steps: int = 10
    gd_lr: float = 0.1
    dcem_N: int = 100
    dcem_k: int = 10
    dcem_T: int = 10
    dcem_tau: float = 1.0
    surface_nx: int = 50
    surface_ny: int = 121
    surface_y_lo: float = -6.0
    surface_y_hi: float = 3.0

    def __post_init__(self):
        if self.method not in ("both", "dcem", "unrolled_gd"):
            raise ValueError(f"unknown method: {self.method}")


def _regress_method(cfg: RegressConfig, method: str, task, out: str):
    if method == "dcem":
        icfg = ebm.InferenceConfig(
            method="dcem",
            dcem=DcemConfig(N=cfg.dcem_N, k=cfg.dcem_k, T=cfg.dcem_T,
                            tau=cfg.dcem_tau))
    else:
        icfg = ebm.InferenceConfig(method="unrolled_gd",
                                   gd_steps=cfg.gd_steps, gd_lr=cfg.gd_lr)
    res = ebm.train(task, icfg, outer_steps=cfg.outer_steps, lr=cfg.lr,
                    batch=cfg.batch, seed=cfg.seed, val_every=cfg.val_every)
    write_csv(os.path.join(out, f"loss_{method}.csv"),
              ("step", "train_mse", "val_mse"), res.curve)
    x_grid = np.linspace(0.01, 2 * np.pi - 0.01, cfg.surface_nx)
    y_grid = np.linspace(cfg.surface_y_lo, cfg.surface_y_hi, cfg.surface_ny)
    header, rows = ebm.energy_surface(res.net, x_grid, y_grid)
    write_csv(os.path.join(out, f"surface_{method}.csv"), header, rows)
    header, rows = ebm.ablate_inner_iterations(res.net, task, icfg,
                                               seed=res.eval_seed)
    write_csv(os.path.join(out, f"ablation_{method}.csv"), header, rows)
    probe = ebm.local_min_fraction(res.net, task, icfg, seed=res.eval_seed)
    return {
        "final_val_mse": res.final_val_mse,
        "probe_fraction": probe,
        "surface_argmin_track": ebm.surface_argmin_tracks_target(
            res.net, x_grid, y_grid),
        "ablation": {str(c): m for c, m in rows},
    }


def cmd_regress(args) -> int:
    cfg = apply_config(RegressConfig, args.config, {
        "method": args.method, "outer_steps": args.outer_steps,
        "batch": args.batch, "lr": args.lr, "seed": args.seed,
        "n_train": args.n_train, "n_val": args.n_val,
        "val_every": args.val_every,
    })
    out = resolve_out_dir(args.out, "regress", cfg.seed)
    task = ebm.make_task(n_train=cfg.n_train, n_val=cfg.n_val, seed=cfg.seed)
    methods = ("dcem", "unrolled_gd") if cfg.method == "both" \
        else (cfg.method,)
    metrics = {}
    manifest_path = os.path.join(out, "manifest.json")
    for method in methods:
        try:
            metrics[method] = _regress_method(cfg, method, task, out)
        except (TrainingDivergedError, NonFiniteValueError) as e:
            write_manifest(manifest_path, "regress", cfg, metrics,
                           status="failed", error=f"{method}: {e}")
            print(f"error: {method} training failed: {e}", file=sys.stderr)
            return EXIT_RUNTIME
    write_manifest(manifest_path, "regress", cfg, metrics)
    print(json.dumps(metrics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# cartpole


@dataclass
class CartpoleConfig:
    n_z: int = 2
    tau: float = 1.0
    outer_steps: int = 2000
    lr: float = 1e-3
    seed: int = 0
    H: int = 20
    n_val: int = 32
    val_every: int = 200
    expert_N: int = 1000
    expert_k: int = 100
    expert_T: int = 10
    embed_N: int = 100
    embed_k: int = 10
    embed_T: int = 10
    surface_grid: int = 100
    n_trajectories: int = 4
    ablate_nz: str = "2,4,16"
    ablate_tau: str = "1.0,0.1,0.0"
    ablate_seeds: int = 3

    def __post_init__(self):
        if self.n_z < 1:
            raise ValueError("n_z must be >= 1")
        if self.tau < 0:
            raise ValueError("tau must be >= 0")


def _expert_cfg(cfg: CartpoleConfig) -> DcemConfig:
    return DcemConfig(N=cfg.expert_N, k=cfg.expert_k, T=cfg.expert_T,
                      tau=0.0)


def _embed_cfg(cfg: CartpoleConfig, tau=None) -> DcemConfig:
    return DcemConfig(N=cfg.embed_N, k=cfg.embed_k, T=cfg.embed_T,
                      tau=cfg.tau if tau is None else tau)


def _dump_trajectories(prob, dec, states, cfg, out, seed):
    for i, s in enumerate(states[:cfg.n_trajectories]):
        eval_cfg = DcemConfig(N=cfg.embed_N, k=cfg.embed_k, T=cfg.embed_T,
                              tau=0.0, seed=seed + i)
        z_hat, _ = ct.solve_latent(prob, dec, s, eval_cfg)
        u = np.asarray(ct.decode(dec, np.asarray(z_hat)[None, :]))[0]
        rows = []
        for t, st in enumerate(ct.rollout_states(prob, s, u)):
            u_t = u[t] if t < prob.H else np.nan
            rows.append((t, st.p, st.p_dot, st.theta, st.theta_dot, u_t))
        write_csv(os.path.join(out, f"trajectory_{i}.csv"),
                  ("t", "p", "p_dot", "theta", "theta_dot", "u"), rows)


def run_cartpole_cell(cfg: CartpoleConfig, n_z: int, tau: float, seed: int):
    """One training cell of the ablation grid; returns its key metrics."""
    prob = ct.ControlProblem(H=cfg.H)
    res = ct.train_decoder(prob, n_z=n_z, tau=tau,
                           outer_steps=cfg.outer_steps, lr=cfg.lr, seed=seed,
                           val_every=cfg.val_every, n_val=cfg.n_val)
    states = prob.validation_states(cfg.n_val)
    factor = ct.improvement_factor(prob, res.dec, states, seed=res.eval_seed,
                                   expert_cfg=_expert_cfg(cfg),
                                   embed_cfg=_embed_cfg(cfg))
    return res, factor


def cmd_cartpole(args) -> int:
    cfg = apply_config(CartpoleConfig, args.config, {
        "n_z": args.n_z, "tau": args.tau, "outer_steps": args.outer_steps,
        "lr": args.lr, "seed": args.seed, "n_val": args.n_val,
        "val_every": args.val_every, "ablate_nz": args.ablate_nz,
        "ablate_tau": args.ablate_tau, "ablate_seeds": args.ablate_seeds,
    })
    out = resolve_out_dir(args.out, "cartpole", cfg.seed)
    manifest_path = os.path.join(out, "manifest.json")
    prob = ct.ControlProblem(H=cfg.H)
    states = prob.validation_states(cfg.n_val)

    if args.expert_only:
        rows = []
        for i, s in enumerate(states):
            _, cost = ct.expert_cem(prob, s, seed=cfg.seed + i,
                                    cfg=_expert_cfg(cfg))
            rows.append((i, cost))
        write_csv(os.path.join(out, "expert_costs.csv"),
                  ("state_index", "expert_cost"), rows)
        metrics = {"mean_expert_cost": float(np.mean([c for _, c in rows]))}
        write_manifest(manifest_path, "cartpole-expert", cfg, metrics)
        print(json.dumps(metrics))
        return EXIT_OK

    if args.ablate:
        nz_list = [int(v) for v in cfg.ablate_nz.split(",")]
        tau_list = [float(v) for v in cfg.ablate_tau.split(",")]
        rows = []
        for n_z in nz_list:
            for tau in tau_list:
                for s in range(cfg.ablate_seeds):
                    seed = cfg.seed + s
                    try:
                        res, factor = run_cartpole_cell(cfg, n_z, tau, seed)
                    except (TrainingDivergedError, NonFiniteValueError) as e:
                        write_manifest(manifest_path, "cartpole-ablate", cfg,
                                       {}, status="failed",
                                       error=f"nz={n_z} tau={tau} "
                                             f"seed={seed}: {e}")
                        print(f"error: {e}", file=sys.stderr)
                        return EXIT_RUNTIME
                    rows.append((n_z, tau, seed, factor, res.best_val,
                                 res.final_val))
        write_csv(os.path.join(out, "improvement.csv"),
                  ("n_z", "tau", "seed", "improvement_factor", "best_val",
                   "final_val"), rows)
        metrics = {"cells": len(rows)}
        write_manifest(manifest_path, "cartpole-ablate", cfg, metrics)
        print(json.dumps(metrics))
        return EXIT_OK

    try:
        res, factor = run_cartpole_cell(cfg, cfg.n_z, cfg.tau, cfg.seed)
    except (TrainingDivergedError, NonFiniteValueError) as e:
        write_manifest(manifest_path, "cartpole", cfg, {}, status="failed",
                       error=str(e))
        print(f"error: training failed: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    write_csv(os.path.join(out, "curve.csv"),
              ("step", "train_cost", "val_cost"), res.curve)
    write_csv(os.path.join(out, "improvement.csv"),
              ("n_z", "tau", "seed", "improvement_factor", "best_val",
               "final_val"),
              [(cfg.n_z, cfg.tau, cfg.seed, factor, res.best_val,
                res.final_val)])
    if cfg.n_z == 2:
        header, rows = ct.latent_surface(prob, res.dec, states[0],
                                         n_grid=cfg.surface_grid)
        write_csv(os.path.join(out, "surface.csv"), header, rows)
    _dump_trajectories(prob, res.dec, states, cfg, out, res.eval_seed)
    metrics = {"improvement_factor": factor, "best_val": res.best_val,
               "final_val": res.final_val}
    write_manifest(manifest_path, "cartpole", cfg, metrics)
    print(json.dumps(metrics))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffcem")
    p.add_argument("--version", action="version",
                   version=f"diffcem v{__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    lml = sub.add_parser("lml-proj", help="project scores onto the soft "
                                          "top-k polytope")
    lml.add_argument("--x", required=True, help="comma-separated scores")
    lml.add_argument("--k", type=int, required=True)
    lml.add_argument("--tau", type=float, required=True)
    lml.add_argument("--json", action="store_true")
    lml.set_defaults(func=cmd_lml)

    topk = sub.add_parser("topk", help="hard top-k indicator of the largest "
                                       "scores")
    topk.add_argument("--x", required=True, help="comma-separated scores")
    topk.add_argument("--k", type=int, required=True)
    topk.set_defaults(func=cmd_topk)

    opt = sub.add_parser("optimize", help="run cem/dcem on a test objective")
    opt.add_argument("--config")
    opt.add_argument("--objective")
    opt.add_argument("--method")
    opt.add_argument("--dim", type=int)
    opt.add_argument("--N", type=int)
    opt.add_argument("--k", type=int)
    opt.add_argument("--T", type=int)
    opt.add_argument("--tau", type=float)
    opt.add_argument("--seed", type=int)
    opt.add_argument("--theta", type=float)
    opt.add_argument("--mu0", type=float)
    opt.add_argument("--sigma0-sq", dest="sigma0_sq", type=float)
    opt.add_argument("--out")
    opt.set_defaults(func=cmd_optimize)

    reg = sub.add_parser("regress", help="energy-based regression experiment")
    reg.add_argument("--config")
    reg.add_argument("--method")
    reg.add_argument("--outer-steps", dest="outer_steps", type=int)
    reg.add_argument("--batch", type=int)
    reg.add_argument("--lr", type=float)
    reg.add_argument("--seed", type=int)
    reg.add_argument("--n-train", dest="n_train", type=int)
    reg.add_argument("--n-val", dest="n_val", type=int)
    reg.add_argument("--val-every", dest="val_every", type=int)
    reg.add_argument("--out")
    reg.set_defaults(func=cmd_regress)

    cart = sub.add_parser("cartpole", help="embedded latent control "
                                           "experiment")
    cart.add_argument("--config")
    cart.add_argument("--n-z", dest="n_z", type=int)
    cart.add_argument("--tau", type=float)
    cart.add_argument("--outer-steps", dest="outer_steps", type=int)
    cart.add_argument("--lr", type=float)
    cart.add_argument("--seed", type=int)
    cart.add_argument("--n-val", dest="n_val", type=int)
    cart.add_argument("--val-every", dest="val_every", type=int)
    cart.add_argument("--expert-only", action="store_true")
    cart.add_argument("--ablate", action="store_true")
    cart.add_argument("--ablate-nz", dest="ablate_nz")
    cart.add_argument("--ablate-tau", dest="ablate_tau")
    cart.add_argument("--ablate-seeds", dest="ablate_seeds", type=int)
    cart.add_argument("--out")
    cart.set_defaults(func=cmd_cartpole)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TrainingDivergedError, NonFiniteValueError, BracketingError,
            SaturationError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:  # ConfigError and config-object validation
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())

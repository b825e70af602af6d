"""Acceptance suite: one test per numbered shipping criterion.

Criteria 1-5 are property checks that run in seconds. Criteria 6-8 train
the regression and control models at the package defaults, so this file
takes tens of minutes end to end; the heavy runs sit in module-scoped
fixtures and happen once each.
"""

import warnings

import numpy as np
import pytest
from scipy.special import expit

from diffcem import autodiff as ad
from diffcem import control as ct
from diffcem import ebm
from diffcem.autodiff import Tape
from diffcem.cli import OptimizeConfig, _objective
from diffcem.lml import LmlProblem, lml_project, lml_vjp
from diffcem.optimizers import DcemConfig, GaussianDistribution, cem, dcem

from helpers import (central_fd, fd_jacobian, largest_k_indicator,
                     op_fd_cases, rel_err)


def test_criterion_1_lml_feasibility_interiority_stationarity_shift():
    rng = np.random.default_rng(11)
    worst_feas = worst_stat = worst_shift = 0.0
    for _ in range(1000):
        n = int(rng.integers(3, 65))
        k = int(rng.integers(1, n))
        tau = float(np.exp(rng.uniform(np.log(1e-2), np.log(10.0))))
        x = rng.standard_normal(n)
        sol = lml_project(LmlProblem(x=x, k=k, tau=tau))
        feas = abs(float(sol.y.sum()) - k)
        assert feas <= 1e-9
        assert np.all(sol.y > 0.0) and np.all(sol.y < 1.0)
        stat = float(np.max(np.abs(sol.y - expit((x + sol.nu) / tau))))
        assert stat <= 1e-9
        c = float(rng.normal(0.0, 3.0))
        shifted = lml_project(LmlProblem(x=x + c, k=k, tau=tau))
        shift = float(np.max(np.abs(shifted.y - sol.y)))
        assert shift <= 1e-9
        worst_feas = max(worst_feas, feas)
        worst_stat = max(worst_stat, stat)
        worst_shift = max(worst_shift, shift)
    print(f"criterion 1 PASS: 1000 instances, worst feasibility "
          f"{worst_feas:.2e}, stationarity {worst_stat:.2e}, "
          f"shift {worst_shift:.2e}")


def test_criterion_2_tau_to_zero_matches_hard_topk():
    rng = np.random.default_rng(13)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 65))
        k = int(rng.integers(1, n))
        gaps = 0.1 + rng.uniform(0.0, 0.9, n - 1)
        x = rng.permutation(np.concatenate([[0.0], np.cumsum(gaps)]))
        x = x - x.mean()
        y = lml_project(LmlProblem(x=x, k=k, tau=1e-5)).y
        gap = float(np.max(np.abs(y - largest_k_indicator(x, k))))
        assert gap <= 1e-3
        worst = max(worst, gap)
    print(f"criterion 2 PASS: 200 gapped instances, worst "
          f"|y(1e-5) - hard| {worst:.2e}")


def test_criterion_3_lml_vjp_and_op_suite_match_fd():
    rng = np.random.default_rng(17)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 65))
        k = int(rng.integers(1, n))
        tau = float(np.exp(rng.uniform(np.log(1e-2), np.log(10.0))))
        x = rng.standard_normal(n)
        sol = lml_project(LmlProblem(x=x, k=k, tau=tau))
        g = rng.standard_normal(n)
        vjp = lml_vjp(sol, tau, g)
        J = fd_jacobian(lambda xx: lml_project(LmlProblem(xx, k, tau)).y,
                        x, h=1e-5)
        err = rel_err(vjp, g @ J)
        assert err <= 1e-4
        worst = max(worst, err)
    op_worst = ("", 0.0)
    for name, f, x0 in op_fd_cases(np.random.default_rng(19)):
        tape = Tape()
        xv = tape.leaf(x0)
        grads = tape.backward(f(xv))
        err = rel_err(grads[xv], central_fd(f, x0))
        assert err <= 1e-4, name
        if err > op_worst[1]:
            op_worst = (name, err)
    print(f"criterion 3 PASS: 100 vjp instances worst rel err {worst:.2e}; "
          f"op suite worst {op_worst[0]} {op_worst[1]:.2e}")


def test_criterion_4_dcem_matches_cem_at_cold_temperature():
    obj = _objective(OptimizeConfig())
    worst = 0.0
    for seed in range(20):
        init = GaussianDistribution(mu=np.zeros(1), sigma2=np.full(1, 25.0))
        hard, _ = cem(obj, init, DcemConfig(N=100, k=10, T=10, tau=0.0,
                                            seed=seed))
        point, _ = dcem(obj, init, DcemConfig(N=100, k=10, T=10, tau=1e-5,
                                              seed=seed))
        soft = np.asarray(point.value)
        point.tape.release()
        gap = float(np.max(np.abs(np.asarray(hard) - soft)))
        assert gap <= 1e-4
        worst = max(worst, gap)
    print(f"criterion 4 PASS: 20 seeds, worst final-mean gap {worst:.2e}")


def test_criterion_5_dcem_theta_gradient_matches_fd():
    def run(theta, seed, tape=None):
        def obj(X):
            return ad.square(ad.sub(ad.reshape(X, (-1,)), theta))

        init = GaussianDistribution(mu=np.zeros(1), sigma2=np.full(1, 4.0))
        point, _ = dcem(obj, init,
                        DcemConfig(N=20, k=5, T=3, tau=1.0, seed=seed),
                        tape=tape)
        return point

    worst = 0.0
    for seed in range(20):
        tape = Tape()
        th = tape.leaf(1.7)
        out = run(th, seed, tape=tape)
        grad = np.asarray(tape.backward(ad.reshape(out, ()))[th])
        tape.release()

        h = 1e-5
        vals = []
        for t in (1.7 + h, 1.7 - h):
            pt = run(t, seed)
            vals.append(float(np.asarray(pt.value)[0]))
            pt.tape.release()
        fd = (vals[0] - vals[1]) / (2.0 * h)
        err = rel_err(grad, fd)
        assert err <= 1e-3
        worst = max(worst, err)
    print(f"criterion 5 PASS: 20 seeds, worst d(out)/dtheta rel err "
          f"{worst:.2e}")


@pytest.fixture(scope="module")
def regression_runs():
    task = ebm.make_task(seed=0)
    out = {}
    for method in ("dcem", "unrolled_gd"):
        cfg = ebm.InferenceConfig(method=method)
        res = ebm.train(task, cfg, seed=0)
        probe = ebm.local_min_fraction(res.net, task, cfg, seed=res.eval_seed)
        _, rows = ebm.ablate_inner_iterations(res.net, task, cfg,
                                              seed=res.eval_seed)
        out[method] = {"res": res, "probe": probe, "ablation": dict(rows)}
    return task, out


def test_criterion_6_regression_convergence_probe_and_ablation(
        regression_runs):
    task, runs = regression_runs
    for method, run in runs.items():
        first_val = run["res"].curve[0][2]
        final_val = run["res"].final_val_mse
        assert np.isfinite(final_val)
        assert final_val <= 0.1 * first_val, method
    dcem_probe = runs["dcem"]["probe"]
    gd_probe = runs["unrolled_gd"]["probe"]
    assert dcem_probe >= 0.80
    assert dcem_probe > gd_probe
    abl = runs["dcem"]["ablation"]
    assert abl[30] <= 2.0 * abl[10]
    # Informational, not gated: raw MSE and where the surface argmin sits.
    x_grid = np.linspace(0.01, 2 * np.pi - 0.01, 50)
    y_grid = np.linspace(-6.0, 3.0, 121)
    tracks = {m: ebm.surface_argmin_tracks_target(r["res"].net, x_grid,
                                                  y_grid)
              for m, r in runs.items()}
    print(f"criterion 6 PASS: probe dcem {dcem_probe:.2f} vs gd "
          f"{gd_probe:.2f}; dcem mse@10 {abl[10]:.4f} mse@30 {abl[30]:.4f}; "
          f"val mse dcem {runs['dcem']['res'].final_val_mse:.4f} gd "
          f"{runs['unrolled_gd']['res'].final_val_mse:.4f}; "
          f"gd ablation {runs['unrolled_gd']['ablation']}; "
          f"surface track {tracks}")


@pytest.fixture(scope="module")
def cartpole_nz2_runs():
    prob = ct.ControlProblem()
    states = prob.validation_states(32)
    rows = []
    for seed in (0, 1, 2):
        res = ct.train_decoder(prob, n_z=2, tau=1.0, seed=seed)
        factor = ct.improvement_factor(prob, res.dec, states,
                                       seed=res.eval_seed)
        rows.append((seed, factor, res.best_val))
    return rows


def test_criterion_7_cartpole_recovers_expert(cartpole_nz2_runs):
    rows = cartpole_nz2_runs
    passing = [seed for seed, factor, _ in rows if factor >= 0.9]
    summary = ", ".join(f"seed {s}: factor {f:.3f} (best val {v:.2f})"
                        for s, f, v in rows)
    assert len(passing) >= 2, summary
    print(f"criterion 7 PASS: {summary}")


@pytest.fixture(scope="module")
def cartpole_nz16_runs():
    prob = ct.ControlProblem()
    out = {}
    for tau in (1.0, 0.0):
        for seed in (0, 1, 2):
            res = ct.train_decoder(prob, n_z=16, tau=tau, seed=seed)
            out[(tau, seed)] = res.best_val
    return out


def test_criterion_8_warm_training_beats_cold_at_nz16_soft(
        cartpole_nz16_runs):
    out = cartpole_nz16_runs
    assert all(np.isfinite(v) for v in out.values())
    wins = sum(out[(1.0, s)] < out[(0.0, s)] for s in (0, 1, 2))
    table = "; ".join(f"seed {s}: tau=1 {out[(1.0, s)]:.2f} vs tau=0 "
                      f"{out[(0.0, s)]:.2f}" for s in (0, 1, 2))
    if wins >= 2:
        print(f"criterion 8 PASS: tau=1 wins {wins}/3 ({table})")
    else:
        # Directional claim; soft gate by design, so warn instead of fail.
        warnings.warn(f"criterion 8 SOFT-FAIL: tau=1 wins only {wins}/3 "
                      f"({table})")
        print(f"criterion 8 SOFT-FAIL: tau=1 wins {wins}/3 ({table})")

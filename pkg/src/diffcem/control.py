"""Cartpole swing-up with an embedded latent controller.

Ground-truth differentiable dynamics and cost, a full-space expert planner
(vanilla cem over [0,1]^H force sequences), and a decoder network mapping a
small latent box onto control sequences. The decoder is trained by running
dcem in latent space and backpropagating the plan cost through the whole
inner solve.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .nn import Adam, Mlp, bind_params, make_mlp, mlp_apply
from .optimizers import (DcemConfig, GaussianDistribution,
                         TrainingDivergedError, cem, dcem)

GRAVITY = 9.8
CART_MASS = 1.0
POLE_MASS = 0.1
POLE_HALF_LENGTH = 0.5
FORCE_MAX = 10.0
DT = 0.05

_TOTAL_MASS = CART_MASS + POLE_MASS
_ML = POLE_MASS * POLE_HALF_LENGTH


@dataclass
class CartpoleState:
    """Cart position/velocity plus pole angle (0 = upright) and rate."""

    p: float
    p_dot: float
    theta: float
    theta_dot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.p, self.p_dot, self.theta, self.theta_dot])

    def __post_init__(self):
        if not np.all(np.isfinite(self.as_array())):
            raise ValueError("state must be finite")


def _accelerations(p_dot, theta, theta_dot, u):
    force = ad.mul(ad.sub(ad.mul(u, 2.0), 1.0), FORCE_MAX)
    sin_t = ad.sin(theta)
    cos_t = ad.cos(theta)
    tmp = ad.div(ad.add(force, ad.mul(_ML, ad.mul(ad.square(theta_dot),
                                                  sin_t))), _TOTAL_MASS)
    denom = ad.mul(POLE_HALF_LENGTH,
                   ad.sub(4.0 / 3.0,
                          ad.div(ad.mul(POLE_MASS, ad.square(cos_t)),
                                 _TOTAL_MASS)))
    theta_acc = ad.div(ad.sub(ad.mul(GRAVITY, sin_t), ad.mul(cos_t, tmp)),
                       denom)
    p_acc = ad.sub(tmp, ad.div(ad.mul(_ML, ad.mul(theta_acc, cos_t)),
                               _TOTAL_MASS))
    return p_acc, theta_acc


def _step_arrays(p, p_dot, theta, theta_dot, u):
    """Semi-implicit Euler: velocities first, then positions at the new rate."""
    p_acc, theta_acc = _accelerations(p_dot, theta, theta_dot, u)
    p_dot = ad.add(p_dot, ad.mul(p_acc, DT))
    p = ad.add(p, ad.mul(p_dot, DT))
    theta_dot = ad.add(theta_dot, ad.mul(theta_acc, DT))
    theta = ad.add(theta, ad.mul(theta_dot, DT))
    return p, p_dot, theta, theta_dot


def cartpole_step(s: CartpoleState, u: float) -> CartpoleState:
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"control must lie in [0, 1], got {u}")
    out = _step_arrays(np.float64(s.p), np.float64(s.p_dot),
                       np.float64(s.theta), np.float64(s.theta_dot),
                       np.float64(u))
    return CartpoleState(*(float(v) for v in out))


def _step_cost(p, p_dot, theta, theta_dot, u):
    pos = ad.mul(ad.square(p), 0.1)
    ang = ad.square(ad.sub(ad.cos(theta), 1.0))
    vel = ad.mul(ad.square(p_dot), 0.01)
    rate = ad.mul(ad.square(theta_dot), 0.01)
    effort = ad.mul(ad.square(ad.sub(ad.mul(u, 2.0), 1.0)), 0.001)
    return ad.add(ad.add(ad.add(pos, ang), ad.add(vel, rate)), effort)


def mechanical_energy(s: CartpoleState) -> float:
    """Kinetic plus potential energy, with the pole-down rest state at zero."""
    ke_cart = 0.5 * CART_MASS * s.p_dot ** 2
    v_sq = (s.p_dot ** 2
            + 2 * POLE_HALF_LENGTH * s.p_dot * s.theta_dot * np.cos(s.theta)
            + POLE_HALF_LENGTH ** 2 * s.theta_dot ** 2)
    i_com = POLE_MASS * POLE_HALF_LENGTH ** 2 / 3.0
    ke_pole = 0.5 * POLE_MASS * v_sq + 0.5 * i_com * s.theta_dot ** 2
    pe = POLE_MASS * GRAVITY * POLE_HALF_LENGTH * (1.0 + np.cos(s.theta))
    return ke_cart + ke_pole + pe


@dataclass
class ControlProblem:
    """Swing-up task: horizon, control box, and the initial-state sampler."""

    H: int = 20
    box: tuple = (0.0, 1.0)

    def sample_init(self, rng) -> CartpoleState:
        return CartpoleState(p=rng.uniform(-0.5, 0.5),
                             p_dot=rng.uniform(-0.5, 0.5),
                             theta=rng.uniform(-1.0, 1.0),
                             theta_dot=rng.uniform(-0.5, 0.5))

    def validation_states(self, n=32, seed=123):
        rng = np.random.default_rng(seed)
        return [self.sample_init(rng) for _ in range(n)]


def rollout_cost_batch(prob: ControlProblem, x_init: CartpoleState, U):
    """Cost of N control sequences rolled out from one state; U is (N, H).

    Per-step cost is charged at the pre-action state; the terminal state is
    not costed.
    """
    n = (U.value if isinstance(U, Var) else np.asarray(U)).shape[0]
    p = np.full(n, x_init.p)
    p_dot = np.full(n, x_init.p_dot)
    theta = np.full(n, x_init.theta)
    theta_dot = np.full(n, x_init.theta_dot)
    total = None
    for t in range(prob.H):
        u_t = ad.reshape(ad.narrow(U, 1, t, 1), (n,))
        c = _step_cost(p, p_dot, theta, theta_dot, u_t)
        total = c if total is None else ad.add(total, c)
        p, p_dot, theta, theta_dot = _step_arrays(p, p_dot, theta,
                                                  theta_dot, u_t)
    return total


def rollout_cost(prob: ControlProblem, x_init: CartpoleState, u):
    """Scalar plan cost of one (H,) control sequence; differentiable in u."""
    U = ad.reshape(u, (1, prob.H))
    return ad.reshape(rollout_cost_batch(prob, x_init, U), ())


def rollout_states(prob: ControlProblem, x_init: CartpoleState, u):
    """States visited under a concrete plan; list of H+1 CartpoleState."""
    u = np.asarray(u, dtype=np.float64)
    states = [x_init]
    for t in range(prob.H):
        states.append(cartpole_step(states[-1], float(u[t])))
    return states


EXPERT_CEM = DcemConfig(N=1000, k=100, T=10, tau=0.0)
EMBEDDED_DCEM = DcemConfig(N=100, k=10, T=10, tau=1.0)


def expert_cem(prob: ControlProblem, x_init: CartpoleState, seed=0,
               cfg: DcemConfig = EXPERT_CEM):
    """Full-space planner over [0,1]^H; returns (plan, cost)."""
    if cfg.tau != 0.0:
        raise ValueError("expert planner runs plain cem; tau must be 0")
    init = GaussianDistribution(mu=np.full(prob.H, 0.5),
                                sigma2=np.full(prob.H, 0.25), box=prob.box)
    run_cfg = DcemConfig(N=cfg.N, k=cfg.k, T=cfg.T, tau=0.0, seed=seed,
                         return_mode=cfg.return_mode)
    plan, _ = cem(lambda X: rollout_cost_batch(prob, x_init, X), init, run_cfg)
    return plan, float(rollout_cost(prob, x_init, plan))


def random_shooting(prob: ControlProblem, x_init: CartpoleState, n_samples,
                    seed=0):
    """Best of n i.i.d. uniform sequences; baseline oracle for the expert."""
    rng = np.random.default_rng(seed)
    U = rng.uniform(prob.box[0], prob.box[1], size=(n_samples, prob.H))
    costs = rollout_cost_batch(prob, x_init, U)
    best = int(np.argmin(costs))
    return U[best], float(costs[best])


def make_decoder(n_z: int, H: int = 20, seed=0) -> Mlp:
    return make_mlp((n_z, 200, 200, H), activation="elu",
                    out_activation="sigmoid", seed=seed)


def decode(dec: Mlp, z, params=None):
    return mlp_apply(dec, z, params=params)


def embedded_objective(prob: ControlProblem, dec: Mlp,
                       x_init: CartpoleState, params=None):
    """C(z; x_init) on latent batches: decode then roll out, exactly."""

    def obj(Z):
        return rollout_cost_batch(prob, x_init, decode(dec, Z, params=params))

    return obj


def latent_init(n_z: int) -> GaussianDistribution:
    return GaussianDistribution(mu=np.full(n_z, 0.5),
                                sigma2=np.full(n_z, 0.25), box=(0.0, 1.0))


def solve_latent(prob, dec, x_init, cfg: DcemConfig, params=None, tape=None):
    """Inner latent solve: dcem when tau > 0, detached vanilla cem at tau 0."""
    obj = embedded_objective(prob, dec, x_init, params=params)
    n_z = dec.sizes[0]
    if cfg.tau > 0:
        return dcem(obj, latent_init(n_z), cfg, tape=tape)
    return cem(obj, latent_init(n_z), cfg)


def embedded_cost(prob, dec, x_init, seed=0, cfg: DcemConfig = None) -> float:
    """Plan cost reached through the decoder, solved with plain cem.

    Evaluation always uses the hard solver so configurations trained at
    different temperatures are scored with one yardstick.
    """
    if cfg is None:
        cfg = EMBEDDED_DCEM
    eval_cfg = DcemConfig(N=cfg.N, k=cfg.k, T=cfg.T, tau=0.0, seed=seed)
    z_hat, _ = solve_latent(prob, dec, x_init, eval_cfg)
    u = decode(dec, z_hat[None, :])
    return float(rollout_cost_batch(prob, x_init, u)[0])


def validation_cost(prob, dec, states, seed=0) -> float:
    return float(np.mean([embedded_cost(prob, dec, s, seed=seed)
                          for s in states]))


@dataclass
class DecoderTrainResult:
    dec: Mlp
    curve: list  # (step, train_cost, val_cost)
    best_val: float
    final_val: float
    eval_seed: int


def train_decoder(prob: ControlProblem, n_z: int, tau: float,
                  outer_steps=2000, lr=1e-3, seed=0, val_every=200,
                  n_val=32) -> DecoderTrainResult:
    """Shape the decoder so latent dcem solves reach low plan cost.

    One initial state per outer step. tau > 0 differentiates through the
    whole inner solve; tau = 0 runs a detached cem inner loop and only the
    plan cost at the returned latent carries gradient.
    """
    dec = make_decoder(n_z, prob.H, seed=seed)
    opt = Adam(dec.params, lr=lr)
    rng = np.random.default_rng(seed + 1)
    eval_seed = seed + 4733
    val_states = prob.validation_states(n_val)
    inner = EMBEDDED_DCEM

    best_val = validation_cost(prob, dec, val_states, seed=eval_seed)
    best_params = [p.copy() for p in dec.params]
    curve = [(0, float("nan"), best_val)]
    for step in range(1, outer_steps + 1):
        x_init = prob.sample_init(rng)
        inner_seed = int(rng.integers(2 ** 31))
        tape = Tape()
        params = bind_params(tape, dec)
        cfg = DcemConfig(N=inner.N, k=inner.k, T=inner.T, tau=tau,
                         seed=inner_seed)
        if tau > 0:
            z_hat, _ = solve_latent(prob, dec, x_init, cfg, params=params,
                                    tape=tape)
        else:
            z_const, _ = solve_latent(prob, dec, x_init, cfg)
            z_hat = tape.leaf(z_const)
        obj = embedded_objective(prob, dec, x_init, params=params)
        loss = ad.reshape(obj(ad.reshape(z_hat, (1, n_z))), ())
        train_cost = float(loss.value)
        if not np.isfinite(train_cost) or train_cost > 1e6:
            raise TrainingDivergedError(
                f"plan cost {train_cost:.3e} at outer step {step}")
        grads = tape.backward(loss)
        opt.step([grads[p] for p in params])
        tape.release()
        if step % val_every == 0 or step == outer_steps:
            val = validation_cost(prob, dec, val_states, seed=eval_seed)
            curve.append((step, train_cost, val))
            if val < best_val:
                best_val = val
                best_params = [p.copy() for p in dec.params]
    final_val = curve[-1][2]
    best_dec = Mlp(dec.sizes, dec.activation, dec.out_activation,
                   [p.copy() for p in best_params])
    return DecoderTrainResult(best_dec, curve, best_val, final_val, eval_seed)


def improvement_factor(prob: ControlProblem, dec: Mlp, states, seed=0,
                       expert_cfg: DcemConfig = EXPERT_CEM,
                       embed_cfg: DcemConfig = EMBEDDED_DCEM,
                       decode_fn=None) -> float:
    """Mean over states of expert cost / embedded cost; 1 means parity.

    The embedded cost is floored at 1e-8 before dividing.
    """
    ratios = []
    for i, s in enumerate(states):
        _, c_expert = expert_cem(prob, s, seed=seed + i, cfg=expert_cfg)
        if decode_fn is None:
            c_embed = embedded_cost(prob, dec, s, seed=seed + i,
                                    cfg=embed_cfg)
        else:
            eval_cfg = DcemConfig(N=embed_cfg.N, k=embed_cfg.k,
                                  T=embed_cfg.T, tau=0.0, seed=seed + i)
            n_z = dec.sizes[0]
            obj = lambda Z: rollout_cost_batch(prob, s, decode_fn(Z))
            z_hat, _ = cem(obj, latent_init(n_z), eval_cfg)
            c_embed = float(rollout_cost_batch(prob, s,
                                               decode_fn(z_hat[None, :]))[0])
        ratios.append(c_expert / max(c_embed, 1e-8))
    return float(np.mean(ratios))


def latent_surface(prob: ControlProblem, dec: Mlp, x_init: CartpoleState,
                   n_grid=100):
    """Plan cost over a uniform latent grid; rows (z1, z2, cost)."""
    if dec.sizes[0] != 2:
        raise ValueError("latent surface needs a 2-D latent space")
    g = np.linspace(0.0, 1.0, n_grid)
    Z1, Z2 = np.meshgrid(g, g, indexing="ij")
    Z = np.column_stack([Z1.ravel(), Z2.ravel()])
    costs = rollout_cost_batch(prob, x_init, decode(dec, Z))
    rows = np.column_stack([Z, costs])
    return ("z1", "z2", "cost"), rows


def low_cost_area(rows, frac=0.10) -> float:
    """Fraction of grid cells within frac of the grid minimum cost span."""
    costs = rows[:, -1]
    lo, hi = costs.min(), costs.max()
    if hi - lo <= 0:
        return 1.0
    return float(np.mean(costs <= lo + frac * (hi - lo)))

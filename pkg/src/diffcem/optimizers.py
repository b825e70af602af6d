"""Sampling-based argmin solvers over batched objectives.

``cem`` is the classic cross-entropy method: sample from a diagonal Gaussian,
keep the k lowest-cost samples, refit, repeat. ``dcem`` replaces the hard
elite indicator with the temperature-scaled soft top-k projection and draws
samples by reparameterization (X = mu + sigma * eps with eps recorded as
constants), which makes the returned point differentiable w.r.t. whatever
the objective's parameters are on the tape. ``unrolled_gd`` is the
gradient-descent inner loop baseline, with its inner gradients recorded so
outer gradients flow through them.

Sign convention: objectives return costs (lower is better). The projection
rewards large scores, so dcem feeds it the negated (optionally normalized)
values; the hard path keeps the k smallest.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var
from .lml import lml_topk

VARIANCE_FLOOR = 1e-8


class NonFiniteValueError(RuntimeError):
    """An objective or iterate produced nan/inf."""


class TrainingDivergedError(RuntimeError):
    """An outer training loss blew past its divergence threshold."""


@dataclass
class GaussianDistribution:
    """Diagonal-Gaussian sampling distribution, optionally box-clamped.

    ``mu`` and ``sigma2`` are per-coordinate arrays (or Vars inside a dcem
    run). ``box`` is a (lower, upper) pair applied to samples coordinate-wise
    after drawing.
    """

    mu: object
    sigma2: object
    box: tuple | None = None

    def mu_value(self):
        return np.asarray(self.mu.value if isinstance(self.mu, Var) else self.mu,
                          dtype=np.float64)

    def sigma2_value(self):
        s2 = self.sigma2
        return np.asarray(s2.value if isinstance(s2, Var) else s2,
                          dtype=np.float64)


@dataclass
class DcemConfig:
    N: int
    k: int
    T: int
    tau: float
    normalize: bool = True
    return_mode: str = "mean"
    seed: int = 0

    def __post_init__(self):
        if self.N < 2:
            raise ValueError(f"need N >= 2 samples, got {self.N}")
        if not (0 < self.k <= self.N):
            raise ValueError(f"need 0 < k <= N, got k={self.k}, N={self.N}")
        if self.T < 1:
            raise ValueError(f"need T >= 1 iterations, got {self.T}")
        if self.tau < 0:
            raise ValueError(f"tau must be >= 0, got {self.tau}")
        if self.return_mode not in ("mean", "best_sample"):
            raise ValueError(f"unknown return_mode {self.return_mode!r}")


@dataclass
class IterationTrace:
    """Per-iteration record: distribution used, samples, values, weights."""

    mu: list = field(default_factory=list)
    sigma2: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    values: list = field(default_factory=list)
    weights: list = field(default_factory=list)

    def append(self, mu, sigma2, X, v, I):
        self.mu.append(np.array(mu))
        self.sigma2.append(np.array(sigma2))
        self.samples.append(np.array(X))
        self.values.append(np.array(v))
        self.weights.append(np.array(I))

    def __len__(self):
        return len(self.values)


def hard_topk_indicator(v, k: int) -> np.ndarray:
    """Ones at the k smallest entries of ``v``; ties go to the lowest index."""
    v = np.asarray(v, dtype=np.float64)
    if not 0 < k <= v.shape[0]:
        raise ValueError(f"need 0 < k <= N, got k={k}, N={v.shape[0]}")
    out = np.zeros_like(v)
    out[np.argsort(v, kind="stable")[:k]] = 1.0
    return out


def _check_finite_values(v, where=""):
    v = np.asarray(v)
    if not np.all(np.isfinite(v)):
        bad = np.flatnonzero(~np.isfinite(v))
        raise NonFiniteValueError(
            f"objective returned non-finite values{where} at sample indices "
            f"{bad.tolist()}")


def gaussian_fit_hard(X, v, k: int,
                      floor: float = VARIANCE_FLOOR) -> GaussianDistribution:
    """Refit to the k lowest-cost rows: sample mean, biased (1/k) variance."""
    X = np.asarray(X, dtype=np.float64)
    elite = X[np.argsort(np.asarray(v), kind="stable")[:k]]
    mu = elite.mean(axis=0)
    sigma2 = np.maximum(elite.var(axis=0), floor)
    return GaussianDistribution(mu=mu, sigma2=sigma2)


def gaussian_fit_soft(X, weights, k: int,
                      floor: float = VARIANCE_FLOOR) -> GaussianDistribution:
    """Weighted refit mu = (1/k) sum_i I_i X_i, sigma2 = (1/k) sum_i I_i (X_i-mu)^2.

    Differentiable through the tape in both X and the weights. The divide is
    by k exactly; the weights are expected to sum to k (a deviation beyond
    1e-3 means the upstream projection is broken).
    """
    w_val = weights.value if isinstance(weights, Var) else np.asarray(weights)
    if abs(float(w_val.sum()) - k) > 1e-3:
        raise ValueError(
            f"soft weights sum to {float(w_val.sum()):.6f}, expected {k}; "
            "upstream projection looks broken")
    n_samples = w_val.shape[0]
    mu = ad.mul(ad.matmul(weights, X), 1.0 / k)
    dev = ad.sub(X, ad.repeat_rows(mu, n_samples))
    sigma2 = ad.clamp(ad.mul(ad.matmul(weights, ad.square(dev)), 1.0 / k),
                      lo=floor)
    return GaussianDistribution(mu=mu, sigma2=sigma2)


def _init_arrays(init: GaussianDistribution):
    mu = init.mu_value().copy()
    s2 = init.sigma2_value().copy()
    if mu.ndim != 1 or s2.shape != mu.shape:
        raise ValueError(f"init mu/sigma2 must be matching vectors, got "
                         f"shapes {mu.shape} and {s2.shape}")
    return mu, s2


def cem(obj, init: GaussianDistribution, cfg: DcemConfig):
    """Vanilla hard-top-k CEM. Pure numpy, records nothing.

    Returns (point, trace) where point is mu_{T+1} (return_mode "mean") or
    the lowest-cost sample seen (return_mode "best_sample").
    """
    if cfg.tau != 0:
        raise ValueError(f"cem requires tau=0, got tau={cfg.tau}; "
                         "use dcem for tau > 0")
    mu, s2 = _init_arrays(init)
    n = mu.shape[0]
    rng = np.random.default_rng(cfg.seed)
    trace = IterationTrace()
    best_x, best_v = None, np.inf
    for t in range(cfg.T):
        s2 = np.maximum(s2, VARIANCE_FLOOR)
        eps = rng.standard_normal((cfg.N, n))
        X = mu + np.sqrt(s2) * eps
        if init.box is not None:
            X = np.clip(X, init.box[0], init.box[1])
        v = np.asarray(obj(X), dtype=np.float64)
        if v.shape != (cfg.N,):
            raise ValueError(f"objective must return one value per sample, "
                             f"got shape {v.shape} for N={cfg.N}")
        _check_finite_values(v, where=f" (iteration {t + 1})")
        I = hard_topk_indicator(v, cfg.k)
        trace.append(mu, s2, X, v, I)
        i_best = int(np.argmin(v))
        if v[i_best] < best_v:
            best_v, best_x = float(v[i_best]), X[i_best].copy()
        fit = gaussian_fit_hard(X, v, cfg.k)
        mu, s2 = fit.mu, fit.sigma2
    point = mu if cfg.return_mode == "mean" else best_x
    return point, trace


def _normalize_values(v):
    centered = ad.sub(v, ad.mean(v))
    std = ad.sqrt(ad.mean(ad.square(centered)))
    return ad.div(centered, ad.add(std, 1e-10))


def dcem(obj, init: GaussianDistribution, cfg: DcemConfig, tape: Tape | None = None):
    """Differentiable CEM (soft top-k weights, reparameterized sampling).

    Returns (point, trace); point is a Var on ``tape`` (a fresh tape if not
    given and the init carries no Var). With cfg.k == cfg.N the projection
    is skipped and every sample gets weight 1.
    """
    if not cfg.tau > 0:
        raise ValueError(f"dcem requires tau > 0, got tau={cfg.tau}; "
                         "use cem for the hard path")
    if tape is None:
        tape = init.mu.tape if isinstance(init.mu, Var) else Tape()
    mu = init.mu if isinstance(init.mu, Var) else init.mu_value().copy()
    s2 = init.sigma2 if isinstance(init.sigma2, Var) else init.sigma2_value().copy()
    n = (mu.value if isinstance(mu, Var) else mu).shape[0]
    rng = np.random.default_rng(cfg.seed)
    trace = IterationTrace()
    best = None  # (value, Var row)
    for t in range(cfg.T):
        s2 = ad.clamp(s2, lo=VARIANCE_FLOOR)
        sigma = ad.sqrt(s2)
        eps = rng.standard_normal((cfg.N, n))
        X = ad.add(ad.repeat_rows(mu, cfg.N),
                   ad.mul(ad.repeat_rows(sigma, cfg.N), eps))
        if init.box is not None:
            X = ad.clamp(X, init.box[0], init.box[1])
        v = obj(X)
        v_val = np.asarray(v.value if isinstance(v, Var) else v)
        if v_val.shape != (cfg.N,):
            raise ValueError(f"objective must return one value per sample, "
                             f"got shape {v_val.shape} for N={cfg.N}")
        _check_finite_values(v_val, where=f" (iteration {t + 1})")
        if cfg.k == cfg.N:
            I = np.ones(cfg.N)
        else:
            scores = _normalize_values(v) if cfg.normalize else v
            I = lml_topk(ad.neg(scores), cfg.k, cfg.tau)
        X_val = X.value if isinstance(X, Var) else X
        I_val = I.value if isinstance(I, Var) else I
        mu_val = mu.value if isinstance(mu, Var) else mu
        s2_val = s2.value if isinstance(s2, Var) else s2
        trace.append(mu_val, s2_val, X_val, v_val, I_val)
        i_best = int(np.argmin(v_val))
        if best is None or v_val[i_best] < best[0]:
            best = (float(v_val[i_best]),
                    ad.reshape(ad.index_select(X, [i_best]), (n,)))
        fit = gaussian_fit_soft(X, I, cfg.k)
        mu, s2 = fit.mu, fit.sigma2
    point = mu if cfg.return_mode == "mean" else best[1]
    if not isinstance(point, Var):
        point = tape.leaf(point)
    return point, trace


def dcem_rows(obj_rows, mu0, sigma2_0, cfg: DcemConfig, tape: Tape | None = None,
              box: tuple | None = None):
    """dcem over a batch of independent scalar problems, one per row.

    ``obj_rows`` maps a (B, N) matrix of candidate scalars to per-candidate
    costs of the same shape. Returns (mu, trace) with mu a (B,) Var. Used by
    the regression harness, where every data point in a training batch runs
    its own inner solve; mathematically identical to B separate 1-D dcem
    calls, just recorded as matrix ops.
    """
    if not cfg.tau > 0:
        raise ValueError(f"dcem_rows requires tau > 0, got tau={cfg.tau}")
    if tape is None:
        tape = mu0.tape if isinstance(mu0, Var) else Tape()
    mu = mu0 if isinstance(mu0, Var) else np.asarray(mu0, dtype=np.float64).copy()
    s2 = sigma2_0 if isinstance(sigma2_0, Var) \
        else np.asarray(sigma2_0, dtype=np.float64).copy()
    B = (mu.value if isinstance(mu, Var) else mu).shape[0]
    rng = np.random.default_rng(cfg.seed)
    trace = IterationTrace()
    for t in range(cfg.T):
        s2 = ad.clamp(s2, lo=VARIANCE_FLOOR)
        sigma = ad.sqrt(s2)
        eps = rng.standard_normal((B, cfg.N))
        Y = ad.add(ad.repeat_cols(mu, cfg.N),
                   ad.mul(ad.repeat_cols(sigma, cfg.N), eps))
        if box is not None:
            Y = ad.clamp(Y, box[0], box[1])
        v = obj_rows(Y)
        v_val = np.asarray(v.value if isinstance(v, Var) else v)
        _check_finite_values(v_val)
        if cfg.k == cfg.N:
            I = np.ones((B, cfg.N))
        else:
            if cfg.normalize:
                centered = ad.sub(v, ad.repeat_cols(ad.mean_axis(v, 1), cfg.N))
                std = ad.sqrt(ad.mean_axis(ad.square(centered), 1))
                vt = ad.div(centered,
                            ad.repeat_cols(ad.add(std, 1e-10), cfg.N))
            else:
                vt = v
            I = lml_topk(ad.neg(vt), cfg.k, cfg.tau)
        mu_val = mu.value if isinstance(mu, Var) else mu
        s2_val = s2.value if isinstance(s2, Var) else s2
        trace.append(mu_val, s2_val,
                     Y.value if isinstance(Y, Var) else Y, v_val,
                     I.value if isinstance(I, Var) else I)
        I_sum = np.asarray(I.value if isinstance(I, Var) else I).sum(axis=1)
        if np.any(np.abs(I_sum - cfg.k) > 1e-3):
            raise ValueError("row weights drifted from k; projection broken")
        IY = ad.mul(I, Y)
        mu = ad.mul(ad.sum_axis(IY, 1), 1.0 / cfg.k)
        dev = ad.sub(Y, ad.repeat_cols(mu, cfg.N))
        s2 = ad.clamp(ad.mul(ad.sum_axis(ad.mul(I, ad.square(dev)), 1),
                             1.0 / cfg.k), lo=VARIANCE_FLOOR)
    if not isinstance(mu, Var):
        mu = tape.leaf(mu)
    return mu, trace


def unrolled_gd(obj, y0, steps: int, lr: float, tape: Tape | None = None):
    """T explicit gradient steps y <- y - lr * grad(obj), tape-recorded.

    The inner gradients are recorded with create_graph=True, so a later
    backward through the returned Var differentiates through them.
    ``obj`` maps the iterate to a scalar, or to a vector of independent
    per-row values (summed before the inner gradient, which is equivalent
    because each row only affects its own value).
    """
    if steps < 0:
        raise ValueError(f"steps must be >= 0, got {steps}")
    if tape is None:
        tape = y0.tape if isinstance(y0, Var) else Tape()
    y = y0 if isinstance(y0, Var) else tape.leaf(np.asarray(y0, dtype=np.float64))
    for t in range(steps):
        val = obj(y)
        root = ad.sum(val) if (val.value if isinstance(val, Var) else val).ndim \
            else val
        (g,) = tape.grad(root, [y], create_graph=True)
        y = ad.sub(y, ad.mul(g, lr))
        if not np.all(np.isfinite(y.value)):
            raise NonFiniteValueError(f"iterate became non-finite at step {t + 1}")
    return y

"""Small fully-connected networks and an Adam optimizer.

Networks are plain parameter lists so the same forward pass runs in two
modes: raw ndarrays for fast no-gradient evaluation, and tape-bound Vars
when gradients are needed. ``mlp_apply`` accepts either.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Var

_ACTIVATIONS = {
    "softplus": ad.softplus,
    "elu": ad.elu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "identity": lambda x: x,
}


@dataclass
class Mlp:
    """Dense network; params stored as [W0, b0, W1, b1, ...]."""

    sizes: tuple
    activation: str
    out_activation: str
    params: list = field(default_factory=list)

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def make_mlp(sizes, activation="softplus", out_activation="identity",
             seed=0) -> Mlp:
    """Glorot-uniform init. sizes = (d_in, hidden..., d_out)."""
    if activation not in _ACTIVATIONS or out_activation not in _ACTIVATIONS:
        raise ValueError(f"unknown activation: {activation}/{out_activation}")
    rng = np.random.default_rng(seed)
    params = []
    for d_in, d_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / (d_in + d_out))
        params.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
        params.append(np.zeros(d_out))
    return Mlp(tuple(sizes), activation, out_activation, params)


def bind_params(tape: Tape, mlp: Mlp) -> list:
    """Lift the network's parameters onto a tape as leaf Vars."""
    return [tape.leaf(p) for p in mlp.params]


def set_params(mlp: Mlp, arrays) -> None:
    if len(arrays) != len(mlp.params):
        raise ValueError("parameter count mismatch")
    for p, a in zip(mlp.params, arrays):
        a = np.asarray(a, dtype=np.float64)
        if a.shape != p.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {p.shape}")
    mlp.params = [np.array(a, dtype=np.float64) for a in arrays]


def mlp_apply(mlp: Mlp, x, params=None):
    """Forward pass; x is (d_in,) or (B, d_in); params override mlp.params."""
    if params is None:
        params = mlp.params
    act = _ACTIVATIONS[mlp.activation]
    out_act = _ACTIVATIONS[mlp.out_activation]
    h = x
    n_layers = len(params) // 2
    for i in range(n_layers):
        W, b = params[2 * i], params[2 * i + 1]
        h = ad.matmul(h, W)
        if (h.ndim if isinstance(h, Var) else np.ndim(h)) == 2:
            rows = h.shape[0]
            h = ad.add(h, ad.repeat_rows(b, rows))
        else:
            h = ad.add(h, b)
        h = act(h) if i < n_layers - 1 else out_act(h)
    return h


class Adam:
    """Adam on a list of parameter arrays, updated in place."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient count mismatch")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = np.asarray(g, dtype=np.float64)
            m += (1 - b1) * (g - m)
            v += (1 - b2) * (g * g - v)
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

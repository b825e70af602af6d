"""Shared numerical oracles for the test suite."""

import numpy as np


def rel_err(a, b):
    """Max-norm relative error of ``a`` against reference ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom


def central_fd(f, x, h=1e-5):
    """Central finite-difference gradient of scalar-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def fd_jacobian(f, x, h=1e-5):
    """Finite-difference Jacobian of vector-valued ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x), dtype=np.float64)
    J = np.zeros((y0.size, x.size))
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        yp = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig - h
        ym = np.asarray(f(x), dtype=np.float64)
        flat[i] = orig
        J[:, i] = (yp - ym).reshape(-1) / (2.0 * h)
    return J


def largest_k_indicator(x, k):
    """Sort-based oracle: ones at the k largest entries of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    out[np.argsort(-x, kind="stable")[:k]] = 1.0
    return out


def op_fd_cases(rng):
    """One scalar-valued probe per autodiff op, for FD gradient checks.

    Returns (name, f, x0) triples. Each ``f`` maps an ndarray (or a Var) to
    a scalar through the op under test, with any constants frozen at build
    time, so the same callable serves both the finite-difference oracle and
    the tape.
    """
    from diffcem import autodiff as ad

    def v(n):
        return rng.standard_normal(n)

    def m(r, c):
        return rng.standard_normal((r, c))

    cases = []

    def case(name, op, x0, w_shape):
        # Freeze the output weighting and any op constants now, so repeated
        # calls of f (the FD oracle perturbs and re-evaluates) see one fixed
        # function of x alone.
        w = rng.standard_normal(w_shape)

        def f(x):
            return ad.sum(ad.mul(op(x), w))

        cases.append((name, f, np.asarray(x0, dtype=np.float64)))

    c5 = v(5)
    c45 = m(4, 5)
    c53 = m(5, 3)
    c63 = m(6, 3)
    c32 = m(3, 2)

    case("add", lambda x: ad.add(x, c5), v(5), 5)
    case("add_scalar", lambda x: ad.add(x, c5), v(1)[0], 5)
    case("sub", lambda x: ad.sub(c5, x), v(5), 5)
    case("mul", lambda x: ad.mul(x, c5), v(5), 5)
    case("mul_scalar", lambda x: ad.mul(c5, x), v(1)[0], 5)
    case("div", lambda x: ad.div(x, c5 + 3.0), v(5), 5)
    case("div_denom", lambda x: ad.div(c5, x), v(5) + 4.0, 5)
    case("neg", lambda x: ad.neg(x), v(5), 5)
    case("matmul_mm", lambda x: ad.matmul(x, c53), m(4, 5), (4, 3))
    case("matmul_vm", lambda x: ad.matmul(x, c63), v(6), 3)
    case("matmul_mv", lambda x: ad.matmul(c45, x), v(5), 4)
    case("matmul_dot", lambda x: ad.matmul(x, c5), v(5), ())
    case("sum", lambda x: ad.sum(x), m(3, 4), ())
    case("mean", lambda x: ad.mean(x), m(3, 4), ())
    case("sum_axis0", lambda x: ad.sum_axis(x, 0), m(3, 4), 4)
    case("sum_axis1", lambda x: ad.sum_axis(x, 1), m(3, 4), 3)
    case("mean_axis0", lambda x: ad.mean_axis(x, 0), m(3, 4), 4)
    case("mean_axis1", lambda x: ad.mean_axis(x, 1), m(3, 4), 3)
    case("repeat_rows", lambda x: ad.repeat_rows(x, 4), v(5), (4, 5))
    case("repeat_cols", lambda x: ad.repeat_cols(x, 3), v(5), (5, 3))
    case("square", lambda x: ad.square(x), v(5), 5)
    case("sqrt", lambda x: ad.sqrt(x), np.abs(v(5)) + 0.5, 5)
    case("exp", lambda x: ad.exp(x), v(5), 5)
    case("log", lambda x: ad.log(x), np.abs(v(5)) + 0.5, 5)
    case("tanh", lambda x: ad.tanh(x), v(5), 5)
    case("sigmoid", lambda x: ad.sigmoid(x), v(5), 5)
    case("softplus", lambda x: ad.softplus(x), v(5), 5)
    case("elu", lambda x: ad.elu(x), v(5), 5)
    case("sin", lambda x: ad.sin(x), v(5), 5)
    case("cos", lambda x: ad.cos(x), v(5), 5)
    case("clamp", lambda x: ad.clamp(x, -0.9, 0.9),
         np.array([-2.0, -0.5, 0.1, 0.6, 3.0]), 5)
    case("concat0", lambda x: ad.concat([x, c5, ad.mul(x, 2.0)], axis=0),
         v(5), 15)
    case("concat1", lambda x: ad.concat([x, c32], axis=1), m(3, 4), (3, 6))
    case("narrow", lambda x: ad.narrow(x, 0, 2, 3), v(7), 3)
    case("index_select", lambda x: ad.index_select(x, [1, 0, 1, 4]),
         m(5, 3), (4, 3))
    case("transpose", lambda x: ad.transpose(x), m(3, 4), (4, 3))
    case("reshape", lambda x: ad.reshape(x, (2, 6)), m(3, 4), (2, 6))
    return cases

"""Dense f64 tensor ops for the toy transformer and their vector-Jacobian products.

Tensors are plain ``numpy.ndarray`` values in float64, row-major. Leading
dimensions are treated as batch dimensions; ops act on the trailing one or
two axes. Every ``vjp_*`` takes the forward inputs (or cached outputs) plus
the upstream gradient and returns gradients shaped like the inputs.
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr

from .errors import DimensionError

_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _check_same(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{what}: shape {b.shape} does not match {a.shape}")


def matmul(a, b) -> np.ndarray:
    """Matrix product over the last two axes.

    ``b`` may be 2-D (shared across the batch, e.g. an FC weight) or carry
    the same leading batch dims as ``a``.
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dims differ: {a.shape} x {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch dims differ: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def transpose(x) -> np.ndarray:
    """Swap the last two axes."""
    return np.swapaxes(as_tensor(x), -1, -2)


def add(a, b) -> np.ndarray:
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return a + b


def reshape(x, shape) -> np.ndarray:
    x = as_tensor(x)
    try:
        return x.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None


def softmax_rows(x) -> np.ndarray:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError("softmax_rows needs a non-empty last axis")
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def gelu(x) -> np.ndarray:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    return x * ndtr(x)


def gelu_grad(x) -> np.ndarray:
    x = as_tensor(x)
    return ndtr(x) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if x.shape[-1] < 1 or gamma.shape != (x.shape[-1],) or beta.shape != gamma.shape:
        raise DimensionError(f"layernorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


# ---------------------------------------------------------------------------
# vector-Jacobian products
# ---------------------------------------------------------------------------


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` over axes that were broadcast to reach its shape from ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def vjp_matmul(a, b, g):
    a = as_tensor(a)
    b = as_tensor(b)
    g = as_tensor(g)
    expected = a.shape[:-1] + (b.shape[-1],)
    if g.shape != expected:
        raise DimensionError(f"vjp_matmul: upstream {g.shape}, expected {expected}")
    ga = np.matmul(g, np.swapaxes(b, -1, -2))
    gb = np.matmul(np.swapaxes(a, -1, -2), g)
    if b.ndim == 2 and gb.ndim > 2:
        gb = gb.reshape(-1, *b.shape).sum(axis=0)
    return ga, gb


def vjp_transpose(x, g):
    x = as_tensor(x)
    g = as_tensor(g)
    _check_same(transpose(x), g, "vjp_transpose")
    return np.swapaxes(g, -1, -2)


def vjp_add(a, b, g):
    a = as_tensor(a)
    b = as_tensor(b)
    g = as_tensor(g)
    if g.shape != np.broadcast_shapes(a.shape, b.shape):
        raise DimensionError(f"vjp_add: upstream {g.shape} does not match output")
    return _reduce_to(g, a.shape), _reduce_to(g, b.shape)


def vjp_reshape(x, g):
    x = as_tensor(x)
    g = as_tensor(g)
    if g.size != x.size:
        raise DimensionError(f"vjp_reshape: upstream {g.shape} vs input {x.shape}")
    return g.reshape(x.shape)


def vjp_softmax_rows(p, g):
    """VJP of softmax given its output ``p``."""
    p = as_tensor(p)
    g = as_tensor(g)
    _check_same(p, g, "vjp_softmax_rows")
    return p * (g - (g * p).sum(axis=-1, keepdims=True))


def vjp_gelu(x, g):
    x = as_tensor(x)
    g = as_tensor(g)
    _check_same(x, g, "vjp_gelu")
    return g * gelu_grad(x)


def vjp_layernorm(x, gamma, beta, g, eps: float = 1e-5):
    """Returns ``(dx, dgamma, dbeta)``; parameter grads are summed over leading axes."""
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    g = as_tensor(g)
    _check_same(x, g, "vjp_layernorm")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    dxhat = g * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    lead = tuple(range(x.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    return dx, dgamma, dbeta

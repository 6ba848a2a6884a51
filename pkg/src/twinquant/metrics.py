"""Distances used to score scaling-factor candidates.

The scalar functions compare one reference output against one quantized
output. :func:`candidate_scores` evaluates a stack of quantized outputs in
one pass and is what the search uses.
"""

from __future__ import annotations

import enum

import numpy as np

from .errors import DimensionError


class MetricKind(enum.Enum):
    MSE = "mse"
    COSINE = "cosine"
    PEARSON = "pearson"
    HESSIAN = "hessian"


def _pair(o, o_hat):
    o = np.asarray(o, dtype=np.float64)
    o_hat = np.asarray(o_hat, dtype=np.float64)
    if o.shape != o_hat.shape:
        raise DimensionError(f"shape mismatch: {o.shape} vs {o_hat.shape}")
    return o, o_hat


def mse(o, o_hat) -> float:
    o, o_hat = _pair(o, o_hat)
    d = o_hat - o
    return float(np.mean(d * d))


def cosine_distance(o, o_hat) -> float:
    """``1 - cos(o, o_hat)`` on flattened inputs.

    Both all-zero gives 0; exactly one all-zero gives 1.
    """
    o, o_hat = _pair(o, o_hat)
    a = o.ravel()
    b = o_hat.ravel()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0 if na == nb else 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def pearson_distance(o, o_hat) -> float:
    """``1 - r`` for the Pearson correlation ``r``; a zero-variance side gives 1."""
    o, o_hat = _pair(o, o_hat)
    if o.size < 2:
        raise DimensionError("pearson_distance needs at least 2 elements")
    a = o.ravel() - o.mean()
    b = o_hat.ravel() - o_hat.mean()
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(1.0 - np.dot(a, b) / (na * nb))


def hessian_metric(o, o_hat, grad) -> float:
    """Diagonal-Fisher weighted squared error.

    The leading axis indexes calibration samples: each sample contributes
    ``sum((o_hat - o)**2 * grad**2)`` and the result is the mean over
    samples. A 1-D input is a single sample.
    """
    o, o_hat = _pair(o, o_hat)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != o.shape:
        raise DimensionError(f"grad shape {grad.shape} does not match outputs {o.shape}")
    w = (o_hat - o) * grad
    if o.ndim <= 1:
        return float(np.sum(w * w))
    per_sample = (w * w).reshape(o.shape[0], -1).sum(axis=1)
    return float(per_sample.mean())


SCALAR_METRICS = {
    MetricKind.MSE: lambda o, oh, g: mse(o, oh),
    MetricKind.COSINE: lambda o, oh, g: cosine_distance(o, oh),
    MetricKind.PEARSON: lambda o, oh, g: pearson_distance(o, oh),
    MetricKind.HESSIAN: hessian_metric,
}


def score(kind: MetricKind, o, o_hat, grad=None) -> float:
    if kind is MetricKind.HESSIAN and grad is None:
        raise ValueError("the Hessian-guided metric needs output gradients")
    return SCALAR_METRICS[MetricKind(kind)](o, o_hat, grad)


def candidate_scores(kind: MetricKind, o: np.ndarray, o_hats: np.ndarray, grad=None) -> np.ndarray:
    """Score a stack ``o_hats[c]`` of quantized outputs against ``o``.

    ``o`` has shape ``(S, ...)`` with S calibration samples; ``o_hats`` has
    shape ``(C, S, ...)``. Each candidate is reduced independently, so its
    score does not depend on how candidates are batched.
    """
    kind = MetricKind(kind)
    o = np.asarray(o, dtype=np.float64)
    if o_hats.shape[1:] != o.shape:
        raise DimensionError(f"candidate outputs {o_hats.shape} do not stack {o.shape}")
    c = o_hats.shape[0]
    flat_hat = o_hats.reshape(c, -1)
    flat = o.reshape(-1)
    if kind is MetricKind.HESSIAN:
        if grad is None:
            raise ValueError("the Hessian-guided metric needs output gradients")
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != o.shape:
            raise DimensionError(f"grad shape {g.shape} does not match outputs {o.shape}")
        s = o.shape[0] if o.ndim > 1 else 1
        w = (o_hats - o) * g
        return (w * w).reshape(c, s, -1).sum(axis=2).mean(axis=1)
    if kind is MetricKind.MSE:
        d = flat_hat - flat
        return (d * d).mean(axis=1)
    if kind is MetricKind.PEARSON:
        flat = flat - flat.mean()
        flat_hat = flat_hat - flat_hat.mean(axis=1, keepdims=True)
    na = np.sqrt(np.sum(flat * flat))
    nb = np.sqrt(np.sum(flat_hat * flat_hat, axis=1))
    dots = np.sum(flat_hat * flat, axis=1)
    out = np.empty(c)
    ok = (nb > 0) & (na > 0)
    out[ok] = 1.0 - dots[ok] / (na * nb[ok])
    if kind is MetricKind.PEARSON:
        out[~ok] = 1.0
    else:
        out[~ok] = np.where(nb[~ok] == na, 0.0, 1.0)
    return out

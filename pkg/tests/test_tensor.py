import itertools

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from twinquant import tensor as T
from twinquant.errors import DimensionError

finite = st.floats(-1e4, 1e4, allow_nan=False, allow_infinity=False)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i, j in itertools.product(range(m), range(n)):
        s = 0.0
        for t in range(k):
            s += a[i, t] * b[t, j]
        out[i, j] = s
    return out


def central_diff(f, x, h=1e-5):
    """Gradient of scalar ``f`` at ``x`` by central differences."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp = x.copy()
        xp[idx] += h
        xm = x.copy()
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)


# --- matmul ---------------------------------------------------------------


def test_matmul_identity_and_hand_cases():
    assert np.array_equal(T.matmul([[1, 0], [0, 1]], [[3, 4], [5, 6]]), [[3, 4], [5, 6]])
    assert np.array_equal(T.matmul([[1, 2]], [[3], [4]]), [[11]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    assert np.max(np.abs(T.matmul(a, b) - naive_matmul(a, b))) <= 1e-12


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones((2, 2, 3)), np.ones((3, 2, 3)))
    with pytest.raises(DimensionError):
        T.matmul(np.ones(3), np.ones((3, 1)))


def test_matmul_transpose_identities():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    eye = np.eye(4)
    assert np.max(np.abs(T.matmul(T.matmul(a, eye), b) - T.matmul(a, T.matmul(eye, b)))) <= 1e-12
    lhs = T.transpose(T.matmul(a, b))
    rhs = T.matmul(T.transpose(b), T.transpose(a))
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_matmul_batched_shared_weight():
    rng = np.random.default_rng(2)
    a, w = rng.normal(size=(3, 4, 5)), rng.normal(size=(5, 2))
    out = T.matmul(a, w)
    for s in range(3):
        assert np.array_equal(out[s], a[s] @ w)


def test_ops_are_deterministic():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(6, 6))
    assert T.matmul(x, x).tobytes() == T.matmul(x.copy(), x.copy()).tobytes()
    assert T.softmax_rows(x).tobytes() == T.softmax_rows(x.copy()).tobytes()


# --- softmax / gelu / layernorm ---------------------------------------------


def test_softmax_examples():
    assert np.allclose(T.softmax_rows([0.0, 0, 0, 0]), 0.25, atol=0, rtol=0)
    p = T.softmax_rows([1000.0, 0.0])
    assert np.all(np.isfinite(p)) and p[0] == 1.0 and p[1] < 1e-300
    x = np.array([1.0, 2.0, 3.0])
    direct = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(T.softmax_rows(x) - direct)) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 9)), elements=finite))
def test_softmax_rows_normalized(x):
    p = T.softmax_rows(x)
    assert np.all(p >= 0)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) <= 1e-12


def test_gelu_examples():
    assert T.gelu(0.0) == 0.0
    assert abs(T.gelu(40.0) - 40.0) < 1e-12
    assert abs(T.gelu(-40.0)) < 1e-12
    with mpmath.workdps(40):
        oracle = float(mpmath.mpf(1) * (1 + mpmath.erf(1 / mpmath.sqrt(2))) / 2)
    assert abs(float(T.gelu(1.0)) - oracle) <= 1e-15
    assert abs(float(T.gelu(1.0)) - 0.841344746) < 1e-9


def test_gelu_matches_erf_oracle_on_grid():
    xs = np.linspace(-6, 6, 61)
    with mpmath.workdps(40):
        oracle = np.array([float(mpmath.mpf(x) * (1 + mpmath.erf(mpmath.mpf(x) / mpmath.sqrt(2))) / 2) for x in xs])
    assert np.max(np.abs(T.gelu(xs) - oracle)) <= 1e-14


def test_layernorm_examples():
    g, b = np.ones(4), np.zeros(4)
    assert np.array_equal(T.layernorm(np.full((2, 4), 3.0), g, b), np.zeros((2, 4)))
    beta = np.array([1.0, -2.0, 0.5, 3.0])
    out = T.layernorm(np.random.default_rng(0).normal(size=(3, 4)), np.zeros(4), beta)
    assert np.array_equal(out, np.broadcast_to(beta, (3, 4)))


def test_layernorm_statistics():
    x = np.random.default_rng(4).normal(3.0, 5.0, size=(5, 64))
    y = T.layernorm(x, np.ones(64), np.zeros(64), eps=1e-12)
    assert np.max(np.abs(y.mean(axis=-1))) <= 1e-12
    assert np.max(np.abs(y.var(axis=-1) - 1.0)) <= 1e-9


def test_layernorm_shape_errors():
    with pytest.raises(DimensionError):
        T.layernorm(np.ones((2, 3)), np.ones(4), np.zeros(4))


# --- vjps -----------------------------------------------------------------


def test_vjp_matmul_zero_upstream():
    rng = np.random.default_rng(5)
    ga, gb = T.vjp_matmul(rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), np.zeros((3, 2)))
    assert not ga.any() and not gb.any()


def test_vjp_gelu_at_zero():
    assert T.vjp_gelu(0.0, 1.0) == 0.5


def test_vjp_shape_errors():
    with pytest.raises(DimensionError):
        T.vjp_matmul(np.ones((3, 4)), np.ones((4, 2)), np.ones((3, 3)))
    with pytest.raises(DimensionError):
        T.vjp_gelu(np.ones(3), np.ones(4))
    with pytest.raises(DimensionError):
        T.vjp_softmax_rows(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        T.vjp_transpose(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        T.vjp_layernorm(np.ones((2, 3)), np.ones(3), np.zeros(3), np.ones((3, 2)))
    with pytest.raises(DimensionError):
        T.vjp_reshape(np.ones((2, 3)), np.ones(5))
    with pytest.raises(DimensionError):
        T.vjp_add(np.ones((2, 3)), np.ones(3), np.ones((3, 3)))


def fd_cases(seed=0):
    """(name, scalar function of the inputs, inputs, analytic gradients) per vjp."""
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    g = rng.normal(size=(2, 3, 5))
    yield "matmul.a", lambda a_: np.sum(T.matmul(a_, b) * g), a, T.vjp_matmul(a, b, g)[0]
    yield "matmul.b", lambda b_: np.sum(T.matmul(a, b_) * g), b, T.vjp_matmul(a, b, g)[1]
    bb = rng.normal(size=(2, 4, 5))
    yield "matmul.batched_b", lambda b_: np.sum(T.matmul(a, b_) * g), bb, T.vjp_matmul(a, bb, g)[1]

    x = rng.normal(size=(3, 6)) * 2
    gs = rng.normal(size=(3, 6))
    p = T.softmax_rows(x)
    yield "softmax", lambda x_: np.sum(T.softmax_rows(x_) * gs), x, T.vjp_softmax_rows(p, gs)
    yield "gelu", lambda x_: np.sum(T.gelu(x_) * gs), x, T.vjp_gelu(x, gs)

    gamma, beta = rng.normal(size=6), rng.normal(size=6)
    dx, dgam, dbet = T.vjp_layernorm(x, gamma, beta, gs)
    yield "layernorm.x", lambda x_: np.sum(T.layernorm(x_, gamma, beta) * gs), x, dx
    yield "layernorm.gamma", lambda g_: np.sum(T.layernorm(x, g_, beta) * gs), gamma, dgam
    yield "layernorm.beta", lambda b_: np.sum(T.layernorm(x, gamma, b_) * gs), beta, dbet

    u, v = rng.normal(size=(3, 6)), rng.normal(size=(6,))
    du, dv = T.vjp_add(u, v, gs)
    yield "add.a", lambda u_: np.sum(T.add(u_, v) * gs), u, du
    yield "add.b", lambda v_: np.sum(T.add(u, v_) * gs), v, dv

    gt = rng.normal(size=(6, 3))
    yield "transpose", lambda x_: np.sum(T.transpose(x_) * gt), x, T.vjp_transpose(x, gt)
    gr = rng.normal(size=(2, 9))
    yield "reshape", lambda x_: np.sum(T.reshape(x_, (2, 9)) * gr), x, T.vjp_reshape(x, gr)


@pytest.mark.parametrize("case", list(fd_cases()), ids=lambda c: c[0])
def test_vjp_matches_finite_differences(case):
    _, f, x, analytic = case
    assert rel_err(central_diff(f, x), analytic) <= 1e-6


def test_vjp_layernorm_constant_row_finite():
    x = np.full((2, 5), 7.0)
    dx, _, _ = T.vjp_layernorm(x, np.ones(5), np.zeros(5), np.ones((2, 5)))
    assert np.all(np.isfinite(dx))

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gmfreg import diffcore as dc
from gmfreg.diffcore import ContractError, GroupConvKernel, ShapeError, Tape

finite = st.floats(-1e3, 1e3, allow_nan=False, width=32)


def run(fn, *arrays_, dtype=np.float32):
    tape = Tape(dtype)
    nodes = [tape.const(a) for a in arrays_]
    return fn(*nodes).value


def test_matmul_identity_and_scalar():
    M = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(run(dc.matmul, np.eye(3), M), M)
    assert run(dc.matmul, [[2.0]], [[3.0]])[0, 0] == 6.0


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(7, 5)).astype(np.float32)
    b = rng.normal(size=(5, 4)).astype(np.float32)
    ref = np.zeros((7, 4))
    for i in range(7):
        for j in range(4):
            for t in range(5):
                ref[i, j] += float(a[i, t]) * float(b[t, j])
    assert np.abs(run(dc.matmul, a, b) - ref).max() < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        run(dc.matmul, np.ones((2, 3)), np.ones((2, 3)))


def test_softmax_examples():
    np.testing.assert_allclose(run(dc.softmax_rows, [[0.0, 0.0]]), [[0.5, 0.5]])
    for c in (-50.0, 0.0, 7.5):
        np.testing.assert_allclose(run(dc.softmax_rows, [[c, c, c]]), [[1 / 3] * 3], rtol=1e-6)


def test_softmax_large_entries_vs_extended_precision():
    out = run(dc.softmax_rows, [[1000.0, 0.0]])
    assert np.all(np.isfinite(out))
    with mpmath.workdps(50):
        e = [mpmath.e ** mpmath.mpf(1000), mpmath.mpf(1)]
        ref = [float(x / (e[0] + e[1])) for x in e]
    np.testing.assert_allclose(out[0], ref, atol=1e-7)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 9)), elements=finite))
def test_softmax_rows_sum_to_one(x):
    out = run(dc.softmax_rows, x)
    assert np.all(out >= 0)
    assert np.abs(out.sum(axis=1) - 1).max() < 1e-6


def test_gelu_values():
    assert run(dc.gelu, [[0.0]])[0, 0] == 0.0
    assert abs(run(dc.gelu, [[10.0]], dtype=np.float64)[0, 0] - 10.0) < 1e-6
    with mpmath.workdps(40):
        ref = float(mpmath.mpf(1) * (1 + mpmath.erf(1 / mpmath.sqrt(2))) / 2)
    assert abs(run(dc.gelu, [[1.0]], dtype=np.float64)[0, 0] - ref) < 1e-15
    assert abs(run(dc.gelu, [[1.0]])[0, 0] - ref) < 1e-6


def test_layer_norm_examples():
    ones, zeros = np.ones(4), np.zeros(4)
    out = run(lambda x, g, b: dc.layer_norm(x, g, b), np.full((1, 4), 3.0), ones, zeros)
    np.testing.assert_array_equal(out, np.zeros((1, 4)))
    row = np.array([[-1.0, 1.0, -1.0, 1.0]])
    out = run(lambda x, g, b: dc.layer_norm(x, g, b), row, ones, zeros, dtype=np.float64)
    np.testing.assert_allclose(out, row, atol=1e-5)


def test_layer_norm_vs_direct_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(3, 7))
    g, b = rng.normal(size=7), rng.normal(size=7)
    mu = x.mean(axis=1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=1, keepdims=True)
    ref = (x - mu) / np.sqrt(var + 1e-5) * g + b
    out = run(lambda *a: dc.layer_norm(*a), x.astype(np.float32), g.astype(np.float32), b.astype(np.float32))
    assert np.abs(out - ref).max() < 1e-6 * max(1.0, np.abs(ref).max()) * 10


def naive_group_conv(f, w):
    m, c = f.shape
    k = w.shape[1]
    r = k // 2
    out = np.zeros((m, c))
    for ch in range(c):
        for i in range(m):
            for j in range(k):
                src = i + j - r
                if 0 <= src < m:
                    out[i, ch] += float(f[src, ch]) * float(w[ch, j])
    return out


def test_group_conv_delta_is_identity_exactly():
    f = np.random.default_rng(2).normal(size=(6, 4)).astype(np.float32)
    out = run(dc.group_conv1d, f, GroupConvKernel.delta(4).weights)
    np.testing.assert_array_equal(out, f)


def test_group_conv_box_filter_boundaries():
    f = np.full((5, 2), 3.0, dtype=np.float32)
    out = run(dc.group_conv1d, f, np.full((2, 3), 1 / 3, dtype=np.float32))
    np.testing.assert_allclose(out[1:-1], 3.0, rtol=1e-6)
    np.testing.assert_allclose(out[[0, -1]], 2.0, rtol=1e-6)


def test_group_conv_vs_naive_loop():
    rng = np.random.default_rng(3)
    for k in (1, 3, 5):
        f = rng.normal(size=(9, 4)).astype(np.float32)
        w = rng.normal(size=(4, k)).astype(np.float32)
        assert np.abs(run(dc.group_conv1d, f, w) - naive_group_conv(f, w)).max() < 1e-6


def test_group_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        run(dc.group_conv1d, np.ones((4, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError):
        GroupConvKernel(np.ones((2, 4)))


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 8),
    st.integers(1, 4),
    st.sampled_from([1, 3, 5]),
    st.floats(-3, 3),
    st.floats(-3, 3),
    st.integers(0, 2**32 - 1),
)
def test_group_conv_is_linear(m, c, k, alpha, beta, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(2, m, c))
    w = rng.normal(size=(c, k))
    lhs = run(dc.group_conv1d, alpha * A + beta * B, w, dtype=np.float64)
    rhs = alpha * run(dc.group_conv1d, A, w, dtype=np.float64) + beta * run(dc.group_conv1d, B, w, dtype=np.float64)
    assert np.abs(lhs - rhs).max() < 1e-5


def test_mlp_forward_examples():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, 3))
    b = np.array([1.0, -2.0])
    tape = Tape(np.float64)
    out = dc.mlp_forward(tape.const(x), [tape.const(np.zeros((3, 2)))], [tape.const(b)], [None]).value
    np.testing.assert_array_equal(out, np.tile(b, (5, 1)))

    w = rng.normal(size=(3, 2))
    out = dc.mlp_forward(tape.const(x), [tape.const(w)], [tape.const(b)], [None]).value
    np.testing.assert_allclose(out, x @ w + b, atol=1e-12)

    w0, b0, w1, b1 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 2)), rng.normal(size=2)
    from scipy.special import erf

    h = x @ w0 + b0
    ref = (h * 0.5 * (1 + erf(h / np.sqrt(2)))) @ w1 + b1
    tape = Tape(np.float32)
    c = tape.const
    out = dc.mlp_forward(c(x), [c(w0), c(w1)], [c(b0), c(b1)], ["gelu", None]).value
    assert np.abs(out - ref).max() < 1e-5


def test_mlp_shape_error():
    tape = Tape()
    with pytest.raises(ShapeError):
        dc.mlp_forward(tape.const(np.ones((2, 3))), [tape.const(np.ones((4, 2)))], [tape.const(np.ones(2))], [None])


def test_backward_identity_and_square():
    tape = Tape(np.float64)
    x = tape.leaf([[3.0]])
    assert dc.backward(tape, x)[x.id][0, 0] == 1.0
    tape = Tape(np.float64)
    v = np.array([[1.0, -2.0, 0.5]])
    x = tape.leaf(v)
    np.testing.assert_allclose(dc.backward(tape, (x * x).sum())[x.id], 2 * v)


def test_backward_rejects_non_scalar_and_zero_fills_unused():
    tape = Tape(np.float64)
    x = tape.leaf(np.ones((2, 2)))
    unused = tape.leaf(np.ones((3, 1)))
    with pytest.raises(ContractError):
        dc.backward(tape, x * x)
    g = dc.backward(tape, (x * x).sum())
    np.testing.assert_array_equal(g[unused.id], np.zeros((3, 1)))


def test_grad_check_quadratic_and_linear():
    a = np.array([[1.5, -0.3, 2.0]])

    def quad(L):
        x = L["x"]
        return (x * x).sum() + (x * x.tape.const(a)).sum()

    assert dc.grad_check(quad, {"x": np.array([[0.2, -1.0, 3.0]])}, eps=1e-5) < 1e-8
    lin = lambda L: (L["x"] * L["x"].tape.const(a)).sum()
    assert dc.grad_check(lin, {"x": np.array([[0.2, -1.0, 3.0]])}, eps=1e-5) < 1e-9


def test_grad_check_detects_corruption():
    f = lambda L: (L["x"] * L["x"]).sum()

    def corrupt(g):
        g["x"].flat[0] += 0.5

    assert dc.grad_check(f, {"x": np.array([[1.0, 2.0]])}, corrupt=corrupt, ladder=(100, 10, 1)) > 0.1


@pytest.mark.parametrize(
    "name,build",
    [
        ("matmul", lambda L: (L["a"] @ L["b"]).sum()),
        ("softmax", lambda L: (dc.softmax_rows(L["a"]) * L["a"]).sum()),
        ("gelu", lambda L: (dc.gelu(L["a"]) * L["a"]).sum()),
        ("layer_norm", lambda L: (dc.layer_norm(L["a"], L["g"], L["h"]) * L["a"]).sum()),
        ("group_conv", lambda L: (dc.group_conv1d(L["a"], L["k"]) * L["a"]).sum()),
        ("im2col", lambda L: (dc.im2col(L["img"], 4, 4) @ L["c"]).sum()),
        ("concat", lambda L: (dc.concat_cols([L["a"], L["a"] * L["a"]]) @ L["d"]).sum()),
        ("sigmoid", lambda L: (dc.sigmoid(L["a"]) * L["a"]).sum()),
        ("transpose", lambda L: (L["a"].T @ L["a"]).sum()),
        ("bias", lambda L: (dc.add_bias(L["a"], L["g"]) * L["a"]).sum()),
        ("bce", lambda L: dc.bce_with_logits(L["a"], L["a"].tape.const(np.eye(3, 4)))),
    ],
)
def test_every_primitive_gradient(name, build):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    params = {
        "a": rng.normal(size=(3, 4)),
        "b": rng.normal(size=(4, 2)),
        "g": rng.normal(size=4),
        "h": rng.normal(size=4),
        "k": rng.normal(size=(4, 3)),
        "img": rng.normal(size=(16, 2)),
        "c": rng.normal(size=(18, 2)),
        "d": rng.normal(size=(8, 2)),
    }
    assert dc.grad_check(build, params) < 1e-6


def test_replay_is_bit_identical():
    rng = np.random.default_rng(5)
    tape = Tape(np.float32)
    x = tape.leaf(rng.normal(size=(4, 3)))
    w = tape.leaf(rng.normal(size=(3, 3)))
    y = dc.softmax_rows(dc.gelu(x @ w))
    z = dc.layer_norm(y, tape.leaf(np.ones(3)), tape.leaf(np.zeros(3)))
    values = tape.replay()
    np.testing.assert_array_equal(values[z.id], z.value)
    assert values[z.id].dtype == np.float32


def test_replay_substitutes_leaves():
    tape = Tape(np.float64)
    x = tape.leaf([[1.0, 2.0]])
    y = (x * x).sum()
    assert tape.replay({x.id: np.array([[3.0, 4.0]])})[y.id][0, 0] == 25.0


def test_mixed_tapes_rejected():
    a, b = Tape(), Tape()
    with pytest.raises(ContractError):
        dc.add(a.leaf([[1.0]]), b.leaf([[1.0]]))

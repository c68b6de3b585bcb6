import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stvid import numerics as nx
from stvid.numerics import NonFiniteError, Tensor, grad_check


def conv2d_loops(x, k, ph, pw):
    N, C, H, W = x.shape
    O, _, kh, kw = k.shape
    Ho, Wo = H + 2 * ph - kh + 1, W + 2 * pw - kw + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for a in range(kh):
                            for b in range(kw):
                                ii, jj = i + a - ph, j + b - pw
                                if 0 <= ii < H and 0 <= jj < W:
                                    acc += k[o, c, a, b] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def conv1d_time_loops(x, k, pad):
    T, C, H, W = x.shape
    O, _, kt = k.shape
    To = T + 2 * pad - kt + 1
    out = np.zeros((To, O, H, W))
    for t in range(To):
        for o in range(O):
            for h in range(H):
                for w in range(W):
                    acc = 0.0
                    for c in range(C):
                        for q in range(kt):
                            src = t + q - pad
                            if 0 <= src < T:
                                acc += k[o, c, q] * x[src, c, h, w]
                    out[t, o, h, w] = acc
    return out


def attention_oracle(q, k, v):
    L, D = q.shape
    out = np.zeros_like(v)
    for i in range(L):
        scores = [sum(q[i, d] * k[j, d] for d in range(D)) / np.sqrt(D) for j in range(L)]
        m = max(scores)
        w = [np.exp(s - m) for s in scores]
        z = sum(w)
        for j in range(L):
            out[i] += (w[j] / z) * v[j]
    return out


# conv2d ---------------------------------------------------------------------

def test_conv2d_delta_kernel_is_identity(backend, rng):
    x = rng.standard_normal((2, 3, 5, 4))
    k = np.zeros((3, 3, 3, 3))
    for c in range(3):
        k[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(nx.conv2d(x, k, pad=1).data, x)


def test_conv2d_zero_kernel(backend, rng):
    x = rng.standard_normal((1, 2, 4, 4))
    out = nx.conv2d(x, np.zeros((5, 2, 3, 3)), pad=1)
    assert out.shape == (1, 5, 4, 4)
    assert not out.data.any()


def test_conv2d_matches_loop_oracle(backend, rng):
    x = rng.standard_normal((1, 1, 4, 4))
    k = rng.standard_normal((1, 1, 3, 3))
    np.testing.assert_allclose(nx.conv2d(x, k, pad=1).data, conv2d_loops(x, k, 1, 1), rtol=0, atol=1e-12)


@pytest.mark.parametrize("shape,kshape,pad", [
    ((2, 3, 5, 5), (4, 3, 3, 3), (1, 1)),
    ((1, 2, 4, 5), (2, 2, 3, 1), (0, 0)),
    ((3, 1, 5, 3), (2, 1, 5, 3), (2, 1)),
])
def test_conv2d_loop_oracle_shapes(backend, rng, shape, kshape, pad):
    x = rng.standard_normal(shape)
    k = rng.standard_normal(kshape)
    np.testing.assert_allclose(nx.conv2d(x, k, pad=pad).data, conv2d_loops(x, k, *pad), atol=1e-12)


def test_conv2d_shape_errors():
    with pytest.raises(ValueError, match="channel axis C"):
        nx.conv2d(np.zeros((1, 3, 4, 4)), np.zeros((2, 2, 3, 3)), pad=1)
    with pytest.raises(ValueError, match="odd"):
        nx.conv2d(np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 2, 2)))


def test_conv2d_grad(backend, rng):
    x = rng.standard_normal((2, 2, 4, 4))
    k = rng.standard_normal((3, 2, 3, 3))
    assert grad_check(lambda t: nx.sum(nx.square(nx.conv2d(t, k, pad=1))), x) < 1e-6
    assert grad_check(lambda t: nx.sum(nx.square(nx.conv2d(x, t, pad=1))), k) < 1e-6


# conv1d_time ------------------------------------------------------------------

def test_conv1d_time_delta(backend, rng):
    x = rng.standard_normal((5, 2, 3, 3))
    k = np.zeros((2, 2, 3))
    k[0, 0, 1] = k[1, 1, 1] = 1.0
    np.testing.assert_array_equal(nx.conv1d_time(x, k, pad=1).data, x)


def test_conv1d_time_constant_signal_interior(backend, rng):
    frame = rng.standard_normal((2, 3, 3))
    x = np.repeat(frame[None], 6, axis=0)
    k = rng.standard_normal((3, 2, 3))
    out = nx.conv1d_time(x, k, pad=1).data
    expect = np.einsum("oc,chw->ohw", k.sum(axis=2), frame)
    for t in range(1, 5):
        np.testing.assert_allclose(out[t], expect, atol=1e-12)


def test_conv1d_time_loop_oracle(backend, rng):
    x = rng.standard_normal((5, 2, 3, 2))
    k = rng.standard_normal((3, 2, 3))
    np.testing.assert_allclose(nx.conv1d_time(x, k, pad=1).data, conv1d_time_loops(x, k, 1), atol=1e-12)
    k5 = rng.standard_normal((2, 2, 5))
    np.testing.assert_allclose(nx.conv1d_time(x, k5, pad=0).data, conv1d_time_loops(x, k5, 0), atol=1e-12)


def test_conv1d_time_kernel_too_long():
    with pytest.raises(ValueError, match="kt=7"):
        nx.conv1d_time(np.zeros((4, 1, 2, 2)), np.zeros((1, 1, 7)), pad=1)


def test_conv1d_time_grad(backend, rng):
    x = rng.standard_normal((5, 2, 2, 3))
    k = rng.standard_normal((3, 2, 3))
    assert grad_check(lambda t: nx.sum(nx.square(nx.conv1d_time(t, k, pad=1))), x) < 1e-6
    assert grad_check(lambda t: nx.sum(nx.square(nx.conv1d_time(x, t, pad=1))), k) < 1e-6


# attention --------------------------------------------------------------------

def test_attention_single_position(rng):
    q, k, v = (rng.standard_normal((1, 4)) for _ in range(3))
    np.testing.assert_allclose(nx.attention(q, k, v).data, v, atol=1e-15)


def test_attention_uniform_scores_average_values(rng):
    v = rng.standard_normal((5, 3))
    q = np.zeros((5, 3))
    k = rng.standard_normal((5, 3))
    np.testing.assert_allclose(nx.attention(q, k, v).data, np.tile(v.mean(axis=0), (5, 1)), atol=1e-14)


def test_attention_oracle(rng):
    q, k, v = (rng.standard_normal((3, 2)) for _ in range(3))
    np.testing.assert_allclose(nx.attention(q, k, v).data, attention_oracle(q, k, v), atol=1e-12)


def test_attention_rows_sum_to_one(rng):
    q, k = rng.standard_normal((4, 6, 3)), rng.standard_normal((4, 6, 3))
    eye = np.tile(np.eye(6), (4, 1, 1))
    # with v = identity rows, the output rows are the attention weights themselves
    v6 = rng.standard_normal((4, 6, 6))
    w = nx.attention(np.concatenate([q, q], axis=2), np.concatenate([k, k], axis=2), eye).data
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    assert v6.shape == (4, 6, 6)


def test_attention_empty():
    with pytest.raises(ValueError, match="positive"):
        nx.attention(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)))


def test_attention_grad(rng):
    q, k, v = (rng.standard_normal((2, 3, 2)) for _ in range(3))
    w = rng.standard_normal((2, 3, 2))

    def loss(which):
        def f(t):
            args = [q, k, v]
            args[which] = t
            return nx.sum(nx.mul(nx.attention(*args), Tensor(w)))
        return f

    for i, arr in enumerate((q, k, v)):
        assert grad_check(loss(i), arr) < 1e-6


# resize_nearest -----------------------------------------------------------------

def test_resize_down_definition():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    np.testing.assert_array_equal(nx.resize_nearest(x, 0, "down").data, [1.0, 3.0])
    np.testing.assert_array_equal(nx.resize_nearest(x, 0, "up").data, [1, 1, 2, 2, 3, 3, 4, 4])


def test_resize_roundtrip_on_axis_constant(rng):
    x = np.repeat(rng.standard_normal((3, 1, 5)), 4, axis=1)
    up = nx.resize_nearest(nx.resize_nearest(x, 1, "down"), 1, "up")
    np.testing.assert_array_equal(up.data, x)


def test_resize_up_grad_is_two():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.sum(nx.resize_nearest(x, 1, "up")).backward()
    np.testing.assert_array_equal(x.grad, 2.0)
    # finite differences agree
    assert grad_check(lambda t: nx.sum(nx.resize_nearest(t, 1, "up")), x.data) < 1e-9


def test_resize_odd_down():
    with pytest.raises(ValueError, match="odd extent 5"):
        nx.resize_nearest(np.zeros((5, 2)), 0, "down")


def test_resize_down_grad(rng):
    x = rng.standard_normal((4, 2, 3))
    w = rng.standard_normal((2, 2, 3))
    assert grad_check(lambda t: nx.sum(nx.mul(nx.resize_nearest(t, 0, "down"), Tensor(w))), x) < 1e-8


# grad_check itself ----------------------------------------------------------

def test_grad_check_sum_exact(rng):
    # integer inputs and a power-of-two step keep every difference exact
    x = rng.integers(-8, 8, size=(3, 4)).astype(float)
    assert grad_check(lambda t: nx.sum(t), x, eps=2.0**-17) == 0.0
    assert grad_check(lambda t: nx.sum(t), rng.standard_normal((3, 4))) < 1e-9


def test_grad_check_square(rng):
    assert grad_check(lambda t: nx.sum(nx.square(t)), rng.standard_normal((3, 4)), eps=1e-5) < 1e-9


def test_grad_check_nonfinite():
    with pytest.raises(NonFiniteError):
        grad_check(lambda t: nx.sum(nx.scale(t, np.inf)), np.ones(3))


def test_grad_check_composite_chain(backend, rng):
    x = rng.standard_normal((2, 2, 4, 4))
    k2 = rng.standard_normal((2, 2, 3, 3)) * 0.5
    kt = rng.standard_normal((2, 2, 3)) * 0.5
    target = rng.standard_normal((16, 2, 2))

    def f(t):
        h = nx.silu(nx.conv2d(t, k2, pad=1))
        h = nx.conv1d_time(h, kt, pad=1)  # the two items act as frames
        seq = nx.reshape(nx.transpose(h, (2, 3, 0, 1)), (16, 2, 2))
        return nx.mse(nx.attention(seq, seq, seq), Tensor(target))

    assert grad_check(f, x) < 1e-3


# the remaining ops: delta / zero / oracle triples --------------------------------

def test_matmul_triples(rng):
    a = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(nx.matmul(a, np.eye(4)).data, a)
    assert not nx.matmul(a, np.zeros((4, 2))).data.any()
    b = rng.standard_normal((4, 2))
    oracle = np.array([[sum(a[i, k] * b[k, j] for k in range(4)) for j in range(2)] for i in range(3)])
    np.testing.assert_allclose(nx.matmul(a, b).data, oracle, atol=1e-12)
    assert grad_check(lambda t: nx.sum(nx.square(nx.matmul(t, b))), a) < 1e-8
    assert grad_check(lambda t: nx.sum(nx.square(nx.matmul(a, t))), b) < 1e-8
    a3 = rng.standard_normal((2, 3, 4))
    assert grad_check(lambda t: nx.sum(nx.square(nx.matmul(a3, t))), b) < 1e-8


def test_group_norm_triples(rng):
    x = rng.standard_normal((2, 4, 3, 3))
    ones, zeros = np.ones(4), np.zeros(4)
    out = nx.group_norm(x, 2, ones, zeros).data
    g = out.reshape(2, 2, -1)
    np.testing.assert_allclose(g.mean(axis=2), 0.0, atol=1e-12)
    np.testing.assert_allclose(g.var(axis=2), 1.0, atol=1e-4)
    assert not nx.group_norm(x, 1, zeros, zeros).data.any()
    # oracle: per item, per group, (x - mean) / sqrt(var + eps)
    manual = np.empty_like(x)
    for n in range(2):
        for grp in range(2):
            blk = x[n, 2 * grp:2 * grp + 2]
            manual[n, 2 * grp:2 * grp + 2] = (blk - blk.mean()) / np.sqrt(blk.var() + 1e-5)
    np.testing.assert_allclose(out, manual, atol=1e-12)
    gam, bet = rng.standard_normal(4), rng.standard_normal(4)
    w = rng.standard_normal(x.shape)
    assert grad_check(lambda t: nx.sum(nx.mul(nx.group_norm(t, 2, gam, bet), Tensor(w))), x) < 1e-5
    assert grad_check(lambda t: nx.sum(nx.mul(nx.group_norm(x, 1, t, bet), Tensor(w))), gam) < 1e-6
    assert grad_check(lambda t: nx.sum(nx.mul(nx.group_norm(x, 1, gam, t), Tensor(w))), bet) < 1e-6


def test_silu_triples(rng):
    assert nx.silu(np.zeros(3)).data.tolist() == [0.0, 0.0, 0.0]
    x = rng.standard_normal(7)
    np.testing.assert_allclose(nx.silu(x).data, [v / (1 + np.exp(-v)) for v in x], atol=1e-15)
    assert grad_check(lambda t: nx.sum(nx.silu(t)), x) < 1e-8


def test_elementwise_triples(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 3))
    np.testing.assert_array_equal(nx.add(a, np.zeros((2, 3))).data, a)
    np.testing.assert_array_equal(nx.mul(a, np.ones((2, 3))).data, a)
    assert not nx.mul(a, np.zeros((2, 3))).data.any()
    np.testing.assert_array_equal(nx.add(a, b).data, a + b)
    np.testing.assert_array_equal(nx.sub(a, b).data, a - b)
    assert grad_check(lambda t: nx.sum(nx.mul(t, Tensor(b))), a) < 1e-9
    assert grad_check(lambda t: nx.sum(nx.square(nx.sub(Tensor(b), t))), a) < 1e-8
    with pytest.raises(ValueError, match="shape mismatch"):
        nx.add(np.zeros(3), np.zeros(4))


def test_reductions(rng):
    x = rng.standard_normal((3, 4))
    assert nx.sum(np.zeros((3, 4))).item() == 0.0
    assert nx.mean(x).item() == pytest.approx(x.mean(), abs=1e-15)
    np.testing.assert_allclose(nx.sum(x, axis=1).data, x.sum(axis=1))
    w = rng.standard_normal(4)
    assert grad_check(lambda t: nx.sum(nx.mul(nx.mean(t, axis=0), Tensor(w))), x) < 1e-9


def test_concat_and_layout_ops(rng):
    a, b = rng.standard_normal((2, 3, 2)), rng.standard_normal((2, 1, 2))
    out = nx.concat([a, b], axis=1)
    np.testing.assert_array_equal(out.data[:, :3], a)
    np.testing.assert_array_equal(out.data[:, 3:], b)
    assert not nx.concat([np.zeros((1, 2)), np.zeros((1, 1))]).data.any()
    w = rng.standard_normal((2, 4, 2))
    assert grad_check(lambda t: nx.sum(nx.mul(nx.concat([t, b], axis=1), Tensor(w))), a) < 1e-9
    with pytest.raises(ValueError, match="differ off axis"):
        nx.concat([np.zeros((2, 1)), np.zeros((3, 1))], axis=1)
    w2 = rng.standard_normal((2, 2, 3))
    assert grad_check(lambda t: nx.sum(nx.mul(nx.transpose(t, (2, 0, 1)), Tensor(w2))), a) < 1e-9


def test_add_channel(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    v = rng.standard_normal(3)
    np.testing.assert_array_equal(nx.add_channel(x, v).data, x + v[None, :, None, None])
    w = rng.standard_normal(x.shape)
    assert grad_check(lambda t: nx.sum(nx.mul(nx.add_channel(x, t), Tensor(w))), v) < 1e-7
    vn = rng.standard_normal((2, 3))
    assert grad_check(lambda t: nx.sum(nx.mul(nx.add_channel(x, t), Tensor(w))), vn) < 1e-7
    with pytest.raises(ValueError):
        nx.add_channel(x, np.zeros(4))


# graph invariants --------------------------------------------------------------

def test_backward_visits_shared_nodes_once():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nx.mul(x, x)
    z = nx.add(y, y)  # dz/dx = 4x
    nx.sum(z).backward()
    assert x.grad.tolist() == [8.0]


def test_nonfinite_is_hard_error():
    with pytest.raises(NonFiniteError, match="scale"):
        nx.scale(np.ones(2), np.nan)


def test_rank_limit():
    with pytest.raises(ValueError, match="rank"):
        Tensor(np.zeros((1,) * 6))


def test_determinism(backend, rng):
    x = rng.standard_normal((3, 4, 6, 6))
    k = rng.standard_normal((5, 4, 3, 3))
    a = nx.conv2d(x, k, pad=1).data
    b = nx.conv2d(x.copy(), k.copy(), pad=1).data
    assert a.tobytes() == b.tobytes()


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3),
    h=st.integers(2, 4), w=st.integers(2, 4), seed=st.integers(0, 2**16),
)
def test_conv2d_grad_property(n, c, o, h, w, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w))
    k = r.standard_normal((o, c, 3, 3))
    wt = r.standard_normal((n, o, h, w))
    assert grad_check(lambda t: nx.sum(nx.mul(nx.conv2d(t, k, pad=1), Tensor(wt))), x) < 1e-3
    assert grad_check(lambda t: nx.sum(nx.mul(nx.conv2d(x, t, pad=1), Tensor(wt))), k) < 1e-3


@settings(max_examples=25, deadline=None)
@given(t=st.integers(3, 5), c=st.integers(1, 3), seed=st.integers(0, 2**16))
def test_kernel_backends_agree(t, c, seed):
    from stvid.numerics import kernels
    names = kernels.available_backends()
    r = np.random.default_rng(seed)
    x = r.standard_normal((t, c, 3, 4))
    k1 = r.standard_normal((2, c, 3))
    k2 = r.standard_normal((2, c, 3, 3))
    outs = [
        (kernels.get_backend(n).conv1d_time_forward(x, k1, 1), kernels.get_backend(n).conv2d_forward(x, k2, 1, 1))
        for n in names
    ]
    for a, b in outs[1:]:
        np.testing.assert_allclose(a, outs[0][0], atol=1e-12)
        np.testing.assert_allclose(b, outs[0][1], atol=1e-12)

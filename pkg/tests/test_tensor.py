"""Tensor core: op semantics against hand-rolled oracles, then gradients
against central differences."""

import numpy as np
import pytest

from memseg import tensor as T
from memseg.errors import ContractError, DimensionError, NonFiniteError


def test_tensor_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        T.Tensor([1.0, np.inf])
    with pytest.raises(NonFiniteError):
        T.Tensor([[np.nan]])


def test_tensor_rejects_empty():
    with pytest.raises(DimensionError):
        T.Tensor(np.zeros((0, 3)))


def test_op_output_nonfinite_is_caught():
    with pytest.raises(NonFiniteError):
        T.div(T.tensor([1.0]), T.tensor([0.0]))


# ---------------------------------------------------------------------------
# matmul


def test_matmul_identity():
    a = T.tensor([[1.0, 2.0], [3.0, 4.0]])
    out = T.matmul(T.tensor(np.eye(2)), a)
    np.testing.assert_array_equal(out.data, a.data)


def test_matmul_projection_row():
    out = T.matmul(T.tensor([[1.0, 0.0], [0.0, 0.0]]), T.tensor([[5.0], [7.0]]))
    np.testing.assert_array_equal(out.data, [[5.0], [0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(7)
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (4, 2))
    want = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = T.matmul(T.Tensor(a), T.Tensor(b)).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-13)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))
    with pytest.raises(DimensionError):
        T.matmul(T.tensor(np.ones(3)), T.tensor(np.ones((3, 1))))


# ---------------------------------------------------------------------------
# softmax family


def test_softmax_uniform_and_single():
    np.testing.assert_allclose(T.softmax_lastdim(T.tensor([0.0, 0.0, 0.0])).data,
                               [1 / 3, 1 / 3, 1 / 3], atol=1e-15)
    np.testing.assert_array_equal(T.softmax_lastdim(T.tensor([4.2])).data, [1.0])


def test_softmax_matches_high_precision():
    # frozen from a 40-digit evaluation of exp(x_i)/sum exp(x_j)
    want = [0.090030573170380457998, 0.24472847105479765247, 0.66524095577482188953]
    got = T.softmax_lastdim(T.tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-15)


def test_log_softmax_matches_high_precision():
    want = [-2.4076059644443803045, -1.4076059644443803045, -0.40760596444438030448]
    got = T.log_softmax_lastdim(T.tensor([1.0, 2.0, 3.0])).data
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-14)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(11)
    x = rng.uniform(-5, 5, (6, 9))
    s = T.softmax_lastdim(T.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert (s >= 0).all()
    shifted = T.softmax_lastdim(T.Tensor(x + 3.7)).data
    np.testing.assert_allclose(shifted, s, rtol=0, atol=1e-12)


def test_masked_softmax_rows_semantics():
    x = T.tensor([[1.0, 2.0, 3.0], [5.0, -1.0, 0.5]])
    mask = np.array([[True, False, True], [False, False, False]])
    out = T.masked_softmax_rows(x, mask).data
    e = np.exp([1.0, 3.0])
    np.testing.assert_allclose(out[0], [e[0] / e.sum(), 0.0, e[1] / e.sum()], atol=1e-15)
    np.testing.assert_array_equal(out[1], 0.0)  # empty row stays zero, no NaN


def test_attention_matches_composition():
    rng = np.random.default_rng(3)
    q = T.Tensor(rng.uniform(-1, 1, (5, 3)))
    k = T.Tensor(rng.uniform(-1, 1, (6, 3)))
    v = T.Tensor(rng.uniform(-1, 1, (6, 4)))
    fused = T.attention(q, k, v).data
    composed = T.matmul(T.softmax_lastdim(T.matmul(q, T.transpose(k))), v).data
    np.testing.assert_allclose(fused, composed, rtol=0, atol=1e-14)


# ---------------------------------------------------------------------------
# conv2d


def test_conv2d_identity_channel_mix():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (4, 6, 3))
    kern = np.eye(3).reshape(1, 1, 3, 3)
    out = T.conv2d(T.Tensor(x), T.Tensor(kern)).data
    np.testing.assert_allclose(out, x, rtol=0, atol=0)


def test_conv2d_ones_kernel_interior():
    cin = 2
    x = np.full((6, 6, cin), 0.5)
    kern = np.ones((3, 3, cin, 1))
    out = T.conv2d(T.Tensor(x), T.Tensor(kern), stride=1, padding=1).data
    np.testing.assert_allclose(out[1:-1, 1:-1, 0], 9 * 0.5 * cin, rtol=0, atol=1e-12)


def _conv_oracle(x, k, stride, padding):
    h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    xp = np.zeros((h + 2 * padding, w + 2 * padding, cin))
    xp[padding:padding + h, padding:padding + w] = x
    oh = (xp.shape[0] - kh) // stride + 1
    ow = (xp.shape[1] - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for oi in range(oh):
        for oj in range(ow):
            for co in range(cout):
                acc = 0.0
                for ki in range(kh):
                    for kj in range(kw):
                        for ci in range(cin):
                            acc += xp[oi * stride + ki, oj * stride + kj, ci] * k[ki, kj, ci, co]
                out[oi, oj, co] = acc
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_matches_six_loop_oracle(stride, padding):
    rng = np.random.default_rng(17)
    x = rng.uniform(-1, 1, (5, 5, 2))
    k = rng.uniform(-1, 1, (3, 3, 2, 3))
    got = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=padding).data
    np.testing.assert_allclose(got, _conv_oracle(x, k, stride, padding), rtol=0, atol=1e-12)


def test_conv2d_errors():
    x = T.tensor(np.ones((2, 2, 1)))
    with pytest.raises(DimensionError):  # kernel larger than padded input
        T.conv2d(x, T.tensor(np.ones((7, 7, 1, 1))), padding=1)
    with pytest.raises(DimensionError):  # even kernel
        T.conv2d(x, T.tensor(np.ones((2, 2, 1, 1))))
    with pytest.raises(DimensionError):  # channel mismatch
        T.conv2d(x, T.tensor(np.ones((1, 1, 3, 1))))


# ---------------------------------------------------------------------------
# bilinear resize


def _bilerp_oracle(x, oh, ow):
    h, w, c = x.shape
    out = np.zeros((oh, ow, c))
    for di in range(oh):
        si = min(max((di + 0.5) * h / oh - 0.5, 0.0), h - 1.0)
        i0 = int(np.floor(si)); i1 = min(i0 + 1, h - 1); ti = si - i0
        for dj in range(ow):
            sj = min(max((dj + 0.5) * w / ow - 0.5, 0.0), w - 1.0)
            j0 = int(np.floor(sj)); j1 = min(j0 + 1, w - 1); tj = sj - j0
            out[di, dj] = ((1 - ti) * (1 - tj) * x[i0, j0] + (1 - ti) * tj * x[i0, j1]
                           + ti * (1 - tj) * x[i1, j0] + ti * tj * x[i1, j1])
    return out


def test_resize_identity_is_bitwise():
    rng = np.random.default_rng(23)
    x = rng.uniform(-1, 1, (5, 7, 3))
    out = T.bilinear_resize(T.Tensor(x), 5, 7).data
    assert (out == x).all()


def test_resize_constant_stays_constant():
    x = np.full((3, 3, 2), 0.25)
    out = T.bilinear_resize(T.Tensor(x), 8, 5).data
    np.testing.assert_allclose(out, 0.25, rtol=0, atol=1e-15)


def test_resize_checkerboard_matches_oracle():
    x = np.zeros((2, 2, 1))
    x[0, 0, 0] = x[1, 1, 0] = 1.0
    got = T.bilinear_resize(T.Tensor(x), 4, 4).data
    np.testing.assert_allclose(got, _bilerp_oracle(x, 4, 4), rtol=0, atol=1e-15)


@pytest.mark.parametrize("oh,ow", [(2, 9), (7, 3), (4, 4)])
def test_resize_matches_oracle_random(oh, ow):
    rng = np.random.default_rng(29)
    x = rng.uniform(-1, 1, (4, 5, 2))
    got = T.bilinear_resize(T.Tensor(x), oh, ow).data
    np.testing.assert_allclose(got, _bilerp_oracle(x, oh, ow), rtol=0, atol=1e-14)


# ---------------------------------------------------------------------------
# windows


def test_window_single_window_is_input():
    rng = np.random.default_rng(31)
    x = rng.uniform(-1, 1, (4, 4, 2))
    wins = T.window_partition(T.Tensor(x), 4)
    assert len(wins) == 1
    np.testing.assert_array_equal(wins[0].data, x)


def test_window_roundtrip():
    rng = np.random.default_rng(37)
    x = rng.uniform(-1, 1, (4, 4, 3))
    wins = T.window_partition(T.Tensor(x), 2)
    assert len(wins) == 4
    back = T.window_merge(wins, 4, 4, 2)
    np.testing.assert_array_equal(back.data, x)


def test_window_labeled_grid_placement():
    # x[i,j] = 10*i + j makes window provenance readable
    i, j = np.meshgrid(np.arange(6), np.arange(6), indexing="ij")
    x = (10 * i + j).astype(np.float64)[..., None]
    wins = T.window_partition(T.Tensor(x), 3)
    # row-major windows: index 2 is window row 1, col 0 -> rows 3..5, cols 0..2
    np.testing.assert_array_equal(wins[2].data, x[3:6, 0:3])


def test_window_permutation_is_not_identity():
    i, j = np.meshgrid(np.arange(4), np.arange(4), indexing="ij")
    x = (10 * i + j).astype(np.float64)[..., None]
    wins = T.window_partition(T.Tensor(x), 2)
    swapped = [wins[1], wins[0], wins[2], wins[3]]
    merged = T.window_merge(swapped, 4, 4, 2).data
    assert not (merged == x).all()


def test_window_divisibility_error():
    with pytest.raises(DimensionError):
        T.window_partition(T.tensor(np.ones((5, 4, 1))), 2)


def test_window_stack_matches_partition():
    rng = np.random.default_rng(41)
    x = rng.uniform(-1, 1, (6, 6, 2))
    stacked = T.window_stack(T.Tensor(x), 3)
    wins = T.window_partition(T.Tensor(x), 3)
    for w_idx in range(len(wins)):
        np.testing.assert_array_equal(stacked.data[w_idx],
                                      wins[w_idx].data.reshape(9, 2))
    back = T.window_unstack(stacked, 6, 6, 3)
    np.testing.assert_array_equal(back.data, x)


# ---------------------------------------------------------------------------
# cosine similarity


def test_cosine_self_orthogonal_and_known():
    v = np.array([0.3, -0.2, 0.9])
    assert T.cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-12)
    assert T.cosine_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0])) == 0.0
    assert T.cosine_similarity(np.array([1.0, 2.0]),
                               np.array([2.0, 1.0])) == pytest.approx(0.8, abs=1e-12)


def test_cosine_zero_vector_and_errors():
    assert T.cosine_similarity(np.zeros(3), np.ones(3)) == 0.0
    with pytest.raises(DimensionError):
        T.cosine_similarity(np.ones(3), np.ones(4))


# ---------------------------------------------------------------------------
# backward semantics


def test_backward_sum_gives_ones():
    x = T.tensor([[1.0, -2.0], [0.5, 3.0]], requires_grad=True)
    with T.use_tape(T.GradTape()):
        T.backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))


def test_backward_quadratic_and_accumulation():
    xv = np.array([1.0, -2.0, 0.5])
    x = T.Tensor(xv, requires_grad=True)
    with T.use_tape(T.GradTape()):
        loss = T.mul(x, x).sum()
        T.backward(loss)
        np.testing.assert_allclose(x.grad, 2 * xv, atol=1e-15)
        T.backward(loss)  # no reset: same tape adds the same gradient again
        np.testing.assert_allclose(x.grad, 4 * xv, atol=1e-15)


def test_backward_fanout_accumulates():
    x = T.tensor([2.0], requires_grad=True)
    with T.use_tape(T.GradTape()):
        y = T.add(T.mul(x, 3.0), T.mul(x, x))  # 3x + x^2 -> dx = 3 + 2x = 7
        T.backward(y.sum())
    np.testing.assert_allclose(x.grad, [7.0], atol=1e-15)


def test_backward_rejects_nonscalar():
    x = T.tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        T.backward(T.mul(x, 2.0))


def test_backward_composed_conv_softmax_sum():
    rng = np.random.default_rng(43)
    k = T.Tensor(rng.uniform(-1, 1, (3, 3, 2, 2)))
    r = T.Tensor(rng.uniform(-1, 1, (4, 4, 2)))

    def f(x):
        y = T.conv2d(x, k, stride=1, padding=1)
        return (T.softmax_lastdim(y) * r).sum()

    err = T.finite_diff_check(f, T.Tensor(rng.uniform(-1, 1, (4, 4, 2))))
    assert err <= 1e-4


# ---------------------------------------------------------------------------
# finite_diff_check behaviour


def test_finite_diff_linear_is_tight():
    rng = np.random.default_rng(47)
    w = T.Tensor(rng.uniform(-1, 1, (5,)))
    err = T.finite_diff_check(lambda x: (x * w).sum(), T.Tensor(rng.uniform(-1, 1, (5,))))
    assert err <= 1e-10


def test_finite_diff_constant_function_uses_absolute_fallback():
    # sum(softmax(x)) == 1 identically; both gradients ~ 0 and the 1e-8
    # denominator floor keeps the ratio small instead of 0/0
    err = T.finite_diff_check(lambda x: T.softmax_lastdim(x).sum(),
                              T.tensor([0.3, -1.2, 0.7]))
    assert err <= 1e-6


def test_every_op_passes_gradcheck(grad_cases):
    failures = []
    for name, f, probe in grad_cases:
        err = T.finite_diff_check(f, probe)
        if err > 1e-4:
            failures.append((name, err))
    assert not failures, "gradcheck failures: %r" % failures


# ---------------------------------------------------------------------------
# determinism


def test_ops_are_bitwise_deterministic():
    rng = np.random.default_rng(53)
    x = rng.uniform(-1, 1, (6, 6, 2))
    k = rng.uniform(-1, 1, (3, 3, 2, 4))
    a = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).data
    b = T.conv2d(T.Tensor(x), T.Tensor(k), stride=2, padding=1).data
    assert (a == b).all()
    q = rng.uniform(-1, 1, (9, 4))
    s1 = T.attention(T.Tensor(q), T.Tensor(q), T.Tensor(q)).data
    s2 = T.attention(T.Tensor(q), T.Tensor(q), T.Tensor(q)).data
    assert (s1 == s2).all()

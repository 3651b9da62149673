"""Shared fixtures: the per-op gradient-check case list is defined once here
so the module tests and the acceptance suite exercise the same inventory."""

import numpy as np
import pytest

from memseg import tensor as T


def _rand(rng, shape, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, size=shape)


def _away_from_zero(rng, shape, margin=5e-3):
    # kinked ops (relu, abs, max ties) need probes clear of the kink so the
    # central difference at h=1e-5 stays on one side
    x = rng.uniform(margin, 1.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def op_gradcheck_cases(seed=1234):
    """(name, f, probe) triples covering every differentiable op.

    Each f maps the probe tensor to a scalar via a fixed random weighting so
    the whole Jacobian is exercised, not just the row sums. The seed varies
    the probes and weightings; shapes and masks stay fixed.
    """
    rng = np.random.default_rng(seed)
    cases = []

    def weighted(out_shape):
        r = _rand(rng, out_shape)
        return lambda y: (y * T.Tensor(r)).sum()

    # elementwise / broadcasting
    b34 = T.Tensor(_rand(rng, (3, 4)))
    b4 = T.Tensor(_rand(rng, (4,)))
    w34 = weighted((3, 4))
    cases.append(("add_broadcast", lambda x: w34(T.add(x, b4)), T.Tensor(_rand(rng, (3, 4)))))
    cases.append(("sub", lambda x: w34(T.sub(b34, x)), T.Tensor(_rand(rng, (3, 4)))))
    cases.append(("mul_broadcast", lambda x: w34(T.mul(b34, x)), T.Tensor(_rand(rng, (1, 4)))))
    bden = T.Tensor(_rand(rng, (3, 4), 0.5, 1.5))
    cases.append(("div_num", lambda x: w34(T.div(x, bden)), T.Tensor(_rand(rng, (3, 4)))))
    cases.append(("div_den", lambda x: w34(T.div(b34, x)), T.Tensor(_rand(rng, (3, 4), 0.5, 1.5))))
    cases.append(("neg", lambda x: w34(T.neg(x)), T.Tensor(_rand(rng, (3, 4)))))
    cases.append(("relu", lambda x: w34(T.relu(x)), T.Tensor(_away_from_zero(rng, (3, 4)))))
    cases.append(("sigmoid", lambda x: w34(T.sigmoid(x)), T.Tensor(_rand(rng, (3, 4), -3, 3))))
    cases.append(("absolute", lambda x: w34(T.absolute(x)), T.Tensor(_away_from_zero(rng, (3, 4)))))

    # linear algebra
    m42 = T.Tensor(_rand(rng, (4, 2)))
    w32 = weighted((3, 2))
    cases.append(("matmul_lhs", lambda x: w32(T.matmul(x, m42)), T.Tensor(_rand(rng, (3, 4)))))
    m34 = T.Tensor(_rand(rng, (3, 4)))
    cases.append(("matmul_rhs", lambda x: w32(T.matmul(m34, x)), T.Tensor(_rand(rng, (4, 2)))))
    bb = T.Tensor(_rand(rng, (2, 4, 3)))
    wb23 = weighted((2, 3, 3))
    cases.append(("bmm", lambda x: wb23(T.bmm(x, bb)), T.Tensor(_rand(rng, (2, 3, 4)))))
    w43 = weighted((4, 3))
    cases.append(("transpose", lambda x: w43(T.transpose(x)), T.Tensor(_rand(rng, (3, 4)))))
    w12 = weighted((12,))
    cases.append(("reshape", lambda x: w12(T.reshape(x, (12,))), T.Tensor(_rand(rng, (3, 4)))))

    # softmax family
    w25 = weighted((2, 5))
    cases.append(("softmax_lastdim", lambda x: w25(T.softmax_lastdim(x)),
                  T.Tensor(_rand(rng, (2, 5), -2, 2))))
    cases.append(("log_softmax_lastdim", lambda x: w25(T.log_softmax_lastdim(x)),
                  T.Tensor(_rand(rng, (2, 5), -2, 2))))
    mask = rng.uniform(size=(4, 5)) < 0.6
    mask[2, :] = False  # one empty row must stay all-zero
    mask[3, :] = True
    w45 = weighted((4, 5))
    cases.append(("masked_softmax_rows",
                  lambda x: w45(T.masked_softmax_rows(x, mask)),
                  T.Tensor(_rand(rng, (4, 5), -2, 2))))

    # fused attention, each operand separately, 2-D and batched
    q5 = T.Tensor(_rand(rng, (5, 3)))
    k5 = T.Tensor(_rand(rng, (6, 3)))
    v5 = T.Tensor(_rand(rng, (6, 3)))
    w53 = weighted((5, 3))
    cases.append(("attention_q", lambda x: w53(T.attention(x, k5, v5)), T.Tensor(_rand(rng, (5, 3)))))
    cases.append(("attention_k", lambda x: w53(T.attention(q5, x, v5)), T.Tensor(_rand(rng, (6, 3)))))
    cases.append(("attention_v", lambda x: w53(T.attention(q5, k5, x)), T.Tensor(_rand(rng, (6, 3)))))
    qb = T.Tensor(_rand(rng, (2, 4, 3)))
    kb = T.Tensor(_rand(rng, (2, 4, 3)))
    wb43 = weighted((2, 4, 3))
    cases.append(("attention_batched",
                  lambda x: wb43(T.attention(qb, kb, x)), T.Tensor(_rand(rng, (2, 4, 3)))))

    # reductions
    cases.append(("sum_all", lambda x: x.sum(), T.Tensor(_rand(rng, (3, 4)))))
    w3 = weighted((3,))
    cases.append(("sum_axis", lambda x: w3(x.sum(axis=1)), T.Tensor(_rand(rng, (3, 4)))))
    cases.append(("mean_axis", lambda x: w3(x.mean(axis=1)), T.Tensor(_rand(rng, (3, 4)))))
    w14 = weighted((1, 4))
    cases.append(("max_axis", lambda x: w14(x.max(axis=0, keepdims=True)),
                  T.Tensor(_away_from_zero(rng, (3, 4)))))

    # convolution, probe input and kernel
    kern = T.Tensor(_rand(rng, (3, 3, 2, 3)))
    w_conv = weighted((3, 3, 3))
    cases.append(("conv2d_input",
                  lambda x: w_conv(T.conv2d(x, kern, stride=2, padding=1)),
                  T.Tensor(_rand(rng, (5, 5, 2)))))
    img = T.Tensor(_rand(rng, (5, 5, 2)))
    cases.append(("conv2d_kernel",
                  lambda x: w_conv(T.conv2d(img, x, stride=2, padding=1)),
                  T.Tensor(_rand(rng, (3, 3, 2, 3)))))
    kern7 = T.Tensor(_rand(rng, (7, 7, 2, 1)))
    w_edge = weighted((5, 5, 1))
    cases.append(("conv2d_edge_pad_input",
                  lambda x: w_edge(T.conv2d(x, kern7, padding=3,
                                            padding_mode="edge")),
                  T.Tensor(_rand(rng, (5, 5, 2)))))

    # resize, window, gather/scatter, concat
    w53c = weighted((5, 3, 2))
    cases.append(("bilinear_resize",
                  lambda x: w53c(T.bilinear_resize(x, 5, 3)), T.Tensor(_rand(rng, (3, 5, 2)))))
    w_win = weighted((2, 2, 3))
    cases.append(("window_partition",
                  lambda x: w_win(T.window_partition(x, 2)[2]), T.Tensor(_rand(rng, (4, 4, 3)))))
    w44 = weighted((4, 4, 3))
    cases.append(("window_roundtrip",
                  lambda x: w44(T.window_merge(T.window_partition(x, 2), 4, 4, 2)),
                  T.Tensor(_rand(rng, (4, 4, 3)))))
    w_stack = weighted((4, 4, 3))
    cases.append(("window_stack_unstack",
                  lambda x: w_stack(T.window_unstack(T.window_stack(x, 2), 4, 4, 2)),
                  T.Tensor(_rand(rng, (4, 4, 3)))))
    gidx = np.array([4, 1, 1, 3])
    w42 = weighted((4, 2))
    cases.append(("gather_rows", lambda x: w42(T.gather_rows(x, gidx)),
                  T.Tensor(_rand(rng, (6, 2)))))
    sidx = np.array([5, 0, 2])
    w62 = weighted((6, 2))
    cases.append(("scatter_rows", lambda x: w62(T.scatter_rows(x, sidx, 6)),
                  T.Tensor(_rand(rng, (3, 2)))))
    cb = T.Tensor(_rand(rng, (3, 2)))
    w35 = weighted((3, 5))
    cases.append(("concat_lastdim", lambda x: w35(T.concat_lastdim(x, cb)),
                  T.Tensor(_rand(rng, (3, 3)))))
    return cases


@pytest.fixture(scope="session")
def grad_cases():
    return op_gradcheck_cases()

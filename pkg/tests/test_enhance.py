"""Dual-similarity block: decay schedule values, window ranking, and the
full forward against a straight-line oracle."""

import numpy as np
import pytest

from memseg import tensor as T
from memseg.attention import DecisionPlan
from memseg.enhance import (DualSimilarityBlock, decay_schedule, median_split,
                             window_similarity_scores)
from memseg.errors import ContractError
from memseg.tensor import Tensor, cosine_similarity

# frozen from 40-digit evaluations of exp(-(1/4 - 2^(-5/2 - 5n/4)))
GAMMA_L4 = [0.9293932689637408927354, 0.8388909515203489444795,
            0.8035225736890607339998, 0.7891009705490024735717]
FLOOR = 0.7788007830714048682452


def test_decay_first_value_high_precision():
    got = decay_schedule(4)
    assert got[0] == pytest.approx(GAMMA_L4[0], abs=1e-15)
    np.testing.assert_allclose(got, GAMMA_L4, rtol=0, atol=1e-15)


def test_decay_strictly_decreasing_and_bounded():
    for count in (1, 2, 4, 7, 64):
        g = decay_schedule(count)
        assert (np.diff(g) < 0).all() or count == 1
        assert (g > FLOOR).all()
        assert (g <= GAMMA_L4[0] + 1e-15).all()


def test_decay_approaches_floor():
    g = decay_schedule(4000)
    assert g[-1] - FLOOR < 1e-2


def test_decay_rejects_zero():
    with pytest.raises(ContractError):
        decay_schedule(0)


# ---------------------------------------------------------------------------
# window ranking


def _dsblock(c, window=4, seed=0):
    return DualSimilarityBlock(c, window=window, rng=np.random.default_rng(seed))


def test_single_window_scales_by_gamma0():
    blk = _dsblock(3, window=4, seed=1)
    x = np.random.default_rng(2).normal(size=(4, 4, 3))
    out = blk.window_rank_and_decay(Tensor(x)).data
    np.testing.assert_allclose(out, decay_schedule(1)[0] * x, atol=1e-15)


def test_identical_windows_tie_by_index():
    blk = _dsblock(2, window=2, seed=3)
    tile = np.random.default_rng(4).normal(size=(2, 2, 2))
    x = np.concatenate([tile, tile], axis=1)  # two identical windows
    out = blk.window_rank_and_decay(Tensor(x)).data
    g = decay_schedule(2)
    np.testing.assert_allclose(out[:, :2], g[0] * tile, atol=1e-15)
    np.testing.assert_allclose(out[:, 2:], g[1] * tile, atol=1e-15)


def test_window_ranks_match_pairwise_cosine_oracle():
    rng = np.random.default_rng(5)
    base = rng.normal(size=3)
    # windows with decreasing internal coherence: identical tokens, then
    # progressively noisier ones
    tiles = []
    for noise in (0.0, 0.3, 1.0, 3.0):
        t = np.tile(base, (2, 2, 1)) + rng.normal(0, noise or 1e-12, (2, 2, 3))
        tiles.append(t)
    x = np.zeros((4, 4, 3))
    x[:2, :2], x[:2, 2:] = tiles[0], tiles[1]
    x[2:, :2], x[2:, 2:] = tiles[2], tiles[3]
    scores = window_similarity_scores(x, 2)

    # brute-force oracle: mean pairwise cosine via the scalar helper
    for wi in range(4):
        bi, bj = divmod(wi, 2)
        toks = x[bi * 2:(bi + 1) * 2, bj * 2:(bj + 1) * 2].reshape(4, 3)
        acc = [cosine_similarity(toks[a], toks[b])
               for a in range(4) for b in range(a + 1, 4)]
        assert scores[wi] == pytest.approx(float(np.mean(acc)), abs=1e-12)

    blk = _dsblock(3, window=2, seed=6)
    out = blk.window_rank_and_decay(Tensor(x)).data
    order = np.argsort(-scores, kind="stable")
    g = decay_schedule(4)
    for rank, wi in enumerate(order):
        bi, bj = divmod(wi, 2)
        np.testing.assert_allclose(out[bi * 2:(bi + 1) * 2, bj * 2:(bj + 1) * 2],
                                   g[rank] * x[bi * 2:(bi + 1) * 2, bj * 2:(bj + 1) * 2],
                                   atol=1e-15)


# ---------------------------------------------------------------------------
# full forward


def _forward_oracle(x, wa, wb, window):
    """Independent sequential reimplementation of the block forward."""
    h, w, c = x.shape
    p = min(window, h, w)
    nh, nw = h // p, w // p
    scores = []
    for bi in range(nh):
        for bj in range(nw):
            toks = x[bi * p:(bi + 1) * p, bj * p:(bj + 1) * p].reshape(p * p, c)
            if p * p < 2:
                scores.append(0.0)
                continue
            acc = []
            for a in range(p * p):
                for b in range(a + 1, p * p):
                    na, nb = np.linalg.norm(toks[a]), np.linalg.norm(toks[b])
                    acc.append(float(toks[a] @ toks[b]) / max(na * nb, 1e-8))
            scores.append(float(np.mean(acc)))
    order = np.argsort(-np.asarray(scores), kind="stable")
    n = np.arange(len(scores), dtype=np.float64)
    gam = np.exp(-(0.25 - 2.0 ** (-2.5 - 5.0 * n / len(scores))))
    xp = np.empty_like(x)
    for rank, wi in enumerate(order):
        bi, bj = divmod(wi, nw)
        xp[bi * p:(bi + 1) * p, bj * p:(bj + 1) * p] = (
            gam[rank] * x[bi * p:(bi + 1) * p, bj * p:(bj + 1) * p])
    toks = xp.reshape(h * w, c)
    xi = (toks @ wa) @ (toks @ wb).T
    xii = xi.mean(axis=1)
    s = np.tile(xii[:, None], (1, h * w))
    euc = np.abs(s - s.T)
    med = np.median(euc)
    near = euc <= med
    def masked_sm(mat, mask):
        out = np.zeros_like(mat)
        for i in range(mat.shape[0]):
            cols = np.flatnonzero(mask[i])
            if cols.size == 0:
                continue
            e = np.exp(mat[i, cols] - mat[i, cols].max())
            out[i, cols] = e / e.sum()
        return out
    mix = (masked_sm(euc, near) + masked_sm(euc, ~near)) * xi
    return (mix @ toks).reshape(h, w, c), euc, near


def test_forward_matches_straight_line_oracle():
    blk = _dsblock(3, window=2, seed=7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(4, 4, 3))
    got = blk.forward(Tensor(x)).data
    want, euc, near = _forward_oracle(x, blk.wa.data, blk.wb.data, 2)
    np.testing.assert_allclose(got, want, atol=1e-12)
    # invariants checked on the oracle's intermediates
    np.testing.assert_allclose(euc, euc.T, atol=0)
    assert (np.diag(euc) == 0).all()


def test_euc_example_and_median_mask():
    # row means [1, 2, 3] give |s_i - s_j| = [[0,1,2],[1,0,1],[2,1,0]],
    # median 1, and ties at the median land in the near mask
    xii = Tensor(np.array([[1.0], [2.0], [3.0]]))
    s = T.matmul(xii, Tensor(np.ones((1, 3))))
    euc = T.absolute(T.sub(s, T.transpose(s)))
    np.testing.assert_array_equal(euc.data, [[0, 1, 2], [1, 0, 1], [2, 1, 0]])
    near, far = median_split(euc.data)
    want_near = np.array([[1, 1, 0], [1, 1, 1], [0, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(near, want_near)
    np.testing.assert_array_equal(far, ~want_near)


def test_forward_constant_image_degenerates_to_uniform():
    # one window covering the image keeps a constant input constant after
    # decay (multiple tied windows would get distinct gammas by the tie rule)
    blk = _dsblock(2, window=4, seed=10)
    x = np.full((4, 4, 2), 0.7)
    plan = DecisionPlan()
    out = blk.forward(Tensor(x), plan=plan)
    near, far = plan.data[blk.name + ".masks"]
    assert near.all() and not far.any()
    assert out.shape == (4, 4, 2)
    assert np.isfinite(out.data).all()
    want, _, _ = _forward_oracle(x, blk.wa.data, blk.wb.data, 4)
    np.testing.assert_allclose(out.data, want, atol=1e-12)


def test_forward_masks_partition_random_inputs():
    rng = np.random.default_rng(11)
    for trial in range(5):
        blk = _dsblock(3, window=2, seed=trial)
        x = rng.normal(size=(4, 4, 3))
        plan = DecisionPlan()
        out = blk.forward(Tensor(x), plan=plan)
        near, far = plan.data[blk.name + ".masks"]
        assert (near ^ far).all()  # exact complementary partition
        assert out.shape == (4, 4, 3)
        assert np.isfinite(out.data).all()


def test_forward_finite_diff_frozen_plan():
    blk = _dsblock(3, window=2, seed=12)
    rng = np.random.default_rng(13)
    x0 = rng.normal(size=(4, 4, 3))
    plan = DecisionPlan()
    blk.forward(Tensor(x0), plan=plan)
    replay = plan.replay()
    r = Tensor(rng.normal(size=(4, 4, 3)))
    err = T.finite_diff_check(lambda t: (blk.forward(t, plan=replay) * r).sum(),
                              Tensor(x0))
    assert err <= 1e-4


def test_forward_gradients_reach_projections():
    blk = _dsblock(3, window=2, seed=14)
    x = Tensor(np.random.default_rng(15).normal(size=(4, 4, 3)), requires_grad=True)
    with T.use_tape(T.GradTape()):
        T.backward(blk.forward(x).sum())
    assert blk.wa.grad is not None and blk.wb.grad is not None
    assert x.grad is not None

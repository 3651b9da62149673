"""Dual-similarity enhancement block.

Windows are ranked by internal cosine similarity and scaled by a decaying
coefficient schedule; the scaled tokens build an affinity matrix whose
row-mean differences are split at their median into two complementary masks,
each softmaxed row-wise and recombined against the affinity before mixing
back into token space.
"""

import numpy as np

from .errors import ContractError, DimensionError
from . import tensor as T
from .tensor import Tensor

__all__ = ["decay_schedule", "window_similarity_scores", "median_split",
           "DualSimilarityBlock"]

_DECAY_FLOOR = np.exp(-0.25)
_DECAY_CEIL = np.exp(-(0.25 - 2.0 ** -2.5))
_decay_cache = {}


def decay_schedule(count):
    """gamma_n = exp(-(0.25 - 2^(-2.5 - 5n/count))) for n = 0..count-1.

    Strictly decreasing, bounded in (exp(-0.25), exp(-0.25 + 2^-2.5)].
    """
    if count < 1:
        raise ContractError("decay_schedule needs count >= 1")
    got = _decay_cache.get(count)
    if got is None:
        n = np.arange(count, dtype=np.float64)
        got = np.exp(-(0.25 - 2.0 ** (-2.5 - 5.0 * n / count)))
        assert (got > _DECAY_FLOOR).all() and (got <= _DECAY_CEIL).all()
        _decay_cache[count] = got
    return got


def window_similarity_scores(x_data, p):
    """Mean pairwise cosine similarity inside each p x p window, row-major
    window order. Single-token windows score 0 (no pairs)."""
    h, w, c = x_data.shape
    if h % p or w % p:
        raise DimensionError("window %d does not divide extents %dx%d" % (p, h, w))
    nh, nw = h // p, w // p
    tiles = (x_data.reshape(nh, p, nw, p, c).transpose(0, 2, 1, 3, 4)
             .reshape(nh * nw, p * p, c))
    t = p * p
    if t < 2:
        return np.zeros(nh * nw)
    norms = np.linalg.norm(tiles, axis=2)
    gram = tiles @ tiles.transpose(0, 2, 1)
    denom = np.maximum(norms[:, :, None] * norms[:, None, :], 1e-8)
    cos = gram / denom
    iu = np.triu_indices(t, k=1)
    return cos[:, iu[0], iu[1]].mean(axis=1)


def median_split(euc_data):
    """Complementary masks around the median of all entries; ties at the
    median fall into the near mask."""
    med = float(np.median(euc_data))
    near = euc_data <= med
    return near, ~near


class DualSimilarityBlock:
    def __init__(self, channels, window=4, rng=None, name="dsgim", proj_dim=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = int(channels)
        d = int(proj_dim) if proj_dim is not None else c
        self.channels = c
        self.window = int(window)
        self.name = name
        # the affinity path is quadratic in the projections, so the init is a
        # full 1/sqrt(c*d) rather than fan-in only; it keeps the block near
        # unit gain instead of amplifying the stage features
        scale = (c * d) ** -0.5
        self.wa = Tensor(rng.normal(0.0, scale, (c, d)), requires_grad=True)
        self.wb = Tensor(rng.normal(0.0, scale, (c, d)), requires_grad=True)

    def parameters(self):
        return [(self.name + ".wa", self.wa), (self.name + ".wb", self.wb)]

    def _effective_window(self, h, w):
        return min(self.window, h, w)

    def window_rank_and_decay(self, x, plan=None):
        """Scale each window by the decay coefficient of its similarity rank
        (highest similarity gets the largest gamma; ties keep window order)."""
        h, w, _ = x.shape
        p = self._effective_window(h, w)
        wins = T.window_partition(x, p)
        nw = len(wins)

        def compute_order():
            scores = window_similarity_scores(x.data, p)
            return np.argsort(-scores, kind="stable")

        if plan is not None:
            order = plan.resolve(self.name + ".order", compute_order)
        else:
            order = compute_order()
        gammas = decay_schedule(nw)
        scale_of = np.empty(nw)
        scale_of[order] = gammas  # window order[r] carries rank r
        scaled = [T.mul(wins[i], float(scale_of[i])) for i in range(nw)]
        return T.window_merge(scaled, h, w, p)

    def forward(self, x, plan=None):
        h, w, c = x.shape
        if c != self.channels:
            raise DimensionError("expected %d channels, got %d" % (self.channels, c))
        xp = self.window_rank_and_decay(x, plan)
        hw = h * w
        tokens = T.reshape(xp, (hw, c))
        xi = T.matmul(T.matmul(tokens, self.wa),
                      T.transpose(T.matmul(tokens, self.wb)))
        xii = xi.mean(axis=1)
        s = T.matmul(T.reshape(xii, (hw, 1)), Tensor(np.ones((1, hw))))
        euc = T.absolute(T.sub(s, T.transpose(s)))

        def compute_masks():
            return median_split(euc.data)

        if plan is not None:
            mask_near, mask_far = plan.resolve(self.name + ".masks", compute_masks)
        else:
            mask_near, mask_far = compute_masks()
        mix = T.mul(T.add(T.masked_softmax_rows(euc, mask_near),
                          T.masked_softmax_rows(euc, mask_far)), xi)
        out = T.matmul(mix, tokens)
        return T.reshape(out, (h, w, c))

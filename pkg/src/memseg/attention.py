"""Memory-matched attention block: global token self-attention plus
per-cluster attention against the prototype memory priors.

The block's forward is X2 = psi(A + X'), where X' is unscaled global
attention over projected tokens and A gathers each token's cluster and
attends against that cluster's memory slots (slots act as both key and
value). Bank contents are constants on the tape; they only change through
the epoch-level replacement update.
"""

import numpy as np

from .errors import StateError
from . import tensor as T
from .tensor import Tensor

__all__ = ["DecisionPlan", "MemoryAttentionBlock", "intra_cluster_attention"]


class DecisionPlan:
    """Record/replay store for non-differentiable forward decisions
    (cluster groups, window ranks, median masks).

    Recording a plan during one forward and replaying it during perturbed
    re-evaluations keeps finite differences off the decision discontinuities.
    """

    def __init__(self, mode="record"):
        if mode not in ("record", "replay"):
            raise ValueError("mode must be 'record' or 'replay'")
        self.mode = mode
        self.data = {}

    def resolve(self, key, compute):
        if self.mode == "replay":
            if key not in self.data:
                raise KeyError("plan has no recorded decision %r" % key)
            return self.data[key]
        value = compute()
        self.data[key] = value
        return value

    def replay(self):
        out = DecisionPlan("replay")
        out.data = self.data
        return out


def intra_cluster_attention(assignment, queries, bank):
    """A[t] = softmax(q_t E_i^T) E_i for the cluster i of token t.

    Output rows line up with the query order; clusters with no tokens simply
    contribute nothing (their rows stay zero via the scatter).
    """
    if not bank.initialized:
        raise StateError("bank not initialized")
    return _cluster_attention(assignment.groups, queries, bank.priors)


def _cluster_attention(groups, queries, priors):
    total = queries.shape[0]
    out = None
    for i, idx in enumerate(groups):
        if len(idx) == 0:
            continue
        xi = T.gather_rows(queries, idx)
        ei = Tensor(priors[i])  # constant: no gradient into the bank
        ai = T.attention(xi, ei, ei)
        part = T.scatter_rows(ai, idx, total)
        out = part if out is None else T.add(out, part)
    if out is None:  # no tokens at all cannot happen (T >= 1), but stay total
        out = Tensor(np.zeros((total, queries.shape[1])))
    return out


class MemoryAttentionBlock:
    def __init__(self, channels, bank=None, rng=None, name="attn",
                 memory_enabled=True):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = int(channels)
        self.channels = c
        self.bank = bank
        self.name = name
        self.memory_enabled = bool(memory_enabled) and bank is not None
        scale = c ** -0.5
        self.wq = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.bq = Tensor(np.zeros(c), requires_grad=True)
        self.bk = Tensor(np.zeros(c), requires_grad=True)
        self.bv = Tensor(np.zeros(c), requires_grad=True)
        self.psi_w = Tensor(rng.normal(0.0, scale, (1, 1, c, c)), requires_grad=True)
        self.psi_b = Tensor(np.zeros(c), requires_grad=True)

    def parameters(self):
        return [(self.name + "." + n, getattr(self, n))
                for n in ("wq", "wk", "wv", "bq", "bk", "bv", "psi_w", "psi_b")]

    def _project(self, x):
        h, w, c = x.shape
        tokens = T.reshape(x, (h * w, c))
        q = T.add(T.matmul(tokens, self.wq), self.bq)
        k = T.add(T.matmul(tokens, self.wk), self.bk)
        v = T.add(T.matmul(tokens, self.wv), self.bv)
        return q, k, v

    def global_interaction(self, x):
        """softmax(Q K^T) V over the flattened tokens, reshaped back."""
        h, w, c = x.shape
        q, k, v = self._project(x)
        return T.reshape(T.attention(q, k, v), (h, w, c))

    def forward(self, x, training=False, plan=None, collect=None):
        h, w, c = x.shape
        q, k, v = self._project(x)
        xp = T.attention(q, k, v)  # X' tokens
        if self.memory_enabled:
            if not self.bank.initialized:
                if not training:
                    raise StateError("memory bank not initialized; run a "
                                     "training forward first")
                self.bank.initialize_from(xp.data)
            if plan is not None:
                groups = plan.resolve(self.name + ".groups",
                                      lambda: self.bank.assign(q.data).groups)
            else:
                groups = self.bank.assign(q.data).groups
            a = _cluster_attention(groups, q, self.bank.priors)
            pre = T.add(a, xp)
        else:
            pre = xp
        x2 = T.add(T.conv2d(T.reshape(pre, (h, w, c)), self.psi_w), self.psi_b)
        if collect is not None:
            collect(self.bank, x2.data.reshape(h * w, c))
        return x2

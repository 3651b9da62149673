"""Prototype memory bank: K-means initialization, cosine token matching,
and the weight/loss-driven slot replacement update.

Each of the k clusters owns M slot vectors ("priors", M x C) plus one core
vector (length C) used for matching. The per-epoch update budget K follows a
linear schedule in the epoch-over-epoch loss difference, clamped to
[ceil(M/4), floor(3M/4)], and the update itself swaps the lowest-weight slots
for the highest-weight incoming tokens, cluster by cluster.
"""

from dataclasses import dataclass, field
import struct

import numpy as np

from .errors import (ContractError, DimensionError, FormatError,
                     InsufficientDataError, NonFiniteError, StateError)
from .tensor import Tensor

_MAGIC = b"MEMB"
_VERSION = 1

__all__ = [
    "PrototypeMemoryBank", "ClusterAssignment", "UpdateReport",
    "init_kmeans", "assign_tokens", "compute_update_budget",
    "apply_wld_update", "serialize", "deserialize", "kmeans",
]


@dataclass
class ClusterAssignment:
    labels: np.ndarray          # (T,) cluster index per token
    groups: list                # per cluster, index array into the token rows


@dataclass
class UpdateReport:
    k_used: int
    delta_loss: float
    replaced: list = field(default_factory=list)   # per cluster, slot indices
    sources: list = field(default_factory=list)    # per cluster, token indices
    skipped: list = field(default_factory=list)    # clusters with no tokens


def _as_matrix(tokens, name):
    arr = tokens.data if isinstance(tokens, Tensor) else np.asarray(tokens, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError("%s must be 2-D (tokens x channels), got %r"
                             % (name, arr.shape))
    if not np.isfinite(arr).all():
        raise NonFiniteError("%s contains non-finite values" % name)
    return arr


def _softmax_1d(v):
    e = np.exp(v - v.max())
    return e / e.sum()


def _row_weights(mat):
    """Importance weight of each row: softmax over rows of mean |value|."""
    return _softmax_1d(np.abs(mat).mean(axis=1))


def kmeans(points, k, seed, max_iters=100, reseed_retries=20):
    """Lloyd's algorithm with k-means++ seeding; euclidean metric.

    Empty clusters are re-seeded from the point farthest from its nearest
    center; if they keep collapsing past the retry budget we give up.
    Returns (centers (k,C), labels (T,)).
    """
    pts = np.asarray(points, dtype=np.float64)
    t = pts.shape[0]
    if t < k:
        raise InsufficientDataError("k-means needs at least %d points, got %d" % (k, t))
    rng = np.random.default_rng(seed)

    centers = np.empty((k, pts.shape[1]))
    centers[0] = pts[rng.integers(t)]
    d2 = ((pts - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i] = pts[rng.integers(t)]  # all coincident: any point works
        else:
            centers[i] = pts[rng.choice(t, p=d2 / total)]
        d2 = np.minimum(d2, ((pts - centers[i]) ** 2).sum(axis=1))

    labels = None
    for _ in range(max_iters):
        dist = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dist.argmin(axis=1)
        for _retry in range(reseed_retries):
            sizes = np.bincount(new_labels, minlength=k)
            empty = np.flatnonzero(sizes == 0)
            if empty.size == 0:
                break
            nearest = dist.min(axis=1)
            far = nearest.argmax()
            if nearest[far] <= 0.0:
                # every point already sits exactly on a center, so reseeding
                # cannot help; split the coincident pile deterministically
                for e in empty:
                    donor = np.bincount(new_labels, minlength=k).argmax()
                    take = np.flatnonzero(new_labels == donor)[-1]
                    new_labels[take] = e
                    centers[e] = pts[take]
                break
            centers[empty[0]] = pts[far]
            dist[:, empty[0]] = ((pts - centers[empty[0]]) ** 2).sum(axis=1)
            new_labels = dist.argmin(axis=1)
        else:
            raise InsufficientDataError("k-means could not keep %d clusters populated" % k)
        if labels is not None and (new_labels == labels).all():
            break
        labels = new_labels
        for i in range(k):
            centers[i] = pts[labels == i].mean(axis=0)
    return centers, labels


class PrototypeMemoryBank:
    def __init__(self, k, slots, channels, seed=0, alpha=0.5, beta=0.5):
        if k < 1 or slots < 1 or channels < 1:
            raise ContractError("bank needs k, slots, channels >= 1")
        self.k = int(k)
        self.slots = int(slots)          # M
        self.channels = int(channels)    # C
        self.alpha = float(alpha)
        self.beta = float(beta)
        self.seed = int(seed)
        self.priors = None               # (k, M, C) after init
        self.cores = None                # (k, C) after init
        self.loss_prev = None            # previous epoch loss
        self.loss_curr = None            # current epoch loss
        self.k_current = 0
        self.initialized = False
        self._rng = np.random.default_rng(seed)

    @property
    def theta(self):
        return float(self.slots)

    def clamp_range(self):
        lo = -(-self.slots // 4)         # ceil(M/4)
        hi = (3 * self.slots) // 4
        return lo, hi

    # -- initialization ------------------------------------------------------
    def initialize_from(self, tokens):
        """K-means over tokens, then fill each cluster's M slots: nearest-M
        members when the cluster is big enough, cycled-with-jitter otherwise.
        Cores start as the cluster centroids."""
        if self.initialized:
            raise StateError("bank already initialized")
        pts = _as_matrix(tokens, "tokens")
        if pts.shape[1] != self.channels:
            raise DimensionError("token width %d != bank width %d"
                                 % (pts.shape[1], self.channels))
        if pts.shape[0] < self.k:
            raise InsufficientDataError("need >= %d tokens to initialize, got %d"
                                        % (self.k, pts.shape[0]))
        centers, labels = kmeans(pts, self.k, self.seed)
        priors = np.empty((self.k, self.slots, self.channels))
        for i in range(self.k):
            members = pts[labels == i]
            n = members.shape[0]
            if n >= self.slots:
                d = ((members - centers[i]) ** 2).sum(axis=1)
                keep = np.argsort(d, kind="stable")[:self.slots]
                priors[i] = members[keep]
            else:
                for j in range(self.slots):
                    priors[i, j] = members[j % n]
                    if j >= n:
                        priors[i, j] += self._rng.normal(0.0, 1e-3, self.channels)
        self.priors = priors
        self.cores = centers
        self.k_current = self.slots // 2
        self.initialized = True
        return self

    # -- matching --------------------------------------------------------------
    def assign(self, queries):
        if not self.initialized:
            raise StateError("bank not initialized")
        q = _as_matrix(queries, "queries")
        if q.shape[1] != self.channels:
            raise DimensionError("query width %d != bank width %d"
                                 % (q.shape[1], self.channels))
        qn = np.linalg.norm(q, axis=1)
        cn = np.linalg.norm(self.cores, axis=1)
        sim = (q @ self.cores.T) / np.maximum(np.outer(qn, cn), 1e-8)
        labels = sim.argmax(axis=1)  # first max wins: ties go to the lowest index
        groups = [np.flatnonzero(labels == i) for i in range(self.k)]
        return ClusterAssignment(labels=labels, groups=groups)

    # -- budget ---------------------------------------------------------------
    def update_budget(self, loss_prev, loss_curr):
        lp, lc = float(loss_prev), float(loss_curr)
        if not (np.isfinite(lp) and np.isfinite(lc)):
            raise ContractError("losses must be finite")
        lo, hi = self.clamp_range()
        if lo > hi:
            raise ContractError("no valid budget range for M=%d" % self.slots)
        raw = (-self.alpha * (lp - lc) + self.beta) * self.theta
        k = int(np.floor(raw + 0.5))  # round half up
        return min(max(k, lo), hi)

    def advance_epoch(self, epoch_loss):
        """Shift the loss window by one epoch and refresh K. The first epoch
        has no predecessor, so its difference is 0 and K lands on M/2."""
        loss = float(epoch_loss)
        if not np.isfinite(loss):
            raise ContractError("epoch loss must be finite")
        self.loss_prev = self.loss_curr
        self.loss_curr = loss
        prev = self.loss_prev if self.loss_prev is not None else loss
        self.k_current = self.update_budget(prev, loss)
        return self.k_current

    # -- W-LD update -----------------------------------------------------------
    def apply_update(self, outputs, k_budget):
        if not self.initialized:
            raise StateError("bank not initialized")
        lo, hi = self.clamp_range()
        if not (lo <= k_budget <= hi):
            raise ContractError("budget %d outside clamp [%d, %d]" % (k_budget, lo, hi))
        if len(outputs) != self.k:
            raise DimensionError("expected %d per-cluster groups, got %d"
                                 % (self.k, len(outputs)))
        delta = 0.0
        if self.loss_prev is not None and self.loss_curr is not None:
            delta = self.loss_prev - self.loss_curr
        report = UpdateReport(k_used=int(k_budget), delta_loss=delta)
        for i in range(self.k):
            x = outputs[i]
            if x is None or (hasattr(x, "shape") and np.size(x) == 0):
                report.replaced.append(np.empty(0, dtype=np.intp))
                report.sources.append(np.empty(0, dtype=np.intp))
                report.skipped.append(i)
                continue
            x = _as_matrix(x, "cluster %d tokens" % i)
            if x.shape[1] != self.channels:
                raise DimensionError("cluster %d token width %d != bank width %d"
                                     % (i, x.shape[1], self.channels))
            r = min(int(k_budget), x.shape[0])
            w_slots = _row_weights(self.priors[i])
            w_tok = _row_weights(x)
            slot_order = np.argsort(w_slots, kind="stable")[:r]
            tok_order = np.argsort(-w_tok, kind="stable")[:r]
            self.priors[i][slot_order] = x[tok_order]
            report.replaced.append(slot_order)
            report.sources.append(tok_order)
        self.cores = self.priors.mean(axis=1)
        return report

    # -- serialization -----------------------------------------------------------
    def serialize(self):
        flags = ((1 if self.loss_prev is not None else 0)
                 | (2 if self.loss_curr is not None else 0)
                 | (4 if self.initialized else 0))
        head = struct.pack("<4sHBIIIi", _MAGIC, _VERSION, flags,
                           self.k, self.slots, self.channels, self.k_current)
        losses = struct.pack("<dd", self.loss_prev or 0.0, self.loss_curr or 0.0)
        body = b""
        if self.initialized:
            body = (np.ascontiguousarray(self.priors).tobytes()
                    + np.ascontiguousarray(self.cores).tobytes())
        return head + losses + body

    @classmethod
    def deserialize(cls, data, expect_k=None, expect_slots=None, expect_channels=None):
        head_size = struct.calcsize("<4sHBIIIi")
        if len(data) < head_size + 16:
            raise FormatError("bank payload truncated (header)")
        magic, version, flags, k, slots, channels, k_current = struct.unpack(
            "<4sHBIIIi", data[:head_size])
        if magic != _MAGIC:
            raise FormatError("bad bank magic %r" % magic)
        if version != _VERSION:
            raise FormatError("unsupported bank version %d" % version)
        for got, want, what in ((k, expect_k, "cluster count k"),
                                (slots, expect_slots, "slot count M"),
                                (channels, expect_channels, "channel width C")):
            if want is not None and got != want:
                raise FormatError("bank extent mismatch: file %s=%d, expected %d"
                                  % (what, got, want))
        lp, lc = struct.unpack("<dd", data[head_size:head_size + 16])
        bank = cls(k, slots, channels)
        bank.k_current = k_current
        bank.loss_prev = lp if flags & 1 else None
        bank.loss_curr = lc if flags & 2 else None
        off = head_size + 16
        if flags & 4:
            need = k * slots * channels * 8 + k * channels * 8
            if len(data) - off != need:
                raise FormatError("bank payload truncated: want %d body bytes, got %d"
                                  % (need, len(data) - off))
            pm = np.frombuffer(data[off:off + k * slots * channels * 8])
            bank.priors = pm.reshape(k, slots, channels).copy()
            cm = np.frombuffer(data[off + k * slots * channels * 8:])
            bank.cores = cm.reshape(k, channels).copy()
            if not (np.isfinite(bank.priors).all() and np.isfinite(bank.cores).all()):
                raise FormatError("bank payload contains non-finite values")
            bank.initialized = True
        elif len(data) != off:
            raise FormatError("trailing bytes after uninitialized bank")
        return bank


# module-level op aliases keep call sites close to the design vocabulary


def init_kmeans(tokens, k, slots, seed):
    return PrototypeMemoryBank(k, slots, _as_matrix(tokens, "tokens").shape[1],
                               seed=seed).initialize_from(tokens)


def assign_tokens(bank, queries):
    return bank.assign(queries)


def compute_update_budget(bank, loss_prev, loss_curr):
    return bank.update_budget(loss_prev, loss_curr)


def apply_wld_update(bank, outputs, k_budget):
    return bank.apply_update(outputs, k_budget)


def serialize(bank):
    return bank.serialize()


def deserialize(data, **expect):
    return PrototypeMemoryBank.deserialize(data, **expect)

"""Training harness: decoupled-weight-decay Adam, the epoch-level memory
update cadence, held-out evaluation, CSV logs, and checkpointing.

Runs are deterministic end to end: one seed fixes the dataset, the shuffle
and augmentation draws, the weight init, and the memory bank dynamics, so
repeated runs produce bitwise-identical logs and checkpoints.
"""

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .errors import ContractError, FormatError, NonFiniteError, TrainingDiverged
from .data import generate_synthetic_dataset, split_dataset
from .memory import PrototypeMemoryBank
from .metrics import dice_loss, ce_loss, evaluate_pair
from . import network as N

__all__ = [
    "TrainConfig", "RunSummary", "AdamW", "clip_gradients", "scheduled_lr",
    "parse_run_config", "format_train_config", "train", "evaluate_network",
    "held_out_split", "class_mean_rows", "simulate_k", "parse_loss_file",
    "write_text_atomic",
]

TRAIN_LOG_NAME = "train_log.csv"
METRICS_NAME = "metrics.csv"
CHECKPOINT_NAME = "checkpoint.bin"
CONFIG_NAME = "config.txt"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 4
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    dice_weight: float = 0.7
    ce_weight: float = 0.3
    seed: int = 0
    samples: int = 250          # generated set, split 80/20 train/held-out
    eval_every: int = 10
    memory: bool = True         # False runs the zero-memory ablation
    grad_clip: float = 0.0      # global gradient-norm ceiling; 0 disables
    lr_schedule: str = "constant"   # or "cosine" / "warm-cosine"
    out_dir: str = "run_out"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("epochs, batch_size, eval_every must be >= 1")
        if self.samples < 5:
            raise ContractError("need >= 5 samples for an 80/20 split")
        if self.learning_rate <= 0.0 or self.weight_decay < 0.0:
            raise ContractError("bad optimizer settings")
        if self.grad_clip < 0.0:
            raise ContractError("grad_clip must be >= 0 (0 disables)")
        if self.lr_schedule not in ("constant", "cosine", "warm-cosine"):
            raise ContractError(
                "lr_schedule must be constant, cosine, or warm-cosine")
        if self.dice_weight < 0.0 or self.ce_weight < 0.0 \
                or self.dice_weight + self.ce_weight <= 0.0:
            raise ContractError("loss weights must be non-negative, sum > 0")


_INT_KEYS = ("epochs", "batch_size", "samples", "eval_every", "seed")
_FLOAT_KEYS = ("learning_rate", "weight_decay", "dice_weight", "ce_weight",
               "grad_clip")
_BOOL_KEYS = ("memory",)
_STR_KEYS = ("lr_schedule", "out_dir")
_TRAIN_KEYS = _INT_KEYS + _FLOAT_KEYS + _BOOL_KEYS + _STR_KEYS


def _parse_bool(value):
    v = value.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


def parse_run_config(text):
    """One flat key = value file covers both configs; `seed` feeds both."""
    train_kv = {}
    net_lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError("config line %d is not key = value: %r"
                              % (lineno, raw))
        key = line.partition("=")[0].strip()
        value = line.partition("=")[2].strip()
        if key in N._CONFIG_FIELDS:
            net_lines.append(line)
            if key != "seed":
                continue
        if key == "seed" or key in _TRAIN_KEYS:
            try:
                if key in _FLOAT_KEYS:
                    train_kv[key] = float(value)
                elif key in _BOOL_KEYS:
                    train_kv[key] = _parse_bool(value)
                elif key in _STR_KEYS:
                    train_kv[key] = value
                else:
                    train_kv[key] = int(value)
            except ValueError:
                raise FormatError("bad value for %r on line %d: %r"
                                  % (key, lineno, value))
        elif key not in N._CONFIG_FIELDS:
            raise FormatError("unknown config key %r on line %d" % (key, lineno))
    net_cfg = N.parse_config("\n".join(net_lines))
    try:
        train_cfg = TrainConfig(**train_kv)
    except ContractError as exc:
        raise FormatError("invalid config: %s" % exc)
    return train_cfg, net_cfg


def format_train_config(cfg):
    """The training half of a run config. out_dir is a runtime location, not
    part of the experiment identity, so it stays out of the snapshot."""
    lines = []
    for key in _TRAIN_KEYS:
        if key == "out_dir":
            continue
        value = getattr(cfg, key)
        if key in _BOOL_KEYS:
            value = "true" if value else "false"
        lines.append("%s = %s" % (key, value))
    return "\n".join(lines) + "\n"


def write_text_atomic(path, text):
    tmp = path + ".tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_bytes_atomic(path, blob):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Adam with decoupled weight decay: the decay term multiplies the weight
    directly instead of passing through the adaptive rescaling."""

    def __init__(self, params, learning_rate=1e-4, weight_decay=1e-4,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        if not self.params:
            raise ContractError("optimizer needs at least one parameter")
        self.lr = float(learning_rate)
        self.wd = float(weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= self.lr * (step + self.wd * p.data)


def clip_gradients(params, max_norm):
    """Rescale all gradients so their joint L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def scheduled_lr(base, schedule, epoch, epochs):
    """Learning rate for a 1-based epoch. "cosine" decays to base/10 by the
    final epoch; "warm-cosine" first ramps 0.1 -> 1.0 of base over the
    leading eighth of the run (at least 2 epochs), then decays the same way."""
    if schedule == "constant" or epochs == 1:
        return base
    warm = max(2, epochs // 8) if schedule == "warm-cosine" else 1
    if epoch <= warm and warm > 1:
        return base * (0.1 + 0.9 * (epoch - 1) / (warm - 1))
    t = (epoch - warm) / (epochs - warm)
    return base * (0.1 + 0.45 * (1.0 + math.cos(math.pi * t)))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class RunSummary:
    losses: list = field(default_factory=list)      # per epoch
    ks: list = field(default_factory=list)          # per epoch
    evals: list = field(default_factory=list)       # (epoch, rows, mean_dsc, mean_hd95)
    final_mean_dsc: float = 0.0
    final_mean_hd95: float = None
    out_dir: str = ""
    checkpoint_path: str = ""
    log_path: str = ""
    metrics_path: str = ""
    net: object = None


def _augment(image, mask, rng):
    """Random 90-degree rotation plus optional horizontal flip, drawn even
    when they land on the identity so the rng stream stays aligned."""
    quarter = int(rng.integers(0, 4))
    flip = int(rng.integers(0, 2))
    img, msk = image, mask
    if quarter:
        img = np.rot90(img, quarter, axes=(0, 1))
        msk = np.rot90(msk, quarter, axes=(0, 1))
    if flip:
        img = np.flip(img, axis=1)
        msk = np.flip(msk, axis=1)
    return np.ascontiguousarray(img), np.ascontiguousarray(msk)


def _encoder_inputs(image, net_cfg):
    x1 = image if isinstance(image, Tensor) else Tensor(image)
    if x1.ndim == 2:
        x1 = T.reshape(x1, (x1.shape[0], x1.shape[1], 1))
    x2 = x1
    if net_cfg.res2 != net_cfg.res1:
        x2 = T.bilinear_resize(x1, net_cfg.res2, net_cfg.res2)
    return x1, x2


def held_out_split(train_cfg, net_cfg):
    """Regenerate a run's held-out samples; the dataset is seeded, so the
    result is exactly what the run evaluated against."""
    samples = generate_synthetic_dataset(
        train_cfg.samples, net_cfg.res1, net_cfg.res1, net_cfg.classes,
        seed=train_cfg.seed)
    return split_dataset(samples, 0.8)[1]


def evaluate_network(net, samples):
    """No-update forward passes; one SegMetrics per sample."""
    out = []
    with T.no_grad():
        for s in samples:
            x1, x2 = _encoder_inputs(s.image, net.config)
            logits = net.forward_full(x1, x2, training=False)
            pred = logits.data.argmax(axis=2)
            out.append(evaluate_pair(pred, s.mask, net.config.classes))
    return out


def class_mean_rows(per_sample, classes):
    """(class, mean DSC, mean HD95 or None) over a sample set; undefined
    per-sample HD95 values are excluded from the mean."""
    rows = []
    for c in range(classes):
        dscs = [m.dsc[c] for m in per_sample]
        hds = [m.hd95[c] for m in per_sample if m.hd95[c] is not None]
        rows.append((c, float(np.mean(dscs)),
                     float(np.mean(hds)) if hds else None))
    return rows


def _means_of_rows(rows):
    mean_dsc = float(np.mean([r[1] for r in rows]))
    defined = [r[2] for r in rows if r[2] is not None]
    mean_hd = float(np.mean(defined)) if defined else None
    return mean_dsc, mean_hd


def _fmt_opt(value, fmt="%.6f"):
    return "" if value is None else fmt % value


def _weight_norm(net):
    return math.sqrt(sum(float((p.data ** 2).sum())
                         for _, p in net.parameters()))


def _mean_row_norm(mat):
    return float(np.linalg.norm(mat.reshape(-1, mat.shape[-1]), axis=1).mean())


def _scale_matched(tokens, ref):
    """Bring replacement features to the bank's initialization scale.

    Slot contents feed the next epoch's attention, whose outputs become the
    following replacement candidates, so the loop compounds the blocks' own
    gain. Matching the pooled mean row norm to the bank's own current mean is
    not enough: replacement favours the largest-norm rows, which drag the
    bank mean upward and the match then chases that inflated reference. The
    ref is therefore the mean row norm captured once, right after clustering
    fills the slots, and every later epoch is matched against that constant.
    A uniform factor leaves the replacement ordering and the cosine cluster
    assignment unchanged.
    """
    tok = float(np.linalg.norm(tokens, axis=1).mean())
    if tok <= 0.0 or ref <= 0.0:
        return tokens
    return tokens * (ref / tok)


def train(train_cfg, net_cfg, progress=None):
    """Full run: generate data, fit, log, checkpoint. Returns a RunSummary
    with the trained network still live."""
    if not isinstance(train_cfg, TrainConfig) \
            or not isinstance(net_cfg, N.NetworkConfig):
        raise ContractError("train wants (TrainConfig, NetworkConfig)")
    os.makedirs(train_cfg.out_dir, exist_ok=True)

    samples = generate_synthetic_dataset(
        train_cfg.samples, net_cfg.res1, net_cfg.res1, net_cfg.classes,
        seed=train_cfg.seed)
    train_set, held_out = split_dataset(samples, 0.8)

    net = N.Network(net_cfg)
    if not train_cfg.memory:
        net.set_memory_enabled(False)
    opt = AdamW(net.parameters(), train_cfg.learning_rate,
                train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)

    summary = RunSummary(out_dir=train_cfg.out_dir, net=net)
    log_lines = ["epoch,loss,k,mean_dsc,mean_hd95"]
    metric_lines = ["epoch,class,dsc,hd95"]
    epoch = 0
    last_k = None
    prior_scale = {}
    try:
        for epoch in range(1, train_cfg.epochs + 1):
            opt.lr = scheduled_lr(train_cfg.learning_rate,
                                  train_cfg.lr_schedule,
                                  epoch, train_cfg.epochs)
            order = rng.permutation(len(train_set))
            batches = [order[i:i + train_cfg.batch_size]
                       for i in range(0, len(order), train_cfg.batch_size)]
            batch_losses = []
            pooled = {}
            collect = None
            if train_cfg.memory:
                # every batch contributes replacement candidates, so the
                # epoch-end update sees the full feature population instead
                # of whichever four samples came last
                def collect(bank, tokens):
                    pooled.setdefault(bank.channels, []).append(tokens)
            for bi, batch in enumerate(batches):
                net.zero_grad()
                total = 0.0
                for idx in batch:
                    s = train_set[idx]
                    img, msk = _augment(s.image, s.mask, rng)
                    tape = T.GradTape()
                    with T.use_tape(tape):
                        x1, x2 = _encoder_inputs(img, net_cfg)
                        logits = net.forward_full(x1, x2, training=True,
                                                  collect=collect)
                        loss = T.add(
                            T.mul(dice_loss(logits, msk),
                                  train_cfg.dice_weight),
                            T.mul(ce_loss(logits, msk), train_cfg.ce_weight))
                        T.backward(T.mul(loss, 1.0 / len(batch)), tape)
                    total += loss.item()
                batch_losses.append(total / len(batch))
                if train_cfg.grad_clip > 0.0:
                    clip_gradients(opt.params, train_cfg.grad_clip)
                opt.step()
            epoch_loss = float(np.mean(batch_losses))
            summary.losses.append(epoch_loss)

            # loss recorded, now the budget and the slot replacement
            for width in sorted(net.banks):
                bank = net.banks[width]
                last_k = bank.advance_epoch(epoch_loss)
                if train_cfg.memory and bank.initialized and width in pooled:
                    if width not in prior_scale:
                        # priors are still the untouched clustering result
                        prior_scale[width] = _mean_row_norm(bank.priors)
                    toks = _scale_matched(np.vstack(pooled[width]),
                                          prior_scale[width])
                    groups = bank.assign(toks).groups
                    bank.apply_update([toks[g] for g in groups], last_k)
            summary.ks.append(last_k)

            mean_dsc = mean_hd = None
            if epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs:
                rows = class_mean_rows(evaluate_network(net, held_out),
                                       net_cfg.classes)
                mean_dsc, mean_hd = _means_of_rows(rows)
                summary.evals.append((epoch, rows, mean_dsc, mean_hd))
                for c, d, h in rows:
                    metric_lines.append("%d,%d,%.6f,%s"
                                        % (epoch, c, d, _fmt_opt(h)))
            log_lines.append("%d,%.8f,%d,%s,%s"
                             % (epoch, epoch_loss, last_k,
                                _fmt_opt(mean_dsc), _fmt_opt(mean_hd)))
            if progress is not None:
                progress("epoch %d/%d loss %.6f k %d%s"
                         % (epoch, train_cfg.epochs, epoch_loss, last_k,
                            "" if mean_dsc is None
                            else " dsc %.4f" % mean_dsc))
    except NonFiniteError as exc:
        raise TrainingDiverged(
            "non-finite loss at epoch %d (weight norm %.6e, last K %s): %s"
            % (epoch, _weight_norm(net), last_k, exc))

    summary.final_mean_dsc, summary.final_mean_hd95 = (
        summary.evals[-1][2], summary.evals[-1][3])
    summary.log_path = os.path.join(train_cfg.out_dir, TRAIN_LOG_NAME)
    summary.metrics_path = os.path.join(train_cfg.out_dir, METRICS_NAME)
    summary.checkpoint_path = os.path.join(train_cfg.out_dir, CHECKPOINT_NAME)
    write_text_atomic(summary.log_path, "\n".join(log_lines) + "\n")
    write_text_atomic(summary.metrics_path, "\n".join(metric_lines) + "\n")
    write_bytes_atomic(summary.checkpoint_path, N.checkpoint_bytes(net))
    write_text_atomic(os.path.join(train_cfg.out_dir, CONFIG_NAME),
                      format_train_config(train_cfg)
                      + N.format_config(net_cfg))
    return summary


# ---------------------------------------------------------------------------
# update-budget replay


def parse_loss_file(text):
    losses = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        try:
            value = float(line)
        except ValueError:
            raise FormatError("loss file line %d is not a number: %r"
                              % (lineno, raw))
        if not math.isfinite(value):
            raise FormatError("loss file line %d is not finite" % lineno)
        losses.append(value)
    if not losses:
        raise FormatError("loss file holds no values")
    return losses


def simulate_k(losses, slots):
    """Replay a loss trajectory through the real budget path; returns the
    per-epoch K values the trainer would have used."""
    if slots < 2:
        raise ContractError("need >= 2 slots, got %d" % slots)
    bank = PrototypeMemoryBank(1, slots, 1)
    return [bank.advance_epoch(loss) for loss in losses]

"""Desk-scale dual-encoder segmentation network.

Encoder 1 stacks memory-matched attention blocks (the third stage alternates
them with dual-similarity enhancement); encoder 2 is a plain windowed-attention
ladder. Stage features are fused additively, gated skips feed a three-stage
attention decoder, and a 1x1 head plus bilinear restoration produces per-pixel
class logits at the encoder-1 resolution.
"""

import io
import struct

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .attention import DecisionPlan, MemoryAttentionBlock
from .enhance import DualSimilarityBlock
from .errors import ContractError, DimensionError, FormatError
from .memory import PrototypeMemoryBank, deserialize as deserialize_bank

STAGES = 4

CHECKPOINT_MAGIC = b"MSEG"
CHECKPOINT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class NetworkConfig:
    """Flat description of the network; every field round-trips through the
    key = value config text format."""

    res1: int = 64                       # encoder-1 input resolution
    res2: int = 64                       # encoder-2 input resolution
    channels: tuple = (16, 32, 64, 64)   # per-stage widths, both encoders
    classes: int = 4                     # segmentation classes = memory clusters
    slots: int = 32                      # memory rows per cluster (M)
    window: int = 4                      # window extent for enc-2 / enhancement
    stage_blocks1: tuple = (1, 1, 3, 1)  # encoder-1 blocks per stage
    stage_blocks2: tuple = (1, 1, 1, 1)  # encoder-2 blocks per stage
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "stage_blocks1",
                           tuple(int(b) for b in self.stage_blocks1))
        object.__setattr__(self, "stage_blocks2",
                           tuple(int(b) for b in self.stage_blocks2))
        if len(self.channels) != STAGES:
            raise ContractError("need %d stage widths, got %r"
                                % (STAGES, self.channels))
        if any(c < 1 for c in self.channels):
            raise ContractError("stage widths must be positive")
        for name in ("stage_blocks1", "stage_blocks2"):
            blocks = getattr(self, name)
            if len(blocks) != STAGES or any(b < 1 for b in blocks):
                raise ContractError("%s must list %d positive counts"
                                    % (name, STAGES))
        scale = 2 ** STAGES
        for name in ("res1", "res2"):
            res = getattr(self, name)
            if res < scale or res % scale:
                raise ContractError("%s must be a positive multiple of %d"
                                    % (name, scale))
        if self.classes < 2:
            raise ContractError("need at least 2 classes")
        if self.slots < 2:
            raise ContractError("need at least 2 memory slots per cluster")
        if self.window < 1:
            raise ContractError("window must be >= 1")


_CONFIG_FIELDS = ("res1", "res2", "channels", "classes", "slots", "window",
                  "stage_blocks1", "stage_blocks2", "seed")
_TUPLE_FIELDS = frozenset(("channels", "stage_blocks1", "stage_blocks2"))


def format_config(config):
    """Render a NetworkConfig as key = value lines."""
    lines = []
    for name in _CONFIG_FIELDS:
        value = getattr(config, name)
        if name in _TUPLE_FIELDS:
            value = ",".join(str(v) for v in value)
        lines.append("%s = %s" % (name, value))
    return "\n".join(lines) + "\n"


def parse_config(text):
    """Parse key = value lines (blank lines and # comments allowed) into a
    NetworkConfig; unspecified fields keep their defaults."""
    overrides = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError("config line %d is not key = value: %r"
                              % (lineno, raw))
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _CONFIG_FIELDS:
            raise FormatError("unknown config key %r on line %d" % (key, lineno))
        try:
            if key in _TUPLE_FIELDS:
                overrides[key] = tuple(int(v.strip()) for v in value.split(","))
            else:
                overrides[key] = int(value)
        except ValueError:
            raise FormatError("bad value for %r on line %d: %r"
                              % (key, lineno, value))
    try:
        return NetworkConfig(**overrides)
    except ContractError as exc:
        raise FormatError("invalid config: %s" % exc)


# ---------------------------------------------------------------------------
# building blocks


def _weight(rng, shape):
    fan_in = int(np.prod(shape[:-1])) if len(shape) > 1 else int(shape[0])
    return Tensor(rng.normal(0.0, fan_in ** -0.5, shape), requires_grad=True)


def _bias(n):
    return Tensor(np.zeros(n), requires_grad=True)


class WindowedBlock:
    """Window-partitioned global interaction: each PxP tile runs plain
    attention over its own tokens, then a 1x1 mixing convolution. With one
    window covering the input this is exactly global attention."""

    def __init__(self, channels, window=4, rng=None, name="win"):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = int(channels)
        self.channels = c
        self.window = int(window)
        self.name = name
        scale = c ** -0.5
        self.wq = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.wk = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.wv = Tensor(rng.normal(0.0, scale, (c, c)), requires_grad=True)
        self.bq = _bias(c)
        self.bk = _bias(c)
        self.bv = _bias(c)
        self.psi_w = Tensor(rng.normal(0.0, scale, (1, 1, c, c)),
                            requires_grad=True)
        self.psi_b = _bias(c)

    def parameters(self):
        return [(self.name + "." + n, getattr(self, n))
                for n in ("wq", "wk", "wv", "bq", "bk", "bv", "psi_w", "psi_b")]

    def forward(self, x):
        h, w, c = x.shape
        if c != self.channels:
            raise DimensionError("expected %d channels, got %d"
                                 % (self.channels, c))
        p = min(self.window, h, w)
        stacked = T.window_stack(x, p)                 # (nw, p*p, c)
        nw = stacked.shape[0]
        flat = T.reshape(stacked, (nw * p * p, c))
        q = T.reshape(T.add(T.matmul(flat, self.wq), self.bq), (nw, p * p, c))
        k = T.reshape(T.add(T.matmul(flat, self.wk), self.bk), (nw, p * p, c))
        v = T.reshape(T.add(T.matmul(flat, self.wv), self.bv), (nw, p * p, c))
        mixed = T.window_unstack(T.attention(q, k, v), h, w, p)
        return T.add(T.conv2d(mixed, self.psi_w), self.psi_b)


class SkipGate:
    """Serial channel-then-spatial gating of a skip/decoder sum.

    Channel gate: sigmoid of a shared two-layer bottleneck applied to the
    global average- and max-pooled descriptors. Spatial gate: sigmoid of a
    7x7 convolution (edge padding, so a constant map gates uniformly) over
    the stacked channel mean and max.
    """

    def __init__(self, channels, rng=None, name="skip", reduction=4):
        rng = rng if rng is not None else np.random.default_rng(0)
        c = int(channels)
        self.channels = c
        self.name = name
        hidden = max(c // reduction, 1)
        self.ca_w0 = _weight(rng, (c, hidden))
        self.ca_w1 = _weight(rng, (hidden, c))
        self.sa_w = _weight(rng, (7, 7, 2, 1))
        self.sa_b = _bias(1)

    def parameters(self):
        return [(self.name + "." + n, getattr(self, n))
                for n in ("ca_w0", "ca_w1", "sa_w", "sa_b")]

    def _channel_gate(self, x):
        c = x.shape[-1]
        avg = T.reshape(x.mean(axis=(0, 1)), (1, c))
        peak = T.reshape(x.max(axis=0).max(axis=0), (1, c))
        def mlp(v):
            return T.matmul(T.relu(T.matmul(v, self.ca_w0)), self.ca_w1)
        return T.reshape(T.sigmoid(T.add(mlp(avg), mlp(peak))), (1, 1, c))

    def _spatial_gate(self, x):
        stack = T.concat_lastdim(x.mean(axis=2, keepdims=True),
                                 x.max(axis=2, keepdims=True))
        conv = T.add(T.conv2d(stack, self.sa_w, padding=3, padding_mode="edge"),
                     self.sa_b)
        return T.sigmoid(conv)

    def forward(self, enc, dec):
        if enc.shape != dec.shape:
            raise DimensionError("skip operands disagree: %r vs %r"
                                 % (enc.shape, dec.shape))
        s = T.add(enc, dec)
        gated = T.mul(s, self._channel_gate(s))
        return T.mul(gated, self._spatial_gate(gated))


@dataclass
class _EncoderStage:
    down_w: Tensor
    down_b: Tensor
    fuse_w: Tensor
    fuse_b: Tensor
    blocks: list


@dataclass
class _DecoderStage:
    reduce_w: Tensor
    reduce_b: Tensor
    block: MemoryAttentionBlock


@dataclass
class StageFeatures:
    """Every intermediate a full forward produces, for inspection."""

    enc1: list = field(default_factory=list)
    enc2: list = field(default_factory=list)
    fused: list = field(default_factory=list)
    dec: list = field(default_factory=list)
    skips: list = field(default_factory=list)
    logits: Tensor = None


# ---------------------------------------------------------------------------
# the network


class Network:
    """Dual-encoder assembly over shared per-width memory banks.

    Attention blocks of equal channel width (encoder and decoder alike) share
    one prototype memory bank, so the bank count follows the distinct stage
    widths rather than the block count.
    """

    def __init__(self, config):
        if not isinstance(config, NetworkConfig):
            raise ContractError("Network wants a NetworkConfig")
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.banks = {}
        for width in sorted(set(config.channels)):
            self.banks[width] = PrototypeMemoryBank(
                config.classes, config.slots, width, seed=config.seed + width)
        self.enc1 = self._build_encoder(rng, "enc1", config.stage_blocks1,
                                        memory=True)
        self.enc2 = self._build_encoder(rng, "enc2", config.stage_blocks2,
                                        memory=False)
        self.skips = [SkipGate(config.channels[STAGES - 1 - i], rng=rng,
                               name="skip.s%d" % i)
                      for i in range(1, STAGES)]
        self.dec = []
        for i in range(1, STAGES):
            cin = config.channels[STAGES - i]
            cout = config.channels[STAGES - 1 - i]
            block = MemoryAttentionBlock(cout, bank=self.banks[cout], rng=rng,
                                         name="dec.s%d.b1" % i)
            self.dec.append(_DecoderStage(_weight(rng, (1, 1, cin, cout)),
                                          _bias(cout), block))
        self.head_w = _weight(rng, (1, 1, config.channels[0], config.classes))
        self.head_b = _bias(config.classes)

    def _build_encoder(self, rng, prefix, stage_blocks, memory):
        cfg = self.config
        stages = []
        for i in range(STAGES):
            cin = 1 if i == 0 else cfg.channels[i - 1]
            cout = cfg.channels[i]
            down_w = _weight(rng, (3, 3, cin, cout))
            fuse_w = _weight(rng, (1, 1, 1, cout))
            blocks = []
            for j in range(stage_blocks[i]):
                name = "%s.s%d.b%d" % (prefix, i + 1, j + 1)
                if not memory:
                    blocks.append(WindowedBlock(cout, window=cfg.window,
                                                rng=rng, name=name))
                elif i == 2 and j % 2 == 1:
                    # third stage alternates, odd positions enhance
                    blocks.append(DualSimilarityBlock(cout, window=cfg.window,
                                                      rng=rng, name=name))
                else:
                    blocks.append(MemoryAttentionBlock(cout,
                                                       bank=self.banks[cout],
                                                       rng=rng, name=name))
            stages.append(_EncoderStage(down_w, _bias(cout), fuse_w,
                                        _bias(cout), blocks))
        return stages

    # -- parameters ---------------------------------------------------------

    def parameters(self):
        params = []
        for prefix, stages in (("enc1", self.enc1), ("enc2", self.enc2)):
            for i, st in enumerate(stages, start=1):
                base = "%s.s%d." % (prefix, i)
                params.append((base + "down.w", st.down_w))
                params.append((base + "down.b", st.down_b))
                params.append((base + "fuse.w", st.fuse_w))
                params.append((base + "fuse.b", st.fuse_b))
                for blk in st.blocks:
                    params.extend(blk.parameters())
        for gate in self.skips:
            params.extend(gate.parameters())
        for i, st in enumerate(self.dec, start=1):
            base = "dec.s%d." % i
            params.append((base + "reduce.w", st.reduce_w))
            params.append((base + "reduce.b", st.reduce_b))
            params.extend(st.block.parameters())
        params.append(("head.w", self.head_w))
        params.append(("head.b", self.head_b))
        return params

    def zero_grad(self):
        for _, p in self.parameters():
            p.zero_grad()

    def set_memory_enabled(self, enabled):
        """Toggle the memory-prior path on every attention block. Disabled
        blocks reduce to plain global attention and never touch the banks,
        which is the zero-memory ablation arm."""
        on = bool(enabled)
        for st in self.enc1:
            for blk in st.blocks:
                if isinstance(blk, MemoryAttentionBlock):
                    blk.memory_enabled = on and blk.bank is not None
        for st in self.dec:
            st.block.memory_enabled = on and st.block.bank is not None
        return self

    def memory_ready(self):
        return all(b.initialized for b in self.banks.values())

    # -- forward pieces -----------------------------------------------------

    def _as_image(self, image, res, name):
        if isinstance(image, Tensor):
            x = image
            if x.ndim == 2:
                x = T.reshape(x, (x.shape[0], x.shape[1], 1))
        else:
            arr = np.asarray(image, dtype=np.float64)
            if arr.ndim == 2:
                arr = arr[:, :, None]
            x = Tensor(arr)
        if x.ndim != 3 or x.shape[2] != 1:
            raise DimensionError("%s must be (h,w) or (h,w,1), got %r"
                                 % (name, x.shape))
        if x.shape[0] != res or x.shape[1] != res:
            raise DimensionError("%s extents %dx%d, expected %dx%d"
                                 % (name, x.shape[0], x.shape[1], res, res))
        return x

    def _run_stages(self, stages, image, training, plan, collect):
        feats = []
        x = image
        for st in stages:
            x = T.add(T.conv2d(x, st.down_w, stride=2, padding=1), st.down_b)
            h, w, _ = x.shape
            glance = T.bilinear_resize(image, h, w)
            x = T.add(x, T.add(T.conv2d(glance, st.fuse_w), st.fuse_b))
            for blk in st.blocks:
                if isinstance(blk, MemoryAttentionBlock):
                    x = blk.forward(x, training=training, plan=plan,
                                    collect=collect)
                elif isinstance(blk, DualSimilarityBlock):
                    x = blk.forward(x, plan=plan)
                else:
                    x = blk.forward(x)
            feats.append(x)
        return feats

    def encoder1_forward(self, image, training=False, plan=None, collect=None):
        x = self._as_image(image, self.config.res1, "encoder-1 image")
        return self._run_stages(self.enc1, x, training, plan, collect)

    def encoder2_forward(self, image):
        x = self._as_image(image, self.config.res2, "encoder-2 image")
        return self._run_stages(self.enc2, x, False, None, None)

    def fuse_stages(self, feats1, feats2):
        """Resize encoder-2 stage features onto encoder-1 geometry, then add."""
        if len(feats1) != len(feats2):
            raise DimensionError("stage count mismatch: %d vs %d"
                                 % (len(feats1), len(feats2)))
        fused = []
        for a, b in zip(feats1, feats2):
            if a.shape[-1] != b.shape[-1]:
                raise DimensionError("fused stages disagree on channels: "
                                     "%r vs %r" % (a.shape, b.shape))
            if b.shape[:2] != a.shape[:2]:
                b = T.bilinear_resize(b, a.shape[0], a.shape[1])
            fused.append(T.add(a, b))
        return fused

    def _decode(self, fused, training, plan, collect):
        x = fused[-1]
        decs, skips = [], []
        for i, st in enumerate(self.dec, start=1):
            target = fused[STAGES - 1 - i]
            x = T.bilinear_resize(x, target.shape[0], target.shape[1])
            x = T.add(T.conv2d(x, st.reduce_w), st.reduce_b)
            d = st.block.forward(x, training=training, plan=plan,
                                 collect=collect)
            o = self.skips[i - 1].forward(target, d)
            x = T.add(o, d)
            decs.append(d)
            skips.append(o)
        logits = T.add(T.conv2d(x, self.head_w), self.head_b)
        logits = T.bilinear_resize(logits, self.config.res1, self.config.res1)
        return logits, decs, skips

    def decode(self, fused, training=False, plan=None, collect=None):
        logits, _, _ = self._decode(fused, training, plan, collect)
        return logits

    def forward_detailed(self, image1, image2, training=False, plan=None,
                         collect=None):
        feats = StageFeatures()
        feats.enc1 = self.encoder1_forward(image1, training=training,
                                           plan=plan, collect=collect)
        feats.enc2 = self.encoder2_forward(image2)
        feats.fused = self.fuse_stages(feats.enc1, feats.enc2)
        feats.logits, feats.dec, feats.skips = self._decode(
            feats.fused, training, plan, collect)
        return feats

    def forward_full(self, image1, image2, training=False, plan=None,
                     collect=None):
        return self.forward_detailed(image1, image2, training=training,
                                     plan=plan, collect=collect).logits

    def record_plan(self, image1, image2, training=False):
        """Run one forward recording every data-dependent routing decision;
        returns the plan whose replay() freezes them."""
        plan = DecisionPlan("record")
        self.forward_full(image1, image2, training=training, plan=plan)
        return plan


# ---------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(net):
    buf = io.BytesIO()
    buf.write(struct.pack("<4sH", CHECKPOINT_MAGIC, CHECKPOINT_VERSION))
    config_text = format_config(net.config).encode("utf-8")
    buf.write(struct.pack("<I", len(config_text)))
    buf.write(config_text)
    params = net.parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack("<%dI" % p.ndim, *p.shape))
        buf.write(p.data.astype("<f8").tobytes())
    widths = sorted(net.banks)
    buf.write(struct.pack("<I", len(widths)))
    for width in widths:
        blob = net.banks[width].serialize()
        key = str(width).encode("utf-8")
        buf.write(struct.pack("<H", len(key)))
        buf.write(key)
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    return buf.getvalue()


def save_checkpoint(net, path):
    data = checkpoint_bytes(net)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


class _Cursor:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data):
    cur = _Cursor(data)
    magic, version = cur.unpack("<4sH")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic %r" % magic)
    if version != CHECKPOINT_VERSION:
        raise FormatError("unsupported checkpoint version %d" % version)
    (config_len,) = cur.unpack("<I")
    config = parse_config(cur.take(config_len).decode("utf-8"))
    net = Network(config)
    params = dict(net.parameters())
    (n_params,) = cur.unpack("<I")
    if n_params != len(params):
        raise FormatError("checkpoint lists %d weights, network has %d"
                          % (n_params, len(params)))
    seen = set()
    for _ in range(n_params):
        (name_len,) = cur.unpack("<H")
        name = cur.take(name_len).decode("utf-8")
        if name not in params:
            raise FormatError("unknown weight %r in checkpoint" % name)
        if name in seen:
            raise FormatError("duplicate weight %r in checkpoint" % name)
        seen.add(name)
        (ndim,) = cur.unpack("<B")
        shape = cur.unpack("<%dI" % ndim)
        p = params[name]
        if shape != p.shape:
            raise FormatError("weight %r has shape %r, expected %r"
                              % (name, shape, p.shape))
        raw = cur.take(8 * int(np.prod(shape)) if ndim else 8)
        p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    (n_banks,) = cur.unpack("<I")
    if n_banks != len(net.banks):
        raise FormatError("checkpoint lists %d banks, network has %d"
                          % (n_banks, len(net.banks)))
    for _ in range(n_banks):
        (key_len,) = cur.unpack("<H")
        key = cur.take(key_len).decode("utf-8")
        try:
            width = int(key)
        except ValueError:
            raise FormatError("bad bank key %r" % key)
        if width not in net.banks:
            raise FormatError("checkpoint bank width %d not in network" % width)
        (blob_len,) = cur.unpack("<I")
        loaded = deserialize_bank(cur.take(blob_len), expect_k=config.classes,
                                  expect_slots=config.slots,
                                  expect_channels=width)
        dst = net.banks[width]
        dst.priors = loaded.priors
        dst.cores = loaded.cores
        dst.loss_prev = loaded.loss_prev
        dst.loss_curr = loaded.loss_curr
        dst.k_current = loaded.k_current
        dst.initialized = loaded.initialized
    if cur.pos != len(data):
        raise FormatError("checkpoint has %d trailing bytes"
                          % (len(data) - cur.pos))
    return net


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return checkpoint_from_bytes(fh.read())

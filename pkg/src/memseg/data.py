"""Synthetic segmentation data: textured geometric shapes on a noisy
background, exact rasterized masks, and portable graymap (P5) storage.

Each class owns a shape family and an intensity band, so the task is
learnable from intensity alone but the bands are close enough (noise sigma
0.05 on gaps of ~0.1) that boundaries still need spatial context.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError

__all__ = [
    "SyntheticSample", "generate_synthetic_dataset", "audit_dataset",
    "write_pgm", "read_pgm", "save_dataset", "load_dataset", "split_dataset",
]

NOISE_SIGMA = 0.05
MIN_CLASSES = 2
MAX_CLASSES = 5

# intensity band (lo, hi) per label; gaps of ~0.1 between bands
_BANDS = {
    0: (0.08, 0.20),
    1: (0.30, 0.42),
    2: (0.52, 0.64),
    3: (0.74, 0.86),
    4: (0.90, 0.98),
}


@dataclass
class SyntheticSample:
    image: np.ndarray   # (h, w, 1) float64 in [0, 1]
    mask: np.ndarray    # (h, w) int64 labels in [0, k)


# ---------------------------------------------------------------------------
# shape rasterizers: boolean masks over integer pixel indices


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _rectangle(yy, xx, cy, cx, a, b):
    return (np.abs(yy - cy) <= a) & (np.abs(xx - cx) <= b)


def _annulus(yy, xx, cy, cx, r_out):
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    r_in = 0.55 * r_out
    return (d2 >= r_in * r_in) & (d2 <= r_out * r_out)


def _cross(yy, xx, cy, cx, half_len, half_width):
    horiz = (np.abs(yy - cy) <= half_width) & (np.abs(xx - cx) <= half_len)
    vert = (np.abs(xx - cx) <= half_width) & (np.abs(yy - cy) <= half_len)
    return horiz | vert


def _draw_shape(rng, yy, xx, h, w, label):
    s = min(h, w)
    cy = rng.uniform(0.28, 0.72) * h
    cx = rng.uniform(0.28, 0.72) * w
    if label == 1:
        return _disk(yy, xx, cy, cx, rng.uniform(0.16, 0.22) * s)
    if label == 2:
        a = rng.uniform(0.14, 0.21) * s
        b = rng.uniform(0.14, 0.21) * s
        return _rectangle(yy, xx, cy, cx, a, b)
    if label == 3:
        return _annulus(yy, xx, cy, cx, rng.uniform(0.20, 0.26) * s)
    return _cross(yy, xx, cy, cx, rng.uniform(0.20, 0.26) * s,
                  rng.uniform(0.065, 0.09) * s)


def _textured_field(rng, yy, xx, h, w, band):
    lo, hi = band
    base = rng.uniform(lo + 0.02, hi - 0.02)
    fy = rng.integers(1, 4)
    fx = rng.integers(1, 4)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    ripple = 0.03 * np.sin(2.0 * np.pi * (fy * yy / h + fx * xx / w) + phase)
    return base + ripple


def _render_sample(rng, h, w, k):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    image = _textured_field(rng, yy, xx, h, w, _BANDS[0])
    # slight illumination slope so the background is not one flat level
    image = image + rng.uniform(-0.05, 0.05) * (xx / w + yy / h - 1.0)
    mask = np.zeros((h, w), dtype=np.int64)

    available = list(range(1, k))
    if k == MAX_CLASSES:
        # four foreground classes need 2..3 shapes, biased toward 3, to keep
        # each class present in >= 60% of samples
        n_shapes = 2 + int(rng.uniform() < 0.75)
    else:
        n_shapes = int(rng.integers(1, 4))
    if n_shapes <= len(available):
        chosen = list(rng.choice(available, size=n_shapes, replace=False))
    else:
        extra = rng.choice(available, size=n_shapes - len(available))
        chosen = available + list(extra)
        rng.shuffle(chosen)

    for label in chosen:
        shape = _draw_shape(rng, yy, xx, h, w, int(label))
        field = _textured_field(rng, yy, xx, h, w, _BANDS[int(label)])
        image = np.where(shape, field, image)
        mask[shape] = label

    image = image + rng.normal(0.0, NOISE_SIGMA, size=(h, w))
    image = np.clip(image, 0.0, 1.0)
    return SyntheticSample(image=image[:, :, None], mask=mask)


def generate_synthetic_dataset(n, height, width, k, seed):
    """n samples of textured shapes: label 1 disks, 2 rectangles, 3 annuli,
    4 crosses; every image carries 1..3 of them over a noisy background."""
    if not MIN_CLASSES <= k <= MAX_CLASSES:
        raise ContractError("class count %d outside supported [%d, %d]"
                            % (k, MIN_CLASSES, MAX_CLASSES))
    if n < 1:
        raise ContractError("need at least one sample, got %d" % n)
    if height < 4 or width < 4:
        raise ContractError("extents %dx%d too small" % (height, width))
    rng = np.random.default_rng(seed)
    return [_render_sample(rng, height, width, k) for _ in range(n)]


def split_dataset(samples, train_fraction=0.8):
    cut = int(round(train_fraction * len(samples)))
    if cut < 1 or cut >= len(samples):
        raise ContractError("split %g leaves an empty side for %d samples"
                            % (train_fraction, len(samples)))
    return samples[:cut], samples[cut:]


def audit_dataset(samples, k):
    """Generator self-check: per-class presence fraction across samples and
    aggregate pixel fraction, plus label/intensity range flags."""
    present = np.zeros(k)
    pixels = np.zeros(k)
    total = 0
    labels_ok = True
    range_ok = True
    for s in samples:
        counts = np.bincount(s.mask.reshape(-1), minlength=k)
        labels_ok = labels_ok and s.mask.min() >= 0 and s.mask.max() < k
        range_ok = range_ok and s.image.min() >= 0.0 and s.image.max() <= 1.0
        present += counts > 0
        pixels += counts
        total += s.mask.size
    return {
        "presence": present / len(samples),
        "pixel_fraction": pixels / total,
        "labels_ok": labels_ok,
        "intensity_ok": range_ok,
    }


# ---------------------------------------------------------------------------
# P5 portable graymap I/O


def write_pgm(path, array, maxval=255):
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise DimensionError("PGM wants a 2-D array, got %r" % (arr.shape,))
    if not 0 < maxval < 256:
        raise ContractError("maxval %d outside (0, 255]" % maxval)
    data = arr.astype(np.uint8, casting="unsafe")
    if arr.min() < 0 or arr.max() > maxval:
        raise ContractError("values outside [0, %d]" % maxval)
    h, w = arr.shape
    payload = b"P5\n%d %d\n%d\n" % (w, h, maxval) + data.tobytes()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)
    return len(payload)


def _pgm_tokens(blob):
    """Yield header tokens, skipping whitespace and # comments."""
    i = 0
    n = len(blob)
    while True:
        while i < n and blob[i:i + 1].isspace():
            i += 1
        if i < n and blob[i:i + 1] == b"#":
            while i < n and blob[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < n and not blob[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated PGM header")
        yield blob[start:i], i


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = _pgm_tokens(blob)
    try:
        magic, _ = next(tokens)
        if magic != b"P5":
            raise FormatError("not a P5 graymap: magic %r" % magic)
        fields = []
        for _ in range(3):
            tok, end = next(tokens)
            if not tok.isdigit():
                raise FormatError("bad PGM header token %r" % tok)
            fields.append(int(tok))
    except StopIteration:
        raise FormatError("truncated PGM header")
    w, h, maxval = fields
    if w < 1 or h < 1 or not 0 < maxval < 256:
        raise FormatError("bad PGM geometry %dx%d maxval %d" % (w, h, maxval))
    raster = blob[end + 1:]
    if len(raster) != w * h:
        raise FormatError("PGM raster holds %d bytes, expected %d"
                          % (len(raster), w * h))
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w), maxval


def save_dataset(samples, directory):
    """img_NNNN.pgm / msk_NNNN.pgm pairs; images quantized to 8 bits."""
    os.makedirs(directory, exist_ok=True)
    for i, s in enumerate(samples):
        img = np.rint(s.image[:, :, 0] * 255.0).astype(np.uint8)
        write_pgm(os.path.join(directory, "img_%04d.pgm" % i), img)
        write_pgm(os.path.join(directory, "msk_%04d.pgm" % i),
                  s.mask.astype(np.uint8))
    return len(samples)


def load_dataset(directory):
    names = sorted(f for f in os.listdir(directory) if f.endswith(".pgm"))
    imgs = [f for f in names if f.startswith("img_")]
    msks = [f for f in names if f.startswith("msk_")]
    if not imgs or len(imgs) != len(msks):
        raise FormatError("directory holds %d images but %d masks"
                          % (len(imgs), len(msks)))
    out = []
    for fi, fm in zip(imgs, msks):
        if fi.replace("img_", "", 1) != fm.replace("msk_", "", 1):
            raise FormatError("unpaired files %r / %r" % (fi, fm))
        img, maxval = read_pgm(os.path.join(directory, fi))
        msk, _ = read_pgm(os.path.join(directory, fm))
        if img.shape != msk.shape:
            raise FormatError("extent mismatch between %r and %r" % (fi, fm))
        out.append(SyntheticSample(
            image=(img.astype(np.float64) / maxval)[:, :, None],
            mask=msk.astype(np.int64)))
    return out

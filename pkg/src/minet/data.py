"""Synthetic paired-contrast data pipeline.

Sample pairs mimic the acquisition setting the model targets: two images
of the same anatomy under different contrasts. A seeded ellipse phantom
provides the shared geometry (a tissue label map); two lookup tables turn
labels into intensities, and a mild smooth multiplicative field gives each
contrast its own shading. The target contrast is degraded to low
resolution either by k-space truncation (frequency-domain crop, the MR
acquisition analogue) or by bicubic decimation.
"""

import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import serialization

DEFAULT_LUT_T1 = (0.05, 0.85, 0.55, 0.30, 0.70, 0.45)
DEFAULT_LUT_T2 = (0.05, 0.25, 0.75, 0.60, 0.35, 0.90)

DEGRADE_METHODS = ("kspace_truncation", "bicubic_decimation")


@dataclass
class PhantomSpec:
    size: int = 64
    num_shapes: tuple = (5, 9)           # inclusive ellipse count range
    seed: int = 0
    contrast_t1: tuple = DEFAULT_LUT_T1
    contrast_t2: tuple = DEFAULT_LUT_T2
    bias_amplitude: float = 0.08         # 0 disables the shading fields

    def validate(self):
        if min(self.contrast_t1) < 0 or max(self.contrast_t1) > 1:
            raise ValueError("contrast_t1 intensities must lie in [0, 1]")
        if min(self.contrast_t2) < 0 or max(self.contrast_t2) > 1:
            raise ValueError("contrast_t2 intensities must lie in [0, 1]")
        if len(self.contrast_t1) != len(self.contrast_t2):
            raise ValueError("contrast tables must have equal length")
        if not 0 <= self.bias_amplitude < 1:
            raise ValueError("bias_amplitude must lie in [0, 1)")
        return self


@dataclass
class SamplePair:
    x_t1: np.ndarray          # guide, high resolution
    y_t2: np.ndarray          # target input, low resolution
    x_t2: np.ndarray          # target ground truth, high resolution
    seed: int


@dataclass
class DatasetSplit:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)


def generate_label_map(spec, rng):
    """Random overlapping ellipses painted onto a label grid; later shapes
    overwrite earlier ones."""
    n = spec.size
    labels = np.zeros((n, n), dtype=np.intp)
    num_labels = len(spec.contrast_t1)
    count = int(rng.integers(spec.num_shapes[0], spec.num_shapes[1] + 1))
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    for _ in range(count):
        cy, cx = rng.uniform(0.15 * n, 0.85 * n, size=2)
        ay = rng.uniform(0.08 * n, 0.35 * n)
        ax = rng.uniform(0.08 * n, 0.35 * n)
        theta = rng.uniform(0.0, np.pi)
        tissue = int(rng.integers(1, num_labels))
        ct, st = np.cos(theta), np.sin(theta)
        u = (xx - cx) * ct + (yy - cy) * st
        v = -(xx - cx) * st + (yy - cy) * ct
        labels[(u / ax) ** 2 + (v / ay) ** 2 <= 1.0] = tissue
    return labels


def _shading_field(size, rng):
    """Smooth field in [0, 1]: a product of two low-frequency sinusoids."""
    coords = (np.arange(size) + 0.5) / size
    fy, fx = rng.uniform(0.5, 1.5, size=2)
    py, px = rng.uniform(0.0, 1.0, size=2)
    wave_y = np.sin(2.0 * np.pi * (fy * coords + py))
    wave_x = np.sin(2.0 * np.pi * (fx * coords + px))
    return (np.outer(wave_y, wave_x) + 1.0) / 2.0


def generate_phantom(spec):
    """Deterministic contrast pair sharing one label map.

    Returns (x_t1, x_t2), both (size, size) in [0, 1]. The two images
    differ only through the lookup tables and per-contrast shading.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    labels = generate_label_map(spec, rng)
    a = spec.bias_amplitude
    images = []
    for lut in (spec.contrast_t1, spec.contrast_t2):
        base = np.asarray(lut, dtype=np.float64)[labels]
        shade = _shading_field(spec.size, rng)
        images.append(base * (1.0 - a + a * shade))
    return images[0], images[1]


# ---------------------------------------------------------------------------
# degradation


def kspace_truncation(hr, r):
    """Keep the central (N/r)^2 block of the 2-D spectrum, invert, take the
    magnitude, and rescale by r^2 so constants map to themselves."""
    m = hr.shape[0]
    if hr.shape[0] != hr.shape[1] or m % r != 0:
        raise ValueError("image side %r must be square and divisible by r=%d"
                         % (hr.shape, r))
    n = m // r
    spec = np.fft.fftshift(np.fft.fft2(hr))
    lo = m // 2 - n // 2
    block = spec[lo:lo + n, lo:lo + n]
    lr = np.abs(np.fft.ifft2(np.fft.ifftshift(block))) / (r * r)
    return np.clip(lr, 0.0, 1.0)


def bicubic_matrix(n_in, n_out, a=-0.5):
    """Unit-row-sum resampling matrix: out = M @ in along one axis.

    Uses the 4-tap piecewise-cubic kernel with half-pixel centering.
    Out-of-range taps are filled by linear extrapolation from the two
    boundary samples, so affine signals are resampled exactly all the way
    to the edges (reflection or replication would bend them there).
    """
    if n_in < 2:
        raise ValueError("bicubic_matrix needs at least 2 input samples")
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(np.intp)
    mat = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for k in range(-1, 3):
        idx = base + k
        t = np.abs(src - idx)
        w = np.where(
            t <= 1.0, (a + 2.0) * t ** 3 - (a + 3.0) * t ** 2 + 1.0,
            np.where(t < 2.0,
                     a * t ** 3 - 5.0 * a * t ** 2 + 8.0 * a * t - 4.0 * a,
                     0.0))
        lo = idx < 0
        hi = idx >= n_in
        mid = ~(lo | hi)
        np.add.at(mat, (rows[mid], idx[mid]), w[mid])
        # x[i] for i < 0 continues the line through x[0], x[1]
        np.add.at(mat, (rows[lo], np.zeros(lo.sum(), dtype=np.intp)),
                  w[lo] * (1.0 - idx[lo]))
        np.add.at(mat, (rows[lo], np.ones(lo.sum(), dtype=np.intp)),
                  w[lo] * idx[lo])
        # x[i] for i >= n continues the line through x[n-2], x[n-1]
        k_hi = idx[hi] - (n_in - 1)
        np.add.at(mat, (rows[hi], np.full(hi.sum(), n_in - 1, dtype=np.intp)),
                  w[hi] * (1.0 + k_hi))
        np.add.at(mat, (rows[hi], np.full(hi.sum(), n_in - 2, dtype=np.intp)),
                  -w[hi] * k_hi)
    return mat


def bicubic_resample(img, n_out):
    """Separable bicubic resampling of a square image to n_out x n_out."""
    m = bicubic_matrix(img.shape[0], n_out)
    mh = m if img.shape[0] == img.shape[1] else bicubic_matrix(img.shape[1], n_out)
    return m @ img @ mh.T


def bicubic_decimation(hr, r):
    """Bicubic resample straight down to the low-resolution grid."""
    if hr.shape[0] % r != 0:
        raise ValueError("image side %d not divisible by r=%d" % (hr.shape[0], r))
    return np.clip(bicubic_resample(hr, hr.shape[0] // r), 0.0, 1.0)


def bicubic_upsample(lr, r):
    """Bicubic interpolation to an r-times larger grid (evaluation baseline)."""
    return np.clip(bicubic_resample(lr, lr.shape[0] * r), 0.0, 1.0)


def degrade(hr, r, method="kspace_truncation"):
    """Produce the low-resolution target input from its ground truth."""
    if method == "kspace_truncation":
        return kspace_truncation(hr, r)
    if method == "bicubic_decimation":
        return bicubic_decimation(hr, r)
    raise ValueError("unknown degradation %r (expected one of %r)"
                     % (method, DEGRADE_METHODS))


# ---------------------------------------------------------------------------
# splits and storage


def make_split(total, seed):
    """Deterministic shuffled 70/10/20 partition of range(total)."""
    if total < 10:
        raise ValueError("need at least 10 samples to split, got %d" % total)
    order = np.random.default_rng(seed).permutation(total)
    n_train = int(round(0.7 * total))
    n_val = int(round(0.1 * total))
    return DatasetSplit(train=[int(i) for i in order[:n_train]],
                        val=[int(i) for i in order[n_train:n_train + n_val]],
                        test=[int(i) for i in order[n_train + n_val:]])


def make_sample(sample_seed, size, r, method="kspace_truncation",
                bias_amplitude=0.08):
    """Phantom pair plus its degraded target input."""
    spec = PhantomSpec(size=size, seed=sample_seed, bias_amplitude=bias_amplitude)
    x_t1, x_t2 = generate_phantom(spec)
    y_t2 = degrade(x_t2, r, method)
    return SamplePair(x_t1=x_t1, y_t2=y_t2, x_t2=x_t2, seed=sample_seed)


def save_sample(path, pair):
    """Three consecutive tensor records: guide, degraded target, target."""
    with open(path, "wb") as f:
        serialization.write_tensor(f, pair.x_t1)
        serialization.write_tensor(f, pair.y_t2)
        serialization.write_tensor(f, pair.x_t2)


def load_sample(path):
    with open(path, "rb") as f:
        x_t1 = serialization.read_tensor(f)
        y_t2 = serialization.read_tensor(f)
        x_t2 = serialization.read_tensor(f)
    stem = os.path.splitext(os.path.basename(path))[0]
    return SamplePair(x_t1=x_t1, y_t2=y_t2, x_t2=x_t2, seed=int(stem))


def sample_seed_for(dataset_seed, index):
    """Per-sample seed: dataset seed in the high bits, index in the low."""
    return (int(dataset_seed) << 32) + int(index)


def build_dataset(root, count, size=64, r=2, seed=0,
                  method="kspace_truncation", bias_amplitude=0.08,
                  preview_count=3):
    """Generate, split, and store a dataset.

    Layout: <root>/<split>/<seed>.mnt1 triples, a split.txt manifest per
    split directory (one seed per line), and PGM previews of a few training
    samples under <root>/preview/.
    """
    split = make_split(count, seed)
    for name, indices in (("train", split.train), ("val", split.val),
                          ("test", split.test)):
        subdir = os.path.join(root, name)
        os.makedirs(subdir, exist_ok=True)
        seeds = []
        for i in indices:
            s = sample_seed_for(seed, i)
            pair = make_sample(s, size, r, method, bias_amplitude)
            save_sample(os.path.join(subdir, "%d.mnt1" % s), pair)
            seeds.append(s)
        with open(os.path.join(subdir, "split.txt"), "w", encoding="utf-8") as f:
            for s in seeds:
                f.write("%d\n" % s)
    preview_dir = os.path.join(root, "preview")
    os.makedirs(preview_dir, exist_ok=True)
    for i in split.train[:preview_count]:
        s = sample_seed_for(seed, i)
        pair = make_sample(s, size, r, method, bias_amplitude)
        serialization.write_pgm(os.path.join(preview_dir, "%d_t1.pgm" % s), pair.x_t1)
        serialization.write_pgm(os.path.join(preview_dir, "%d_t2_lr.pgm" % s), pair.y_t2)
        serialization.write_pgm(os.path.join(preview_dir, "%d_t2.pgm" % s), pair.x_t2)
    return split


def load_split(root, name):
    """Load every sample of one split, in manifest order."""
    subdir = os.path.join(root, name)
    manifest = os.path.join(subdir, "split.txt")
    if not os.path.isfile(manifest):
        raise FileNotFoundError("missing split manifest %s" % manifest)
    samples = []
    with open(manifest, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                samples.append(load_sample(os.path.join(subdir, line + ".mnt1")))
    return samples

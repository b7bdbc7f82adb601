"""Binary and text formats used by the toolkit.

* tensor container: magic ``MNT1``, u32 rank, u64 dims, raw little-endian
  float64 payload in row-major order;
* checkpoint: magic ``MINT``, u32 format version, u32 entry count, a
  manifest of (length-prefixed UTF-8 name, u32 rank, u64 dims) records,
  then the concatenated float64 blobs in manifest order;
* config: flat ``key=value`` text, one pair per line, keys sorted;
* PGM (P5, 8-bit) export for previews.

All integers are little-endian. Read paths raise FormatError on bad magic
or truncation instead of crashing downstream.
"""

import struct

import numpy as np

TENSOR_MAGIC = b"MNT1"
CHECKPOINT_MAGIC = b"MINT"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Raised for bad magic numbers, truncated payloads, or version skew."""


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated file while reading %s (wanted %d bytes, got %d)"
                          % (what, n, len(buf)))
    return buf


def write_tensor(f, arr):
    """Append one tensor record to a binary stream."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack("<%dQ" % arr.ndim, *arr.shape))
    f.write(arr.astype("<f8", copy=False).tobytes())


def read_tensor(f):
    """Read one tensor record from a binary stream."""
    magic = _read_exact(f, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError("bad tensor magic %r" % (magic,))
    (rank,) = struct.unpack("<I", _read_exact(f, 4, "tensor rank"))
    dims = struct.unpack("<%dQ" % rank, _read_exact(f, 8 * rank, "tensor dims"))
    count = 1
    for d in dims:
        count *= d
    payload = _read_exact(f, 8 * count, "tensor payload")
    return np.frombuffer(payload, dtype="<f8").reshape(dims).copy()


def save_tensor(path, arr):
    with open(path, "wb") as f:
        write_tensor(f, arr)


def load_tensor(path):
    with open(path, "rb") as f:
        return read_tensor(f)


def save_checkpoint(path, params):
    """Write named arrays to a checkpoint file, in dict order."""
    arrays = [(name, np.ascontiguousarray(a, dtype=np.float64))
              for name, a in params.items()]
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(arrays)))
        for name, a in arrays:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", a.ndim))
            f.write(struct.pack("<%dQ" % a.ndim, *a.shape))
        for _, a in arrays:
            f.write(a.astype("<f8", copy=False).tobytes())


def load_checkpoint(path):
    """Read a checkpoint back as an ordered name -> array dict."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError("bad checkpoint magic %r" % (magic,))
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError("unsupported checkpoint version %d" % version)
        (count,) = struct.unpack("<I", _read_exact(f, 4, "entry count"))
        manifest = []
        for _ in range(count):
            (nlen,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
            name = _read_exact(f, nlen, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
            dims = struct.unpack("<%dQ" % rank, _read_exact(f, 8 * rank, "dims"))
            manifest.append((name, dims))
        out = {}
        for name, dims in manifest:
            n = 1
            for d in dims:
                n *= d
            payload = _read_exact(f, 8 * n, "blob for %s" % name)
            out[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        return out


def save_config(path, pairs):
    """Write a flat key=value config, keys sorted for diff-stable output."""
    with open(path, "w", encoding="utf-8") as f:
        for key in sorted(pairs):
            f.write("%s=%s\n" % (key, pairs[key]))


def load_config(path):
    """Parse key=value lines; values become int/float/bool when they look
    like one, otherwise stay strings."""
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise FormatError("config line %d is not key=value: %r"
                                  % (lineno, line))
            key, _, value = line.partition("=")
            out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_value(text):
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def write_pgm(path, img):
    """Export a [0, 1] grayscale image as 8-bit binary PGM."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError("PGM export expects a 2-D image, got %r" % (img.shape,))
    quant = np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(quant.tobytes())


def read_pgm(path):
    """Read back an 8-bit binary PGM as a [0, 1] float image."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise FormatError("not a binary PGM file")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1
    width, height, maxval = fields
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height, offset=pos)
    return pixels.reshape(height, width).astype(np.float64) / float(maxval)

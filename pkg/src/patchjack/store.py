"""Artifact formats: PGM images, CSV tables, binary checkpoints, run manifests.

All artifacts are deliberately simple and diffable:

* images — binary PGM (P5, maxval 255);
* tables — CSV with a header row;
* checkpoints — named float32 arrays in a little-endian container with a
  trailing CRC32 (layout below);
* manifests — plain-text ``key=value`` files written atomically after all
  other outputs, so a run directory with a manifest is complete.

Checkpoint layout::

    b"PJCK" | u16 version | u8 kind_len | kind | u32 n_entries
    entry:   u16 name_len | name | u8 ndim | u32*ndim dims | f32*prod payload
    trailer: u32 crc32 over every preceding byte
"""

from __future__ import annotations

import hashlib
import os
import struct
import time
import zlib

import numpy as np

CHECKPOINT_MAGIC = b"PJCK"
CHECKPOINT_VERSION = 1


class StoreError(Exception):
    """Raised for malformed or mismatched artifacts."""


# ---------------------------------------------------------------------------
# PGM (portable graymap, binary P5)


def write_pgm(path, image, maxval: int = 255):
    """Write a 2-D array as binary PGM.

    Float arrays are interpreted in [0, 1] and scaled; integer arrays are
    written as-is (must fit in ``maxval``).
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise StoreError(f"PGM image must be 2-D, got shape {img.shape}")
    if img.dtype.kind == "f":
        data = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint8)
    else:
        if img.min() < 0 or img.max() > maxval:
            raise StoreError("integer PGM data out of range")
        data = img.astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path):
    """Read a binary PGM; returns (uint8 array of shape (h, w), maxval)."""
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P5"):
        raise StoreError(f"{path}: not a binary PGM (P5)")
    # Header: magic, width, height, maxval — whitespace/comment separated.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval > 255:
        raise StoreError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(raw[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise StoreError(f"{path}: truncated pixel payload")
    return data.reshape(h, w).copy(), maxval


# ---------------------------------------------------------------------------
# CSV


def write_csv(path, header, rows):
    """Write rows (iterables of str/num) under a comma-joined header."""
    with open(path, "w", encoding="ascii") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_csv_cell(v) for v in row) + "\n")


def _csv_cell(v):
    if isinstance(v, float) or isinstance(v, np.floating):
        return format_float(float(v))
    return str(v)


def format_float(x: float) -> str:
    """Shortest decimal that round-trips a float32 exactly."""
    return np.format_float_positional(np.float32(x), unique=True, trim="0")


def read_csv(path):
    """Read a CSV written by :func:`write_csv`; returns (header, rows of str)."""
    with open(path, encoding="ascii") as f:
        lines = [ln.rstrip("\n") for ln in f if ln.strip()]
    if not lines:
        raise StoreError(f"{path}: empty CSV")
    header = lines[0].split(",")
    return header, [ln.split(",") for ln in lines[1:]]


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(params: dict, path, kind: str):
    """Persist named float32 arrays (or autodiff tensors) with a CRC trailer."""
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<H", CHECKPOINT_VERSION)
    kind_b = kind.encode("ascii")
    buf += struct.pack("<B", len(kind_b))
    buf += kind_b
    buf += struct.pack("<I", len(params))
    for name, value in params.items():
        raw = (
            value.data
            if hasattr(value, "data") and hasattr(value, "requires_grad")
            else value
        )
        arr = np.asarray(raw, dtype=np.float32)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        name_b = name.encode("utf-8")
        buf += struct.pack("<H", len(name_b))
        buf += name_b
        buf += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            buf += struct.pack("<I", d)
        buf += arr.tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    _atomic_write_bytes(path, bytes(buf))


def load_checkpoint(path, expect_kind: str | None = None):
    """Load a checkpoint; returns (kind, dict of name -> float32 array).

    Raises :class:`StoreError` on CRC failure (naming the offset), version
    mismatch (naming both versions), or — when ``expect_kind`` is given —
    a checkpoint written by a different module.
    """
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 2 + 4 or raw[:4] != CHECKPOINT_MAGIC:
        raise StoreError(f"{path}: not a checkpoint file")
    crc_offset = len(raw) - 4
    (stored_crc,) = struct.unpack_from("<I", raw, crc_offset)
    actual_crc = zlib.crc32(raw[:crc_offset])
    if stored_crc != actual_crc:
        raise StoreError(f"{path}: CRC mismatch at offset {crc_offset}")
    pos = 4
    (version,) = struct.unpack_from("<H", raw, pos)
    pos += 2
    if version != CHECKPOINT_VERSION:
        raise StoreError(
            f"{path}: checkpoint version {version}, this build reads "
            f"version {CHECKPOINT_VERSION}"
        )
    (kind_len,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    kind = raw[pos : pos + kind_len].decode("ascii")
    pos += kind_len
    if expect_kind is not None and kind != expect_kind:
        raise StoreError(
            f"{path}: parameter schema mismatch — expected a '{expect_kind}' "
            f"checkpoint, found '{kind}'"
        )
    (n_entries,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    params = {}
    for _ in range(n_entries):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
        pos += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=pos)
        pos += 4 * count
        params[name] = arr.reshape(shape).copy()
    if pos != crc_offset:
        raise StoreError(f"{path}: {crc_offset - pos} trailing bytes before CRC")
    return kind, params


# ---------------------------------------------------------------------------
# Config files and manifests (plain-text key=value)


def parse_kv_file(path):
    """Parse ``key=value`` lines; '#' starts a comment, blanks ignored."""
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise StoreError(f"{path}:{lineno}: expected key=value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def write_kv_file(path, items: dict):
    text = "".join(f"{k}={v}\n" for k, v in items.items())
    _atomic_write_bytes(path, text.encode("utf-8"))


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def code_version() -> str:
    """Content hash of this package's python sources."""
    pkg_dir = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.sha256()
    for root, _dirs, files in sorted(os.walk(pkg_dir)):
        for name in sorted(files):
            if not name.endswith(".py"):
                continue
            full = os.path.join(root, name)
            rel = os.path.relpath(full, pkg_dir)
            h.update(rel.encode())
            with open(full, "rb") as f:
                h.update(f.read())
    return h.hexdigest()


def write_manifest(path, command, config: dict, seed, inputs, outputs,
                   wall_clock_sec: float):
    """Write the run manifest (atomically, after all listed outputs exist).

    ``inputs`` is an iterable of paths whose digests are recorded;
    ``outputs`` likewise, and each output must already be on disk.
    """
    items = {
        "schema_version": "1",
        "command": command,
        "created_unix": str(int(time.time())),
        "wall_clock_sec": f"{wall_clock_sec:.3f}",
        "code_version": code_version(),
        "seed": str(seed),
    }
    for key in sorted(config):
        items[f"config.{key}"] = str(config[key])
    for p in inputs:
        items[f"input.{os.path.basename(str(p))}"] = sha256_file(p)
    for p in outputs:
        items[f"output.{os.path.basename(str(p))}"] = sha256_file(p)
    write_kv_file(path, items)


def _atomic_write_bytes(path, data: bytes):
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as f:
        f.write(data)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)

"""Binary and image file formats.

All binary formats are little-endian and written atomically: data goes to a
temporary file in the target directory which is then renamed over the
destination, so readers never observe a half-written file.

PECD (detections)::

    b"PECD" u16 version u32 width u32 height u64 t_r u32 n_r f64 eta f64 s_total f64 b_total
    per pixel, row-major: u32 count, count x u64 timestamps (ps, sorted)

PECL (labels) has the same header with magic ``b"PECL"`` and per pixel a
u32 count followed by that many u8 labels (1 signal, 0 background).

FGRD (float grid)::

    b"FGRD" u32 width u32 height f64 unit, then row-major f32 values

PUWR (unmixing result)::

    b"PUWR" u16 version u32 width u32 height
    f64 t_r f64 t_p f64 pulse_sigma f64 t_wind u32 n_r f64 eta f64 s_total f64 b_total
    per pixel arrays: i64 k_max, i64 n_sp, i64 window_start (-1 if none),
    u8 reliable, u8 level, f64 alpha, u32 retained count
    then all retained timestamps as u64, pixel by pixel
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np

from .model import AcquisitionConfig, DetectionSet, ModelError, Scene

PECD_VERSION = 1
PUWR_VERSION = 1
UNIT_NONE = 0.0
UNIT_METER = 1.0

_PECD_HEADER = struct.Struct("<4sHIIQIddd")
_FGRD_HEADER = struct.Struct("<4sIId")
_PUWR_HEADER = struct.Struct("<4sHIIddddIddd")


class FormatError(ModelError):
    """Malformed or inconsistent file contents."""


def write_atomic(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path, text: str) -> None:
    write_atomic(path, text.encode("utf-8"))


def _read(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc


def _interleave(counts, payload, width_bytes):
    """Per-pixel records: a u32 count then ``count`` fixed-width items."""
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.size
    sizes = 4 + counts * width_bytes
    out = np.zeros(int(sizes.sum()), dtype=np.uint8)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    head = np.add.outer(starts, np.arange(4)).ravel()
    out[head] = counts.astype("<u4").view(np.uint8)
    body = np.ones(out.size, dtype=bool)
    body[head] = False
    out[body] = np.ascontiguousarray(payload).view(np.uint8)
    return out.tobytes() if n else b""


def _deinterleave(buf, n_pixels, width_bytes, dtype, what):
    """Inverse of :func:`_interleave`; returns (counts, flat items)."""
    counts = np.zeros(n_pixels, dtype=np.int64)
    pos = 0
    raw = np.frombuffer(buf, dtype=np.uint8)
    for p in range(n_pixels):
        if pos + 4 > raw.size:
            raise FormatError(f"{what}: truncated at pixel {p}")
        c = int(np.frombuffer(buf, "<u4", 1, pos)[0])
        counts[p] = c
        pos += 4 + c * width_bytes
    if pos != raw.size:
        raise FormatError(f"{what}: {raw.size - pos} trailing or missing bytes")
    sizes = 4 + counts * width_bytes
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    body = np.ones(raw.size, dtype=bool)
    body[np.add.outer(starts, np.arange(4)).ravel()] = False
    items = raw[body].copy().view(dtype)
    return counts, items


# ----------------------------------------------------------------- detections

def encode_detections(det: DetectionSet, magic: bytes = b"PECD") -> bytes:
    cfg = det.config
    if float(cfg.t_r) != int(cfg.t_r):
        raise FormatError("t_r must be a whole number of picoseconds")
    head = _PECD_HEADER.pack(magic, PECD_VERSION, det.width, det.height, int(cfg.t_r), cfg.n_r,
                             cfg.eta, cfg.s_total, cfg.b_total)
    return head + _interleave(det.counts, det.times.astype("<u8"), 8)


def _decode_header(buf, magic, base):
    if len(buf) < _PECD_HEADER.size:
        raise FormatError("file too short for header")
    m, version, w, h, t_r, n_r, eta, s, b = _PECD_HEADER.unpack_from(buf)
    if m != magic:
        raise FormatError(f"bad magic {m!r}, expected {magic!r}")
    if version != PECD_VERSION:
        raise FormatError(f"unsupported version {version}")
    base = base or AcquisitionConfig()
    try:
        cfg = AcquisitionConfig(t_r=float(t_r), t_p=base.t_p, pulse_sigma=base.pulse_sigma,
                                t_wind=base.t_wind, n_r=n_r, eta=eta, s_total=s, b_total=b)
    except ModelError as exc:
        raise FormatError(f"header: {exc}") from exc
    return w, h, cfg


def decode_detections(buf: bytes, base: AcquisitionConfig | None = None) -> DetectionSet:
    """Parse PECD bytes. Pulse width and window come from ``base``; the file
    does not carry them."""
    w, h, cfg = _decode_header(buf, b"PECD", base)
    counts, times = _deinterleave(buf[_PECD_HEADER.size:], w * h, 8, "<u8", "PECD")
    offsets = np.concatenate([[0], np.cumsum(counts)])
    det = DetectionSet(w, h, offsets, times.astype(np.int64), cfg)
    det.validate()
    return det


def write_detections(path, det: DetectionSet) -> None:
    write_atomic(path, encode_detections(det))


def read_detections(path, base: AcquisitionConfig | None = None) -> DetectionSet:
    return decode_detections(_read(path), base)


def write_labels(path, det: DetectionSet, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.shape != det.times.shape:
        raise FormatError("labels do not align with detections")
    head = encode_detections(det, b"PECL")[:_PECD_HEADER.size]
    write_atomic(path, head + _interleave(det.counts, labels, 1))


def read_labels(path, det: DetectionSet | None = None) -> np.ndarray:
    buf = _read(path)
    w, h, _ = _decode_header(buf, b"PECL", det.config if det is not None else None)
    counts, labels = _deinterleave(buf[_PECD_HEADER.size:], w * h, 1, np.uint8, "PECL")
    if det is not None and ((w, h) != (det.width, det.height)
                            or not np.array_equal(counts, det.counts)):
        raise FormatError("label sidecar does not match the detection file")
    return labels


# ----------------------------------------------------------------- float grid

def encode_grid(values, unit: float = UNIT_NONE) -> bytes:
    v = np.asarray(values)
    if v.ndim != 2:
        raise FormatError("grid must be 2-D")
    h, w = v.shape
    return _FGRD_HEADER.pack(b"FGRD", w, h, float(unit)) + v.astype("<f4").tobytes()


def decode_grid(buf: bytes):
    """Return ``(values, unit)``; values come back as float64."""
    if len(buf) < _FGRD_HEADER.size:
        raise FormatError("file too short for FGRD header")
    magic, w, h, unit = _FGRD_HEADER.unpack_from(buf)
    if magic != b"FGRD":
        raise FormatError(f"bad magic {magic!r}, expected b'FGRD'")
    body = buf[_FGRD_HEADER.size:]
    if len(body) != 4 * w * h:
        raise FormatError("FGRD payload size does not match dimensions")
    return np.frombuffer(body, "<f4").astype(float).reshape(h, w), unit


def write_grid(path, values, unit: float = UNIT_NONE) -> None:
    write_atomic(path, encode_grid(values, unit))


def read_grid(path):
    return decode_grid(_read(path))


# ------------------------------------------------------------------------ PGM

def encode_pgm(values, lo: float | None = None, hi: float | None = None, maxval: int = 65535) -> bytes:
    """Quantize to a binary PGM; a comment records value = offset + scale * pixel."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 2:
        raise FormatError("image must be 2-D")
    if maxval not in (255, 65535):
        raise FormatError("maxval must be 255 or 65535")
    lo = float(np.nanmin(v)) if lo is None else float(lo)
    hi = float(np.nanmax(v)) if hi is None else float(hi)
    scale = (hi - lo) / maxval if hi > lo else 1.0
    q = np.clip(np.round((np.nan_to_num(v, nan=lo) - lo) / scale), 0, maxval)
    h, w = v.shape
    head = f"P5\n# scale={scale!r} offset={lo!r}\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else np.uint8
    return head + q.astype(dtype).tobytes()


_PGM_TOKEN = re.compile(rb"(#[^\n]*\n)|(\S+)")


def decode_pgm(buf: bytes):
    """Return ``(pixels, maxval, comments)`` with pixels as integers."""
    tokens, comments = [], []
    pos = 0
    for m in _PGM_TOKEN.finditer(buf):
        if m.group(1) is not None:
            comments.append(m.group(1)[1:].strip().decode("ascii", "replace"))
        else:
            tokens.append(m.group(2))
        pos = m.end()
        if len(tokens) == 4:
            break
    if len(tokens) < 4 or tokens[0] != b"P5":
        raise FormatError("not a binary PGM (P5) file")
    try:
        w, h, maxval = (int(t) for t in tokens[1:4])
    except ValueError as exc:
        raise FormatError("malformed PGM header") from exc
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError("PGM dimensions or maxval out of range")
    body = buf[pos + 1:]
    dtype = ">u2" if maxval > 255 else np.uint8
    nbytes = w * h * np.dtype(dtype).itemsize
    if len(body) < nbytes:
        raise FormatError("PGM payload truncated")
    pixels = np.frombuffer(body[:nbytes], dtype).astype(np.int64).reshape(h, w)
    return pixels, maxval, comments


def pgm_values(buf: bytes) -> np.ndarray:
    """Undo :func:`encode_pgm` using its scale comment."""
    pixels, maxval, comments = decode_pgm(buf)
    for c in comments:
        m = re.match(r"scale=(\S+) offset=(\S+)", c)
        if m:
            return float(m.group(2)) + float(m.group(1)) * pixels
    return pixels / maxval


def write_pgm(path, values, lo=None, hi=None, maxval: int = 65535) -> None:
    write_atomic(path, encode_pgm(values, lo, hi, maxval))


def read_pgm(path):
    return decode_pgm(_read(path))


# ---------------------------------------------------------------------- scene

def load_scene(alpha_path, depth_path, z_offset: float = 0.0, z_scale: float = 1.0,
               z_max: float = 14.5) -> Scene:
    """Reflectivity from a PGM (normalized by maxval); depth from PGM or FGRD.

    A PGM depth map is mapped affinely, ``z = z_offset + z_scale * p / maxval``.
    """
    pixels, maxval, _ = read_pgm(alpha_path)
    alpha = pixels / float(maxval)
    buf = _read(depth_path)
    if buf[:4] == b"FGRD":
        depth, _ = decode_grid(buf)
    else:
        dp, dmax, _ = decode_pgm(buf)
        depth = z_offset + z_scale * dp / float(dmax)
    if alpha.shape != depth.shape:
        raise FormatError(f"reflectivity {alpha.shape} and depth {depth.shape} differ in size")
    return Scene(alpha, depth, z_max)


# ------------------------------------------------------------- unmix results

def encode_unmix(result) -> bytes:
    g = result.windows
    cfg = result.config
    h, w = g.shape
    head = _PUWR_HEADER.pack(b"PUWR", PUWR_VERSION, w, h, cfg.t_r, cfg.t_p, cfg.pulse_sigma,
                             cfg.t_wind, cfg.n_r, cfg.eta, cfg.s_total, cfg.b_total)
    parts = [head,
             g.k_max.astype("<i8").tobytes(), g.n_sp.astype("<i8").tobytes(),
             g.window_start.astype("<i8").tobytes(), g.reliable.astype(np.uint8).tobytes(),
             g.level.astype(np.uint8).tobytes(), np.asarray(result.alpha).astype("<f8").tobytes(),
             g.retained_counts.astype("<u4").tobytes(), g.retained_times.astype("<u8").tobytes()]
    return b"".join(parts)


def decode_unmix(buf: bytes):
    from .unmixing import UnmixResult, WindowGrid

    if len(buf) < _PUWR_HEADER.size:
        raise FormatError("file too short for PUWR header")
    magic, version, w, h, t_r, t_p, sigma, t_wind, n_r, eta, s, b = _PUWR_HEADER.unpack_from(buf)
    if magic != b"PUWR":
        raise FormatError(f"bad magic {magic!r}, expected b'PUWR'")
    if version != PUWR_VERSION:
        raise FormatError(f"unsupported version {version}")
    cfg = AcquisitionConfig(t_r=t_r, t_p=t_p, pulse_sigma=sigma, t_wind=t_wind, n_r=n_r,
                            eta=eta, s_total=s, b_total=b)
    n = w * h
    fixed = n * (8 * 3 + 1 + 1 + 8 + 4)
    if len(buf) < _PUWR_HEADER.size + fixed:
        raise FormatError("PUWR payload truncated")
    pos = _PUWR_HEADER.size

    def take(dtype, count):
        nonlocal pos
        arr = np.frombuffer(buf, dtype, count, pos)
        pos += arr.nbytes
        return arr

    k_max = take("<i8", n).astype(np.int64)
    n_sp = take("<i8", n).astype(np.int64)
    start = take("<i8", n).astype(np.int64)
    reliable = take(np.uint8, n).astype(bool)
    level = take(np.uint8, n).astype(np.int64)
    alpha = take("<f8", n).astype(float).reshape(h, w)
    counts = take("<u4", n).astype(np.int64)
    if len(buf) - pos != 8 * int(counts.sum()):
        raise FormatError("PUWR retained-time block has the wrong size")
    times = take("<u8", int(counts.sum())).astype(np.int64)
    offsets = np.concatenate([[0], np.cumsum(counts)])
    grid = WindowGrid((h, w), k_max, n_sp, start, reliable, level, offsets, times)
    return UnmixResult(grid, alpha, config=cfg)


def write_unmix(path, result) -> None:
    write_atomic(path, encode_unmix(result))


def read_unmix(path):
    return decode_unmix(_read(path))

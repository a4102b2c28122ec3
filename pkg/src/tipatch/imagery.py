"""Image and patch value types, file formats and seeded random streams.

Images are ``float64`` numpy arrays of shape ``(3, H, W)`` with values in
[0, 1]; :func:`as_image` validates and freezes them.  Patches wrap a square
image together with training metadata and are stored in the ``TIPF`` binary
container::

    magic  b"TIPF"          4 bytes
    version u16 = 1
    C, D_h, D_w u16 each
    payload C*D_h*D_w float32, little endian, C-major then row-major
    meta_len u32
    meta   UTF-8 JSON, meta_len bytes

All integers are little endian.  The same container carries metric weights
(see :mod:`tipatch.metrics`).
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

TIPF_MAGIC = b"TIPF"
TIPF_VERSION = 1
_TIPF_HEADER = struct.Struct("<4sHHHH")

ROTATIONS = (0, 90, 180, 270)


class ImageFormatError(ValueError):
    """Malformed image file; carries the offending path and byte offset."""

    def __init__(self, path, offset, reason):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: offset {offset}: {reason}")


class PatchFormatError(ValueError):
    """Malformed or inconsistent TIPF file."""


def as_image(data, copy: bool = True) -> np.ndarray:
    """Validate ``data`` as a 3xHxW image in [0, 1] and return a read-only float64 array."""
    arr = np.array(data, dtype=np.float64, copy=copy)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"image must have shape (3, H, W), got {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[2] < 1:
        raise ValueError(f"image must be at least 1x1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("image contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"image values outside [0, 1]: [{arr.min()}, {arr.max()}]")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Patch:
    """A square 3xDxD patch plus provenance metadata.

    ``meta`` conventionally holds ``variant``, ``seed``, ``iterations`` and
    ``metric``; anything JSON-serialisable is allowed.
    """

    pixels: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        px = as_image(self.pixels)
        if px.shape[1] != px.shape[2]:
            raise ValueError(f"patch must be square, got {px.shape[1]}x{px.shape[2]}")
        if px.shape[1] < 2:
            raise ValueError("patch side must be >= 2")
        object.__setattr__(self, "pixels", px)

    @property
    def size(self) -> int:
        return self.pixels.shape[1]

    def with_pixels(self, pixels, **meta) -> "Patch":
        return Patch(pixels, {**self.meta, **meta})


class Placement(NamedTuple):
    """Top-left corner (0-based column ``x``, row ``y``) and CCW rotation in degrees."""

    x: int
    y: int
    rot: int = 0

    def check(self, height: int, width: int, size: int) -> None:
        if self.rot not in ROTATIONS:
            raise ValueError(f"rotation must be one of {ROTATIONS}, got {self.rot}")
        if not (0 <= self.x <= width - size and 0 <= self.y <= height - size):
            raise ValueError(
                f"placement ({self.x}, {self.y}) out of bounds for a {size}px patch "
                f"on a {height}x{width} image"
            )


# ---------------------------------------------------------------- quantization

def quantize(img: np.ndarray) -> np.ndarray:
    """Map floats to bytes with round-half-up: ``floor(f*255 + 0.5)`` clamped to [0, 255]."""
    q = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(q, 0, 255).astype(np.uint8)


def dequantize(b: np.ndarray) -> np.ndarray:
    return as_image(np.asarray(b, dtype=np.float64) / 255.0, copy=False)


# ----------------------------------------------------------------------- PPM

def _ppm_tokens(buf: bytes, path, count: int):
    """Read ``count`` whitespace-separated header integers, skipping comments."""
    pos = 2
    out = []
    while len(out) < count:
        if pos >= len(buf):
            raise ImageFormatError(path, pos, "truncated header")
        c = buf[pos:pos + 1]
        if c.isspace():
            pos += 1
        elif c == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                raise ImageFormatError(path, pos, "unterminated comment in header")
            pos = nl + 1
        elif c.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            out.append((int(buf[start:pos]), start))
        else:
            raise ImageFormatError(path, pos, f"unexpected byte {c!r} in header")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError(path, pos, "missing whitespace after maxval")
    return out, pos + 1


def _load_ppm(buf: bytes, path) -> np.ndarray:
    if buf[:2] != b"P6":
        if buf[:2] in (b"P5", b"P2"):
            raise ImageFormatError(path, 0, "grayscale PNM, expected 3-channel P6")
        raise ImageFormatError(path, 0, f"bad magic {buf[:2]!r}, expected b'P6'")
    ((w, w_off), (h, h_off), (maxval, m_off)), data_off = _ppm_tokens(buf, path, 3)
    if w < 1:
        raise ImageFormatError(path, w_off, f"invalid width {w}")
    if h < 1:
        raise ImageFormatError(path, h_off, f"invalid height {h}")
    if maxval != 255:
        raise ImageFormatError(path, m_off, f"unsupported maxval {maxval}, expected 255")
    need = 3 * w * h
    payload = buf[data_off:data_off + need]
    if len(payload) < need:
        raise ImageFormatError(
            path, data_off + len(payload), f"truncated payload: {len(payload)} of {need} bytes"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)
    return dequantize(arr)


def _load_png(path) -> np.ndarray:
    from PIL import Image as PILImage

    with PILImage.open(path) as im:
        if im.mode != "RGB":
            raise ImageFormatError(path, 0, f"PNG mode {im.mode!r}, expected 8-bit RGB")
        arr = np.asarray(im, dtype=np.uint8)
    return dequantize(arr.transpose(2, 0, 1))


def load_image(path) -> np.ndarray:
    """Load a P6 PPM (or 8-bit RGB PNG) as a float image with values ``b/255``."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _load_png(path)
    return _load_ppm(buf, path)


def encode_ppm(img: np.ndarray, comments=()) -> bytes:
    img = as_image(img, copy=False)
    _, h, w = img.shape
    head = b"P6\n"
    for c in comments:
        head += b"# " + str(c).replace("\n", " ").encode("utf-8") + b"\n"
    head += f"{w} {h}\n255\n".encode("ascii")
    return head + quantize(img).transpose(1, 2, 0).tobytes()


def save_image(img: np.ndarray, path, comments=()) -> None:
    """Write ``img`` as P6 PPM, or as PNG when the suffix is ``.png``."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image as PILImage

        PILImage.fromarray(quantize(as_image(img, copy=False)).transpose(1, 2, 0)).save(path)
        return
    path.write_bytes(encode_ppm(img, comments))


IMAGE_SUFFIXES = (".ppm", ".png")


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


def load_dir(directory) -> list[np.ndarray]:
    """Load every PPM/PNG in ``directory`` in sorted filename order."""
    files = list_images(directory)
    if not files:
        raise FileNotFoundError(f"no .ppm/.png images in {directory}")
    return [load_image(f) for f in files]


# ---------------------------------------------------------------------- TIPF

def write_tipf(path, array: np.ndarray, meta: dict) -> None:
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim != 3:
        raise ValueError(f"TIPF payload must be 3-D (C, D_h, D_w), got {arr.shape}")
    if np.isnan(arr).any():
        raise ValueError("refusing to write NaN payload")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_TIPF_HEADER.pack(TIPF_MAGIC, TIPF_VERSION, *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)


def read_tipf(path) -> tuple[np.ndarray, dict]:
    """Return the float32 payload and metadata of a TIPF file."""
    buf = Path(path).read_bytes()
    if len(buf) < _TIPF_HEADER.size:
        raise PatchFormatError(f"{path}: file too short for TIPF header")
    magic, version, c, dh, dw = _TIPF_HEADER.unpack_from(buf)
    if magic != TIPF_MAGIC:
        raise PatchFormatError(f"{path}: bad magic {magic!r}, expected {TIPF_MAGIC!r}")
    if version != TIPF_VERSION:
        raise PatchFormatError(f"{path}: unsupported TIPF version {version}")
    off = _TIPF_HEADER.size
    n = c * dh * dw * 4
    if len(buf) < off + n + 4:
        raise PatchFormatError(f"{path}: payload shorter than declared {c}x{dh}x{dw}")
    payload = np.frombuffer(buf, dtype="<f4", count=c * dh * dw, offset=off).reshape(c, dh, dw)
    (mlen,) = struct.unpack_from("<I", buf, off + n)
    mbytes = buf[off + n + 4:]
    if len(mbytes) != mlen:
        raise PatchFormatError(f"{path}: metadata length {len(mbytes)} != declared {mlen}")
    if np.isnan(payload).any():
        raise PatchFormatError(f"{path}: NaN in payload")
    return payload.astype(np.float32), json.loads(mbytes.decode("utf-8"))


def tipf_size(c: int, dh: int, dw: int, meta: dict) -> int:
    """Exact byte size of a TIPF file for the given payload shape and metadata."""
    return _TIPF_HEADER.size + 4 * c * dh * dw + 4 + len(json.dumps(meta, sort_keys=True).encode())


def save_patch(p: Patch, path) -> None:
    write_tipf(path, p.pixels.astype(np.float32), p.meta)


def load_patch(path) -> Patch:
    payload, meta = read_tipf(path)
    if payload.shape[0] != 3 or payload.shape[1] != payload.shape[2]:
        raise PatchFormatError(f"{path}: patch must be 3xDxD, got {payload.shape}")
    return Patch(payload.astype(np.float64), meta)


# ----------------------------------------------------------------------- RNG

def _label_words(label: str) -> list[int]:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return list(struct.unpack("<4I", digest[:16]))


def rng_stream(seed: int, label: str) -> np.random.Generator:
    """Independent reproducible substream for ``(seed, label)``.

    The generator is numpy's PCG64 (128-bit LCG state with XSL-RR output),
    initialised through ``SeedSequence`` from the entropy words
    ``[seed & 0xFFFFFFFF, seed >> 32, *sha256(label)[:16] as 4 LE u32]``.
    """
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    words = [seed & 0xFFFFFFFF, seed >> 32, *_label_words(label)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))

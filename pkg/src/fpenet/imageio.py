"""Binary PPM (P6) / PGM (P5) reading and writing."""
from __future__ import annotations

import numpy as np

from .errors import DataError


def _tokens(buf, count, start):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos, comments = [], start, []
    while len(out) < count:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos >= len(buf):
            raise DataError("image header truncated")
        if buf[pos : pos + 1] == b"#":
            end = buf.find(b"\n", pos)
            end = len(buf) if end < 0 else end
            comments.append(buf[pos + 1 : end].decode("ascii", "replace").strip())
            pos = end + 1
            continue
        end = pos
        while end < len(buf) and not buf[end : end + 1].isspace() and buf[end : end + 1] != b"#":
            end += 1
        out.append(buf[pos:end])
        pos = end
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1, comments


def _read_pnm(path, magic, channels):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:2] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {buf[:2]!r}")
    (w, h, maxval), pos, comments = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    if not 0 < maxval < 65536:
        raise DataError(f"{path}: bad maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * channels
    if len(buf) - pos < n * dtype.itemsize:
        raise DataError(f"{path}: raster truncated")
    data = np.frombuffer(buf, dtype=dtype, count=n, offset=pos)
    return data.reshape(h, w, channels), maxval, comments


def read_ppm(path):
    """Return ``(image[3,h,w] float32 in [0,1])``."""
    data, maxval, _ = _read_pnm(path, b"P6", 3)
    return (data.astype(np.float32) / maxval).transpose(2, 0, 1).copy()


def read_pgm(path):
    """Return ``(array[h,w] int, maxval, header comments)``."""
    data, maxval, comments = _read_pnm(path, b"P5", 1)
    return data[:, :, 0].astype(np.int64), maxval, comments


def _header(magic, w, h, maxval, comments):
    lines = [magic] + [f"# {c}" for c in comments] + [f"{w} {h}", str(maxval)]
    return ("\n".join(lines) + "\n").encode("ascii")


def encode_pgm(labels, maxval=255, comments=()):
    h, w = labels.shape
    if labels.min() < 0 or labels.max() > maxval:
        raise DataError(f"label values outside [0, {maxval}]")
    dtype = ">u2" if maxval > 255 else "u1"
    return _header("P5", w, h, maxval, comments) + np.ascontiguousarray(labels, dtype=dtype).tobytes()


def encode_ppm(rgb, comments=()):
    """``rgb`` is ``[h, w, 3]`` uint8."""
    h, w, _ = rgb.shape
    return _header("P6", w, h, 255, comments) + np.ascontiguousarray(rgb, dtype=np.uint8).tobytes()


def image_to_ppm(image):
    """``image[3,h,w]`` in [0,1] -> P6 bytes."""
    rgb = np.clip(np.rint(image.transpose(1, 2, 0) * 255), 0, 255).astype(np.uint8)
    return encode_ppm(rgb)


def read_palette(path):
    """Lines of ``class r g b``; returns ``{class: (r, g, b)}``."""
    pal = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 4:
                raise DataError(f"{path}:{lineno}: expected 'class r g b'")
            c, r, g, b = (int(v) for v in parts)
            pal[c] = (r, g, b)
    return pal

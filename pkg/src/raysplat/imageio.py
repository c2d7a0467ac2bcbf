"""8-bit PNG and PPM (ASCII P3 / binary P6) image files, float images in [0, 1]."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ParseError, UnsupportedFormat


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def _ppm_tokens(data: bytes, count: int, start: int = 0) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    toks, i, n = [], start, len(data)
    while len(toks) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j : j + 1].isspace() and data[j : j + 1] != b"#":
            j += 1
        if j == i:
            raise ParseError("truncated PPM header")
        toks.append(data[i:j])
        i = j
    return toks, i


def _read_ppm(data: bytes) -> np.ndarray:
    magic = data[:2]
    try:
        toks, pos = _ppm_tokens(data, 3, 2)
        w, h, maxval = (int(t) for t in toks)
    except ValueError as exc:
        raise ParseError(f"bad PPM header: {exc}") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise ParseError("bad PPM dimensions")
    n = w * h * 3
    if magic == b"P3":
        body = data[pos:].split()
        if len(body) < n:
            raise ParseError(f"truncated PPM: expected {n} samples, found {len(body)}")
        try:
            vals = np.array([int(v) for v in body[:n]], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"bad PPM sample: {exc}") from exc
    else:
        pos += 1  # single whitespace byte before raster
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos : pos + n * dt.itemsize]
        if len(raw) < n * dt.itemsize:
            raise ParseError("truncated PPM raster")
        vals = np.frombuffer(raw, dtype=dt).astype(np.float64)
    if vals.max(initial=0) > maxval:
        raise ParseError("PPM sample exceeds maxval")
    return (vals / maxval).reshape(h, w, 3)


def read_image(path) -> np.ndarray:
    """Load an RGB image as float64 (H, W, 3) in [0, 1]."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] in (b"P3", b"P6"):
        return _read_ppm(data)
    if data[:8] == b"\x89PNG\r\n\x1a\n":
        try:
            with Image.open(path) as im:
                im.load()
                arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        except (OSError, UnidentifiedImageError) as exc:
            raise ParseError(f"{path}: {exc}") from exc
        return arr / 255.0
    raise UnsupportedFormat(f"{path}: not a PNG or PPM file")


def write_image(path, img: np.ndarray) -> None:
    """Write (H, W, 3) or (H, W) floats in [0, 1]; format chosen by suffix."""
    path = Path(path)
    arr = to_uint8(img)
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    suffix = path.suffix.lower()
    if suffix == ".png":
        Image.fromarray(arr).save(path, format="PNG")
    elif suffix == ".ppm":
        h, w, _ = arr.shape
        path.write_bytes(b"P6\n%d %d\n255\n" % (w, h) + arr.tobytes())
    else:
        raise UnsupportedFormat(f"unsupported image suffix {suffix!r}")

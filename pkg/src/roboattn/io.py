"""Map, image and manifest file formats.

Map files:

* ``.attn`` -- magic ``b"ATTN"``, little-endian u32 width, u32 height,
  then width * height little-endian float32 values, row-major.
* ``.png`` / ``.pgm`` -- 8-bit grayscale, sum-normalised on load.
* ``.npy`` -- numpy arrays (used for two-channel label/mask stacks).

Manifests are JSON-lines files written atomically (temp file + rename).
"""

from __future__ import annotations

import io as _io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image as PILImage, UnidentifiedImageError

from roboattn.errors import InvalidInput, IoError
from roboattn.maps import _as_grid, normalize_sum

ATTN_MAGIC = b"ATTN"
_HEADER = struct.Struct("<4sII")
MAP_SUFFIXES = (".attn", ".png", ".pgm")


def encode_attn(values) -> bytes:
    arr = _as_grid(values)
    h, w = arr.shape
    return _HEADER.pack(ATTN_MAGIC, w, h) + arr.astype("<f4").tobytes()


def decode_attn(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < _HEADER.size:
        raise IoError(f"{path}: truncated .attn header")
    magic, w, h = _HEADER.unpack_from(data)
    if magic != ATTN_MAGIC:
        raise IoError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * w * h
    if len(data) != expected or w < 1 or h < 1:
        raise IoError(f"{path}: expected {expected} bytes for {w}x{h}, got {len(data)}")
    return np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(h, w)


def _atomic_write(path: Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_raw_map(path) -> np.ndarray:
    """Map values as stored (float32 for .attn, 0..255 for images)."""
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix == ".attn":
            return decode_attn(path.read_bytes(), path)
        if suffix in (".png", ".pgm"):
            with PILImage.open(path) as im:
                return np.asarray(im.convert("L"), dtype=np.float64)
        if suffix == ".npy":
            return np.load(path)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{path}: {exc}") from exc
    raise IoError(f"{path}: unsupported map format {suffix!r}")


def load_map(path) -> np.ndarray:
    """Load a map file as a float64 attention map.

    Grayscale images are sum-normalised; ``.attn`` values are returned as
    stored (converted to float64) so a save/load round trip is lossless.
    """
    raw = load_raw_map(path)
    if Path(path).suffix.lower() == ".attn":
        return raw.astype(np.float64)
    return normalize_sum(raw)


def save_map(values, path) -> None:
    """Write a map. ``.png``/``.pgm`` are scaled so the peak is 255."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".attn":
        _atomic_write(path, encode_attn(values))
        return
    if suffix in (".png", ".pgm"):
        arr = _as_grid(values)
        peak = arr.max()
        u8 = np.zeros(arr.shape, np.uint8) if peak <= 0 else np.rint(
            np.clip(arr / peak, 0, 1) * 255
        ).astype(np.uint8)
        _atomic_write(path, _encode_image(u8, "PPM" if suffix == ".pgm" else "PNG"))
        return
    if suffix == ".npy":
        buf = _io.BytesIO()
        np.save(buf, np.asarray(values))
        _atomic_write(path, buf.getvalue())
        return
    raise IoError(f"{path}: unsupported map format {suffix!r}")


def _encode_image(u8: np.ndarray, fmt: str) -> bytes:
    buf = _io.BytesIO()
    PILImage.fromarray(u8).save(buf, format=fmt)
    return buf.getvalue()


def load_image(path) -> np.ndarray:
    """RGB image as float64 (H, W, 3) in [0, 1]."""
    path = Path(path)
    try:
        with PILImage.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except (OSError, UnidentifiedImageError) as exc:
        raise IoError(f"{path}: {exc}") from exc


def save_image(img, path) -> None:
    """Write an (H, W, 3) float image in [0, 1] as 8-bit PNG."""
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 3 and x.shape[2] == 1:
        x = x[..., 0]
    u8 = np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)
    _atomic_write(Path(path), _encode_image(u8, "PNG"))


def read_jsonl(path) -> list:
    path = Path(path)
    rows = []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rows.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise IoError(f"{path}:{lineno}: {exc.msg}") from exc
    except OSError as exc:
        if isinstance(exc, IoError):
            raise
        raise IoError(f"{path}: {exc}") from exc
    return rows


def dumps_jsonl(rows: Iterable[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def write_jsonl(rows: Iterable[dict], path) -> None:
    _atomic_write(Path(path), dumps_jsonl(rows).encode("utf-8"))


def write_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    _atomic_write(Path(path), text.encode("utf-8"))


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise IoError(f"{path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise IoError(f"{path}: {exc.msg}") from exc


def read_manifest(path) -> list:
    """Read a JSON-lines manifest; ``id`` values must be unique."""
    rows = read_jsonl(path)
    seen = set()
    for r in rows:
        rid = r.get("id")
        if rid is not None:
            if rid in seen:
                raise InvalidInput(f"{path}: duplicate id {rid!r}")
            seen.add(rid)
    return rows

"""Seeded image corruptions with five-level severity ladders.

Images are float arrays of shape (H, W, 3) with values in [0, 1]. Every
corruption takes a severity in 1..5 (0 means "leave untouched") and, where
randomness is involved, an integer seed; the same (image, severity, seed)
always yields the same output. Each function also accepts an explicit
strength override that bypasses the ladder.

Fog and snow are procedural (plasma-fractal haze and motion-blurred flake
streaks), not learned weather transfer.
"""

from __future__ import annotations

import hashlib
import io
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image as PILImage
from scipy.ndimage import convolve

from roboattn.errors import InvalidInput, KernelTooLarge

logger = logging.getLogger(__name__)

KINDS = ("gaussian", "impulse", "motion_blur", "jpeg", "fog", "snow")
DEFAULT_SEVERITY = 3

GAUSSIAN_SIGMA = (0.08, 0.12, 0.18, 0.26, 0.38)
IMPULSE_FRACTION = (0.02, 0.04, 0.06, 0.09, 0.13)
BLUR_LENGTH = (7, 11, 15, 19, 23)
JPEG_QUALITY = (25, 18, 15, 10, 7)
FOG_STRENGTH = (0.15, 0.25, 0.35, 0.45, 0.55)
SNOW_DENSITY = (0.01, 0.02, 0.03, 0.045, 0.06)
SNOW_LENGTH = (5, 7, 9, 11, 13)
SNOW_WHITEN_PER_DENSITY = 8.0


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = DEFAULT_SEVERITY
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown corruption kind {self.kind!r}")
        if self.severity not in range(1, 6):
            raise InvalidInput(f"severity must be 1..5, got {self.severity}")


def _level(ladder: Sequence, severity: int):
    if severity not in range(0, 6):
        raise InvalidInput(f"severity must be 0..5, got {severity}")
    return None if severity == 0 else ladder[severity - 1]


def _as_image(img) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise InvalidInput(f"expected an (H, W, C) image, got shape {x.shape}")
    return x


def gaussian_noise(img, severity: int = DEFAULT_SEVERITY, seed: int = 0, sigma=None):
    x = _as_image(img)
    sigma = _level(GAUSSIAN_SIGMA, severity) if sigma is None else sigma
    if not sigma:
        return x.copy()
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.normal(0.0, sigma, size=x.shape), 0.0, 1.0)


def impulse_positions(shape, fraction: float, seed: int):
    """Boolean mask of affected pixel positions and their salt/pepper values."""
    rng = np.random.default_rng(seed)
    hit = rng.random(shape) < fraction
    salt = rng.random(shape) < 0.5
    return hit, salt


def impulse_noise(img, severity: int = DEFAULT_SEVERITY, seed: int = 0, fraction=None):
    """Replace a random fraction of pixel positions by black or white.

    Each position is hit independently, so the count is binomial.
    """
    x = _as_image(img)
    fraction = _level(IMPULSE_FRACTION, severity) if fraction is None else fraction
    if not fraction:
        return x.copy()
    hit, salt = impulse_positions(x.shape[:2], fraction, seed)
    out = x.copy()
    out[hit] = salt[hit, None].astype(np.float64)
    return out


def motion_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalised line kernel, one equal-mass tap per step along the
    dominant axis."""
    if length < 1:
        raise InvalidInput("kernel length must be >= 1")
    size = length if length % 2 else length + 1
    c = size // 2
    r = (length - 1) / 2
    theta = np.deg2rad(angle_deg)
    k = np.zeros((size, size))
    steep = abs(np.sin(theta)) > abs(np.cos(theta))
    for t in np.linspace(-r, r, length):
        if steep:
            dy = t
            dx = -t * np.cos(theta) / np.sin(theta)
        else:
            dx = t
            dy = -t * np.tan(theta)  # image rows grow downwards
        k[c + int(np.rint(dy)), c + int(np.rint(dx))] += 1.0
    return k / k.sum()


def _blur(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.stack(
        [convolve(x[..., ch], kernel, mode="reflect") for ch in range(x.shape[2])],
        axis=-1,
    )


def motion_blur(
    img, severity: int = DEFAULT_SEVERITY, seed: int = 0, length=None, angle=None
):
    """Linear motion blur; angle drawn uniformly in [-45, 45] degrees."""
    x = _as_image(img)
    length = _level(BLUR_LENGTH, severity) if length is None else length
    if not length or length == 1:
        return x.copy()
    if length > min(x.shape[:2]):
        raise KernelTooLarge(f"kernel length {length} exceeds image size {x.shape[:2]}")
    if angle is None:
        angle = float(np.random.default_rng(seed).uniform(-45.0, 45.0))
    return np.clip(_blur(x, motion_kernel(length, angle)), 0.0, 1.0)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def jpeg_compress(img, severity: int = DEFAULT_SEVERITY, quality=None):
    """Round-trip through baseline JPEG (8x8 block DCT) at a ladder quality."""
    x = _as_image(img)
    quality = _level(JPEG_QUALITY, severity) if quality is None else quality
    if quality is None:
        return x.copy()
    u8 = to_uint8(x)
    mode = "L" if u8.shape[2] == 1 else "RGB"
    buf = io.BytesIO()
    PILImage.fromarray(u8[..., 0] if mode == "L" else u8, mode).save(
        buf, format="JPEG", quality=int(quality)
    )
    buf.seek(0)
    out = np.asarray(PILImage.open(buf).convert(mode), dtype=np.float64) / 255.0
    return out.reshape(x.shape)


def plasma_fractal(size: int, rng: np.random.Generator, decay: float = 3.0):
    """Diamond-square height map of side ``size`` (a power of two), in [0, 1]."""
    if size < 2 or size & (size - 1):
        raise InvalidInput("plasma size must be a power of two >= 2")
    grid = np.zeros((size, size))
    step = size
    wibble = 100.0

    def wibbled(arr):
        return arr / 4 + wibble * rng.uniform(-wibble, wibble, arr.shape)

    while step >= 2:
        half = step // 2
        # squares: centre of each step x step cell
        corners = grid[0:size:step, 0:size:step]
        acc = corners + np.roll(corners, -1, axis=0)
        acc = acc + np.roll(acc, -1, axis=1)
        grid[half:size:step, half:size:step] = wibbled(acc)
        # diamonds: edge midpoints
        corners = grid[0:size:step, 0:size:step]
        centres = grid[half:size:step, half:size:step]
        ltsum = centres + np.roll(centres, 1, axis=0)
        ltsum = ltsum + corners + np.roll(corners, -1, axis=1)
        grid[0:size:step, half:size:step] = wibbled(ltsum)
        ttsum = centres + np.roll(centres, 1, axis=1)
        ttsum = ttsum + corners + np.roll(corners, -1, axis=0)
        grid[half:size:step, 0:size:step] = wibbled(ttsum)
        step = half
        wibble /= decay
    grid -= grid.min()
    peak = grid.max()
    return grid / peak if peak > 0 else np.ones_like(grid)


def fog_field(shape, seed: int) -> np.ndarray:
    """Bright haze layer in [0.5, 1] cropped from a plasma fractal."""
    h, w = shape
    size = max(2, 1 << int(np.ceil(np.log2(max(h, w)))))
    f = plasma_fractal(size, np.random.default_rng(seed))[:h, :w]
    lo, hi = f.min(), f.max()
    f = (f - lo) / (hi - lo) if hi > lo else np.ones_like(f)
    return 0.5 + 0.5 * f


def fog(img, severity: int = DEFAULT_SEVERITY, seed: int = 0, strength=None):
    """out = (1 - t) * img + t * max(img, haze)."""
    x = _as_image(img)
    t = _level(FOG_STRENGTH, severity) if strength is None else strength
    if not t:
        return x.copy()
    haze = fog_field(x.shape[:2], seed)[..., None]
    return np.clip((1 - t) * x + t * np.maximum(x, haze), 0.0, 1.0)


def snow(img, severity: int = DEFAULT_SEVERITY, seed: int = 0, density=None):
    """Motion-blurred white flake streaks over a whitened base image.

    Whitening weight is proportional to flake density, so ``density=0``
    leaves the image untouched.
    """
    x = _as_image(img)
    if density is None:
        density = _level(SNOW_DENSITY, severity)
        length = _level(SNOW_LENGTH, severity)
    else:
        length = SNOW_LENGTH[DEFAULT_SEVERITY - 1]
    if not density:
        return x.copy()
    h, w = x.shape[:2]
    rng = np.random.default_rng(seed)
    flakes = (rng.random((h, w)) < density).astype(np.float64)
    angle = float(rng.uniform(-45.0, 45.0))
    length = max(1, min(length, min(h, w)))
    if length > 1:
        k = motion_kernel(length, angle)
        streaks = convolve(flakes, k, mode="reflect") * length
    else:
        streaks = flakes
    streaks = np.clip(streaks, 0.0, 1.0)[..., None]
    whiten = min(1.0, SNOW_WHITEN_PER_DENSITY * density)
    gray = x.mean(axis=2, keepdims=True)
    base = (1 - whiten) * x + whiten * np.maximum(x, gray * 1.5 + 0.5)
    return np.clip(np.maximum(base, streaks), 0.0, 1.0)


def corrupt(img, kind: str, severity: int = DEFAULT_SEVERITY, seed: int = 0):
    if kind == "gaussian":
        return gaussian_noise(img, severity, seed)
    if kind == "impulse":
        return impulse_noise(img, severity, seed)
    if kind == "motion_blur":
        return motion_blur(img, severity, seed)
    if kind == "jpeg":
        return jpeg_compress(img, severity)
    if kind == "fog":
        return fog(img, severity, seed)
    if kind == "snow":
        return snow(img, severity, seed)
    raise InvalidInput(f"unknown corruption kind {kind!r}")


def derive_seed(global_seed: int, image_id: str, kind: str, severity: int) -> int:
    """64-bit seed from a stable hash of (global seed, image, kind, severity)."""
    key = f"{global_seed}|{image_id}|{kind}|{severity}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def corrupt_dataset(
    rows: Iterable[dict],
    out_dir,
    kinds: Sequence[str] = KINDS,
    severities: Sequence[int] = (DEFAULT_SEVERITY,),
    global_seed: int = 0,
    workers: int = 1,
    base_dir=None,
) -> list:
    """Write every (image, kind, severity) corruption under ``out_dir``.

    ``rows`` are manifest rows with at least ``id`` and ``image``; image
    paths are resolved against ``base_dir``. Returns one output row per
    (image, kind, severity) in input order; output paths are relative to
    ``out_dir``. Unreadable inputs and images too small for the blur
    kernel produce ``status: "failed"`` rows.
    """
    from roboattn.io import load_image, save_image

    out_dir = Path(out_dir)
    base = Path(base_dir) if base_dir is not None else Path(".")
    specs = [CorruptionSpec(k, s) for k in kinds for s in severities]
    rows = list(rows)

    def work(row: dict) -> list:
        image_id = str(row["id"])
        src = Path(row["image"])
        try:
            img = load_image(src if src.is_absolute() else base / src)
        except Exception as exc:  # noqa: BLE001 - recorded, pipeline continues
            logger.warning("cannot read %s: %s", src, exc)
            img = None
            error = str(exc)
        results = []
        for spec in specs:
            seed = derive_seed(global_seed, image_id, spec.kind, spec.severity)
            record = {
                "id": image_id,
                "source": str(row["image"]),
                "kind": spec.kind,
                "severity": spec.severity,
                "seed": seed,
            }
            if img is None:
                record.update(output=None, status="failed", error=error)
            else:
                try:
                    out = corrupt(img, spec.kind, spec.severity, seed)
                except KernelTooLarge as exc:
                    record.update(output=None, status="failed", error=str(exc))
                    results.append(record)
                    continue
                rel = Path(spec.kind) / str(spec.severity) / f"{image_id}.png"
                save_image(out, out_dir / rel)
                record.update(output=rel.as_posix(), status="ok")
            results.append(record)
        return results

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(work, rows))
    else:
        chunks = [work(r) for r in rows]
    return [rec for chunk in chunks for rec in chunk]

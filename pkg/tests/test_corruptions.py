import math

import numpy as np
import pytest

from roboattn.corruptions import (
    KINDS,
    CorruptionSpec,
    corrupt,
    corrupt_dataset,
    derive_seed,
    fog,
    gaussian_noise,
    impulse_noise,
    jpeg_compress,
    motion_blur,
    motion_kernel,
    plasma_fractal,
    snow,
)
from roboattn.errors import InvalidInput, KernelTooLarge
from roboattn.io import save_image


def _psnr(a, b):
    mse = np.mean((a - b) ** 2)
    return 10 * math.log10(1.0 / mse)


def _natural(h=64, w=64, seed=0):
    """Smooth gradients plus a few soft blobs, roughly photo-like."""
    rng = np.random.default_rng(seed)
    y, x = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.stack([0.3 + 0.4 * x, 0.2 + 0.5 * y, 0.5 - 0.3 * x * y], axis=-1)
    for _ in range(4):
        cy, cx, r = rng.uniform(0.2, 0.8, 3)
        blob = np.exp(-((y - cy) ** 2 + (x - cx) ** 2) / (0.02 * r))
        img += rng.uniform(-0.2, 0.2, 3) * blob[..., None]
    return np.clip(img, 0, 1)


def test_spec_validation():
    with pytest.raises(InvalidInput):
        CorruptionSpec("rain", 3)
    with pytest.raises(InvalidInput):
        CorruptionSpec("fog", 6)
    with pytest.raises(InvalidInput):
        corrupt(np.zeros((4, 4, 3)), "fog", 7)


def test_gaussian_examples():
    img = np.full((256, 256, 3), 0.5)
    np.testing.assert_array_equal(gaussian_noise(img, sigma=0), img)
    out = gaussian_noise(img, 3, seed=1)
    inside = (out > 0) & (out < 1)
    assert abs(out[inside].std() - 0.18) < 0.01
    np.testing.assert_array_equal(out, gaussian_noise(img, 3, seed=1))


def test_impulse_examples():
    img = np.full((100, 100, 3), 0.5)
    band = 3 * math.sqrt(600 * 0.94)
    out = impulse_noise(img, 3, seed=4)
    hit = np.any(out != 0.5, axis=2)
    assert abs(hit.sum() - 600) <= band
    assert set(np.unique(out[hit])) <= {0.0, 1.0}
    np.testing.assert_array_equal(impulse_noise(img, fraction=0), img)


def test_motion_kernel_is_equal_mass_line():
    for length, angle in [(7, 0.0), (7, 90.0), (11, 30.0), (15, -45.0), (9, 70.0)]:
        k = motion_kernel(length, angle)
        assert k.sum() == pytest.approx(1.0)
        taps = k[k > 0]
        assert len(taps) == length
        np.testing.assert_allclose(taps, 1 / length)
    np.testing.assert_allclose(motion_kernel(7, 0.0)[3], np.full(7, 1 / 7))
    np.testing.assert_allclose(motion_kernel(7, 90.0)[:, 3], np.full(7, 1 / 7))


def test_motion_kernel_direction():
    k = motion_kernel(9, 45.0)
    ys, xs = np.nonzero(k)
    # +45 degrees runs up and to the right in image coordinates
    assert np.corrcoef(xs, ys)[0, 1] == pytest.approx(-1.0)


def test_motion_blur_examples():
    flat = np.full((32, 32, 3), 0.4)
    np.testing.assert_allclose(motion_blur(flat, 3, seed=2), flat, atol=1e-15)

    dot = np.zeros((31, 31, 1))
    dot[15, 15] = 1.0
    out = motion_blur(dot, length=7, angle=0.0)[..., 0]
    np.testing.assert_allclose(out[15, 12:19], 1 / 7)
    assert np.count_nonzero(out) == 7

    rng = np.random.default_rng(0)
    img = np.zeros((48, 48, 3))
    img[16:32, 16:32] = rng.random((16, 16, 3)) * 0.8
    assert motion_blur(img, 3, seed=5).sum() == pytest.approx(img.sum(), abs=1e-4)


def test_motion_blur_kernel_too_large():
    with pytest.raises(KernelTooLarge):
        motion_blur(np.zeros((10, 40, 3)), 2)


def test_jpeg_examples():
    img = _natural()
    assert _psnr(jpeg_compress(img, quality=100), img) > 40
    assert _psnr(jpeg_compress(img, 5), img) < _psnr(jpeg_compress(img, 1), img)
    flat = np.full((16, 16, 3), 100 / 255)
    np.testing.assert_allclose(jpeg_compress(flat, 5), flat, atol=2 / 255)
    np.testing.assert_array_equal(jpeg_compress(img, 3), jpeg_compress(img, 3))


def test_fog_examples():
    img = np.full((40, 50, 3), 0.1)
    np.testing.assert_array_equal(fog(img, strength=0), img)
    lum = [fog(img, s, seed=3).mean() for s in range(1, 6)]
    assert all(a < b for a, b in zip(lum, lum[1:]))
    np.testing.assert_array_equal(fog(img, 2, seed=3), fog(img, 2, seed=3))
    assert not np.array_equal(fog(img, 2, seed=3), fog(img, 2, seed=4))


def test_plasma_fractal_range():
    f = plasma_fractal(32, np.random.default_rng(0))
    assert f.shape == (32, 32)
    assert f.min() == 0 and f.max() == 1
    with pytest.raises(InvalidInput):
        plasma_fractal(30, np.random.default_rng(0))


def test_snow_examples():
    img = _natural(64, 64, 1) * 0.6
    np.testing.assert_array_equal(snow(img, density=0), img)
    white = [np.mean(snow(img, s, seed=9).min(axis=2) > 0.9) for s in range(1, 6)]
    assert all(a < b for a, b in zip(white, white[1:]))
    np.testing.assert_array_equal(snow(img, 4, seed=2), snow(img, 4, seed=2))


@pytest.mark.parametrize("kind", KINDS)
def test_outputs_in_range_and_shape(kind):
    img = _natural(40, 48, 2)
    for sev in range(1, 6):
        out = corrupt(img, kind, sev, seed=11)
        assert out.shape == img.shape
        assert out.min() >= 0 and out.max() <= 1
    np.testing.assert_array_equal(corrupt(img, kind, 0, seed=11), img)


@pytest.mark.parametrize("kind", KINDS)
def test_same_seed_same_output(kind):
    img = _natural(32, 32, 3)
    np.testing.assert_array_equal(corrupt(img, kind, 4, 123), corrupt(img, kind, 4, 123))


def test_derive_seed_stable_and_distinct():
    assert derive_seed(0, "a", "fog", 3) == derive_seed(0, "a", "fog", 3)
    seeds = {derive_seed(g, i, k, s) for g in (0, 1) for i in "ab" for k in KINDS for s in (1, 3)}
    assert len(seeds) == 2 * 2 * len(KINDS) * 2
    assert 0 <= derive_seed(7, "x", "snow", 5) < 2**64


def _write_images(tmp_path, n):
    rows = []
    for i in range(n):
        name = f"img{i}.png"
        save_image(_natural(32, 32, i), tmp_path / name)
        rows.append({"id": f"im{i}", "image": name})
    return rows


def test_corrupt_dataset_counts_and_paths(tmp_path):
    rows = _write_images(tmp_path, 3)
    out = corrupt_dataset(rows, tmp_path / "out", global_seed=5, base_dir=tmp_path)
    assert len(out) == 18
    assert all(r["status"] == "ok" for r in out)
    for r in out:
        assert (tmp_path / "out" / r["output"]).is_file()
        assert not r["output"].startswith("/")
        assert r["seed"] == derive_seed(5, r["id"], r["kind"], r["severity"])


def test_corrupt_dataset_rerun_and_parallel_identical(tmp_path):
    rows = _write_images(tmp_path, 3)
    a = corrupt_dataset(rows, tmp_path / "a", global_seed=1, base_dir=tmp_path)
    b = corrupt_dataset(rows, tmp_path / "b", global_seed=1, base_dir=tmp_path, workers=4)
    assert a == b
    for r in a:
        assert (tmp_path / "a" / r["output"]).read_bytes() == (tmp_path / "b" / r["output"]).read_bytes()


def test_corrupt_dataset_kind_filter_and_failures(tmp_path):
    rows = _write_images(tmp_path, 2) + [{"id": "gone", "image": "missing.png"}]
    out = corrupt_dataset(rows, tmp_path / "out", kinds=["gaussian"], severities=[1, 5], base_dir=tmp_path)
    assert {r["kind"] for r in out} == {"gaussian"}
    assert len(out) == 6
    failed = [r for r in out if r["status"] == "failed"]
    assert len(failed) == 2 and all(r["id"] == "gone" and r["output"] is None for r in failed)


def test_corrupt_dataset_small_image_blur_fails_row(tmp_path):
    save_image(_natural(8, 8), tmp_path / "tiny.png")
    out = corrupt_dataset([{"id": "t", "image": "tiny.png"}], tmp_path / "o",
                          kinds=["motion_blur", "fog"], base_dir=tmp_path)
    status = {r["kind"]: r["status"] for r in out}
    assert status == {"motion_blur": "failed", "fog": "ok"}

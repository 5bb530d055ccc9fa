from pathlib import Path

import numpy as np
import pytest

from roboattn.io import save_image, save_map, write_jsonl
from roboattn.knowledge import encode_rle


def _blob(h, w, cy, cx, s):
    y, x = np.mgrid[0:h, 0:w]
    g = np.exp(-(((y - cy) / h) ** 2 + ((x - cx) / w) ** 2) / (2 * s * s))
    return g / g.sum()


def build_dataset(root, n=4, h=16, w=24, seed=0, sources=("mlnet", "unisal")):
    """Images, pseudo-labels, predictions, ground truth and instance masks.

    Returns the manifest path. All paths in the manifest are relative.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    rows, mask_rows = [], []
    for i in range(n):
        sid = f"f{i:03d}"
        img = np.clip(rng.random((h, w, 3)) * 0.3 + np.linspace(0.2, 0.7, w)[None, :, None], 0, 1)
        save_image(img, root / "images" / f"{sid}.png")
        cy, cx = h / 2 + rng.normal(0, 2), w / 2 + rng.normal(0, 3)
        maps = {}
        for k, src in enumerate(sources):
            y = _blob(h, w, cy + k, cx - k, 0.15 + 0.05 * k)
            save_map(y, root / "maps" / src / f"{sid}.attn")
            maps[src] = f"maps/{src}/{sid}.attn"
        save_map(_blob(h, w, cy, cx, 0.2), root / "gt" / f"{sid}.attn")
        save_map(_blob(h, w, cy + 1, cx + 1, 0.22), root / "pred" / f"{sid}.attn")
        rows.append({
            "id": sid,
            "image": f"images/{sid}.png",
            "maps": maps,
            "prediction": f"pred/{sid}.attn",
            "split": "train",
        })
        car = np.zeros((h, w), np.uint8)
        car[h // 3 : 2 * h // 3, w // 3 : 2 * w // 3] = 1
        ped = np.zeros((h, w), np.uint8)
        ped[1:4, 1:3] = 1
        mask_rows.append({"image": sid, "category": "car", "rle": encode_rle(car)})
        mask_rows.append({"image": sid, "category": "person", "rle": encode_rle(ped)})
    write_jsonl(rows, root / "manifest.jsonl")
    write_jsonl(mask_rows, root / "masks.jsonl")
    return root / "manifest.jsonl"


@pytest.fixture
def dataset(tmp_path):
    return build_dataset(tmp_path / "data")

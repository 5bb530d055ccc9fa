"""Traffic-knowledge mining over instance masks and embedding into labels.

Mining keeps the categories that are frequent in the dataset yet receive
unusually little pseudo-label attention; embedding boosts label mass inside
the instance masks of those categories.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from roboattn.errors import InvalidInput, ShapeError
from roboattn.maps import _as_grid, normalize_sum

logger = logging.getLogger(__name__)

DEFAULT_COVERAGE = 98.0
DEFAULT_ETA = 0.1
DEFAULT_ALPHA = 0.3

@dataclass
class CategoryStats:
    """Instance counts and summed per-instance attention, by category.

    Insertion order of ``counts`` records first appearance, which breaks
    ties when sorting by count.
    """

    counts: dict = field(default_factory=dict)
    attention_sum: dict = field(default_factory=dict)
    skipped: int = 0

    def add(self, category: str, attention: float) -> None:
        self.counts[category] = self.counts.get(category, 0) + 1
        self.attention_sum[category] = self.attention_sum.get(category, 0.0) + attention

    def merge(self, other: "CategoryStats") -> "CategoryStats":
        out = CategoryStats(dict(self.counts), dict(self.attention_sum), self.skipped)
        for cat, n in other.counts.items():
            out.counts[cat] = out.counts.get(cat, 0) + n
            out.attention_sum[cat] = (
                out.attention_sum.get(cat, 0.0) + other.attention_sum[cat]
            )
        out.skipped += other.skipped
        return out

    @property
    def mean_attention(self) -> dict:
        return {c: self.attention_sum[c] / n for c, n in self.counts.items() if n > 0}

    def ranked(self) -> list:
        """Categories by descending count, first appearance breaking ties."""
        order = {c: i for i, c in enumerate(self.counts)}
        return sorted(self.counts, key=lambda c: (-self.counts[c], order[c]))

    def restrict(self, categories: Iterable[str]) -> "CategoryStats":
        keep = set(categories)
        return CategoryStats(
            {c: n for c, n in self.counts.items() if c in keep},
            {c: v for c, v in self.attention_sum.items() if c in keep},
            self.skipped,
        )


def _binary(mask, shape=None) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ShapeError(f"mask must be 2-D, got shape {m.shape}")
    if shape is not None and m.shape != shape:
        raise ShapeError(f"mask shape {m.shape} does not match map shape {shape}")
    if not np.all((m == 0) | (m == 1)):
        raise InvalidInput("mask must be binary")
    return m.astype(bool)


def category_stats(dataset: Iterable) -> CategoryStats:
    """Accumulate per-category counts and mean in-mask attention.

    ``dataset`` yields ``(instances, mean_label)`` per image where
    ``instances`` is a sequence of ``(category, mask)`` and ``mean_label``
    is the pixel-wise mean of that image's pseudo-labels. An instance's
    attention is the mean of ``mean_label`` over its mask; empty masks are
    skipped and counted in ``skipped``.
    """
    stats = CategoryStats()
    for instances, mean_label in dataset:
        mu = _as_grid(mean_label)
        for category, mask in instances:
            m = _binary(mask, mu.shape)
            if not m.any():
                stats.skipped += 1
                continue
            stats.add(category, float(mu[m].mean()))
    if stats.skipped:
        logger.warning("skipped %d empty instance masks", stats.skipped)
    return stats


def select_frequent(stats: CategoryStats, p: float = DEFAULT_COVERAGE) -> list:
    """Shortest count-ranked prefix covering ``p`` percent of all instances."""
    if not 0 < p <= 100:
        raise InvalidInput(f"coverage p must be in (0, 100], got {p}")
    ranked = stats.ranked()
    total = sum(stats.counts.values())
    if not ranked or total == 0:
        raise InvalidInput("no category instances to select from")
    threshold = p / 100.0 * total
    running = 0
    for k, cat in enumerate(ranked, start=1):
        running += stats.counts[cat]
        if running >= threshold:
            return ranked[:k]
    return ranked


def mine_priors(stats: CategoryStats, eta: float = DEFAULT_ETA) -> list:
    """Categories whose mean attention is below eta times the summed mean
    attention of all categories in ``stats`` (pass stats restricted to the
    frequent set)."""
    if not 0 < eta <= 1:
        raise InvalidInput(f"eta must be in (0, 1], got {eta}")
    v = stats.mean_attention
    threshold = eta * sum(v.values())
    return [c for c in stats.ranked() if c in v and v[c] < threshold]


@dataclass(frozen=True)
class PriorSelection:
    frequent: tuple
    priors: tuple
    p: float
    eta: float
    mean_attention: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "frequent": list(self.frequent),
            "priors": list(self.priors),
            "p": self.p,
            "eta": self.eta,
            "mean_attention": self.mean_attention,
            "counts": self.counts,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PriorSelection":
        return cls(
            tuple(d["frequent"]),
            tuple(d["priors"]),
            float(d["p"]),
            float(d["eta"]),
            dict(d.get("mean_attention", {})),
            dict(d.get("counts", {})),
        )


def mine(stats: CategoryStats, p: float = DEFAULT_COVERAGE, eta: float = DEFAULT_ETA):
    frequent = select_frequent(stats, p)
    sub = stats.restrict(frequent)
    priors = mine_priors(sub, eta)
    return PriorSelection(
        tuple(frequent),
        tuple(priors),
        p,
        eta,
        sub.mean_attention,
        {c: stats.counts[c] for c in frequent},
    )


def build_prior_mask(instances: Sequence, priors: Iterable[str], shape=None) -> np.ndarray:
    """Union of the instance masks whose category is a prior category."""
    keep = set(priors)
    out = None if shape is None else np.zeros(shape, dtype=bool)
    for category, mask in instances:
        m = _binary(mask, None if out is None else out.shape)
        if out is None:
            out = np.zeros(m.shape, dtype=bool)
        if category in keep:
            out |= m
    if out is None:
        raise InvalidInput("no instances and no shape given")
    return out.astype(np.float64)


def embed_gain(prior_mask, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """Per-pixel multiplier M + alpha: 1 + alpha in the mask, alpha outside."""
    if not alpha > 0:
        raise InvalidInput(f"alpha must be positive, got {alpha}")
    return _binary(prior_mask).astype(np.float64) + alpha


def embed(label, prior_mask, alpha: float = DEFAULT_ALPHA, normalize: bool = True):
    """Boost a pseudo-label inside the prior mask: Y * (M + alpha).

    With ``normalize`` the result is rescaled to unit mass.
    """
    y = _as_grid(label)
    _binary(prior_mask, y.shape)
    raw = y * embed_gain(prior_mask, alpha)
    return normalize_sum(raw) if normalize else raw


def embed_concat(label, prior_mask) -> np.ndarray:
    """Channel-stack label and mask into a (2, H, W) array."""
    y = _as_grid(label)
    m = _binary(prior_mask, y.shape).astype(np.float64)
    return np.stack([y, m])


def split_concat(stack):
    stack = np.asarray(stack)
    if stack.ndim != 3 or stack.shape[0] != 2:
        raise ShapeError(f"expected a (2, H, W) stack, got {stack.shape}")
    return stack[0], stack[1]


def decode_rle(rle: dict) -> np.ndarray:
    """Decode ``{"size": [h, w], "counts": [...]}``.

    Counts alternate zeros and ones over the row-major flattened mask,
    starting with a (possibly empty) run of zeros.
    """
    h, w = (int(v) for v in rle["size"])
    counts = [int(c) for c in rle["counts"]]
    if any(c < 0 for c in counts) or sum(counts) != h * w:
        raise InvalidInput(f"RLE counts do not cover a {h}x{w} mask")
    flat = np.zeros(h * w, dtype=np.uint8)
    pos = 0
    for i, c in enumerate(counts):
        if i % 2:
            flat[pos : pos + c] = 1
        pos += c
    return flat.reshape(h, w)


def encode_rle(mask) -> dict:
    m = _binary(mask)
    flat = m.ravel().astype(np.int8)
    change = np.flatnonzero(np.diff(flat)) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0] == 1:
        runs = [0] + runs
    return {"size": list(m.shape), "counts": runs}

"""RoboMixup: vanilla and soft-attention Mixup, dynamic candidate
selection, random crop and the composed central-bias objective."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np

from roboattn.errors import DegenerateMap, InvalidInput, MissingAttention, ShapeError
from roboattn.fusion import uncertainty_loss
from roboattn.maps import EPS, bilinear_resize, kl_divergence, mean_map, normalize_sum

MAX_CROP_RETRIES = 8


@dataclass(frozen=True)
class Sample:
    """An image (H, W, 3) in [0, 1] with its stacked pseudo-labels (N, H, W)
    and, optionally, the model's predicted attention map (H, W)."""

    image: np.ndarray
    labels: np.ndarray
    prediction: Optional[np.ndarray] = None
    id: str = ""

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.float64)
        if labels.ndim == 2:
            labels = labels[None]
        if image.ndim == 2:
            image = image[..., None]
        if image.ndim != 3 or labels.ndim != 3 or image.shape[:2] != labels.shape[1:]:
            raise ShapeError(
                f"image {image.shape} and labels {labels.shape} are not aligned"
            )
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "labels", labels)
        if self.prediction is not None:
            pred = np.asarray(self.prediction, dtype=np.float64)
            if pred.shape != image.shape[:2]:
                raise ShapeError(f"prediction {pred.shape} vs image {image.shape[:2]}")
            object.__setattr__(self, "prediction", pred)

    @property
    def shape(self):
        return self.image.shape[:2]


@dataclass(frozen=True)
class MixPolicy:
    mode: str = "soft"
    alpha_beta: float = 10.0
    top_k: float = 1 / 8
    crop_scale: tuple = (0.5, 1.0)
    eta_reg: float = 1.0
    eps: float = EPS

    def validate(self) -> "MixPolicy":
        if self.mode not in ("soft", "vanilla"):
            raise InvalidInput(f"unknown mix mode {self.mode!r}")
        if not self.alpha_beta > 0:
            raise InvalidInput("alpha_beta must be positive")
        if not 0 < self.top_k <= 1:
            raise InvalidInput("top_k must be in (0, 1]")
        lo, hi = self.crop_scale
        if not 0 < lo <= hi <= 1:
            raise InvalidInput(f"crop scale range {self.crop_scale} not within (0, 1]")
        if self.eta_reg < 0:
            raise InvalidInput("eta_reg must be >= 0")
        return self


def sample_lambda(alpha_beta: float, rng: np.random.Generator) -> float:
    """Draw a Mixup coefficient from Beta(alpha_beta, alpha_beta)."""
    if not alpha_beta > 0:
        raise InvalidInput("alpha_beta must be positive")
    return float(rng.beta(alpha_beta, alpha_beta))


def _check_pair(a: Sample, b: Sample) -> None:
    if a.image.shape != b.image.shape or a.labels.shape != b.labels.shape:
        raise ShapeError(
            f"cannot mix {a.image.shape}/{a.labels.shape} with "
            f"{b.image.shape}/{b.labels.shape}"
        )


def _renorm(labels: np.ndarray) -> np.ndarray:
    return labels / labels.sum(axis=(1, 2), keepdims=True)


def vanilla_mixup(a: Sample, b: Sample, lam: float) -> Sample:
    """Global blend lam * a + (1 - lam) * b of images and labels."""
    _check_pair(a, b)
    if not 0 <= lam <= 1:
        raise InvalidInput(f"lambda must lie in [0, 1], got {lam}")
    mixed_id = f"{a.id}+{b.id}"
    if lam == 1:
        return replace(a, id=mixed_id)
    if lam == 0:
        return replace(b, id=mixed_id)
    image = lam * a.image + (1 - lam) * b.image
    labels = _renorm(lam * a.labels + (1 - lam) * b.labels)
    pred = None
    if a.prediction is not None and b.prediction is not None:
        pred = lam * a.prediction + (1 - lam) * b.prediction
    return Sample(image, labels, pred, mixed_id)


def soft_weights(s_a, s_b, eps: float = EPS) -> np.ndarray:
    """Per-pixel weight of sample a; sample b gets one minus this."""
    return s_a / (s_a + s_b + eps)


def soft_attention_mixup(a: Sample, b: Sample, eps: float = EPS) -> Sample:
    """Blend two samples pixel-wise, weighting each by its predicted map."""
    _check_pair(a, b)
    if a.prediction is None or b.prediction is None:
        raise MissingAttention("soft-attention mixup needs predicted maps on both samples")
    w_a = soft_weights(a.prediction, b.prediction, eps)
    w_b = 1.0 - w_a
    image = w_a[..., None] * a.image + w_b[..., None] * b.image
    labels = _renorm(w_a * a.labels + w_b * b.labels)
    pred = normalize_sum(w_a * a.prediction + w_b * b.prediction)
    return Sample(image, labels, pred, f"{a.id}*{b.id}")


def candidate_count(top_k: float, batch_size: int) -> int:
    if batch_size == 0:
        return 0
    # guard against 0.1 * 30 = 3.0000000000000004
    return max(1, math.ceil(round(top_k * batch_size, 9)))


def select_candidates(predictions: Sequence, s_avg, top_k: float = 1 / 8) -> list:
    """Indices of the ceil(K * B) maps furthest (in KL) from ``s_avg``.

    Ordered by decreasing divergence; equal divergences go to the lower
    index.
    """
    if len(predictions) == 0:
        raise InvalidInput("empty batch")
    if not 0 < top_k <= 1:
        raise InvalidInput("top_k must be in (0, 1]")
    kl = [kl_divergence(p, s_avg) for p in predictions]
    order = sorted(range(len(kl)), key=lambda i: (-kl[i], i))
    return order[: candidate_count(top_k, len(kl))]


def _crop_box(rng, shape, scale_range):
    h, w = shape
    lo, hi = scale_range
    sh, sw = rng.uniform(lo, hi, size=2)
    ch = min(h, max(1, int(round(sh * h))))
    cw = min(w, max(1, int(round(sw * w))))
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    return y0, x0, ch, cw


def random_crop(
    s: Sample,
    scale_range=(0.5, 1.0),
    rng: Optional[np.random.Generator] = None,
    max_retries: int = MAX_CROP_RETRIES,
) -> Sample:
    """Crop image, labels and prediction identically, then resize back.

    Crops that leave any label (or the prediction) with no mass are
    redrawn; after ``max_retries`` failures the full frame is returned.
    """
    lo, hi = scale_range
    if not 0 < lo <= hi <= 1:
        raise InvalidInput(f"crop scale range {scale_range} not within (0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    h, w = s.shape
    for _ in range(max_retries):
        y0, x0, ch, cw = _crop_box(rng, (h, w), scale_range)
        win = (slice(y0, y0 + ch), slice(x0, x0 + cw))
        labels = s.labels[(slice(None),) + win]
        if np.any(labels.sum(axis=(1, 2)) <= 0):
            continue
        pred = None
        if s.prediction is not None:
            pred = s.prediction[win]
            if pred.sum() <= 0:
                continue
        try:
            labels = np.stack([normalize_sum(bilinear_resize(y, h, w)) for y in labels])
            if pred is not None:
                pred = normalize_sum(bilinear_resize(pred, h, w))
        except DegenerateMap:
            continue
        image = bilinear_resize(s.image[win], h, w)
        return Sample(image, labels, pred, f"{s.id}@crop{y0},{x0},{ch},{cw}")
    return replace(s, id=f"{s.id}@crop")


def corruption_robust_batch(
    batch: Sequence[Sample],
    policy: MixPolicy = MixPolicy(),
    rng: Optional[np.random.Generator] = None,
    s_avg=None,
) -> list:
    """Originals plus one mixed sample per top-K candidate.

    Each candidate is paired with a partner drawn uniformly from the rest
    of the batch. ``s_avg`` defaults to the batch-mean prediction.
    """
    policy.validate()
    rng = np.random.default_rng() if rng is None else rng
    batch = list(batch)
    if not batch:
        return []
    if any(s.prediction is None for s in batch):
        raise MissingAttention("dynamic augmentation needs predicted maps")
    preds = [s.prediction for s in batch]
    if s_avg is None:
        s_avg = mean_map(preds)
    out = list(batch)
    for i in select_candidates(preds, s_avg, policy.top_k):
        if len(batch) > 1:
            j = int(rng.integers(len(batch) - 1))
            j += j >= i
        else:
            j = i
        if policy.mode == "soft":
            out.append(soft_attention_mixup(batch[i], batch[j], policy.eps))
        else:
            lam = sample_lambda(policy.alpha_beta, rng)
            out.append(vanilla_mixup(batch[i], batch[j], lam))
    return out


def central_bias_loss(
    rcp: float, unc: float, rcp_mix: float, unc_mix: float, eta_reg: float = 1.0
) -> float:
    """L_rcp + L_unc + eta_reg * (L_rcp* + L_unc*)."""
    return rcp + unc + eta_reg * (rcp_mix + unc_mix)


Predictor = Callable[[np.ndarray], np.ndarray]


def central_bias_objective(
    sample: Sample,
    partner: Sample,
    predict: Predictor,
    log_variances,
    policy: MixPolicy = MixPolicy(),
    rng: Optional[np.random.Generator] = None,
) -> dict:
    """Evaluate the four loss terms for one sample and its Mixup partner.

    ``predict`` maps an image to an attention map. The crop and Mixup
    terms share one crop draw per sample and one lambda ~ Beta(a, a).
    """
    policy.validate()
    rng = np.random.default_rng() if rng is None else rng

    def loss(s: Sample) -> float:
        return uncertainty_loss(predict(s.image), s.labels, log_variances).total

    crop = random_crop(sample, policy.crop_scale, rng)
    partner_crop = random_crop(partner, policy.crop_scale, rng)
    lam = sample_lambda(policy.alpha_beta, rng)
    terms = {
        "rcp": loss(crop),
        "unc": loss(sample),
        "rcp_mix": loss(vanilla_mixup(crop, partner_crop, lam)),
        "unc_mix": loss(vanilla_mixup(sample, partner, lam)),
        "lambda": lam,
    }
    terms["total"] = central_bias_loss(
        terms["rcp"], terms["unc"], terms["rcp_mix"], terms["unc_mix"], policy.eta_reg
    )
    return terms

"""Uncertainty-weighted fusion of multi-source pseudo-labels.

The loss over N pseudo-labels Y_n and a predicted map S is

    L = sum_n KL(Y_n || S) * exp(-e_n) + e_n / 2

with e_n the log-variance of source n. S is parameterised by logits through
a spatial softmax, so the fused map stays a distribution by construction.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from roboattn.errors import (
    DegenerateUncertainty,
    InvalidInput,
    OptimizerDiverged,
    ShapeError,
)
from roboattn.maps import (
    _as_grid,
    cross_entropy,
    entropy,
    kl_divergence,
    log_softmax,
    normalize_softmax,
)

logger = logging.getLogger(__name__)


def _stack_labels(labels) -> np.ndarray:
    if len(labels) == 0:
        raise InvalidInput("at least one pseudo-label is required")
    grids = [_as_grid(y) for y in labels]
    shape = grids[0].shape
    for g in grids:
        if g.shape != shape:
            raise ShapeError(f"pseudo-label shape mismatch: {shape} vs {g.shape}")
    return np.stack(grids)


def _check_state(labels: np.ndarray, log_variances) -> np.ndarray:
    e = np.asarray(log_variances, dtype=np.float64).ravel()
    if e.shape[0] != labels.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels but {e.shape[0]} log-variances")
    if not np.all(np.isfinite(e)):
        raise InvalidInput("log-variances must be finite")
    return e


@dataclass(frozen=True)
class LossTerms:
    total: float
    kld: np.ndarray
    weighted: np.ndarray  # KL_n * exp(-e_n) + e_n / 2


def uncertainty_loss(S, labels, log_variances) -> LossTerms:
    """Total loss together with its per-source breakdown."""
    S = _as_grid(S)
    Y = _stack_labels(labels)
    if Y.shape[1:] != S.shape:
        raise ShapeError(f"map shape {S.shape} vs label shape {Y.shape[1:]}")
    e = _check_state(Y, log_variances)
    kld = np.array([kl_divergence(y, S) for y in Y])
    terms = kld * np.exp(-e) + 0.5 * e
    return LossTerms(float(terms.sum()), kld, terms)


def _loss_from_logits(logits: np.ndarray, Y: np.ndarray, e: np.ndarray):
    # exact log-softmax, no floor, so the analytic gradient is exact
    log_s = log_softmax(logits)
    kld = np.empty(len(Y))
    for n, y in enumerate(Y):
        m = y > 0
        kld[n] = np.sum(y[m] * (np.log(y[m]) - log_s[m]))
    return float(np.sum(kld * np.exp(-e) + 0.5 * e)), kld, np.exp(log_s)


def loss_value(logits, labels, log_variances) -> float:
    """Loss evaluated directly from logits (used by gradient checks)."""
    Y = _stack_labels(labels)
    logits = _as_grid(logits)
    if Y.shape[1:] != logits.shape:
        raise ShapeError(f"logit shape {logits.shape} vs label shape {Y.shape[1:]}")
    return _loss_from_logits(logits, Y, _check_state(Y, log_variances))[0]


def loss_gradient(logits, labels, log_variances):
    """Analytic gradient of the loss wrt the logits and each e_n.

    Returns ``(grad_logits, grad_e)`` where

        dL/dz_i = sum_n exp(-e_n) (S_i - Y_n,i)
        dL/de_n = -KL_n exp(-e_n) + 1/2
    """
    Y = _stack_labels(labels)
    logits = _as_grid(logits)
    if Y.shape[1:] != logits.shape:
        raise ShapeError(f"logit shape {logits.shape} vs label shape {Y.shape[1:]}")
    e = _check_state(Y, log_variances)
    _, kld, S = _loss_from_logits(logits, Y, e)
    w = np.exp(-e)
    # labels are distributions, so sum_n w_n (S - Y_n) = W S - sum_n w_n Y_n
    g_logits = w.sum() * S - np.tensordot(w, Y, axes=1)
    g_e = -kld * w + 0.5
    return g_logits, g_e


def optimal_fusion(labels, log_variances) -> np.ndarray:
    """Minimiser over S for fixed e: the exp(-e)-weighted mean of labels."""
    Y = _stack_labels(labels)
    e = _check_state(Y, log_variances)
    # shift for stability; weights are scale invariant
    w = np.exp(-(e - e.min()))
    return np.tensordot(w, Y, axes=1) / w.sum()


def optimal_log_variance(kld: float) -> float:
    """Stationary point e* = log(2 KL) of KL exp(-e) + e/2."""
    if not kld > 0:
        raise DegenerateUncertainty(
            f"KL={kld!r}: a perfectly matching label has no finite optimal e"
        )
    return float(np.log(2.0 * kld))


def ce_kld_identity_check(S, Y):
    """Return (cross-entropy, KL + entropy); the two agree exactly."""
    return cross_entropy(Y, S), kl_divergence(Y, S) + entropy(Y)


@dataclass
class FusionSettings:
    logit_step: float = 0.5
    e_step: float = 0.1
    max_iter: int = 500
    tol: float = 1e-6
    max_halvings: int = 40
    # "natural": Fisher-preconditioned log-ratio step on the logits;
    # "gradient": plain gradient on the logits.
    direction: str = "natural"

    def validate(self) -> None:
        if self.logit_step <= 0 or self.e_step <= 0:
            raise InvalidInput("step sizes must be positive")
        if self.max_iter < 0 or self.tol < 0 or self.max_halvings < 0:
            raise InvalidInput("max_iter, tol and max_halvings must be >= 0")
        if self.direction not in ("natural", "gradient"):
            raise InvalidInput(f"unknown direction {self.direction!r}")


@dataclass
class FusionProblem:
    labels: Sequence
    log_variances: Optional[Sequence[float]] = None
    freeze_e: bool = False
    settings: FusionSettings = field(default_factory=FusionSettings)
    initial_logits: Optional[np.ndarray] = None


@dataclass(frozen=True)
class FusionResult:
    fused: np.ndarray
    log_variances: np.ndarray
    loss: float
    kld: np.ndarray
    iterations: int
    converged: bool
    history: tuple = ()

    def to_dict(self) -> dict:
        return {
            "final_loss": self.loss,
            "e_n": self.log_variances.tolist(),
            "kld_n": self.kld.tolist(),
            "iterations": self.iterations,
            "converged": self.converged,
        }


def fit_fusion(problem: FusionProblem) -> FusionResult:
    """Descend jointly on (logits, e) with backtracking on loss increase.

    Stops at ``max_iter`` or once the gradient norm drops below ``tol``.
    With ``freeze_e`` only the logits move and the fixed point is
    :func:`optimal_fusion`. The loss sequence is non-increasing.

    With free e and two or more distinct labels the loss is unbounded
    below (S -> Y_n, e_n -> -inf), so the run drifts towards one label
    instead of settling at an interior fixed point.
    """
    st = problem.settings
    st.validate()
    Y = _stack_labels(problem.labels)
    n = Y.shape[0]
    e = np.zeros(n) if problem.log_variances is None else _check_state(
        Y, problem.log_variances
    ).copy()
    if problem.initial_logits is None:
        z = np.zeros(Y.shape[1:])
    else:
        z = _as_grid(problem.initial_logits).copy()
        if z.shape != Y.shape[1:]:
            raise ShapeError("initial logits do not match label shape")

    loss, kld, S = _loss_from_logits(z, Y, e)
    if not np.isfinite(loss):
        raise OptimizerDiverged(f"initial loss is {loss}")
    history = [loss]
    converged = False
    it = 0
    for it in range(1, st.max_iter + 1):
        g_z, g_e = loss_gradient(z, Y, e)
        gnorm2 = float(np.sum(g_z**2))
        if not problem.freeze_e:
            gnorm2 += float(np.sum(g_e**2))
        if np.sqrt(gnorm2) < st.tol:
            converged = True
            it -= 1
            break

        if st.direction == "natural":
            w = np.exp(-(e - e.min()))
            target = np.tensordot(w, Y, axes=1) / w.sum()
            d_z = np.log(S) - np.log(np.maximum(target, 1e-300))
        else:
            d_z = g_z
        d_e = np.zeros_like(e) if problem.freeze_e else g_e

        scale = 1.0
        for _ in range(st.max_halvings + 1):
            z_new = z - scale * st.logit_step * d_z
            e_new = e - scale * st.e_step * d_e
            new_loss, new_kld, new_S = _loss_from_logits(z_new, Y, e_new)
            if new_loss <= loss:
                break
            scale *= 0.5
        else:
            # no decrease representable at this precision
            converged = True
            it -= 1
            break
        if not np.isfinite(new_loss):
            raise OptimizerDiverged(f"loss became {new_loss} at iteration {it}")
        z, e, loss, kld, S = z_new, e_new, new_loss, new_kld, new_S
        history.append(loss)

    logger.debug("fit_fusion: %d iterations, loss %.6g", it, loss)
    return FusionResult(
        fused=S,
        log_variances=e,
        loss=loss,
        kld=kld,
        iterations=it,
        converged=converged,
        history=tuple(history),
    )

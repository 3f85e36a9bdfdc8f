"""Temperature-scaled cosine InfoNCE losses and their gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

DEFAULT_TEMPERATURE = 0.05


class ZeroNormError(ValueError):
    pass


@dataclass
class ContrastiveInstance:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: list[np.ndarray]
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if not self.negatives:
            raise ValueError("need at least one negative")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        dim = np.shape(self.anchor)
        if np.shape(self.positive) != dim or any(np.shape(n) != dim for n in self.negatives):
            raise ValueError("all embeddings must share one dimension")


@dataclass
class LossValue:
    value: float
    softmax_probs: np.ndarray = field(repr=False)


@dataclass
class InstanceGradients:
    anchor: np.ndarray
    positive: np.ndarray
    negatives: list[np.ndarray]


def _norm(v: np.ndarray) -> float:
    n = float(np.linalg.norm(v))
    if n == 0.0:
        raise ZeroNormError("zero-norm embedding")
    return n


def cosine_sim(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    s = float(a @ b) / (_norm(a) * _norm(b))
    return min(1.0, max(-1.0, s))


def _softmax_nll(logits: np.ndarray) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[0] and the softmax, via max-subtracted log-sum-exp."""
    shifted = logits - logits.max()
    ex = np.exp(shifted)
    total = ex.sum()
    return float(np.log(total) - shifted[0]), ex / total


def info_nce(instance: ContrastiveInstance) -> LossValue:
    sims = np.array([cosine_sim(instance.anchor, c) for c in [instance.positive, *instance.negatives]])
    value, probs = _softmax_nll(sims / instance.temperature)
    return LossValue(max(value, 0.0), probs)


def _cos_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    na, nb = _norm(a), _norm(b)
    s = float(a @ b) / (na * nb)
    ga = b / (na * nb) - s * a / na**2
    gb = a / (na * nb) - s * b / nb**2
    return s, ga, gb


def info_nce_backward(instance: ContrastiveInstance) -> InstanceGradients:
    """Gradients of the instance loss w.r.t. anchor, positive and each negative."""
    a = np.asarray(instance.anchor, dtype=np.float64)
    cands = [np.asarray(c, dtype=np.float64) for c in (instance.positive, *instance.negatives)]
    parts = [_cos_grad(a, c) for c in cands]
    sims = np.array([p[0] for p in parts])
    _, probs = _softmax_nll(sims / instance.temperature)
    dsim = probs.copy()
    dsim[0] -= 1.0
    dsim /= instance.temperature
    g_anchor = np.zeros_like(a)
    g_cands = []
    for w, (_, ga, gc) in zip(dsim, parts):
        g_anchor += w * ga
        g_cands.append(w * gc)
    return InstanceGradients(g_anchor, g_cands[0], g_cands[1:])


def combined_loss(lcc: LossValue | float, ldm: LossValue | float) -> float:
    """Unweighted sum of the clustering and decision-matching losses."""
    as_float = lambda x: x.value if isinstance(x, LossValue) else float(x)  # noqa: E731
    return as_float(lcc) + as_float(ldm)


def batch_combined_loss(lcc: Sequence[LossValue], ldm: Sequence[LossValue]) -> float:
    """Mean over instances of per-instance combined losses."""
    if len(lcc) != len(ldm) or not lcc:
        raise ValueError("need equally many, non-zero, LCC and LDM losses")
    return float(np.mean([combined_loss(x, y) for x, y in zip(lcc, ldm)]))


@dataclass
class RowInstance:
    """An instance expressed as row indices: anchor into one matrix, candidates into another.

    ``candidates[0]`` is the positive.
    """

    anchor: int
    candidates: list[int]


def _normalize_rows(H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(H, axis=1)
    if np.any(norms == 0.0):
        raise ZeroNormError("zero-norm embedding")
    return H / norms[:, None], norms


def _unnormalize_grad(gU: np.ndarray, U: np.ndarray, norms: np.ndarray) -> np.ndarray:
    # d(h/|h|)/dh applied row-wise: (g - (g.u) u) / |h|
    return (gU - np.sum(gU * U, axis=1, keepdims=True) * U) / norms[:, None]


def row_info_nce(anchors: np.ndarray, cands: np.ndarray, instances: Sequence[RowInstance],
                 temperature: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Losses and gradients for many instances sharing two embedding matrices.

    Returns ``(losses, grad_anchors, grad_cands)``; gradients are of the MEAN
    loss over instances. ``anchors`` and ``cands`` may be the same array, in
    which case the two gradients must be added by the caller.
    """
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    UA, nA = _normalize_rows(anchors)
    UC, nC = _normalize_rows(cands)
    gUA = np.zeros_like(UA)
    gUC = np.zeros_like(UC)
    losses = np.zeros(len(instances))
    scale = 1.0 / max(len(instances), 1)
    for k, inst in enumerate(instances):
        if len(inst.candidates) < 2:
            raise ValueError("need a positive and at least one negative")
        idx = np.asarray(inst.candidates)
        u = UA[inst.anchor]
        C = UC[idx]
        sims = C @ u
        value, probs = _softmax_nll(sims / temperature)
        losses[k] = max(value, 0.0)
        dsim = probs
        dsim[0] -= 1.0
        dsim *= scale / temperature
        gUA[inst.anchor] += dsim @ C
        np.add.at(gUC, idx, dsim[:, None] * u[None, :])
    return losses, _unnormalize_grad(gUA, UA, nA), _unnormalize_grad(gUC, UC, nC)

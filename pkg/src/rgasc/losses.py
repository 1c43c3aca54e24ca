"""Scene/event losses, the two relation-guided consistency losses, and their weighted sum.

All terms are per-clip quantities averaged over the batch. Values and
gradients are computed in float64 regardless of the model precision.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .nn import sigmoid, softmax
from .relation import RelationMatrix, infer_event_from_scene, infer_scene_from_event

PROB_FLOOR = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Weights of the four loss terms, in the order they appear in tuples and tables."""

    scene: float = 1.0
    s_by_event: float = 1.0
    event: float = 1.0
    e_by_scene: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")

    @classmethod
    def of(cls, values) -> "LossWeights":
        if isinstance(values, LossWeights):
            return values
        if isinstance(values, dict):
            return cls(**values)
        return cls(*[float(v) for v in values])

    def as_tuple(self):
        return (self.scene, self.s_by_event, self.event, self.e_by_scene)


PURE_ASC = LossWeights(1.0, 0.0, 0.0, 0.0)
BEST_REPORTED = LossWeights(1.0, 0.01, 0.5, 0.01)


@dataclass
class LossBreakdown:
    l_scene: float = 0.0
    l_s_by_event: float = 0.0
    l_event: float = 0.0
    l_e_by_scene: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return asdict(self)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def scene_loss(scene_probs, scene_targets) -> float:
    """Categorical cross entropy against one-hot targets."""
    p, y = _batched(scene_probs), _batched(scene_targets)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    if not (np.all((y == 0) | (y == 1)) and np.all(y.sum(axis=1) == 1)):
        raise ValueError("scene targets must be one-hot")
    return float(np.mean(-np.sum(y * np.log(np.maximum(p, PROB_FLOOR)), axis=1)))


def event_loss(event_probs, event_targets) -> float:
    """Binary cross entropy summed over events; targets may be soft."""
    p, y = _batched(event_probs), _batched(event_targets)
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {y.shape}")
    p = np.clip(p, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return float(np.mean(-np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p), axis=1)))


def _mse(a, b) -> float:
    a, b = _batched(a), _batched(b)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch {a.shape} vs {b.shape}")
    return float(np.mean(np.mean((a - b) ** 2, axis=1)))


def event_by_scene_loss(event_probs, inferred_events) -> float:
    """MSE between event predictions and events inferred from the scene prediction."""
    return _mse(event_probs, inferred_events)


def scene_by_event_loss(scene_probs, inferred_scenes) -> float:
    """MSE between scene predictions and scene similarities inferred from events."""
    return _mse(scene_probs, inferred_scenes)


def _onehot(scene_targets, k):
    t = np.asarray(scene_targets)
    if t.ndim == 1 and t.dtype.kind in "iu":
        y = np.zeros((t.size, k))
        y[np.arange(t.size), t] = 1.0
        return y
    return _batched(t)


def composite_loss_and_grad(scene_logits, event_logits, scene_targets, event_targets,
                            relation: RelationMatrix | None, weights: LossWeights,
                            stop_gradient: bool = False, need_grad: bool = True):
    """Weighted loss and its gradients with respect to both logit batches.

    Terms with zero weight are never evaluated and report 0. With
    ``stop_gradient`` the event prediction is a fixed reference in the
    event-by-scene term and the scene prediction a fixed reference in the
    scene-by-event term.
    """
    weights = LossWeights.of(weights)
    zs, ze = _batched(scene_logits), _batched(event_logits)
    b, k = zs.shape
    ps, pe = softmax(zs), sigmoid(ze)
    ys = _onehot(scene_targets, k)
    ye = _batched(event_targets)
    cross = weights.s_by_event > 0 or weights.e_by_scene > 0
    if cross and relation is None:
        raise ValueError("relation-guided terms need a relation matrix")

    out = LossBreakdown()
    g_ps = np.zeros_like(ps)          # dL/d scene probs (MSE terms)
    g_pe = np.zeros_like(pe)          # dL/d event probs (MSE terms)
    d_zs = np.zeros_like(zs)
    d_ze = np.zeros_like(ze)

    if weights.scene > 0:
        out.l_scene = scene_loss(ps, ys)
        if need_grad:
            live = np.take_along_axis(ps, ys.argmax(axis=1)[:, None], axis=1) > PROB_FLOOR
            d_zs += weights.scene * (ps - ys) * live / b
    if weights.event > 0:
        out.l_event = event_loss(pe, ye)
        if need_grad:
            live = (pe > PROB_FLOOR) & (pe < 1.0 - PROB_FLOOR)
            d_ze += weights.event * (pe - ye) * live / b
    if weights.e_by_scene > 0:
        inferred_e = infer_event_from_scene(ps, relation)
        out.l_e_by_scene = event_by_scene_loss(pe, inferred_e)
        if need_grad:
            resid = weights.e_by_scene * 2.0 * (pe - inferred_e) / (pe.shape[1] * b)
            if not stop_gradient:
                g_pe += resid
            g_ps -= resid @ relation.values.astype(np.float64).T
    if weights.s_by_event > 0:
        inferred_s = infer_scene_from_event(pe, relation)
        out.l_s_by_event = scene_by_event_loss(ps, inferred_s)
        if need_grad:
            resid = weights.s_by_event * 2.0 * (ps - inferred_s) / (k * b)
            if not stop_gradient:
                g_ps += resid
            g_pe -= resid @ relation.values.astype(np.float64)

    out.total = (weights.scene * out.l_scene + weights.s_by_event * out.l_s_by_event
                 + weights.event * out.l_event + weights.e_by_scene * out.l_e_by_scene)
    if not need_grad:
        return out, None, None
    if cross:
        d_zs += ps * (g_ps - np.sum(g_ps * ps, axis=1, keepdims=True))
        d_ze += pe * (1.0 - pe) * g_pe
    return out, d_zs, d_ze


def composite_loss(scene_logits, event_logits, scene_targets, event_targets, relation, weights,
                   stop_gradient: bool = False) -> LossBreakdown:
    return composite_loss_and_grad(scene_logits, event_logits, scene_targets, event_targets, relation,
                                   weights, stop_gradient, need_grad=False)[0]

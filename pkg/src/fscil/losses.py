"""Joint class-by-rotation cross-entropy losses with analytic gradients.

Every loss is a softmax over all heads of all seen tasks, with logits
``eta * cos(sampled_weight, feature)``. Gradients reach head means directly,
shared variances through ``d weight / d sigma = eps``, and optionally the
input features (and through them the backbone).

Tests inject ``eps``; training passes an :class:`~fscil.numerics.Rng`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Cache, FeatureExtractor
from .data import rotations
from .head import StochasticHead
from .numerics import Rng, l2_normalize, log_softmax, normalize_backward, softmax

PROB_FLOOR = 1e-30
_LOG_FLOOR = np.log(PROB_FLOOR)


@dataclass
class GradientMask:
    """Which head parameters may change: ``means`` is (classes, M), ``sigma`` is (classes,)."""

    means: np.ndarray
    sigma: np.ndarray

    @classmethod
    def full(cls, head: StochasticHead, sigma: bool = True) -> GradientMask:
        return cls(np.ones((head.n_classes, head.rotations), bool), np.full(head.n_classes, sigma))

    @classmethod
    def incremental(cls, head: StochasticHead, new_class_ids, sigma: bool = True) -> GradientMask:
        """Old classes: only the 0-degree mean. New classes: everything."""
        new = np.isin(head.class_ids, np.asarray(list(new_class_ids)))
        means = np.zeros((head.n_classes, head.rotations), bool)
        means[:, 0] = True
        means[new] = True
        return cls(means, new & sigma)

    def apply(self, grad_means: np.ndarray, grad_sigma: np.ndarray) -> None:
        grad_means[~self.means] = 0.0
        grad_sigma[~self.sigma] = 0.0


@dataclass
class LossValue:
    loss: float
    grad_means: np.ndarray
    grad_sigma: np.ndarray
    grad_features: np.ndarray | None = None
    cache: Cache | None = None
    backbone_grads: list[np.ndarray] | None = None

    def scaled(self, k: float) -> LossValue:
        return LossValue(
            k * self.loss, k * self.grad_means, k * self.grad_sigma,
            None if self.grad_features is None else k * self.grad_features,
            self.cache,
            None if self.backbone_grads is None else [k * g for g in self.backbone_grads],
        )


def _noise(head, rng, eps):
    if eps is not None:
        return np.asarray(eps, dtype=np.float64)
    if rng is None:
        raise ValueError("pass either rng or eps")
    return head.draw_noise(rng)


def head_cross_entropy(head: StochasticHead, eps: np.ndarray, feats, targets, mask=None) -> LossValue:
    """Mean of ``-log softmax(logits)[target]`` over rows.

    ``feats`` is ``(rows, d)``; ``targets`` are flat head indices.
    """
    feats = np.asarray(feats, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    rows = feats.shape[0]
    w = head.flat(head.sample(eps=eps))
    unit_w = l2_normalize(w)
    unit_f = l2_normalize(feats)
    logp = log_softmax(head.eta * unit_f @ unit_w.T)
    picked = logp[np.arange(rows), targets]
    floored = picked < _LOG_FLOOR
    loss = float(-np.mean(np.maximum(picked, _LOG_FLOOR)))

    g = np.exp(logp)
    g[np.arange(rows), targets] -= 1.0
    g[floored] = 0.0
    g /= rows
    grad_w = normalize_backward(w, head.eta * g.T @ unit_f)
    grad_f = normalize_backward(feats, head.eta * g @ unit_w)
    grad_means = grad_w.reshape(head.means.shape)
    grad_sigma = np.sum(grad_means * eps, axis=1)
    if mask is not None:
        mask.apply(grad_means, grad_sigma)
    return LossValue(loss, grad_means, grad_sigma, grad_f)


def joint_softmax_rho(head: StochasticHead, weights, feature, target) -> float:
    """Probability of head ``target = (class_id, rotation)`` among all heads."""
    class_id, r = target
    probs = softmax(head.logits(feature, weights))
    return float(probs[head.index_of(class_id) * head.rotations + r])


def proto_softmax_zeta(head: StochasticHead, weights, prototype, class_id) -> float:
    """Probability of ``class_id``'s 0-degree head for a stored prototype."""
    return joint_softmax_rho(head, weights, prototype, (class_id, 0))


def s3c_loss_features(head: StochasticHead, rotated_feats, labels, *, rng: Rng | None = None,
                      eps=None, mask: GradientMask | None = None) -> LossValue:
    """Self-supervised stochastic loss from precomputed rotation features ``(n, M, d)``.

    Each rotated copy must land on its own (class, rotation) head; the mean
    over rotations and batch is returned. ``grad_features`` has the input shape.
    """
    feats = np.asarray(rotated_feats, dtype=np.float64)
    n, m, d = feats.shape
    if m != head.rotations:
        raise ValueError(f"features carry {m} rotations, head has {head.rotations}")
    eps = _noise(head, rng, eps)
    targets = (head.indices_of(labels)[:, None] * m + np.arange(m)).reshape(-1)
    lv = head_cross_entropy(head, eps, feats.reshape(n * m, d), targets, mask)
    lv.grad_features = lv.grad_features.reshape(n, m, d)
    return lv


def s3c_loss(head: StochasticHead, extractor: FeatureExtractor, images, labels, *,
             rng: Rng | None = None, eps=None, mask: GradientMask | None = None,
             backbone: bool = False) -> LossValue:
    """Rotate, extract, and score a batch of images ``(n, C, H, W)``.

    With ``backbone=True`` the extractor parameter gradients are filled in.
    """
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    m = head.rotations
    rot = rotations(images, m).reshape(n * m, *images.shape[1:])
    feats, cache = extractor.forward(rot)
    lv = s3c_loss_features(head, feats.reshape(n, m, -1), labels, rng=rng, eps=eps, mask=mask)
    lv.cache = cache
    if backbone:
        lv.backbone_grads = extractor.backward(cache, lv.grad_features.reshape(n * m, -1))
    return lv


def proto_loss(head: StochasticHead, prototypes, proto_labels, *, rng: Rng | None = None,
               eps=None, mask: GradientMask | None = None) -> LossValue:
    """Cross-entropy of each stored prototype against its class's 0-degree head."""
    protos = np.asarray(prototypes, dtype=np.float64)
    targets = head.indices_of(proto_labels) * head.rotations
    return head_cross_entropy(head, _noise(head, rng, eps), protos, targets, mask)


def incremental_loss(head: StochasticHead, rotated_feats, labels, prototypes, proto_labels,
                     lam1: float = 5.0, lam2: float = 1.0, *, rng: Rng | None = None,
                     eps=None, mask: GradientMask | None = None) -> LossValue:
    """``lam1 * proto_loss + lam2 * s3c_loss`` sharing one noise draw."""
    if lam1 < 0 or lam2 < 0:
        raise ValueError("loss weights must be non-negative")
    eps = _noise(head, rng, eps)
    p = proto_loss(head, prototypes, proto_labels, eps=eps, mask=mask)
    s = s3c_loss_features(head, rotated_feats, labels, eps=eps, mask=mask)
    return LossValue(
        lam1 * p.loss + lam2 * s.loss,
        lam1 * p.grad_means + lam2 * s.grad_means,
        lam1 * p.grad_sigma + lam2 * s.grad_sigma,
        lam2 * s.grad_features,
    )

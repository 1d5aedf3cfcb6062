import math

import numpy as np
import pytest

from fscil.backbone import make_extractor
from fscil.data import rotate
from fscil.errors import UnknownClass, ZeroVector
from fscil.head import StochasticHead
from fscil.losses import (GradientMask, incremental_loss, joint_softmax_rho, proto_loss,
                          proto_softmax_zeta, s3c_loss, s3c_loss_features)
from fscil.numerics import Rng, finite_diff_grad, relative_error

from conftest import random_head


def naive_prob(head, weights, feature, class_id, r):
    """Triple sum over tasks, classes of each task, rotations."""
    def score(v):
        return math.exp(head.eta * float(v @ feature) / (math.sqrt(v @ v) * math.sqrt(feature @ feature)))

    denom = 0.0
    for task in sorted(set(head.task_ids.tolist())):
        for c in np.flatnonzero(head.task_ids == task):
            for l in range(head.rotations):
                denom += score(weights[c, l])
    return score(weights[head.index_of(class_id), r]) / denom


def naive_s3c(head, weights, extractor, images, labels):
    total = 0.0
    for img, y in zip(images, labels):
        for r in range(head.rotations):
            f = extractor.features(rotate(img, r))
            total -= math.log(naive_prob(head, weights, f, y, r))
    return total / (len(labels) * head.rotations)


def test_rho_uniform_when_heads_identical():
    head = StochasticHead(3, 4)
    head.add_classes(0, [0, 1], np.ones((2, 4, 3)), np.zeros((2, 3)))
    head.add_classes(1, [2], np.ones((1, 4, 3)), np.zeros((1, 3)))
    f = np.array([0.3, -1.0, 2.0])
    assert joint_softmax_rho(head, head.means, f, (2, 3)) == pytest.approx(1 / 12)
    assert proto_softmax_zeta(head, head.means, f, 1) == pytest.approx(1 / 12)


def test_rho_single_class_four_rotations():
    head = StochasticHead(2, 4)
    head.add_classes(0, [0], np.ones((1, 4, 2)), np.zeros((1, 2)))
    assert joint_softmax_rho(head, head.means, np.array([1.0, 5.0]), (0, 2)) == pytest.approx(0.25)


@pytest.mark.parametrize("seed", range(10))
def test_rho_matches_naive(seed):
    rng = Rng(seed)
    head = random_head(rng, d=5, classes_per_task=(3, 2, 1))
    w = head.sample(rng)
    f = rng.normal(5)
    for cid in head.class_ids:
        for r in range(4):
            assert abs(joint_softmax_rho(head, w, f, (cid, r)) - naive_prob(head, w, f, cid, r)) < 1e-10


def test_zeta_peaks_on_matching_mean():
    rng = Rng(3)
    head = random_head(rng, d=6, classes_per_task=(3,), eta=100.0)
    q = head.means[1, 0].copy()
    assert proto_softmax_zeta(head, head.means, q, 1) > 0.99
    assert proto_softmax_zeta(head, head.means, q, 1) == pytest.approx(naive_prob(head, head.means, q, 1, 0), abs=1e-12)


def test_zeta_equals_rho_for_same_vector(rng):
    head = random_head(rng)
    w = head.sample(rng)
    f = rng.normal(4)
    assert proto_softmax_zeta(head, w, f, 3) == joint_softmax_rho(head, w, f, (3, 0))


def test_zero_prototype(rng):
    head = random_head(rng)
    with pytest.raises(ZeroVector):
        proto_softmax_zeta(head, head.means, np.zeros(4), 0)


def test_s3c_single_class_matches_hand_computation():
    rng = Rng(8)
    fe = make_extractor(rng, (1, 3, 3), 5, 4)
    head = StochasticHead(4, 4)
    head.add_classes(0, [0], rng.normal((1, 4, 4)), np.zeros((1, 4)))
    x = rng.uniform((2, 1, 3, 3))
    expected = 0.0
    for img in x:
        for r in range(4):
            f = fe.features(rotate(img, r))
            logits = [head.eta * float(head.means[0, l] @ f) / np.linalg.norm(head.means[0, l]) / np.linalg.norm(f)
                      for l in range(4)]
            expected -= logits[r] - math.log(sum(math.exp(z) for z in logits))
    expected /= 8
    lv = s3c_loss(head, fe, x, [0, 0], eps=np.zeros((1, 4, 4)))
    assert lv.loss == pytest.approx(expected, rel=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_s3c_matches_naive_and_is_nonnegative(seed):
    rng = Rng(100 + seed)
    head = random_head(rng, d=4, classes_per_task=(2, 2))
    fe = make_extractor(rng, (1, 3, 3), 5, 4)
    eps = head.draw_noise(rng)
    x = rng.uniform((3, 1, 3, 3))
    y = [0, 3, 2]
    lv = s3c_loss(head, fe, x, y, eps=eps)
    assert lv.loss >= 0
    assert lv.loss == pytest.approx(naive_s3c(head, head.sample(eps=eps), fe, x, y), rel=1e-10)


def _fd_head(loss_of_head, head, attr):
    def f(v):
        h = head.copy()
        setattr(h, attr, v)
        return loss_of_head(h)
    return finite_diff_grad(f, getattr(head, attr).copy(), 1e-5)


@pytest.mark.parametrize("seed", range(5))
def test_s3c_gradients(seed):
    rng = Rng(200 + seed)
    head = random_head(rng, d=4, classes_per_task=(2, 3))
    fe = make_extractor(rng, (1, 3, 3), 5, 4)
    eps = head.draw_noise(rng)
    x, y = rng.uniform((2, 1, 3, 3)), [1, 4]
    lv = s3c_loss(head, fe, x, y, eps=eps, backbone=True)
    loss = lambda h: s3c_loss(h, fe, x, y, eps=eps).loss
    assert relative_error(_fd_head(loss, head, "means"), lv.grad_means) <= 1e-4
    assert relative_error(_fd_head(loss, head, "sigma"), lv.grad_sigma) <= 1e-4
    for p, g in zip(fe.params(), lv.backbone_grads):
        def f(v, p=p):
            old = p.copy()
            p[...] = v
            out = s3c_loss(head, fe, x, y, eps=eps).loss
            p[...] = old
            return out
        assert relative_error(finite_diff_grad(f, p.copy(), 1e-5), g) <= 1e-4


def test_feature_gradient():
    rng = Rng(31)
    head = random_head(rng, d=4)
    feats = rng.normal((3, 4, 4))
    eps = head.draw_noise(rng)
    y = [0, 2, 4]
    lv = s3c_loss_features(head, feats, y, eps=eps)
    fd = finite_diff_grad(lambda v: s3c_loss_features(head, v, y, eps=eps).loss, feats, 1e-5)
    assert relative_error(fd, lv.grad_features) <= 1e-4


def test_losses_invariant_to_feature_scale(rng):
    head = random_head(rng)
    feats = rng.normal((2, 4, 4))
    eps = head.draw_noise(rng)
    a = s3c_loss_features(head, feats, [0, 1], eps=eps).loss
    b = s3c_loss_features(head, 7.5 * feats, [0, 1], eps=eps).loss
    assert a == pytest.approx(b, rel=1e-12)
    protos = rng.normal((3, 4))
    assert proto_loss(head, protos, [0, 1, 2], eps=eps).loss == pytest.approx(
        proto_loss(head, 0.1 * protos, [0, 1, 2], eps=eps).loss, rel=1e-12)


def test_gradient_mask_layout(rng):
    head = random_head(rng, classes_per_task=(2, 3))
    mask = GradientMask.incremental(head, [2, 3, 4])
    assert mask.means[:2, 0].all() and not mask.means[:2, 1:].any()
    assert mask.means[2:].all()
    assert mask.sigma.tolist() == [False, False, True, True, True]


def test_proto_loss_mask_and_gradients():
    rng = Rng(41)
    head = random_head(rng, classes_per_task=(3, 2))
    eps = head.draw_noise(rng)
    protos, labels = rng.normal((3, 4)), [0, 1, 2]
    mask = GradientMask.incremental(head, [3, 4])
    lv = proto_loss(head, protos, labels, eps=eps, mask=mask)
    assert not lv.grad_means[~mask.means].any()
    assert not lv.grad_sigma[~mask.sigma].any()
    full = proto_loss(head, protos, labels, eps=eps)
    fd_means = _fd_head(lambda h: proto_loss(h, protos, labels, eps=eps).loss, head, "means")
    fd_sigma = _fd_head(lambda h: proto_loss(h, protos, labels, eps=eps).loss, head, "sigma")
    assert relative_error(fd_means, full.grad_means) <= 1e-4
    assert relative_error(fd_sigma, full.grad_sigma) <= 1e-4
    np.testing.assert_array_equal(lv.grad_means[mask.means], full.grad_means[mask.means])


def test_mask_perturb_and_compare():
    rng = Rng(42)
    head = random_head(rng, classes_per_task=(2, 2))
    mask = GradientMask.incremental(head, [2, 3])
    eps = head.draw_noise(rng)
    feats, y = rng.normal((2, 4, 4)), [2, 3]
    protos, py = rng.normal((2, 4)), [0, 1]
    lv = incremental_loss(head, feats, y, protos, py, eps=eps, mask=mask)
    fd = _fd_head(lambda h: incremental_loss(h, feats, y, protos, py, eps=eps).loss, head, "means")
    # masked coordinates read zero, unmasked ones carry the true gradient
    assert not lv.grad_means[~mask.means].any()
    assert relative_error(fd[mask.means], lv.grad_means[mask.means]) <= 1e-4
    assert np.abs(fd[~mask.means]).max() > 0


def test_proto_loss_decreases_on_toy_problem():
    rng = Rng(5)
    head = random_head(rng, d=4, classes_per_task=(3,), sigma_scale=0.0)
    protos = rng.normal((3, 4))
    losses = []
    for _ in range(50):
        lv = proto_loss(head, protos, [0, 1, 2], eps=np.zeros(head.means.shape))
        losses.append(lv.loss)
        head.means = head.means - 0.05 * lv.grad_means
    assert all(b <= a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.5 * losses[0]


def test_unknown_prototype_class(rng):
    head = random_head(rng)
    with pytest.raises(UnknownClass):
        proto_loss(head, np.ones((1, 4)), [99], rng=rng)


def test_incremental_loss_is_linear_combination(rng):
    head = random_head(rng)
    eps = head.draw_noise(rng)
    feats, y = rng.normal((2, 4, 4)), [3, 4]
    protos, py = rng.normal((2, 4)), [0, 1]
    s = s3c_loss_features(head, feats, y, eps=eps)
    p = proto_loss(head, protos, py, eps=eps)
    only_s = incremental_loss(head, feats, y, protos, py, lam1=0.0, lam2=1.0, eps=eps)
    only_p = incremental_loss(head, feats, y, protos, py, lam1=1.0, lam2=0.0, eps=eps)
    assert only_s.loss == s.loss and only_p.loss == p.loss
    both = incremental_loss(head, feats, y, protos, py, eps=eps)  # defaults 5, 1
    assert both.loss == pytest.approx(5 * p.loss + s.loss, rel=1e-14)
    np.testing.assert_allclose(both.grad_sigma, 5 * p.grad_sigma + s.grad_sigma, rtol=1e-12, atol=1e-15)
    with pytest.raises(ValueError):
        incremental_loss(head, feats, y, protos, py, lam1=-1, eps=eps)

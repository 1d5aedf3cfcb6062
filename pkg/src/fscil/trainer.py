"""Base-session training, incremental fine-tuning, and the full session loop."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from .backbone import FeatureExtractor, make_extractor
from .data import ClassEmbeddingTable, Dataset, SessionPlan, Task, rotations
from .errors import MissingPrototypes, ShapeMismatch, TrainingError
from .evaluation import MetricsReport, evaluate_session
from .head import StochasticHead
from .losses import GradientMask, incremental_loss, s3c_loss
from .numerics import Rng
from .prototypes import PrototypeStore, compute_prototypes

log = logging.getLogger(__name__)

ABLATIONS = {
    # name: (rotations, stochastic)
    "s3c": (4, True),
    "selfsup-linear": (4, False),
    "no-selfsup": (1, True),
    "linear-head": (1, False),
}


@dataclass
class TrainConfig:
    base_epochs: int = 60
    base_lr: float = 0.01
    base_milestones: list[int] | None = None  # None: 60% and 80% of base_epochs
    batch_size: int = 32
    inc_epochs: int = 100
    inc_lr: float = 0.01
    momentum: float = 0.9
    lam1: float = 5.0
    lam2: float = 1.0
    eta: float = 16.0
    rotations: int = 4
    stochastic: bool = True
    sigma_init: float = 0.1
    sigma_lr_scale: float = 1.0  # variance learning rate relative to the means'
    relative_variance: bool = False
    match_norm: bool = False
    hidden: int = 64
    feature_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.base_lr <= 0 or self.inc_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.sigma_lr_scale < 0:
            raise ValueError("sigma_lr_scale must be non-negative")
        if self.lam1 < 0 or self.lam2 < 0:
            raise ValueError("loss weights must be non-negative")
        ms = self.base_milestones or []
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {ms}")

    def milestones(self) -> list[int]:
        if self.base_milestones is not None:
            return list(self.base_milestones)
        return sorted({int(round(0.6 * self.base_epochs)), int(round(0.8 * self.base_epochs))})

    def base_lr_at(self, epoch: int) -> float:
        return self.base_lr * 0.1 ** sum(epoch >= m for m in self.milestones())

    @classmethod
    def for_ablation(cls, name: str, **overrides) -> TrainConfig:
        if name not in ABLATIONS:
            raise ValueError(f"unknown ablation {name!r}; expected one of {sorted(ABLATIONS)}")
        m, stochastic = ABLATIONS[name]
        return cls(rotations=m, stochastic=stochastic, **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


def sgd_step(param, grad, velocity, lr: float, momentum: float, mask=None, clamp_min=None):
    """One momentum-SGD step; returns ``(param, velocity)``.

    ``v <- momentum * v + grad``, ``p <- p - lr * v``. Coordinates where
    ``mask`` is False keep both their value and velocity.
    """
    param = np.asarray(param, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    velocity = np.zeros_like(param) if velocity is None else np.asarray(velocity, dtype=np.float64)
    if grad.shape != param.shape or velocity.shape != param.shape:
        raise ShapeMismatch(f"param {param.shape}, grad {grad.shape}, velocity {velocity.shape}")
    new_v = momentum * velocity + grad
    new_p = param - lr * new_v
    if clamp_min is not None:
        new_p = np.maximum(new_p, clamp_min)
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, bool).reshape(mask.shape + (1,) * (param.ndim - np.ndim(mask))), param.shape)
        new_p = np.where(mask, new_p, param)
        new_v = np.where(mask, new_v, velocity)
    return new_p, new_v


class SGD:
    """Momentum SGD over named arrays."""

    def __init__(self, momentum: float = 0.9):
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, name, param, grad, lr, mask=None, clamp_min=None):
        p, v = sgd_step(param, grad, self.velocity.get(name), lr, self.momentum, mask, clamp_min)
        self.velocity[name] = v
        return p


@dataclass
class SessionState:
    extractor: FeatureExtractor
    head: StochasticHead
    store: PrototypeStore
    t: int = -1  # last completed session
    metrics: MetricsReport = field(default_factory=MetricsReport)
    loss_log: list[tuple[int, str, float]] = field(default_factory=list)


def new_state(input_shape, cfg: TrainConfig, rng: Rng) -> SessionState:
    fe = make_extractor(rng, input_shape, cfg.hidden, cfg.feature_dim)
    head = StochasticHead(cfg.feature_dim, cfg.rotations, cfg.eta)
    return SessionState(fe, head, PrototypeStore(cfg.feature_dim))


def _finite(lv, batch):
    if not np.isfinite(lv.loss) or not np.all(np.isfinite(lv.grad_means)):
        raise TrainingError("non-finite loss or gradient", batch)


def train_base(state: SessionState, images, labels, cfg: TrainConfig, rng: Rng,
               class_ids=None, sample_ids=None) -> SessionState:
    """Fit extractor and base heads on the joint class/rotation loss, then freeze."""
    if state.t != -1:
        raise RuntimeError("base training must come first")
    if state.extractor.frozen:
        raise RuntimeError("extractor is frozen")
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if class_ids is None:
        class_ids = np.unique(labels)
    fe, head = state.extractor, state.head
    head.init_base_classes(0, class_ids, rng, cfg.sigma_init if cfg.stochastic else 0.0)
    opt = SGD(cfg.momentum)
    sigma_mask = np.full(head.n_classes, cfg.stochastic)
    n = len(labels)
    batch_no = 0
    for epoch in range(cfg.base_epochs):
        lr = cfg.base_lr_at(epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lv = s3c_loss(head, fe, images[idx], labels[idx], rng=rng, backbone=True)
            _finite(lv, batch_no)
            for i, (p, g) in enumerate(zip(fe.params(), lv.backbone_grads)):
                p[...] = opt.step(f"theta{i}", p, g, lr)
            fe.mark_updated()
            head.means = opt.step("means", head.means, lv.grad_means, lr)
            head.sigma = opt.step("sigma", head.sigma, lv.grad_sigma, lr * cfg.sigma_lr_scale,
                                  mask=sigma_mask, clamp_min=0.0)
            total += lv.loss * len(idx)
            batch_no += 1
        state.loss_log.append((epoch, "base", total / n))
        log.debug("base epoch %d lr %.4g loss %.5f", epoch, lr, total / n)
    fe.frozen = True
    state.store = PrototypeStore(fe.output_dim, fe.fingerprint())
    state.store.update(0, compute_prototypes(fe, images, labels, class_ids, sample_ids))
    state.t = 0
    return state


def train_incremental(state: SessionState, task: Task, images, labels, cfg: TrainConfig,
                      rng: Rng, embeddings: ClassEmbeddingTable, sample_ids=None) -> SessionState:
    """Add the task's classes and fine-tune every classifier with a frozen extractor."""
    fe, head, store = state.extractor, state.head, state.store
    if state.t < 0:
        raise RuntimeError("run base training first")
    if not fe.frozen:
        raise RuntimeError("extractor must be frozen for incremental sessions")
    missing = sorted(set(head.class_ids.tolist()) - set(store.entries))
    if missing:
        raise MissingPrototypes(f"no stored prototypes for classes {missing}")
    store.check_fingerprint(fe)

    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    n, m = len(labels), head.rotations
    rot_feats = fe.features(rotations(images, m).reshape(n * m, *images.shape[1:])).reshape(n, m, -1)
    base_ids = head.class_ids[head.task_ids == 0]
    for cid in task.class_ids:
        head.init_new_class(task.task_id, cid, rot_feats[labels == cid], embeddings, base_ids,
                            relative_variance=cfg.relative_variance, match_norm=cfg.match_norm)

    proto_ids, protos = store.arrays()
    mask = GradientMask.incremental(head, task.class_ids, sigma=cfg.stochastic)
    opt = SGD(cfg.momentum)
    split = f"session{task.task_id}"
    for epoch in range(cfg.inc_epochs):
        lv = incremental_loss(head, rot_feats, labels, protos, proto_ids, cfg.lam1, cfg.lam2,
                              rng=rng, mask=mask)
        _finite(lv, epoch)
        head.means = opt.step("means", head.means, lv.grad_means, cfg.inc_lr, mask=mask.means)
        head.sigma = opt.step("sigma", head.sigma, lv.grad_sigma, cfg.inc_lr * cfg.sigma_lr_scale,
                              mask=mask.sigma, clamp_min=0.0)
        state.loss_log.append((epoch, split, lv.loss))
    store.update(task.task_id, compute_prototypes(fe, images, labels, task.class_ids, sample_ids))
    state.t = task.task_id
    return state


def run_sessions(ds: Dataset, plan: SessionPlan, cfg: TrainConfig, seed: int | None = None,
                 sessions: int | None = None, on_session=None) -> SessionState:
    """Base session, then each incremental task, evaluating after every session.

    All randomness derives from ``seed`` (default ``cfg.seed``). ``on_session``
    is called with ``(state, task)`` after each session is evaluated. A
    :class:`TrainingError` carries the partial state as ``exc.state``.
    """
    seed = cfg.seed if seed is None else seed
    init_rng, shot_rng, base_rng, inc_rng = Rng(seed).spawn(4)
    state = new_state(ds.image_shape, cfg, init_rng)
    embeddings = ds.embedding_table()
    task_of = plan.task_of()
    count = len(plan.tasks) if sessions is None else min(sessions, len(plan.tasks))
    for task in plan.tasks[:count]:
        x, y, ids = data_mod.task_samples(ds, task, shot_rng)
        try:
            if task.task_id == 0:
                train_base(state, x, y, cfg, base_rng, task.class_ids, ids)
            else:
                train_incremental(state, task, x, y, cfg, inc_rng, embeddings, ids)
        except TrainingError as exc:
            exc.state = state  # callers may still save what completed
            raise
        tx, ty = data_mod.test_samples(ds, plan.classes_up_to(task.task_id))
        row = evaluate_session(state.head, state.extractor, task.task_id, tx, ty, task_of)
        state.metrics.sessions.append(row)
        log.info("session %d top1 %.4f hm %s", task.task_id, row.top1, row.hm)
        if on_session is not None:
            on_session(state, task)
    return state

"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` to see the verdict lines.
"""

import math
import time

import numpy as np
import pytest

import fscil.trainer as trainer_mod
from fscil import cli
from fscil.backbone import make_extractor
from fscil.data import GeneratorConfig, ProtocolConfig, build_sessions, generate_synthetic, rotations
from fscil.data import test_samples as held_out
from fscil.evaluation import harmonic_mean, performance_drop, predict
from fscil.head import StochasticHead
from fscil.losses import incremental_loss, joint_softmax_rho, proto_loss, proto_softmax_zeta, s3c_loss
from fscil.numerics import Rng, finite_diff_grad, l2_normalize, relative_error
from fscil.trainer import SGD, TrainConfig, run_sessions

SEEDS = range(1, 11)


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
    return emit


def desk_benchmark(seed, variant="standard"):
    plan = build_sessions(ProtocolConfig(base_classes=10, tasks=4, ways=2, shots=5, variant=variant))
    ds = generate_synthetic(GeneratorConfig(classes=max(plan.all_classes) + 1), Rng(seed))
    return ds, plan


def final_hm(ds, plan, ablation, seed):
    state = run_sessions(ds, plan, TrainConfig.for_ablation(ablation, seed=seed))
    return state.metrics.sessions[-1].hm, state.metrics


# --------------------------------------------------------------------------
# 1. gradient oracle


def _instance(i):
    rng = Rng(1000 + i)
    d = (4, 8)[i % 2]
    n_tasks = 1 + i % 3
    n_classes = max(2 + i % 4, n_tasks)
    split = np.full(n_tasks, n_classes // n_tasks)
    split[: n_classes % n_tasks] += 1
    head = StochasticHead(d, 4)
    cid = 0
    for t, n in enumerate(split):
        head.add_classes(t, range(cid, cid + n), rng.normal((n, 4, d)), 0.3 * np.abs(rng.normal((n, d))))
        cid += n
    fe = make_extractor(rng, (1, 3, 3), 5, d)
    images = rng.uniform((3, 1, 3, 3))
    labels = rng.permutation(3 * n_classes)[:3] % n_classes
    protos = rng.normal((n_classes, d))
    return head, fe, images, labels, protos, np.arange(n_classes), head.draw_noise(rng)


def _losses(head, fe, images, labels, protos, proto_ids, eps):
    n, m = len(labels), head.rotations

    def l_s3c(h, backbone=False):
        return s3c_loss(h, fe, images, labels, eps=eps, backbone=backbone)

    def l_proto(h):
        return proto_loss(h, protos, proto_ids, eps=eps)

    def l_inc(h, backbone=False):
        rot = rotations(images, m).reshape(n * m, *images.shape[1:])
        feats, cache = fe.forward(rot)
        lv = incremental_loss(h, feats.reshape(n, m, -1), labels, protos, proto_ids, 5.0, 1.0, eps=eps)
        if backbone:
            lv.backbone_grads = fe.backward(cache, lv.grad_features.reshape(n * m, -1))
        return lv

    return {"S3C": (l_s3c, True), "proto": (l_proto, False), "inc": (l_inc, True)}


def _worst_error(head, fe, loss_fn, with_backbone):
    lv = loss_fn(head, backbone=True) if with_backbone else loss_fn(head)
    worst = 0.0
    for attr, grad in (("means", lv.grad_means), ("sigma", lv.grad_sigma)):
        def f(v, attr=attr):
            h = head.copy()
            setattr(h, attr, v)
            return loss_fn(h).loss
        worst = max(worst, relative_error(finite_diff_grad(f, getattr(head, attr).copy(), 1e-5), grad))
    if with_backbone:
        for p, g in zip(fe.params(), lv.backbone_grads):
            def f(v, p=p):
                old = p.copy()
                p[...] = v
                out = loss_fn(head).loss
                p[...] = old
                return out
            worst = max(worst, relative_error(finite_diff_grad(f, p.copy(), 1e-5), g))
    return worst


def test_criterion_1_gradient_oracle(verdict):
    t0 = time.perf_counter()
    worst = {}
    for i in range(20):
        head, fe, images, labels, protos, proto_ids, eps = _instance(i)
        for name, (fn, bb) in _losses(head, fe, images, labels, protos, proto_ids, eps).items():
            worst[name] = max(worst.get(name, 0.0), _worst_error(head, fe, fn, bb))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 30
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"20 instances; {detail}; {elapsed:.1f}s (limit 30s)")
    assert ok


# --------------------------------------------------------------------------
# 2. softmax structure


def _naive(head, weights, feature, class_id, r):
    def score(v):
        return math.exp(head.eta * float(v @ feature) / (math.sqrt(v @ v) * math.sqrt(feature @ feature)))

    denom = 0.0
    for task in sorted(set(head.task_ids.tolist())):
        for c in np.flatnonzero(head.task_ids == task):
            for l in range(head.rotations):
                denom += score(weights[c, l])
    return score(weights[head.index_of(class_id), r]) / denom


def test_criterion_2_softmax_structure(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = Rng(5000 + i)
        d = int(rng.permutation(np.arange(2, 9))[0])
        n_tasks = 1 + i % 3
        head = StochasticHead(d, 4)
        cid = 0
        for t in range(n_tasks):
            n = 1 + (i + t) % 3
            head.add_classes(t, range(cid, cid + n), rng.normal((n, 4, d)), 0.5 * np.abs(rng.normal((n, d))))
            cid += n
        w = head.sample(rng)
        f = rng.normal(d)
        c = int(head.class_ids[i % head.n_classes])
        r = i % 4
        worst = max(worst, abs(joint_softmax_rho(head, w, f, (c, r)) - _naive(head, w, f, c, r)))
        worst = max(worst, abs(proto_softmax_zeta(head, w, f, c) - _naive(head, w, f, c, 0)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-10 and elapsed < 5
    verdict(2, ok, f"100 instances; max |diff| {worst:.1e} (tol 1e-10); {elapsed:.2f}s (limit 5s)")
    assert ok


# --------------------------------------------------------------------------
# 3. metrics


def test_criterion_3_metrics(verdict):
    pd = performance_drop(75.85, 52.28)
    hm = harmonic_mean(0.6, 0.4)
    rng = np.random.default_rng(3)
    pairs = rng.uniform(0, 1, (1000, 2))
    bounded = all(min(a, b) <= harmonic_mean(a, b) <= max(a, b) for a, b in pairs)
    ok = pd == 23.57 and hm == 0.48 and bounded
    verdict(3, ok, f"PD(75.85, 52.28) = {pd!r}; HM(0.6, 0.4) = {hm!r}; 1000 random pairs bounded: {bounded}")
    assert ok


# --------------------------------------------------------------------------
# 4. freeze and mask contracts


def test_criterion_4_freeze_and_mask(verdict, monkeypatch):
    violations = []
    steps = {"sigma": 0, "inc": 0}
    watch = {"state": None, "fingerprint": None, "old_means": None}

    class WatchedSGD(SGD):
        def step(self, name, param, grad, lr, mask=None, clamp_min=None):
            out = super().step(name, param, grad, lr, mask, clamp_min)
            if name == "sigma":
                steps["sigma"] += 1
                if np.any(out < 0):
                    violations.append("negative sigma")
            if name == "means" and watch["old_means"] is not None:
                steps["inc"] += 1
                old = watch["old_means"]
                if out[: len(old), 1:].tobytes() != old.tobytes():
                    violations.append("old r!=0 mean changed")
                if watch["state"].extractor.fingerprint() != watch["fingerprint"]:
                    violations.append("backbone changed")
            return out

    def on_session(state, task):
        watch["state"] = state
        watch["fingerprint"] = state.extractor.fingerprint()
        watch["params"] = [p.copy() for p in state.extractor.params()]
        watch["old_means"] = state.head.means[:, 1:].copy()

    monkeypatch.setattr(trainer_mod, "SGD", WatchedSGD)
    ds, plan = desk_benchmark(1)
    params_after = []
    cfg = TrainConfig(base_epochs=10)

    def record(state, task):
        if task.task_id > 0:
            # bit-identical backbone across the whole session
            if any(a.tobytes() != b.tobytes() for a, b in zip(watch["params"], state.extractor.params())):
                violations.append("backbone params changed")
            params_after.append(task.task_id)
        on_session(state, task)

    state = run_sessions(ds, plan, cfg, sessions=4, on_session=record)
    ok = not violations and params_after == [1, 2, 3] and np.all(state.head.sigma >= 0)
    verdict(4, ok, f"1 base + 3 incremental sessions; {steps['inc']} incremental and {steps['sigma']} "
                   f"sigma steps checked; violations: {sorted(set(violations)) or 'none'}")
    assert ok


# --------------------------------------------------------------------------
# 5. ablation trend


def test_criterion_5_ablation_trend(verdict):
    t0 = time.perf_counter()
    rows = []
    for seed in SEEDS:
        ds, plan = desk_benchmark(seed)
        rows.append([final_hm(ds, plan, a, seed)[0] for a in ("s3c", "selfsup-linear", "linear-head")])
    elapsed = time.perf_counter() - t0
    h = np.array(rows)
    ordered = int(np.sum((h[:, 0] >= h[:, 1]) & (h[:, 1] >= h[:, 2])))
    s3c_vs_ssl = int(np.sum(h[:, 0] >= h[:, 1]))
    ssl_vs_lin = int(np.sum(h[:, 1] >= h[:, 2]))
    gap = 100 * (h[:, 0].mean() - h[:, 2].mean())
    ok = ordered >= 8 and gap >= 5 and elapsed < 600
    per_seed = " ".join(f"[{a:.3f} {b:.3f} {c:.3f}]" for a, b, c in h)
    verdict(5, ok, f"ordering S3C >= selfsup-linear >= linear in {ordered}/10 seeds (need 8; "
                   f"S3C >= selfsup-linear {s3c_vs_ssl}/10, selfsup-linear >= linear {ssl_vs_lin}/10); "
                   f"mean HM gap S3C - linear {gap:.2f} points (need 5); {elapsed:.0f}s (limit 600s); "
                   f"per-seed HM [s3c ssl lin]: {per_seed}")
    assert ok


# --------------------------------------------------------------------------
# 6. imbalanced and fewer-base variants


def test_criterion_6_variants(verdict):
    parts, ok = [], True
    for variant in ("im", "lb"):
        wins, complete = 0, True
        for seed in SEEDS:
            ds, plan = desk_benchmark(seed, variant)
            s3c, report = final_hm(ds, plan, "s3c", seed)
            lin, _ = final_hm(ds, plan, "linear-head", seed)
            complete &= len(report.sessions) == len(plan.tasks) and report.pd is not None
            wins += s3c >= lin
        shots = plan.tasks[1].shots
        parts.append(f"{variant}: base {plan.base_classes} classes, shots {shots}, "
                     f"complete reports {complete}, S3C >= linear in {wins}/10")
        ok &= complete and wins >= 7
    ok &= desk_benchmark(1, "im")[1].tasks[1].shots == [5, 4, 3, 2, 1]
    verdict(6, ok, "; ".join(parts) + " (need 7/10 each)")
    assert ok


# --------------------------------------------------------------------------
# 7. determinism


def test_criterion_7_determinism(verdict, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["--seed", "1", "run", "--out", str(out)]) == 0
        outs.append((out / "metrics.csv").read_bytes())
    ok = outs[0] == outs[1]
    verdict(7, ok, f"two CLI runs, seed 1: metrics.csv byte-identical = {ok} ({len(outs[0])} bytes)")
    assert ok


# --------------------------------------------------------------------------
# 8. inference aggregation reduces to a cosine classifier


def test_criterion_8_cosine_reference(verdict):
    ds, plan = desk_benchmark(1)
    state = run_sessions(ds, plan, TrainConfig.for_ablation("linear-head", seed=1))
    head, fe = state.head, state.extractor
    x, y = held_out(ds, plan.all_classes)
    pred, _ = predict(head, fe, x)
    # reference: plain cosine nearest-weight classifier, no rotations
    feats = l2_normalize(fe.features(x))
    ref = head.class_ids[np.argmax(feats @ l2_normalize(head.means[:, 0]).T, axis=1)]
    matches = int(np.sum(pred == ref))
    ok = head.rotations == 1 and not head.sigma.any() and matches == len(y)
    verdict(8, ok, f"M={head.rotations}, sigma all zero: {not head.sigma.any()}; "
                   f"{matches}/{len(y)} predictions match the reference")
    assert ok

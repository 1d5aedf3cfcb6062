"""Rotation-aggregated inference and the FSCIL metrics.

Metrics CSV columns: ``session,task,metric,value``. ``task`` is a task index,
``all`` (every seen class), ``base`` or ``new`` (pooled tasks 1..t), or ``-``.
Metric names: ``acc`` (per task), ``top1``, ``acc_base``, ``acc_new``, ``hm``,
``count`` (test samples) and, on the final session only, ``pd``.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .backbone import FeatureExtractor
from .data import rotations
from .errors import UnitMismatch, UnknownTestClass
from .head import StochasticHead
from .numerics import l2_normalize, softmax


def aggregate_scores(head: StochasticHead, extractor: FeatureExtractor, images) -> np.ndarray:
    """Per-class scores ``(n, classes)``: rotation ``r`` of the input against head ``r``, averaged.

    Uses the means only; nothing is sampled at test time.
    """
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    if single:
        images = images[None]
    n, m = images.shape[0], head.rotations
    rot = rotations(images, m).reshape(n * m, *images.shape[1:])
    feats = l2_normalize(extractor.features(rot)).reshape(n, m, -1)
    unit_means = l2_normalize(head.means)  # (classes, M, d)
    z = head.eta * np.einsum("nrd,crd->nc", feats, unit_means) / m
    return z[0] if single else z


def aggregated_probabilities(scores) -> np.ndarray:
    return softmax(scores)


def predict(head: StochasticHead, extractor: FeatureExtractor, images, check: bool = False):
    """Predicted ``(class_ids, task_ids)``; ties resolve to the earliest head.

    Softmax is monotone, so the argmax of the raw scores is used. With
    ``check=True`` the argmax of the aggregated probabilities is compared too.
    """
    z = np.atleast_2d(aggregate_scores(head, extractor, images))
    idx = np.argmax(z, axis=1)
    if check and not np.array_equal(idx, np.argmax(aggregated_probabilities(z), axis=1)):
        raise AssertionError("softmax changed the argmax of the aggregated scores")
    return head.class_ids[idx], head.task_ids[idx]


def harmonic_mean(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise ValueError("accuracies must be non-negative")
    if a + b == 0:
        return 0.0
    return 2.0 * a * b / (a + b)


def performance_drop(acc_first: float, acc_last: float) -> float:
    """First-session accuracy minus last-session accuracy, in the inputs' unit.

    Values above 1.5 are taken as percentages; mixing the two units raises.
    """
    if (acc_first > 1.5) != (acc_last > 1.5):
        raise UnitMismatch(f"cannot mix fraction and percent: {acc_first}, {acc_last}")
    # drop binary representation noise such as 75.85 - 52.28 = 23.569999999999993
    return round(acc_first - acc_last, 12)


@dataclass
class SessionMetrics:
    session: int
    task_acc: dict[int, float]
    task_count: dict[int, int]
    top1: float
    acc_base: float
    acc_new: float | None
    hm: float | None

    @property
    def count(self) -> int:
        return sum(self.task_count.values())


@dataclass
class MetricsReport:
    sessions: list[SessionMetrics] = field(default_factory=list)

    @property
    def pd(self) -> float | None:
        if not self.sessions:
            return None
        return performance_drop(self.sessions[0].top1, self.sessions[-1].top1)

    def rows(self):
        last = len(self.sessions) - 1
        for i, s in enumerate(self.sessions):
            for t in sorted(s.task_acc):
                yield s.session, str(t), "acc", s.task_acc[t]
                yield s.session, str(t), "count", s.task_count[t]
            yield s.session, "all", "top1", s.top1
            yield s.session, "base", "acc_base", s.acc_base
            if s.acc_new is not None:
                yield s.session, "new", "acc_new", s.acc_new
                yield s.session, "-", "hm", s.hm
            if i == last:
                yield s.session, "-", "pd", self.pd

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["session", "task", "metric", "value"])
        for session, task, metric, value in self.rows():
            w.writerow([session, task, metric, repr(value) if isinstance(value, float) else value])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> MetricsReport:
        by_session: dict[int, dict] = {}
        for row in csv.DictReader(io.StringIO(text)):
            s = by_session.setdefault(int(row["session"]), {"acc": {}, "count": {}})
            metric, task, value = row["metric"], row["task"], row["value"]
            if metric in ("acc", "count"):
                s[metric][int(task)] = int(value) if metric == "count" else float(value)
            elif metric != "pd":
                s[metric] = float(value)
        report = cls()
        for session in sorted(by_session):
            s = by_session[session]
            report.sessions.append(SessionMetrics(
                session, s["acc"], s["count"], s["top1"], s["acc_base"],
                s.get("acc_new"), s.get("hm"),
            ))
        return report

    def table(self) -> str:
        """Plain-text rendering in percent: one column per session, PD at the end."""
        header = ["Metric"] + [str(s.session) for s in self.sessions] + ["PD"]
        top1 = ["top1 (%)"] + [f"{100 * s.top1:.2f}" for s in self.sessions]
        hm = ["HM (%)"] + ["-" if s.hm is None else f"{100 * s.hm:.2f}" for s in self.sessions]
        pd = self.pd
        top1.append("-" if pd is None else f"{100 * pd:.2f}")
        hm.append("")
        return render_table([header, top1, hm])


def render_table(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)) for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def session_metrics(session: int, pred, labels, task_of: dict[int, int]) -> SessionMetrics:
    """Accuracies from predicted and true class ids; ``task_of`` maps class to task."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    try:
        tasks = np.array([task_of[int(c)] for c in labels], dtype=np.int64)
    except KeyError as exc:
        raise UnknownTestClass(f"test class {exc.args[0]} belongs to no seen task") from None
    correct = pred == labels
    task_acc, task_count = {}, {}
    for t in range(session + 1):
        rows = tasks == t
        task_count[t] = int(rows.sum())
        task_acc[t] = float(correct[rows].mean()) if rows.any() else 0.0
    top1 = float(correct.mean()) if correct.size else 0.0
    acc_base = task_acc[0]
    acc_new = hm = None
    if session > 0:
        new_rows = tasks > 0
        acc_new = float(correct[new_rows].mean()) if new_rows.any() else 0.0
        hm = harmonic_mean(acc_base, acc_new)
    return SessionMetrics(session, task_acc, task_count, top1, acc_base, acc_new, hm)


def evaluate_session(head: StochasticHead, extractor: FeatureExtractor, session: int,
                     images, labels, task_of: dict[int, int]) -> SessionMetrics:
    unknown = set(np.unique(labels).tolist()) - set(head.class_ids.tolist())
    if unknown:
        raise UnknownTestClass(f"no classifier for test classes {sorted(unknown)}")
    pred, _ = predict(head, extractor, images)
    return session_metrics(session, pred, labels, task_of)

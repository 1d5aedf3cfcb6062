"""Command-line interface: ``fscil {gen-data,run,eval,report}``.

Settings are resolved as built-in defaults, then the JSON ``--config`` file
(sections ``generator``, ``protocol``, ``train``), then command-line flags.

Exit codes: 0 success, 2 bad flags or config, 3 I/O or format error,
4 training aborted (partial artifacts kept, manifest status ``failed``),
5 metrics missing.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .backbone import load_extractor, save_extractor
from .data import (GeneratorConfig, ProtocolConfig, VARIANTS, build_sessions, generate_synthetic,
                   load_dataset, load_protocol, save_dataset, test_samples)
from .errors import FormatError, TrainingError
from .evaluation import (MetricsReport, SessionMetrics, evaluate_session, harmonic_mean,
                         performance_drop, render_table)
from .head import load_head, save_head
from .numerics import Rng
from .prototypes import save_store
from .trainer import ABLATIONS, TrainConfig, run_sessions

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_TRAINING, EXIT_METRICS = 0, 2, 3, 4, 5

ARTIFACTS = {
    "config": "config.json",
    "loss_log": "loss_log.csv",
    "backbone": "backbone.s3cb",
    "head": "head.s3ch",
    "prototypes": "prototypes.s3cp",
    "metrics": "metrics.csv",
    "summary": "summary.csv",
    "table": "metrics.txt",
}


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# config resolution


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path}: {exc}") from None
    if not isinstance(cfg, dict) or set(cfg) - {"generator", "protocol", "train"}:
        raise UsageError(f"config {path}: expected an object with generator/protocol/train sections")
    return cfg


def _build(cls, base: dict, overrides: dict):
    known = {f.name for f in fields(cls)}
    unknown = set(base) - known
    if unknown:
        raise UsageError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    values = {**base, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def config_hash(snapshot: dict) -> str:
    text = json.dumps(snapshot, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# parser


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--seed", type=int, default=d, help="seed for all randomness (default 0)")
    p.add_argument("--config", default=d, help="JSON config file; flags take precedence")
    p.add_argument("--out", default=d, help="output directory (run, eval, report)")
    p.add_argument("-v", "--verbose", action="count", default=d)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fscil",
        description="Few-shot class-incremental learning runs on synthetic data.",
        epilog="Precedence: command-line flags > --config file > built-in defaults.",
    )
    _global_flags(parser, suppress=False)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    _global_flags(g, suppress=True)
    g.add_argument("-o", "--output", required=True, help="dataset file to write")
    g.add_argument("--classes", type=int)
    g.add_argument("--train", dest="train_per_class", type=int, help="training samples per class")
    g.add_argument("--test", dest="test_per_class", type=int, help="test samples per class")
    g.add_argument("--size", type=int, help="image side length")
    g.add_argument("--channels", type=int)
    g.add_argument("--within-class-std", type=float)
    g.add_argument("--pixel-noise", type=float)

    r = sub.add_parser("run", help="base session plus all incremental sessions")
    _global_flags(r, suppress=True)
    r.add_argument("--data", help="dataset file (default: generate one into the run directory)")
    r.add_argument("--protocol", help="protocol file of key = value lines")
    r.add_argument("--variant", choices=VARIANTS)
    r.add_argument("--ablation", choices=sorted(ABLATIONS), default="s3c")
    r.add_argument("--base-classes", type=int)
    r.add_argument("--tasks", type=int)
    r.add_argument("--ways", type=int)
    r.add_argument("--shots", type=int)
    r.add_argument("--sessions", type=int, help="stop after this many sessions")
    r.add_argument("--base-epochs", type=int)
    r.add_argument("--inc-epochs", type=int)
    r.add_argument("--base-lr", type=float)
    r.add_argument("--inc-lr", type=float)
    r.add_argument("--batch-size", type=int)

    e = sub.add_parser("eval", help="re-evaluate a run's checkpoints")
    _global_flags(e, suppress=True)
    e.add_argument("run_dir")
    e.add_argument("--data", help="dataset file (default: the one recorded in the manifest)")

    rep = sub.add_parser("report", help="side-by-side top-1/HM/PD tables")
    _global_flags(rep, suppress=True)
    rep.add_argument("inputs", nargs="+", help="run directories, metrics.csv or report.csv files")
    rep.add_argument("--format", choices=["text", "csv"], default="text")
    return parser


# --------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    cfg_file = _load_config(args.config)
    gen = _build(GeneratorConfig, cfg_file.get("generator", {}), {
        "classes": args.classes, "train_per_class": args.train_per_class,
        "test_per_class": args.test_per_class, "size": args.size, "channels": args.channels,
        "within_class_std": args.within_class_std, "pixel_noise": args.pixel_noise,
    })
    ds = generate_synthetic(gen, Rng(args.seed))
    save_dataset(ds, args.output)
    c, h, w = ds.image_shape
    print(f"wrote {args.output}: {ds.class_count} classes, {len(ds.train_labels)} train + "
          f"{len(ds.test_labels)} test samples, images {c}x{h}x{w}, embeddings {ds.embeddings.shape[1]}-d")
    return EXIT_OK


def _write_manifest(out: Path, manifest: dict) -> None:
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _loss_log_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "split", "loss"])
    for epoch, split, loss in rows:
        w.writerow([epoch, split, repr(float(loss))])
    return buf.getvalue()


def summary_csv(report: MetricsReport) -> str:
    """One row per session: ``session,top1,acc_base,acc_new,hm``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["session", "top1", "acc_base", "acc_new", "hm"])
    for s in report.sessions:
        w.writerow([s.session, repr(s.top1), repr(s.acc_base),
                    "" if s.acc_new is None else repr(s.acc_new), "" if s.hm is None else repr(s.hm)])
    return buf.getvalue()


def _save_state(out: Path, state, artifacts: dict) -> None:
    (out / ARTIFACTS["loss_log"]).write_text(_loss_log_csv(state.loss_log))
    artifacts["loss_log"] = ARTIFACTS["loss_log"]
    if state.t >= 0:
        save_extractor(state.extractor, out / ARTIFACTS["backbone"])
        save_head(state.head, out / ARTIFACTS["head"])
        save_store(state.store, out / ARTIFACTS["prototypes"])
        for key in ("backbone", "head", "prototypes"):
            artifacts[key] = ARTIFACTS[key]
    if state.metrics.sessions:
        (out / ARTIFACTS["metrics"]).write_text(state.metrics.to_csv())
        (out / ARTIFACTS["summary"]).write_text(summary_csv(state.metrics))
        (out / ARTIFACTS["table"]).write_text(state.metrics.table())
        for key in ("metrics", "summary", "table"):
            artifacts[key] = ARTIFACTS[key]


def cmd_run(args, argv) -> int:
    if args.out is None:
        raise UsageError("run needs --out DIR")
    cfg_file = _load_config(args.config)
    seed = args.seed

    proto_base = cfg_file.get("protocol", {})
    if args.protocol:
        proto_base = {**proto_base, **asdict(load_protocol(args.protocol))}
    # desk-scale protocol unless configured otherwise
    proto_base = {"base_classes": 10, "tasks": 4, "ways": 2, "shots": 5, **proto_base}
    proto = _build(ProtocolConfig, proto_base, {
        "variant": args.variant, "base_classes": args.base_classes, "tasks": args.tasks,
        "ways": args.ways, "shots": args.shots, "seed": seed,
    })
    try:
        plan = build_sessions(proto)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rotations, stochastic = ABLATIONS[args.ablation]
    train = _build(TrainConfig, cfg_file.get("train", {}), {
        "base_epochs": args.base_epochs, "inc_epochs": args.inc_epochs, "base_lr": args.base_lr,
        "inc_lr": args.inc_lr, "batch_size": args.batch_size, "seed": seed,
        "rotations": rotations, "stochastic": stochastic,
    })

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = {"config": ARTIFACTS["config"]}
    if args.data:
        data_path = Path(args.data)
        ds = load_dataset(data_path)
        generator = None
    else:
        generator = _build(GeneratorConfig, cfg_file.get("generator", {}),
                           {"classes": max(plan.all_classes) + 1})
        ds = generate_synthetic(generator, Rng(seed))
        data_path = out / "dataset.s3cd"
        save_dataset(ds, data_path)
        artifacts["dataset"] = data_path.name
    if max(plan.all_classes) >= ds.class_count:
        raise UsageError(f"protocol needs {max(plan.all_classes) + 1} classes, dataset has {ds.class_count}")

    snapshot = {
        "ablation": args.ablation,
        "protocol": asdict(proto),
        "train": train.to_dict(),
        "generator": None if generator is None else asdict(generator),
        "data": str(data_path) if args.data else None,
        "sessions": args.sessions,
    }
    (out / ARTIFACTS["config"]).write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")
    manifest = {
        "version": __version__,
        "command": ["fscil", *argv],
        "seed": seed,
        "config_hash": config_hash(snapshot),
        "dataset": str(data_path.resolve()),
        "artifacts": artifacts,
        "status": "running",
    }
    _write_manifest(out, manifest)

    try:
        state = run_sessions(ds, plan, train, sessions=args.sessions)
    except TrainingError as exc:
        _save_state(out, exc.state, artifacts)
        manifest.update(status="failed", error=str(exc), batch_index=exc.batch_index)
        _write_manifest(out, manifest)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    _save_state(out, state, artifacts)
    manifest["status"] = "complete"
    manifest["sessions_completed"] = state.t + 1
    _write_manifest(out, manifest)
    print(state.metrics.table(), end="")
    return EXIT_OK


def _read_manifest(run_dir: Path) -> dict:
    path = run_dir / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found")
    return json.loads(path.read_text())


def cmd_eval(args) -> int:
    run_dir = Path(args.run_dir)
    manifest = _read_manifest(run_dir)
    arts = manifest.get("artifacts", {})
    if not all(k in arts for k in ("backbone", "head")):
        print(f"{run_dir}: no checkpoints recorded", file=sys.stderr)
        return EXIT_METRICS
    extractor = load_extractor(run_dir / arts["backbone"])
    head = load_head(run_dir / arts["head"])
    ds = load_dataset(args.data or manifest["dataset"])
    task_of = {int(c): int(t) for c, t in zip(head.class_ids, head.task_ids)}
    session = int(head.task_ids.max())
    images, labels = test_samples(ds, sorted(task_of))
    row = evaluate_session(head, extractor, session, images, labels, task_of)
    report = MetricsReport([row])
    text = summary_csv(report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


# report


def _runs_from_path(path: Path) -> list[tuple[str, MetricsReport]]:
    """A run directory or metrics CSV gives one run; a report CSV gives several."""
    if path.is_dir():
        if (path / "report.csv").is_file() and not (path / ARTIFACTS["metrics"]).is_file():
            return _runs_from_path(path / "report.csv")
        metrics = path / ARTIFACTS["metrics"]
        if not metrics.is_file():
            raise LookupError(f"{path}: no {ARTIFACTS['metrics']}")
        return [(path.name, _metrics_from_csv(metrics))]
    if not path.is_file():
        raise LookupError(f"{path}: not found")
    text = path.read_text()
    header = text.split("\n", 1)[0].strip().split(",")
    if header[:1] == ["run"]:
        return _parse_report_csv(text)
    return [(path.parent.name or path.stem, _metrics_from_csv(path))]


def _metrics_from_csv(path: Path) -> MetricsReport:
    try:
        return MetricsReport.from_csv(path.read_text())
    except (KeyError, ValueError) as exc:
        raise LookupError(f"{path}: missing or malformed metric {exc}") from None


def _comparison_rows(runs) -> list[tuple[str, int | str, str, float]]:
    rows = []
    for name, report in runs:
        for s in report.sessions:
            rows.append((name, s.session, "top1", s.top1))
            rows.append((name, s.session, "acc_base", s.acc_base))
            if s.acc_new is not None:
                rows.append((name, s.session, "acc_new", s.acc_new))
                # recomputed from the stored split accuracies
                rows.append((name, s.session, "hm", harmonic_mean(s.acc_base, s.acc_new)))
        if report.sessions:
            rows.append((name, "-", "pd", performance_drop(report.sessions[0].top1, report.sessions[-1].top1)))
    return rows


def _parse_report_csv(text: str) -> list[tuple[str, MetricsReport]]:
    by_run: dict[str, dict[int, dict]] = {}
    for row in csv.DictReader(io.StringIO(text)):
        sessions = by_run.setdefault(row["run"], {})
        if row["session"] == "-":
            continue
        sessions.setdefault(int(row["session"]), {})[row["metric"]] = float(row["value"])
    runs = []
    for name, sessions in by_run.items():
        report = MetricsReport()
        for k in sorted(sessions):
            m = sessions[k]
            hm = None if "acc_new" not in m else harmonic_mean(m["acc_base"], m["acc_new"])
            report.sessions.append(SessionMetrics(k, {}, {}, m["top1"], m["acc_base"], m.get("acc_new"), hm))
        runs.append((name, report))
    return runs


def report_csv(runs) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "session", "metric", "value"])
    for name, session, metric, value in _comparison_rows(runs):
        w.writerow([name, session, metric, repr(float(value))])
    return buf.getvalue()


def report_text(runs) -> str:
    names = [name for name, _ in runs]
    n_sessions = max(len(r.sessions) for _, r in runs)

    def cell(report, k, attr):
        if k >= len(report.sessions):
            return "-"
        s = report.sessions[k]
        if attr == "hm":
            return "-" if s.acc_new is None else f"{100 * harmonic_mean(s.acc_base, s.acc_new):.2f}"
        return f"{100 * getattr(s, attr):.2f}"

    top = [["Session", *names]]
    top += [[str(k), *(cell(r, k, "top1") for _, r in runs)] for k in range(n_sessions)]
    top.append(["PD", *(f"{100 * r.pd:.2f}" for _, r in runs)])
    hm = [["Session", *names]]
    hm += [[str(k), *(cell(r, k, "hm") for _, r in runs)] for k in range(1, n_sessions)]
    return "Top-1 accuracy (%)\n" + render_table(top) + "\nHarmonic mean (%)\n" + render_table(hm)


def cmd_report(args) -> int:
    runs = []
    for item in args.inputs:
        try:
            runs.extend(_runs_from_path(Path(item)))
        except LookupError as exc:
            print(f"metrics missing: {exc.args[0]}", file=sys.stderr)
            return EXIT_METRICS
    if any(not r.sessions for _, r in runs):
        print("metrics missing: a run has no sessions", file=sys.stderr)
        return EXIT_METRICS
    text, table = report_csv(runs), report_text(runs)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(text)
        (out / "report.txt").write_text(table)
    print(text if args.format == "csv" else table, end="")
    return EXIT_OK


# --------------------------------------------------------------------------


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "seed", None) is None:
        args.seed = 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose or 0, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            return cmd_gen_data(args)
        if args.command == "run":
            return cmd_run(args, argv)
        if args.command == "eval":
            return cmd_eval(args)
        return cmd_report(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"fscil: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, FormatError) as exc:
        print(f"fscil: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())

"""Command-line interface: ``scarceops --store DIR <command> ...``.

Human-readable progress goes to stderr; ``--json`` adds one JSON document on
stdout. Failures print a single JSON line ``{"error": {...}}`` on stderr and
exit 3 (not found), 4 (validation) or 5 (internal); usage errors exit 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np

from . import __version__
from .automl import SearchSpace
from .datasets import ImageContainer
from .embedder import AutoencoderConfig
from .errors import ScarceOpsError, ValidationError
from .models.metrics import METRICS
from .plot import latent_svg
from .workspace import ENV_STORE, Workspace, resolve_root

log = logging.getLogger("scarceops")

EXIT_USAGE = 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message: str):  # one parseable line instead of argparse's usage dump
        raise UsageError(f"{self.prog}: {message}")


def _finite(v):
    return v if v is None or math.isfinite(v) else None


def _say(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(args, payload: Any, human: str) -> None:
    _say(human)
    if args.json:
        print(json.dumps(payload, sort_keys=True, default=str))


def _ws(args) -> Workspace:
    return Workspace(resolve_root(args.store))


def _space(args) -> SearchSpace:
    epochs = dict(SearchSpace().epochs)
    if args.epochs is not None:
        epochs = {k: args.epochs for k in epochs}
    if args.fine_tune_epochs is not None:
        epochs["fine_tune"] = args.fine_tune_epochs
    return SearchSpace(learning_rate=(args.lr_min, args.lr_max), batch_size=tuple(args.batch_size),
                       trials=args.trials, seed=args.seed, epochs=epochs, preset=args.preset,
                       workers=args.workers)


# -- dataset


def cmd_dataset_import(args) -> None:
    ws = _ws(args)
    naming = None
    if args.split_map:
        naming = dict(pair.split("=", 1) for pair in args.split_map)
    rec = ws.import_dataset(args.path, args.name or Path(args.path).stem.lower(), args.task_kind,
                            split_naming=naming, resize=args.resize, ignore_labels=args.ignore_labels,
                            fingerprint=not args.no_fingerprint)
    _emit(args, rec.to_dict(), f"registered {rec.key}: {rec.image_count} images, classes {rec.class_labels}")


def cmd_dataset_register(args) -> None:
    ws = _ws(args)
    container = ImageContainer.load(args.path)
    rec = ws.register_container(container, args.name or container.name, args.task_kind,
                                note=f"registered from {args.path}", fingerprint=not args.no_fingerprint)
    _emit(args, rec.to_dict(), f"registered {rec.key}: {rec.image_count} images")


def cmd_dataset_list(args) -> None:
    recs = _ws(args).datasets.list(latest_only=args.latest)
    lines = [f"{r.key:<32} {r.task_kind:<15} {r.image_count:>7} images  "
             f"{'fingerprinted' if r.embedding else 'no fingerprints'}" for r in recs]
    _emit(args, [r.to_dict() for r in recs], "\n".join(lines) or "no datasets")


# -- embedder


def cmd_embedder_train(args) -> None:
    ws = _ws(args)
    cfg = AutoencoderConfig(preset=args.preset, latent_dim=args.latent_dim, learning_rate=args.lr,
                            batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    info, report = ws.train_embedder(cfg, args.datasets or None, refingerprint=not args.no_fingerprint)
    _emit(args, info.to_dict(),
          f"embedder {info.version[:12]} trained on {len(info.trained_on)} datasets; "
          f"val loss {report.initial_val_loss} -> {report.best_val_loss}")


def cmd_embedder_fingerprint(args) -> None:
    ws = _ws(args)
    if args.datasets:
        recs = [ws.fingerprint(d, embedder=args.embedder) for d in args.datasets]
    else:
        recs = ws.fingerprint_all()
    _emit(args, [{"dataset": r.key, "embedding": r.embedding.to_dict()} for r in recs],
          f"fingerprinted {len(recs)} dataset versions")


def cmd_similar(args) -> None:
    hits = _ws(args).similar(args.dataset, args.k)
    rows = [{"dataset_id": r.dataset_id, "version": r.version, "distance": d} for r, d in hits]
    _emit(args, rows, "\n".join(f"{r['dataset_id']}@v{r['version']}  {r['distance']:.4f}" for r in rows)
          or "no other fingerprinted datasets")


# -- task


def cmd_task_create(args) -> None:
    ws = _ws(args)
    rec = ws.datasets.get(args.dataset, args.version)
    task = ws.create_task(rec.dataset_id, rec.version, args.metric, args.task_kind or rec.task_kind)
    _emit(args, task.to_dict(), f"created {task.task_id} on {task.dataset_key} ({task.metric_name})")


def cmd_task_develop(args) -> None:
    ws = _ws(args)
    res = ws.develop(args.task, args.k, _space(args), False if args.metadata_only else None)
    task = ws.tasks.get(args.task)
    payload = {
        "task_id": args.task,
        "best_model_id": res.model.model_id,
        "metric_value": res.metric_value,
        "A_t": _finite(task.current_best_metric),
        "run_ids": res.run_ids,
        "outcomes": [o.to_dict() for o in res.outcomes],
    }
    lines = [f"{o.plan.kind:<18} score {o.plan.score:.3f}  runs {len(o.run_ids)}  best "
             f"{o.best.metric_value if o.best else 'failed'}" for o in res.outcomes]
    lines.append(f"m* = {task.best_model_id}  A_t = {task.current_best_metric:.4f}")
    _emit(args, payload, "\n".join(lines))


def cmd_task_best(args) -> None:
    model, run = _ws(args).best(args.task)
    _emit(args, {"model": model.to_dict(), "run": run.to_dict()},
          f"{model.model_id}  {run.metric_name}={run.metric_value:.4f}  from {run.run_id}")


def cmd_task_deploy(args) -> None:
    from .service.runtime import ServingRuntime

    dep = ServingRuntime(_ws(args)).deploy(args.task, args.model)
    _emit(args, dep.to_dict(), f"{dep.model_id} live for {dep.task_id} ({dep.deployment_id})")


def cmd_task_list(args) -> None:
    tasks = _ws(args).tasks.list()
    _emit(args, [t.to_dict() for t in tasks],
          "\n".join(f"{t.task_id}  {t.dataset_key}  {t.metric_name}={t.current_best_metric}" for t in tasks)
          or "no tasks")


# -- serving and monitoring


def _monitor_config(args):
    from .service.monitor import MonitorConfig

    return MonitorConfig(window=args.window, delta=args.delta, z_threshold=args.z)


def _ct_space(args) -> SearchSpace:
    return SearchSpace(trials=args.ct_trials, seed=getattr(args, "seed", 0),
                       epochs={k: args.ct_epochs for k in ("fine_tune", "retrain", "dataset_conception")})


def cmd_serve(args) -> None:
    import uvicorn

    from .service import CTConfig, create_app

    app = create_app(resolve_root(args.store), _monitor_config(args),
                     CTConfig(enabled=not args.no_ct, k=args.ct_k, space=_ct_space(args)))
    _say(f"serving {resolve_root(args.store)} on http://{args.host}:{args.port}")
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def cmd_monitor_simulate_drift(args) -> None:
    """Replay held-out images as feedback: clean windows first, then brightness-shifted ones."""
    from .models.networks import evaluation_split
    from .service import CTConfig, ServingRuntime
    from .service.monitor import EMBEDDING_DRIFT

    ws = _ws(args)
    rt = ServingRuntime(ws, _monitor_config(args), CTConfig(enabled=not args.no_ct, k=args.ct_k, space=_ct_space(args)))
    task = ws.tasks.get(args.task)
    try:
        rt.live(task.task_id)
    except ScarceOpsError:
        rt.deploy(task.task_id)
    c = ws.datasets.load_container(task.dataset_id, task.version)
    split = evaluation_split(c.splits)
    sl = c.split_slice(split)
    pixels, labels = c.pixels[sl], c.labels[sl]
    rng = np.random.default_rng(args.seed)
    a_before = _finite(task.current_best_metric)
    events, first_drift = [], None
    w = args.window
    for phase, n_windows, shift in (("clean", args.clean_windows, 0.0), ("shifted", args.windows, args.shift)):
        for _ in range(n_windows * w):
            i = int(rng.integers(len(pixels)))
            img = np.clip(pixels[i].astype(np.float32) / 255.0 + shift, 0.0, 1.0)
            out = rt.feedback(task.task_id, int(labels[i]), image=img)
            for a in out["alerts"]:
                events.append({**a, "phase": phase})
                if a["kind"] == EMBEDDING_DRIFT and phase == "shifted" and first_drift is None:
                    first_drift = out["feedback_count"] - args.clean_windows * w
    rt.wait_ct(task.task_id)
    task = ws.tasks.get(task.task_id)
    payload = {
        "task_id": task.task_id,
        "alerts": events,
        "first_drift_after": first_drift,
        "ct": rt.ct_cycles(task.task_id),
        "A_before": a_before,
        "A_after": _finite(task.current_best_metric),
        "live_model": rt.live(task.task_id).model_id,
    }
    human = [f"{a['phase']:<8} {a['kind']:<17} value {a['value']:.3f} at feedback {a['feedback_count']}"
             for a in events] or ["no alerts"]
    for cyc in payload["ct"]:
        human.append(f"CT {cyc['cycle_id']} {cyc['status']}: {cyc['dataset']} A {cyc['A_before']} -> {cyc['A_after']}")
    _emit(args, payload, "\n".join(human))


# -- plots


def cmd_plot_latent(args) -> None:
    ws = _ws(args)
    info = ws.require_embedder()
    recs = [ws.datasets.get(d) for d in args.datasets] if args.datasets else ws.datasets.list(latest_only=True)
    if not recs:
        raise ValidationError("no datasets to plot")
    rng = np.random.default_rng(args.seed)
    groups = {}
    for rec in recs:
        if rec.embedder_version != info.version:
            rec = ws.fingerprint(rec.dataset_id, rec.version)
        fps = ws.datasets.fingerprints(rec)
        if len(fps) > args.max_points:
            fps = fps[np.sort(rng.choice(len(fps), args.max_points, replace=False))]
        groups[rec.key] = fps
    svg = latent_svg(groups, title=f"latent space ({info.version[:12]})")
    Path(args.out).write_text(svg, encoding="utf-8")
    _emit(args, {"out": str(args.out), "datasets": list(groups), "embedder_version": info.version},
          f"wrote {args.out} with {len(groups)} datasets")


# -- parser


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="scarceops", description=__doc__.splitlines()[0])
    p.add_argument("--store", help=f"store root (default: ${ENV_STORE})")
    p.add_argument("--json", action="store_true", help="print a JSON result on stdout")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    def grp(name: str, help: str):
        g = sub.add_parser(name, help=help)
        return g.add_subparsers(dest="action", required=True, parser_class=Parser)

    ds = grp("dataset", "import, register and list datasets")
    s = ds.add_parser("import", help="import an NPZ archive")
    s.add_argument("path")
    s.add_argument("--name")
    s.add_argument("--task-kind", default="classification", choices=("classification", "reconstruction"))
    s.add_argument("--split-map", nargs="*", metavar="SPLIT=PREFIX")
    s.add_argument("--resize", action="store_true", help="nearest-neighbour resize to 32x32")
    s.add_argument("--ignore-labels", action="store_true")
    s.add_argument("--no-fingerprint", action="store_true")
    s.set_defaults(fn=cmd_dataset_import)
    s = ds.add_parser("register", help="register a saved container directory")
    s.add_argument("path")
    s.add_argument("--name")
    s.add_argument("--task-kind", default="classification", choices=("classification", "reconstruction"))
    s.add_argument("--no-fingerprint", action="store_true")
    s.set_defaults(fn=cmd_dataset_register)
    s = ds.add_parser("list")
    s.add_argument("--latest", action="store_true")
    s.set_defaults(fn=cmd_dataset_list)

    em = grp("embedder", "train the autoencoder and fingerprint datasets")
    s = em.add_parser("train")
    s.add_argument("--preset", default="tiny", choices=("tiny", "resnet18_32"))
    s.add_argument("--latent-dim", type=int, default=2)
    s.add_argument("--epochs", type=int, default=30)
    s.add_argument("--batch-size", type=int, default=32)
    s.add_argument("--lr", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--datasets", nargs="*")
    s.add_argument("--no-fingerprint", action="store_true")
    s.set_defaults(fn=cmd_embedder_train)
    s = em.add_parser("fingerprint")
    s.add_argument("datasets", nargs="*")
    s.add_argument("--embedder", help="embedder version (default: current)")
    s.set_defaults(fn=cmd_embedder_fingerprint)

    s = sub.add_parser("similar", help="closest datasets in latent space")
    s.add_argument("dataset")
    s.add_argument("-k", type=int, default=5)
    s.set_defaults(fn=cmd_similar)

    tk = grp("task", "create, develop, inspect and deploy tasks")
    s = tk.add_parser("create")
    s.add_argument("dataset")
    s.add_argument("--version", type=int)
    s.add_argument("--metric", default="accuracy", choices=sorted(METRICS))
    s.add_argument("--task-kind", choices=("classification", "reconstruction"))
    s.set_defaults(fn=cmd_task_create)
    s = tk.add_parser("develop")
    s.add_argument("task")
    s.add_argument("-k", type=int, default=1, help="number of top strategies to execute")
    s.add_argument("--trials", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--epochs", type=int, help="epochs for every strategy kind")
    s.add_argument("--fine-tune-epochs", type=int)
    s.add_argument("--batch-size", type=int, nargs="+", default=[16, 32, 64])
    s.add_argument("--lr-min", type=float, default=1e-4)
    s.add_argument("--lr-max", type=float, default=1e-2)
    s.add_argument("--preset", default="tiny", choices=("tiny", "resnet18_32"))
    s.add_argument("--workers", type=int, default=1)
    s.add_argument("--metadata-only", action="store_true", help="rank strategies without fingerprints")
    s.set_defaults(fn=cmd_task_develop)
    s = tk.add_parser("best")
    s.add_argument("task")
    s.set_defaults(fn=cmd_task_best)
    s = tk.add_parser("deploy")
    s.add_argument("task")
    s.add_argument("--model", help="model id (default: the task's best)")
    s.set_defaults(fn=cmd_task_deploy)
    s = tk.add_parser("list")
    s.set_defaults(fn=cmd_task_list)

    def monitor_flags(s):
        s.add_argument("--window", type=int, default=100)
        s.add_argument("--delta", type=float, default=0.05)
        s.add_argument("--z", type=float, default=3.0)
        s.add_argument("--no-ct", action="store_true", help="do not retrain on alerts")
        s.add_argument("--ct-k", type=int, default=2)
        s.add_argument("--ct-trials", type=int, default=2)
        s.add_argument("--ct-epochs", type=int, default=5)

    s = sub.add_parser("serve", help="run the HTTP service")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    monitor_flags(s)
    s.set_defaults(fn=cmd_serve)

    mo = grp("monitor", "monitoring utilities")
    s = mo.add_parser("simulate-drift", help="replay clean then brightness-shifted feedback")
    s.add_argument("task")
    s.add_argument("--shift", type=float, default=0.5, help="brightness added to [0, 1] pixels")
    s.add_argument("--clean-windows", type=int, default=1)
    s.add_argument("--windows", type=int, default=2, help="shifted windows to replay")
    s.add_argument("--seed", type=int, default=0)
    monitor_flags(s)
    s.set_defaults(fn=cmd_monitor_simulate_drift)

    pl = grp("plot", "figures")
    s = pl.add_parser("latent", help="SVG scatter of per-image fingerprints")
    s.add_argument("--out", required=True)
    s.add_argument("--datasets", nargs="*")
    s.add_argument("--max-points", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_plot_latent)
    return p


def _fail(code: str, message: str, exit_code: int) -> int:
    print(json.dumps({"error": {"code": code, "message": message}}), file=sys.stderr)
    return exit_code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except ScarceOpsError as exc:
        return _fail(exc.code, str(exc), exc.exit_code)
    except (ValueError, FileNotFoundError) as exc:
        code, status = ("not_found", 3) if isinstance(exc, FileNotFoundError) else ("validation", 4)
        return _fail(code, str(exc), status)
    except KeyboardInterrupt:
        return _fail("interrupted", "interrupted", 130)
    except Exception as exc:  # noqa: BLE001 - last-resort mapping to exit 5
        log.debug("internal error", exc_info=True)
        return _fail("internal", f"{type(exc).__name__}: {exc}", 5)
    return 0


if __name__ == "__main__":
    sys.exit(main())

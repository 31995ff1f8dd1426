"""Command-line pipeline: generate, train, federate, ssl, eval, gradcheck,
cluster.

Exit codes: 0 success, 1 usage or config error, 2 data or format error,
3 numeric failure. The config seed is the sole entropy source; report paths
render matplotlib figures next to their delimited outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from .autodiff import NumericError
from .config import ConfigError, RunConfig, load_config
from .datakit import (RecordFormatError, generate_region_dataset,
                      inject_gps_noise, kmeans_cluster, read_records,
                      write_records)
from .evalkit import emit_report, evaluate, sha256_bytes, sha256_file
from .fedsim import make_nodes, run_federated, write_message_log, \
    write_round_trace
from .model_io import ModelFormatError, load_model, save_model
from .planner import init_model
from .seeding import derive_seed
from .trainer import pseudo_label, train_centralized, train_ssl, \
    write_loss_trace
from .verify import TOLERANCE, run_gradient_suite


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _add_config_flags(sub):
    sub.add_argument("--config", required=True,
                     help="config JSON path or preset name (desk, paper)")
    sub.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                     help="override a config value, e.g. --set train.iterations=50")


def _add_threads_flag(sub):
    sub.add_argument("--threads", type=int, default=None,
                     help="worker threads (default: ANYD_THREADS or 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="anyd",
                     description="Geo-conditional driving benchmark pipeline")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("generate", help="write a synthetic JSONL dataset")
    _add_config_flags(p)
    _add_threads_flag(p)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_generate)

    p = subs.add_parser("train", help="centralized training")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="training JSONL path")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--trace", default=None,
                   help="loss trace CSV path (default: <out>.loss.csv)")
    p.set_defaults(func=cmd_train)

    p = subs.add_parser("federate", help="federated training simulation")
    _add_config_flags(p)
    _add_threads_flag(p)
    p.add_argument("--data", required=True, help="training JSONL path")
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--validation", default=None,
                   help="validation JSONL for per-round balanced ADE")
    p.add_argument("--trace", default=None,
                   help="round trace CSV path (default: <out>.rounds.csv)")
    p.add_argument("--message-log", default=None,
                   help="binary log of every inter-node message")
    p.set_defaults(func=cmd_federate)

    p = subs.add_parser("ssl", help="ensemble pseudo-labeling + fine-tune")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="labeled JSONL path")
    p.add_argument("--unlabeled", required=True, help="unlabeled JSONL path")
    p.add_argument("--out", required=True, help="output model path")
    p.set_defaults(func=cmd_ssl)

    p = subs.add_parser("eval", help="evaluate a model, write report")
    _add_threads_flag(p)
    p.add_argument("--model", required=True, help="model file path")
    p.add_argument("--data", required=True, help="labeled JSONL path")
    p.add_argument("--report", required=True, help="report JSON path")
    p.add_argument("--config", default=None,
                   help="config to fingerprint into the report")
    p.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                   help="config override (affects the fingerprint only)")
    p.add_argument("--no-figures", action="store_true",
                   help="skip rendering the report figure")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck",
                        help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=20240, help="suite seed")
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("cluster", help="k-means over a point CSV")
    p.add_argument("--points", required=True,
                   help="CSV of x,y rows (header optional)")
    p.add_argument("--k", type=int, required=True, help="number of clusters")
    p.add_argument("--seed", type=int, default=0, help="clustering seed")
    p.add_argument("--out", required=True, help="assignments CSV path")
    p.set_defaults(func=cmd_cluster)
    return parser


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("ANYD_THREADS", "")
    return max(1, int(env)) if env.isdigit() else 1


def _load(args) -> RunConfig:
    return load_config(args.config, args.set)


def _region_names(cfg: RunConfig) -> list[str]:
    names = [p.name for p in cfg.data.profiles]
    if len(names) == cfg.model.regions:
        return names
    return [f"region{i}" for i in range(cfg.model.regions)]


def _init_model(cfg: RunConfig):
    return init_model(cfg.model, derive_seed(cfg.seed, "init"),
                      region_names=_region_names(cfg))


def cmd_generate(args) -> int:
    cfg = _load(args)
    if cfg.model.image_ch != 3:
        raise ConfigError("generate: the scene renderer emits 3-channel images")
    records = generate_region_dataset(
        cfg.data.profiles, cfg.data.n_per_region, derive_seed(cfg.seed, "data"),
        image_h=cfg.model.image_h, image_w=cfg.model.image_w,
        threads=_threads(args))
    if cfg.data.sigma_noise > 0:
        records = inject_gps_noise(records, cfg.data.sigma_noise,
                                   derive_seed(cfg.seed, "noise"))
    write_records(args.out, records)
    print(f"wrote {len(records)} records over {len(cfg.data.profiles)} "
          f"regions to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    records = read_records(args.data)
    model, trace = train_centralized(records, cfg.train, _init_model(cfg))
    save_model(model, args.out)
    trace_path = args.trace or str(Path(args.out).with_suffix(".loss.csv"))
    write_loss_trace(trace, trace_path)
    from .figures import render_loss_trace
    render_loss_trace(trace, Path(trace_path).with_suffix(".png"))
    final = trace[-1][2] if trace else float("nan")
    print(f"trained {cfg.train.iterations} iterations; final loss {final:.4f}; "
          f"model -> {args.out}")
    return 0


def cmd_federate(args) -> int:
    cfg = _load(args)
    records = read_records(args.data)
    init = _init_model(cfg)
    nodes = make_nodes(records, init)
    validation = read_records(args.validation) if args.validation else None
    message_log = [] if args.message_log else None
    model, trace = run_federated(nodes, cfg.fed, cfg.train, init,
                                 validation=validation, threads=_threads(args),
                                 message_log=message_log)
    save_model(model, args.out)
    trace_path = args.trace or str(Path(args.out).with_suffix(".rounds.csv"))
    write_round_trace(trace, nodes, trace_path)
    from .figures import render_round_trace
    render_round_trace(trace, Path(trace_path).with_suffix(".png"))
    if message_log is not None:
        write_message_log(message_log, args.message_log)
    print(f"federated {cfg.fed.rounds} rounds over {len(nodes)} nodes "
          f"({cfg.fed.algorithm}); model -> {args.out}")
    return 0


def cmd_ssl(args) -> int:
    cfg = _load(args)
    labeled = read_records(args.data)
    unlabeled = read_records(args.unlabeled)
    models = []
    for k in range(cfg.ssl.ensemble_size):
        init_k = init_model(cfg.model, derive_seed(cfg.seed, "ssl-init", k),
                            region_names=_region_names(cfg))
        model_k, _ = train_centralized(labeled, cfg.train, init_k)
        models.append(model_k)
    labels = pseudo_label(models, unlabeled, cfg.ssl)
    final = train_ssl(labeled, unlabeled, labels, cfg.train, cfg.ssl, models[0])
    save_model(final, args.out)
    print(f"pseudo-labeled {len(labels)}/{len(unlabeled)} records; "
          f"model -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    records = read_records(args.data)
    config_fp = ""
    if args.config:
        config_fp = sha256_bytes(load_config(args.config, args.set)
                                 .fingerprint_bytes())
    report = evaluate(model, records, threads=_threads(args),
                      model_fingerprint=sha256_file(args.model),
                      config_fingerprint=config_fp)
    emit_report(report, args.report, figures=not args.no_figures)
    print(f"balanced ADE {report.balanced_ade:.4f}, "
          f"balanced FDE {report.balanced_fde:.4f}; report -> {args.report}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradient_suite(seed=args.seed)
    worst = max(results.values())
    for name in sorted(results):
        print(f"{name:28s} {results[name]:.3e}")
    print(f"max relative error: {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst <= TOLERANCE else 3


def cmd_cluster(args) -> int:
    points = _read_points_csv(args.points)
    assignments, centroids = kmeans_cluster(points, args.k, args.seed)
    out = Path(args.out)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("x,y,cluster\n")
        for (x, y), c in zip(points, assignments):
            fh.write(f"{x!r},{y!r},{c}\n")
    cent_path = out.with_name(out.stem + "_centroids.csv")
    with open(cent_path, "w", encoding="utf-8") as fh:
        fh.write("cluster,x,y\n")
        for j, (x, y) in enumerate(centroids):
            fh.write(f"{j},{x!r},{y!r}\n")
    from .figures import render_clusters
    render_clusters(points, assignments, centroids, out.with_suffix(".png"))
    print(f"clustered {len(points)} points into {args.k} groups -> {out}")
    return 0


def _read_points_csv(path) -> np.ndarray:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            try:
                rows.append((float(parts[0]), float(parts[1])))
            except (ValueError, IndexError):
                if lineno == 1:
                    continue   # header
                raise RecordFormatError(f"{path}:{lineno}: expected x,y floats")
    if not rows:
        raise RecordFormatError(f"{path}: no points found")
    return np.asarray(rows)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:   # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (RecordFormatError, ModelFormatError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (ConfigError, CliUsageError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

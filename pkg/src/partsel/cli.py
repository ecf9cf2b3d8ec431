"""Command-line entry points: gen, train, eval, export-maps, inspect-anchors.

Exit codes are stable API: 0 success, 2 config error, 3 I/O error, 4 numeric
abort, 5 checkpoint mismatch, 6 unknown id. The only environment variable
consulted is PRS_THREADS (worker count for dataset generation and
frozen-parameter evaluation); all other behavior comes from the config file
and flags.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from . import figures
from . import tensor as T
from .config import ConfigError, load_config
from .model import forward
from .prst import PrstFormatError, write_prst
from .selection import generate_anchors
from .synth import generate_dataset, is_train_id, load_dataset
from .training import (
    CheckpointError,
    NumericAbortError,
    evaluate_detail,
    load_checkpoint,
    train,
)

SELECTION_HEADER = ["image_id", "rank", "level", "x1", "y1", "x2", "y2", "score", "prediction", "confidence"]


class UnknownIdError(ValueError):
    """An id requested on the command line is not in the dataset manifest."""


def _threads():
    raw = os.environ.get("PRS_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"PRS_THREADS: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"PRS_THREADS: must be >= 1, got {n}")
    return n


def _f(v):
    return "" if v is None else repr(float(v))


def selection_rows(image_id, parts):
    rows = []
    for rank, p in enumerate(parts, start=1):
        rows.append([
            image_id, rank, p.level,
            _f(p.box.x1), _f(p.box.y1), _f(p.box.x2), _f(p.box.y2),
            _f(p.score), _f(p.prediction), _f(p.confidence),
        ])
    return rows


def write_selection_csv(path, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SELECTION_HEADER)
        writer.writerows(rows)


def _upsampled_gate_maps(raw_maps, size):
    """Per-level channel-mean sigmoid(r), bilinearly upsampled to the image size."""
    out = []
    with T.no_grad():
        for r in raw_maps:
            gate = T.sigmoid(T.Tensor(r)).data.mean(axis=1, keepdims=True)  # (1,1,h,w)
            up = T.resize_bilinear(T.Tensor(gate), size, size).data[0, 0]
            out.append(up.astype(np.float32))
    return out


def cmd_gen(args):
    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.training.seed
    manifest = generate_dataset(
        cfg.data.n_samples, seed, cfg, args.out, force=args.force, workers=_threads()
    )
    n = cfg.data.n_samples
    n_train = sum(
        1 for i in range(n) if is_train_id(f"s{i:05d}", cfg.data.train_fraction)
    )
    print(f"wrote {n} samples to {args.out} ({n_train} train / {n - n_train} eval)")
    print(f"manifest: {manifest}")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.training.seed = args.seed
    for flag in args.ablation or []:
        setattr(cfg.model, flag, True)
    ds = load_dataset(args.data)
    metrics_path = os.path.join(args.out, "metrics.csv")
    if os.path.exists(metrics_path) and not args.force:
        raise FileExistsError(f"{args.out} already contains a training run (use --force to overwrite)")
    result = train(
        ds, cfg, out_dir=args.out,
        log=lambda s: print(s, file=sys.stderr),
        eval_workers=_threads(),
    )
    figures.training_curves(result.metrics, os.path.join(args.out, "training_curves.png"))
    print(f"eval_mae={result.best_eval_mae!r}")
    return 0


def cmd_eval(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.image_size != model.image_size:
        raise CheckpointError(
            f"checkpoint expects {model.image_size}px images, dataset has {ds.image_size}px"
        )
    mae, hit_rate, rows = evaluate_detail(model, ds, ds.eval_idx, workers=_threads())
    out = args.out or os.path.join(args.checkpoint, "eval_report")
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "report.csv"), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "y_true", "y_pred", "abs_err"])
        for r in rows:
            writer.writerow([r["id"], repr(r["y_true"]), repr(r["y_pred"]), repr(r["abs_err"])])
    sel_rows = []
    for r in rows:
        sel_rows.extend(selection_rows(r["id"], r["selection"]))
    write_selection_csv(os.path.join(out, "selection.csv"), sel_rows)
    figures.pred_scatter(rows, mae, os.path.join(out, "predictions.png"))
    print(f"mae={mae!r}")
    print(f"hit_rate={'n/a' if hit_rate is None else repr(hit_rate)}")
    return 0


def cmd_export_maps(args):
    model, _ = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if ds.image_size != model.image_size:
        raise CheckpointError(
            f"checkpoint expects {model.image_size}px images, dataset has {ds.image_size}px"
        )
    index = {sid: i for i, sid in enumerate(ds.ids)}
    ids = [s.strip() for s in args.ids.split(",") if s.strip()]
    if not ids:
        raise UnknownIdError("no ids given")
    for sid in ids:
        if sid not in index:
            raise UnknownIdError(f"id {sid!r} not present in {args.data}/manifest.csv")
    os.makedirs(args.out, exist_ok=True)
    from .selection import Box

    for sid in ids:
        i = index[sid]
        pred = forward(ds.images[i], int(ds.genders[i]), model, y_star=float(ds.ages[i]))
        maps = _upsampled_gate_maps(pred.relation_maps, ds.image_size)
        for level, m in enumerate(maps):
            write_prst(os.path.join(args.out, f"{sid}_relmap_L{level}.prst"), m)
        write_selection_csv(
            os.path.join(args.out, f"{sid}_selection.csv"),
            selection_rows(sid, pred.per_part),
        )
        figures.maps_overview(
            ds.images[i], maps, pred.per_part, Box(*ds.boxes[i]),
            os.path.join(args.out, f"{sid}_overview.png"),
        )
        print(f"{sid}: y_pred={pred.y_joint!r} y_true={float(ds.ages[i])!r}")
    return 0


def cmd_inspect_anchors(args):
    cfg = load_config(args.config)
    anchors = generate_anchors(cfg.data.image_size, cfg.model.anchor)
    rows = [
        ["", rank, a.level, _f(a.box.x1), _f(a.box.y1), _f(a.box.x2), _f(a.box.y2), "", "", ""]
        for rank, a in enumerate(anchors, start=1)
    ]
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(SELECTION_HEADER)
            writer.writerows(rows)
        print(f"wrote {len(rows)} anchors to {args.out}")
    else:
        writer = csv.writer(sys.stdout)
        writer.writerow(SELECTION_HEADER)
        writer.writerows(rows)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="partsel",
        description="Part-based age assessment on synthetic data: generate, train, evaluate, export.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--config", required=True, help="run config JSON")
    p.add_argument("--out", required=True, help="dataset output directory")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--force", action="store_true", help="overwrite an existing dataset")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True, help="dataset directory (from gen)")
    p.add_argument("--out", required=True, help="output directory for checkpoints and metrics")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--ablation", action="append", choices=["no_relation", "no_selection"],
                   help="enable an ablation flag (repeatable)")
    p.add_argument("--force", action="store_true", help="overwrite an existing run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's eval split")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report directory (default: <checkpoint>/eval_report)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-maps", help="export relation maps and selections for chosen ids")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--ids", required=True, help="comma-separated sample ids")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_maps)

    p = sub.add_parser("inspect-anchors", help="dump the full anchor set for a config as CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_inspect_anchors)

    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except UnknownIdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 6
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    except NumericAbortError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (FileNotFoundError, FileExistsError, PrstFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())

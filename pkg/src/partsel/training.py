"""SGD training loop, evaluation, and checkpointing."""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import from_dict
from .model import AgeModel
from .prst import PrstFormatError, read_prst, write_prst
from .rng import substream
from .selection import Box, iou
from .synth import Dataset, load_dataset

METRICS_HEADER = ["epoch", "lr", "train_mae", "eval_mae", "loss_total", "loss_rank", "loss_reg", "hit_rate"]
EVAL_CHUNK = 32
HIT_IOU = 0.25


class NumericAbortError(RuntimeError):
    """Training hit a non-finite value; message names the first bad tensor."""


class CheckpointError(RuntimeError):
    """Checkpoint directory is missing tensors or disagrees with the config."""


def lr_schedule(epoch, base_lr=1e-3, decay_every=25, factor=0.1):
    """lr = base_lr * factor^(epoch // decay_every).

    When 1/factor is an integer (decade decay, halving, ...) the power is
    applied as a single division by an exact integer, which keeps the decade
    table (1e-3, 1e-4, 1e-5, ...) exact in floating point; the naive
    base*factor**k form drifts by one ulp from k=2 onward.
    """
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    k = epoch // int(decay_every)
    inv = 1.0 / factor
    if inv.is_integer():
        return base_lr / (int(inv) ** k)
    return base_lr * factor**k


def sgd_step(params, grads, lr):
    """w <- w - lr*g for each (param, grad) pair; grads are then zeroed.

    A None grad (parameter not on any path to the loss this step) is skipped.
    """
    if not (lr > 0):
        raise ValueError(f"lr must be > 0, got {lr}")
    for p, g in zip(params, grads):
        if g is None:
            continue
        p.data -= lr * g
        g[...] = 0.0
    return params


def _first_nonfinite(model, loss):
    for name in sorted(model.params()):
        if not np.isfinite(model.params()[name].data).all():
            return f"parameter {name!r}"
    for pos, (out, _) in enumerate(T.current_tape().entries):
        if not np.isfinite(out.data).all():
            return f"op {out._op!r} at tape position {pos}"
    return f"loss value {float(loss.data)!r}"


def _hit(selection, planted_box):
    return any(iou(part.box, planted_box) > HIT_IOU for part in selection)


def _eval_chunk(model, images, genders, y_star_norm):
    with T.no_grad():
        out = model.forward_batch(images, genders, y_star_norm=y_star_norm)
    return out.y_norm.data[:, 0].astype(np.float64), out.selections


def evaluate_detail(model, dataset, indices, workers=1):
    """Frozen-parameter evaluation over dataset[indices].

    Returns (mae_months, hit_rate_or_None, per-sample rows). Work is chunked
    identically regardless of worker count so results never depend on it.
    """
    indices = np.asarray(indices)
    onehot = dataset.gender_onehot()
    y_norm = model.normalize(dataset.ages)
    chunks = [indices[i : i + EVAL_CHUNK] for i in range(0, len(indices), EVAL_CHUNK)]

    def run(chunk):
        return _eval_chunk(model, dataset.images[chunk], onehot[chunk], y_norm[chunk])

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]

    rows, hits = [], []
    abs_err_sum = 0.0
    track_hits = not model.cfg.no_selection
    for chunk, (y_norm, selections) in zip(chunks, results):
        y_pred = model.denormalize(y_norm)
        for j, idx in enumerate(chunk):
            err = abs(float(y_pred[j]) - float(dataset.ages[idx]))
            abs_err_sum += err
            rows.append(
                {
                    "id": dataset.ids[idx],
                    "y_true": float(dataset.ages[idx]),
                    "y_pred": float(y_pred[j]),
                    "abs_err": err,
                    "selection": selections[j],
                }
            )
            if track_hits:
                hits.append(_hit(selections[j], Box(*dataset.boxes[idx])))
    mae = abs_err_sum / len(indices)
    hit_rate = (sum(hits) / len(hits)) if track_hits else None
    return mae, hit_rate, rows


def evaluate(checkpoint, dataset, workers=1):
    """MAE (months) of a checkpoint (dir path or AgeModel) on the eval split."""
    model = checkpoint if isinstance(checkpoint, AgeModel) else load_checkpoint(checkpoint)[0]
    if not isinstance(dataset, Dataset):
        dataset = load_dataset(dataset)
    mae, _, _ = evaluate_detail(model, dataset, dataset.eval_idx, workers=workers)
    return mae


@dataclass
class TrainResult:
    metrics: list
    best_epoch: int
    best_eval_mae: float
    final_eval_mae: float
    model: AgeModel
    best_dir: str = None
    final_dir: str = None
    metrics_path: str = None


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_HEADER)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in METRICS_HEADER])


def save_checkpoint(out_dir, model, run_cfg, epoch, metrics_rows):
    os.makedirs(out_dir, exist_ok=True)
    params_dir = os.path.join(out_dir, "params")
    os.makedirs(params_dir, exist_ok=True)
    for name, p in sorted(model.params().items()):
        write_prst(os.path.join(params_dir, f"{name}.prst"), p.data)
    manifest = {
        "config": run_cfg.to_dict(),
        "image_size": model.image_size,
        "seed": model.seed,
        "epoch": epoch,
        "target_mean": model.target_mean,
        "target_std": model.target_std,
        "metrics": metrics_rows,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def load_checkpoint(ckpt_dir):
    manifest_path = os.path.join(ckpt_dir, "manifest.json")
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"no manifest.json under {ckpt_dir}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    try:
        run_cfg = from_dict(manifest["config"])
        model = AgeModel(run_cfg.model, manifest["image_size"], manifest["seed"])
        model.target_mean = float(manifest["target_mean"])
        model.target_std = float(manifest["target_std"])
    except KeyError as exc:
        raise CheckpointError(f"{manifest_path}: missing field {exc}") from exc
    for name, p in sorted(model.params().items()):
        path = os.path.join(ckpt_dir, "params", f"{name}.prst")
        if not os.path.isfile(path):
            raise CheckpointError(f"checkpoint tensor missing: {path}")
        try:
            arr = read_prst(path)
        except PrstFormatError as exc:
            raise CheckpointError(str(exc)) from exc
        if arr.shape != p.data.shape:
            raise CheckpointError(
                f"{path}: shape {arr.shape} does not match configured parameter {p.data.shape}"
            )
        p.data = arr.astype(p.data.dtype, copy=False)
    return model, manifest


def train(dataset, run_cfg, out_dir=None, log=None, eval_workers=1):
    """Train per config; returns metrics history and the trained model.

    Saves (when out_dir is given) checkpoint_best/ — lowest eval MAE, the
    run's deliverable — plus checkpoint_final/ for the last epoch, and
    metrics.csv. Aborts with NumericAbortError naming the first non-finite
    tensor if the loss ever leaves the reals.
    """
    run_cfg.validate()
    tcfg = run_cfg.training
    model = AgeModel(run_cfg.model, dataset.image_size, tcfg.seed)

    train_idx = dataset.train_idx
    eval_idx = dataset.eval_idx
    if len(train_idx) == 0 or len(eval_idx) == 0:
        raise ValueError(f"degenerate split: {len(train_idx)} train / {len(eval_idx)} eval samples")

    ages = dataset.ages
    mean = float(ages[train_idx].mean())
    std = float(ages[train_idx].std())
    model.target_mean = mean
    model.target_std = std if std > 0 else 1.0

    onehot = dataset.gender_onehot()
    y_norm_all = model.normalize(ages)
    shuffle_rng = substream(tcfg.seed, "shuffle")
    augment_rng = substream(tcfg.seed, "augment")
    param_items = sorted(model.params().items())
    param_list = [p for _, p in param_items]

    rows = []
    best_mae = None
    best_epoch = -1
    best_dir = os.path.join(out_dir, "checkpoint_best") if out_dir else None
    final_dir = os.path.join(out_dir, "checkpoint_final") if out_dir else None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for epoch in range(tcfg.epochs):
        lr = lr_schedule(epoch, tcfg.base_lr, tcfg.decay_every, tcfg.decay_factor)
        order = shuffle_rng.permutation(train_idx)
        abs_err_sum = 0.0
        rank_total = 0.0
        reg_total = 0.0
        for lo in range(0, len(order), tcfg.batch_size):
            bidx = order[lo : lo + tcfg.batch_size]
            nb = len(bidx)
            imgs = dataset.images[bidx]
            if tcfg.augment_hflip:
                flips = augment_rng.random(nb) < 0.5
                if flips.any():
                    imgs = imgs.copy()
                    imgs[flips] = imgs[flips, :, :, ::-1]
            y_norm_b = y_norm_all[bidx]

            out = model.forward_batch(imgs, onehot[bidx], y_star_norm=y_norm_b)
            target = T.Tensor(y_norm_b[:, None])
            reg = T.mean(T.square(T.sub(out.y_norm, target)))
            if out.rank_sum is not None:
                loss = T.add(T.mul(out.rank_sum, 1.0 / nb), reg)
            else:
                loss = reg
            if not np.isfinite(loss.data).all():
                raise NumericAbortError(
                    f"non-finite loss at epoch {epoch}: first bad tensor is {_first_nonfinite(model, loss)}"
                )
            T.backward(loss)
            sgd_step(param_list, [p.grad for p in param_list], lr)

            y_pred = model.denormalize(out.y_norm.data[:, 0])
            abs_err_sum += float(np.abs(y_pred - ages[bidx]).sum())
            reg_total += float(reg.data) * nb
            if out.rank_sum is not None:
                rank_total += float(out.rank_sum.data)

        n_train = len(order)
        eval_mae, hit_rate, _ = evaluate_detail(model, dataset, eval_idx, workers=eval_workers)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_mae": abs_err_sum / n_train,
            "eval_mae": eval_mae,
            "loss_total": (rank_total + reg_total) / n_train,
            "loss_rank": rank_total / n_train,
            "loss_reg": reg_total / n_train,
            "hit_rate": hit_rate,
        }
        rows.append(row)
        if log:
            log(f"epoch {epoch:3d} lr {lr:.2e} train_mae {row['train_mae']:.3f} "
                f"eval_mae {eval_mae:.3f}" + (f" hit_rate {hit_rate:.3f}" if hit_rate is not None else ""))

        if best_mae is None or eval_mae < best_mae:
            best_mae = eval_mae
            best_epoch = epoch
            if best_dir:
                save_checkpoint(best_dir, model, run_cfg, epoch, rows)

    metrics_path = None
    if out_dir:
        save_checkpoint(final_dir, model, run_cfg, tcfg.epochs - 1, rows)
        metrics_path = os.path.join(out_dir, "metrics.csv")
        write_metrics(rows, metrics_path)

    return TrainResult(
        metrics=rows,
        best_epoch=best_epoch,
        best_eval_mae=best_mae,
        final_eval_mae=rows[-1]["eval_mae"],
        model=model,
        best_dir=best_dir,
        final_dir=final_dir,
        metrics_path=metrics_path,
    )

"""Age assessment model: gated pyramid + part selection + fused regression.

The joint prediction concatenates [F_local | F_global | F_gender] into a two
layer head. Per-part predictions reuse that same head on [v_i | F_global |
F_gender] (each part's own vector standing in for the local sum), evaluated
outside the tape: the two-term loss trains no dedicated per-part head, so
reusing the joint head is what keeps per-part confidences meaningful as
training progresses.

Anchor scores receive gradients only through the ranking loss: cropping is
non-differentiable in box coordinates, so the hinge on score differences is
the selection pathway's sole supervision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import ConfigError
from .layers import collect_params, linear_params
from .relation import build_pyramid, make_pyramid_params
from .selection import (
    Box,
    DegenerateBoxError,
    ScoredPart,
    anchor_arrays,
    crop_rect,
    greedy_keep,
    make_local_net,
    make_score_heads,
    score_anchors,
)


class GenderCode:
    """One-hot gender input of dimension 2."""

    def __init__(self, value):
        if isinstance(value, GenderCode):
            self.vec = value.vec
            return
        vec = np.asarray(value, dtype=np.float64)
        if vec.ndim == 0:
            g = int(vec)
            if g not in (0, 1):
                raise ValueError(f"gender must be 0 or 1, got {g}")
            vec = np.eye(2)[g]
        if vec.shape != (2,) or sorted(vec.tolist()) != [0.0, 1.0]:
            raise ValueError(f"gender code must be one-hot of dimension 2, got {value!r}")
        self.vec = vec

    @property
    def index(self):
        return int(self.vec[1])


@dataclass
class Prediction:
    y_joint: float  # months
    per_part: list  # ScoredPart with prediction/confidence filled when y* known
    relation_maps: list = field(default_factory=list)  # raw r per level (numpy)


@dataclass
class LossBreakdown:
    total: float
    rank: float
    regression: float


def confidence(y_i, y_star, mode="corrected"):
    """Monotone transform of |y_i - y*| used to order parts.

    corrected (default): C = 1 - sigmoid(|e|), strictly decreasing in the
    error, range (0, 0.5] (exp underflow floors it at 0.0 once e exceeds
    ~745, far outside any age range we feed it). literal: C = 1 -
    sigmoid(-|e|), strictly increasing, range [0.5, 1). Both evaluate
    through the stable identities 1 - sigmoid(x) = sigmoid(-x), so
    C(0) = 0.5 exactly.
    """
    e = abs(float(y_i) - float(y_star))
    if mode == "corrected":
        z = math.exp(-e)  # sigmoid(-e) with e >= 0: no overflow possible
        return z / (1.0 + z)
    if mode == "literal":
        return 1.0 / (1.0 + math.exp(-e))
    raise ValueError(f"unknown confidence mode {mode!r}")


def _hinge(x):
    if isinstance(x, T.Tensor):
        return T.relu(x)
    return x if x > 0.0 else 0.0


def ranking_loss(parts, mode="margin"):
    """Pairwise hinge over (score, confidence) pairs.

    Sums max(1 - (S_j - S_i), 0) over all ordered pairs with C_j > C_i
    ("margin" mode); "literal" mode sums max(1 - S_i - S_j, 0) instead.
    Scores may be floats or scalar Tensors; with Tensors the result is a
    scalar Tensor differentiable in every score.
    """
    if mode not in ("margin", "literal"):
        raise ValueError(f"unknown rank loss mode {mode!r}")
    total = None
    for i, (s_i, c_i) in enumerate(parts):
        for j, (s_j, c_j) in enumerate(parts):
            if i == j or not (c_j > c_i):
                continue
            if mode == "margin":
                term = _hinge(1.0 - (s_j - s_i))
            else:
                term = _hinge((1.0 - s_i) - s_j)
            total = term if total is None else total + term
    if total is None:
        return 0.0
    return total


def total_loss(pred, y_star, mode="margin"):
    """L = L_rank + (y_joint - y*)^2, reported with its two components.

    total is the single-add sum of the two components, so
    breakdown.total == breakdown.rank + breakdown.regression bit-exactly.
    """
    reg = (float(pred.y_joint) - float(y_star)) ** 2
    pairs = [(p.score, p.confidence) for p in pred.per_part if p.confidence is not None]
    rank = float(ranking_loss(pairs, mode=mode))
    return LossBreakdown(total=rank + reg, rank=rank, regression=reg)


def _confidence_vec(errors, mode):
    e = np.abs(np.asarray(errors, dtype=np.float64))
    if mode == "corrected":
        z = np.exp(-e)
        return z / (1.0 + z)
    return 1.0 / (1.0 + np.exp(-e))


@dataclass
class BatchOutput:
    y_norm: T.Tensor  # (B,1) normalized-space joint predictions
    rank_sum: object  # scalar Tensor summing hinge terms over the batch, or None
    n_pairs: int
    selections: list  # per sample: list[ScoredPart]
    relation_maps: list = field(default_factory=list)


class AgeModel:
    """Holds all parameters and the batched forward pass."""

    def __init__(self, mcfg, image_size, seed):
        mcfg.validate()
        self.cfg = mcfg
        self.image_size = int(image_size)
        self.seed = int(seed)
        self.pyramid_params = make_pyramid_params(seed, 1, mcfg.stem_channels, mcfg.channels)

        boxes, levels, indices, _ = anchor_arrays(self.image_size, mcfg.anchor)
        self.anchor_boxes = boxes
        self.anchor_levels = levels
        self.anchor_indices = indices
        n_ratios = len(mcfg.anchor.ratios)
        self.total_anchor_slots = sum(
            (self.image_size // int(s)) ** 2 * n_ratios for s in mcfg.anchor.strides
        )
        try:
            self.anchor_rects = np.array(
                [crop_rect(Box(*b), self.image_size, self.image_size) for b in boxes], dtype=np.int64
            )
        except DegenerateBoxError as exc:
            raise ConfigError(f"anchor spec yields degenerate crops: {exc}") from exc

        downs = 2 ** (len(mcfg.stem_channels) + mcfg.levels)
        if self.image_size % downs:
            raise ConfigError(
                f"image size {self.image_size} not divisible by backbone stride {downs}"
            )
        grids = []
        extent = self.image_size
        for _ in range(len(mcfg.stem_channels)):
            extent //= 2
        for level, stride in enumerate(mcfg.anchor.strides):
            extent //= 2
            if extent != self.image_size // int(stride):
                raise ConfigError(
                    f"anchor stride {stride} at level {level} expects grid "
                    f"{self.image_size // int(stride)}, backbone produces {extent}"
                )
            grids.append((extent, extent))

        if mcfg.no_selection:
            self.score_heads = None
            self.local_net = None
            head_in = mcfg.channels[-1] + 2
        else:
            self.score_heads = make_score_heads(seed, mcfg.channels, n_ratios, grids)
            self.local_net = make_local_net(
                seed, 1, (8, 16, mcfg.local_dim), crop_size=mcfg.crop_size
            )
            head_in = mcfg.local_dim + mcfg.channels[-1] + 2
        self.head1 = linear_params("head.fc1", seed, head_in, mcfg.head_hidden)
        self.head2 = linear_params("head.fc2", seed, mcfg.head_hidden, 1, scale=0.1)

        # target normalization, set by the trainer / restored from checkpoints
        self.target_mean = 0.0
        self.target_std = 1.0

    def params(self):
        objs = [self.pyramid_params.backbone.stem, self.pyramid_params.backbone.stages]
        for rel in self.pyramid_params.relation_levels:
            objs += [rel.w_relation, rel.w_trunk, rel.w_residual]
        if self.score_heads is not None:
            for head in self.score_heads:
                objs += [head.conv1, head.conv2]
            objs.append(self.local_net.convs)
        objs += [self.head1, self.head2]
        return collect_params(*objs)

    def normalize(self, y):
        return (np.asarray(y, dtype=np.float64) - self.target_mean) / self.target_std

    def denormalize(self, y_norm):
        return np.asarray(y_norm, dtype=np.float64) * self.target_std + self.target_mean

    def _head_numpy(self, rows):
        h = rows @ self.head1.w.data + self.head1.b.data
        np.maximum(h, 0.0, out=h)
        return h @ self.head2.w.data + self.head2.b.data

    def forward_batch(self, images, genders, y_star_norm=None, with_maps=False):
        """Run B samples through the full pipeline in one taped graph.

        images: (B,1,H,W) float array; genders: (B,2) one-hot rows;
        y_star_norm: optional (B,) normalized targets enabling per-part
        confidences and the ranking-loss term.
        """
        images = np.asarray(images)
        b = images.shape[0]
        imgs_t = T.Tensor(images)
        genders_t = T.Tensor(np.asarray(genders))
        pyr = build_pyramid(imgs_t, self.pyramid_params, gate_ones=self.cfg.no_relation)

        rank_sum = None
        n_pairs = 0
        selections = [[] for _ in range(b)]

        if self.cfg.no_selection:
            rows = T.concat([pyr.f_global, genders_t], axis=1)
        else:
            m = self.cfg.m_parts
            scores_t = score_anchors(pyr, self.score_heads)
            a_full = scores_t.shape[1]
            flat = T.reshape(scores_t, (b * a_full,))
            scores_np = scores_t.data

            kept_all = []
            for i in range(b):
                kept = greedy_keep(
                    self.anchor_boxes,
                    scores_np[i, self.anchor_indices],
                    self.cfg.iou_threshold,
                    limit=m,
                )
                if not kept:
                    raise RuntimeError("selection produced zero parts")
                kept_all.append(kept)

            crops = []
            for i, kept in enumerate(kept_all):
                for pos in kept:
                    y0, y1, x0, x1 = self.anchor_rects[pos]
                    patch = T.crop_nchw(imgs_t, i, y0, y1, x0, x1)
                    crops.append(
                        T.resize_bilinear(patch, self.local_net.crop_size, self.local_net.crop_size)
                    )
            vecs = self.local_net.apply(T.concat(crops, axis=0))
            d = self.local_net.out_dim

            uniform = all(len(k) == m for k in kept_all)
            if uniform:
                f_local = T.sum(T.reshape(vecs, (b, m, d)), axis=1)
            else:
                rows_local, off = [], 0
                for kept in kept_all:
                    seg = T.narrow(vecs, 0, off, len(kept))
                    rows_local.append(T.sum(seg, axis=0, keepdims=True))
                    off += len(kept)
                f_local = T.concat(rows_local, axis=0)
            rows = T.concat([f_local, pyr.f_global, genders_t], axis=1)

        h = T.relu(self.head1.apply(rows))
        y = self.head2.apply(h)

        if not self.cfg.no_selection:
            # Per-part predictions reuse the joint head on [v_i | F_global | F_gender],
            # computed outside the tape: they steer the ranking comparator, not gradients.
            counts = [len(k) for k in kept_all]
            fg_rep = np.repeat(pyr.f_global.data, counts, axis=0)
            gd_rep = np.repeat(genders_t.data, counts, axis=0)
            part_rows = np.concatenate([vecs.data, fg_rep, gd_rep], axis=1)
            y_parts = self._head_numpy(part_rows)[:, 0]

            conf = None
            if y_star_norm is not None:
                y_star_rep = np.repeat(np.asarray(y_star_norm, dtype=np.float64), counts)
                conf = _confidence_vec(y_parts - y_star_rep, self.cfg.confidence)

            off = 0
            idx_lo, idx_hi = [], []
            for i, kept in enumerate(kept_all):
                n_k = len(kept)
                for a, pos in enumerate(kept):
                    part = ScoredPart(
                        box=Box(*self.anchor_boxes[pos]),
                        score=float(scores_np[i, self.anchor_indices[pos]]),
                        level=int(self.anchor_levels[pos]),
                        anchor_index=int(self.anchor_indices[pos]),
                        prediction=float(self.denormalize(y_parts[off + a])),
                    )
                    if conf is not None:
                        part.confidence = float(conf[off + a])
                    selections[i].append(part)
                if conf is not None:
                    c_here = conf[off : off + n_k]
                    base = i * a_full
                    for p in range(n_k):
                        for q in range(n_k):
                            if p != q and c_here[q] > c_here[p]:
                                idx_lo.append(base + self.anchor_indices[kept[p]])
                                idx_hi.append(base + self.anchor_indices[kept[q]])
                off += n_k

            if idx_lo:
                s_lo = T.gather(flat, np.array(idx_lo))
                s_hi = T.gather(flat, np.array(idx_hi))
                if self.cfg.rank_loss == "margin":
                    terms = T.relu(T.sub(1.0, T.sub(s_hi, s_lo)))
                else:
                    terms = T.relu(T.sub(T.sub(1.0, s_lo), s_hi))
                rank_sum = T.sum(terms)
                n_pairs = len(idx_lo)

        maps = [r.data for (_, r) in pyr.levels] if with_maps else []
        return BatchOutput(
            y_norm=y, rank_sum=rank_sum, n_pairs=n_pairs, selections=selections, relation_maps=maps
        )


def forward(image, gender, model, y_star=None):
    """Single-sample forward returning a Prediction in original age units.

    y_star (months), when given, fills per-part confidences (they compare
    normalized errors, matching training).
    """
    img = image.data if isinstance(image, T.Tensor) else np.asarray(image)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4 or img.shape[0] != 1:
        raise T.ShapeError(f"forward: expected a single 1xCxHxW image, got {img.shape}")
    code = GenderCode(gender)
    y_star_norm = None
    if y_star is not None:
        y_star_norm = np.array([model.normalize(float(y_star))])
    out = model.forward_batch(img, code.vec[None, :], y_star_norm=y_star_norm, with_maps=True)
    return Prediction(
        y_joint=float(model.denormalize(out.y_norm.data[0, 0])),
        per_part=out.selections[0],
        relation_maps=out.relation_maps,
    )

"""Anchor generation, scoring, suppression, and local feature extraction.

Anchors are placed per pyramid level on a stride grid, scored from that
level's context feature by a small conv head, greedily suppressed by IoU,
and the top-M survivors are cropped, resized, and summed into the local
feature. Box coordinates are continuous; crops round to integer pixels, so
the selection pathway receives no pixel-coordinate gradients — its
supervision comes from the ranking loss instead.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .config import AnchorConfig as AnchorSpec
from .config import ConfigError
from .layers import ConvParams, conv_params


class DegenerateBoxError(ValueError):
    """A crop box rounds to fewer than 4 px^2."""


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")

    @property
    def area(self):
        return (self.x2 - self.x1) * (self.y2 - self.y1)


@dataclass
class ScoredPart:
    box: Box
    score: float
    level: int
    anchor_index: int = -1
    prediction: float = None
    confidence: float = None


@dataclass(frozen=True)
class Anchor:
    box: Box
    level: int
    index: int  # position in the full enumeration (scores align to this)


def iou(a, b):
    """Intersection over union of two boxes in continuous coordinates."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def anchor_grid_shape(image_size, stride):
    if image_size % stride:
        raise ConfigError(f"anchor stride {stride} does not divide image size {image_size}")
    return image_size // stride


def anchor_arrays(image_size, spec):
    """Vectorized anchor enumeration.

    Returns (boxes (A,4) float64, levels (A,), indices (A,), excluded_count)
    where A counts the surviving anchors and `indices` are their positions in
    the full (pre-exclusion) enumeration: level-major, then grid row-major,
    then ratio. Clamping to image bounds happens here; anchors that clamp to
    zero area are excluded and counted.
    """
    all_boxes, all_levels, all_indices = [], [], []
    offset = 0
    n_ratios = len(spec.ratios)
    for level, (base, stride) in enumerate(zip(spec.base_sizes, spec.strides)):
        g = anchor_grid_shape(image_size, int(stride))
        centers = (np.arange(g) + 0.5) * stride
        cy, cx = np.meshgrid(centers, centers, indexing="ij")
        ws = np.array([base / math.sqrt(r) for r in spec.ratios])
        hs = np.array([base * math.sqrt(r) for r in spec.ratios])
        # (g, g, R) per coordinate, flattened in (row, col, ratio) order
        x1 = (cx[..., None] - ws / 2).ravel()
        x2 = (cx[..., None] + ws / 2).ravel()
        y1 = (cy[..., None] - hs / 2).ravel()
        y2 = (cy[..., None] + hs / 2).ravel()
        boxes = np.stack([x1, y1, x2, y2], axis=1)
        np.clip(boxes, 0.0, float(image_size), out=boxes)
        all_boxes.append(boxes)
        all_levels.append(np.full(len(boxes), level, dtype=np.int64))
        all_indices.append(offset + np.arange(len(boxes), dtype=np.int64))
        offset += g * g * n_ratios
    boxes = np.concatenate(all_boxes)
    levels = np.concatenate(all_levels)
    indices = np.concatenate(all_indices)
    valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    excluded = int((~valid).sum())
    if excluded:
        warnings.warn(f"excluded {excluded} zero-area anchors after clamping", stacklevel=2)
    return boxes[valid], levels[valid], indices[valid], excluded


def generate_anchors(image_size, spec):
    """All anchors for an image size, as Anchor objects with level tags."""
    boxes, levels, indices, _ = anchor_arrays(image_size, spec)
    return [
        Anchor(Box(*boxes[i]), int(levels[i]), int(indices[i]))
        for i in range(len(boxes))
    ]


def greedy_keep(boxes, scores, iou_threshold, limit=None):
    """Greedy suppression core shared by nms and select_top_m.

    Walks boxes in descending score order (ties broken by lower input index
    via the stable sort); a candidate overlapping any already-kept box with
    IoU strictly above the threshold is discarded. Stops early once `limit`
    boxes are kept — the first `limit` survivors of a full suppression pass,
    since candidates are only ever tested against kept boxes.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != 4 or len(boxes) != len(scores):
        raise T.ShapeError(f"greedy_keep: boxes {boxes.shape} vs scores {scores.shape}")
    order = np.argsort(-scores, kind="stable")
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    kept = []
    kx1 = np.empty(len(boxes))
    ky1 = np.empty(len(boxes))
    kx2 = np.empty(len(boxes))
    ky2 = np.empty(len(boxes))
    karea = np.empty(len(boxes))
    nk = 0
    for i in order:
        if nk:
            ix = np.minimum(kx2[:nk], boxes[i, 2]) - np.maximum(kx1[:nk], boxes[i, 0])
            iy = np.minimum(ky2[:nk], boxes[i, 3]) - np.maximum(ky1[:nk], boxes[i, 1])
            inter = np.maximum(ix, 0.0) * np.maximum(iy, 0.0)
            overlap = inter / (karea[:nk] + areas[i] - inter)
            if (overlap > iou_threshold).any():
                continue
        kept.append(int(i))
        kx1[nk], ky1[nk], kx2[nk], ky2[nk], karea[nk] = (*boxes[i], areas[i])
        nk += 1
        if limit is not None and nk >= limit:
            break
    return kept


def _check_threshold(iou_threshold):
    if not (0.0 < iou_threshold < 1.0):
        raise ValueError(f"iou_threshold must be in (0,1), got {iou_threshold}")


def nms(parts, iou_threshold):
    """Greedy non-maximum suppression; returns survivors in descending score order."""
    _check_threshold(iou_threshold)
    if not parts:
        return []
    boxes = np.array([[p.box.x1, p.box.y1, p.box.x2, p.box.y2] for p in parts])
    scores = np.array([p.score for p in parts])
    return [parts[i] for i in greedy_keep(boxes, scores, iou_threshold)]


def select_top_m(parts, m, iou_threshold=0.3):
    """Joint sort by score across levels, suppress, truncate to the top M."""
    _check_threshold(iou_threshold)
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not parts:
        return []
    boxes = np.array([[p.box.x1, p.box.y1, p.box.x2, p.box.y2] for p in parts])
    scores = np.array([p.score for p in parts])
    return [parts[i] for i in greedy_keep(boxes, scores, iou_threshold, limit=m)]


def crop_rect(box, height, width):
    """Round a continuous box to integer pixel bounds, clamped to the image."""
    x0 = min(max(int(math.floor(box.x1 + 0.5)), 0), width)
    x1 = min(max(int(math.floor(box.x2 + 0.5)), 0), width)
    y0 = min(max(int(math.floor(box.y1 + 0.5)), 0), height)
    y1 = min(max(int(math.floor(box.y2 + 0.5)), 0), height)
    if (x1 - x0) * (y1 - y0) < 4:
        raise DegenerateBoxError(
            f"box ({box.x1},{box.y1},{box.x2},{box.y2}) rounds to {x1 - x0}x{y1 - y0} px (< 4 px^2)"
        )
    return y0, y1, x0, x1


def crop_resize(image, box, out_size=(32, 32)):
    """Crop a box from a 1xCxHxW image and bilinearly resize to out_size.

    Differentiable with respect to the image pixels only: the box is rounded
    to integer coordinates first, so no gradient reaches the coordinates.
    """
    if image.ndim != 4 or image.shape[0] != 1:
        raise T.ShapeError(f"crop_resize: expected 1xCxHxW image, got {image.shape}")
    if isinstance(out_size, int):
        out_size = (out_size, out_size)
    y0, y1, x0, x1 = crop_rect(box, image.shape[2], image.shape[3])
    patch = T.crop_nchw(image, 0, y0, y1, x0, x1)
    return T.resize_bilinear(patch, out_size[0], out_size[1])


@dataclass
class LocalNet:
    """Shared CNN turning a cropped region into a feature vector."""

    convs: list
    crop_size: int = 32

    @property
    def out_dim(self):
        return self.convs[-1].w.shape[0]

    def apply(self, crops):
        """(n, C, crop, crop) -> (n, out_dim): conv/relu stack, then mean pool."""
        x = crops
        for conv in self.convs:
            x = T.relu(conv.apply(x))
        return T.mean(x, axis=(2, 3))


def make_local_net(seed, in_channels=1, channels=(8, 16, 32), crop_size=32):
    convs = []
    cin = in_channels
    for i, cout in enumerate(channels):
        convs.append(conv_params(f"local{i}", seed, cin, cout, k=3, stride=2, padding=1))
        cin = cout
    return LocalNet(convs, crop_size=crop_size)


def local_feature(parts, image, local_net):
    """Sum of the shared-CNN feature vectors of all selected parts: (1, D)."""
    if not parts:
        raise ValueError("local_feature: at least one selected part required")
    crops = [crop_resize(image, p.box, local_net.crop_size) for p in parts]
    vecs = local_net.apply(T.concat(crops, axis=0))
    return T.sum(vecs, axis=0, keepdims=True)


@dataclass
class ScoreHead:
    """Per-level scoring head: 3x3 conv + relu + 1x1 conv to |ratios| maps."""

    conv1: ConvParams
    conv2: ConvParams
    grid: tuple = field(default=None)  # expected (H, W) of the level feature


def make_score_heads(seed, channels, n_ratios, grids, hidden=16):
    heads = []
    for level, (cin, grid) in enumerate(zip(channels, grids)):
        heads.append(
            ScoreHead(
                conv1=conv_params(f"score{level}.a", seed, cin, hidden, k=3, padding=1),
                conv2=conv_params(f"score{level}.b", seed, hidden, n_ratios, k=1),
                grid=grid,
            )
        )
    return heads


def score_anchors(pyramid, heads):
    """Score every anchor from its level's context feature.

    Output is (N, A) with columns in full anchor enumeration order: level,
    then grid row-major, then ratio — matching anchor_arrays indices.
    """
    if len(pyramid.levels) != len(heads):
        raise T.ShapeError(f"score_anchors: {len(pyramid.levels)} levels vs {len(heads)} heads")
    per_level = []
    for level, ((f, _), head) in enumerate(zip(pyramid.levels, heads)):
        if head.grid is not None and tuple(f.shape[2:]) != tuple(head.grid):
            raise T.ShapeError(
                f"score_anchors: level {level} feature is {tuple(f.shape[2:])}, anchor grid expects {tuple(head.grid)}"
            )
        s = head.conv2.apply(T.relu(head.conv1.apply(f)))  # (N, R, H, W)
        n, r, h, w = s.shape
        s = T.reshape(T.transpose(s, (0, 2, 3, 1)), (n, h * w * r))
        per_level.append(s)
    return T.concat(per_level, axis=1) if len(per_level) > 1 else per_level[0]

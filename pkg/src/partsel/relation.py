"""Gated multi-level context features.

Each pyramid level transforms its backbone feature x through three 1x1
convolutions — relation map r, trunk map t, residual map d — and combines
them as f = t * sigmoid(r) + d. The sigmoid of the relation map acts as a
spatial gate on the trunk branch; the residual branch keeps an ungated path
so the gate can specialize without starving the level of signal. Each
level's f feeds the next backbone stage, and the last f, mean-pooled, is the
global feature.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import tensor as T
from .layers import ConvParams, conv_params


@dataclass
class RelationLevelParams:
    """The three 1x1 transforms of one level (shared in/out channel counts)."""

    w_relation: ConvParams
    w_trunk: ConvParams
    w_residual: ConvParams


@dataclass
class BackboneParams:
    stem: list  # stride-2 ConvParams blocks
    stages: list  # one stride-2 ConvParams per pyramid level


@dataclass
class PyramidParams:
    backbone: BackboneParams
    relation_levels: list


@dataclass
class ContextPyramid:
    levels: list  # [(f_i, r_i)] per level, coarse levels last
    f_global: T.Tensor  # (N, C_last) spatial mean of the last f


def relation_gate(x, params, gate_ones=False):
    """Apply one level's gating: returns (f, r) with f = t * sigmoid(r) + d.

    With gate_ones=True the sigmoid gate is replaced by all-ones, collapsing
    the level to the plain two-branch form f = t + d (the no-relation
    ablation). The relation map r is still computed and returned so its
    export path stays uniform.
    """
    r = params.w_relation.apply(x)
    t = params.w_trunk.apply(x)
    d = params.w_residual.apply(x)
    if gate_ones:
        f = T.add(t, d)
    else:
        f = T.add(T.mul(t, T.sigmoid(r)), d)
    return f, r


def make_pyramid_params(seed, in_channels, stem_channels, channels):
    stem = []
    cin = in_channels
    for i, cout in enumerate(stem_channels):
        stem.append(conv_params(f"stem{i}", seed, cin, cout, k=3, stride=2, padding=1))
        cin = cout
    stages, rel_levels = [], []
    for i, cout in enumerate(channels):
        stages.append(conv_params(f"stage{i}", seed, cin, cout, k=3, stride=2, padding=1))
        rel_levels.append(
            RelationLevelParams(
                w_relation=conv_params(f"rel{i}.relation", seed, cout, cout, k=1),
                w_trunk=conv_params(f"rel{i}.trunk", seed, cout, cout, k=1),
                w_residual=conv_params(f"rel{i}.residual", seed, cout, cout, k=1),
            )
        )
        cin = cout
    return PyramidParams(BackboneParams(stem, stages), rel_levels)


def build_pyramid(image, params, gate_ones=False):
    """Run the backbone over an NCHW image batch, gating each level.

    The spatial size must be divisible by the total downsampling factor
    (2 per stem block and per stage) so every level has integer extents.
    """
    n_down = len(params.backbone.stem) + len(params.backbone.stages)
    factor = 2 ** n_down
    h, w = image.shape[2], image.shape[3]
    if h % factor or w % factor:
        raise T.ShapeError(
            f"build_pyramid: spatial size {h}x{w} not divisible by total stride {factor}"
        )
    x = image
    for block in params.backbone.stem:
        x = T.relu(block.apply(x))
    levels = []
    for stage, rel in zip(params.backbone.stages, params.relation_levels):
        x = T.relu(stage.apply(x))
        f, r = relation_gate(x, rel, gate_ones=gate_ones)
        levels.append((f, r))
        x = f
    f_global = T.mean(levels[-1][0], axis=(2, 3))
    return ContextPyramid(levels=levels, f_global=f_global)

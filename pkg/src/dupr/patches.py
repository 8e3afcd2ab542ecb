"""RoI Align over pyramid levels and the pixel-wise (1x1 conv) patch heads."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .encoder import STRIDES, op_counts
from .geometry import Box, bilinear_matrix
from .tensor import ConfigError, ShapeError, Tensor


class DegenerateRoIError(ValueError):
    """The RoI has zero width or height."""


def axis_weights(lo: float, hi: float, S: int, size: int, sampling_ratio: int) -> np.ndarray:
    """S x size matrix; row i averages bilinear weights of bin i's sample points.

    Samples sit at regular sub-bin centers; ``sampling_ratio=0`` uses
    ``ceil(bin length)`` samples.
    """
    bin_len = (hi - lo) / S
    n = sampling_ratio if sampling_ratio > 0 else max(1, math.ceil(bin_len))
    offs = (np.arange(n) + 0.5) / n
    coords = lo + (np.arange(S)[:, None] + offs[None, :]) * bin_len
    return bilinear_matrix(coords.ravel(), size).reshape(S, n, size).mean(axis=1)


def roi_weights(box: Box, S: int, h: int, w: int, sampling_ratio: int) -> tuple[np.ndarray, np.ndarray]:
    if box.width <= 0 or box.height <= 0:
        raise DegenerateRoIError(f"zero-area RoI {box.as_tuple()}")
    return (axis_weights(box.y_min, box.y_max, S, h, sampling_ratio),
            axis_weights(box.x_min, box.x_max, S, w, sampling_ratio))


def roi_align(featmap: Tensor, boxes: Box | Sequence[Box], S: int, sampling_ratio: int = 0) -> Tensor:
    """Pool each image's box into an S x S grid.

    ``featmap`` is N x C x H x W with one box per image (or C x H x W with a
    single box). Boxes are in the feature map's own coordinates. Since the
    bins are axis-aligned, bilinear pooling separates: ``out = Wy F Wx^T``.
    """
    op_counts["roi_align"] += 1
    single = featmap.ndim == 3
    if single:
        featmap = T.reshape(featmap, (1,) + featmap.shape)
        boxes = [boxes]
    n, c, h, w = featmap.shape
    # a single map may be shared by many boxes
    if len(boxes) != n and n != 1:
        raise ShapeError(f"roi_align: {len(boxes)} boxes for {n} feature maps")
    nb = len(boxes)
    wy = np.empty((nb, S, h))
    wx = np.empty((nb, S, w))
    for k, b in enumerate(boxes):
        wy[k], wx[k] = roi_weights(b, S, h, w, sampling_ratio)
    f = featmap.data
    out = np.matmul(np.matmul(wy[:, None], f), np.swapaxes(wx, 1, 2)[:, None])

    def bw(g):
        gf = np.matmul(np.matmul(np.swapaxes(wy, 1, 2)[:, None], g), wx[:, None])
        return (gf.sum(axis=0, keepdims=True) if nb != n else gf,)

    res = T.make(out, (featmap,), bw)
    return T.reshape(res, (c, S, S)) if single else res


@dataclass
class PatchGrid:
    """Unit-norm patch embeddings, ``embeddings`` shaped N x S x S x D."""

    embeddings: Tensor
    level: int
    rois: list[Box]

    @property
    def S(self) -> int:
        return self.embeddings.shape[1]

    def flat(self) -> Tensor:
        n, s, _, d = self.embeddings.shape
        return T.reshape(self.embeddings, (n, s * s, d))


def project_patches(region: Tensor, params: Mapping[str, Tensor], m: int,
                    level: int | None = None, rois: list[Box] | None = None) -> PatchGrid:
    """Two 1x1 convs with ReLU between at every cell, then per-cell L2 normalize."""
    op_counts["project_patches"] += 1
    w1, w2 = params[f"patch{m}.w1"], params[f"patch{m}.w2"]
    if region.ndim == 3:
        region = T.reshape(region, (1,) + region.shape)
    if w1.shape[1] != region.shape[1]:
        raise ConfigError(f"patch head {m} expects {w1.shape[1]} channels, got {region.shape[1]}")
    d = w1.shape[0]
    h = T.conv2d(region, w1) + T.reshape(params[f"patch{m}.b1"], (1, d, 1, 1))
    h = T.relu(h)
    h = T.conv2d(h, w2) + T.reshape(params[f"patch{m}.b2"], (1, w2.shape[0], 1, 1))
    e = T.l2_normalize(T.transpose(h, (0, 2, 3, 1)), axis=-1)
    return PatchGrid(e, m if level is None else level, rois or [])


def extract_patch_grids(level_feat: Tensor, boxes: Sequence[Box], m: int, S: int,
                        params: Mapping[str, Tensor], sampling_ratio: int = 0) -> PatchGrid:
    """Image-frame boxes -> level-m frame -> RoI Align -> patch head."""
    stride = STRIDES[m]
    level_boxes = [b.to_level(stride, m) for b in boxes]
    region = roi_align(level_feat, level_boxes, S, sampling_ratio)
    return project_patches(region, params, m, rois=level_boxes)

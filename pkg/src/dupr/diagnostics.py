"""Read-only probes of a trained encoder: IoU vs. patch similarity, cross-view
affinity, dense patch matching and nearest-neighbour retrieval.

Every probe takes a :class:`FeatureEncoder` (or anything with the same
``strides`` / ``pyramid`` / ``cell_features`` surface) and never mutates its
parameters.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import stats

from . import tensor as T
from .encoder import STRIDES, EncoderConfig, forward_pyramid, full_image_roi_sizes, init_params
from .geometry import (VIEW1, VIEW2, AugmentConfig, Box, SamplingError, ViewTransform,
                       patch_correspondence, render_view, sample_covering_augmentation,
                       sample_roi_at_iou)
from .patches import project_patches, roi_align
from .scenes import Scene
from .tensor import ShapeError, Tensor

log = logging.getLogger(__name__)

DEFAULT_IOUS = tuple(round(float(v), 2) for v in np.linspace(0.05, 1.0, 20))


def _unit_cells(x: np.ndarray) -> np.ndarray:
    """L2-normalize the last axis; zero vectors stay zero."""
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return np.divide(x, n, out=np.zeros_like(x), where=n > 1e-12)


class FeatureEncoder:
    """Frozen query encoder used by the probes."""

    strides = STRIDES

    def __init__(self, cfg: EncoderConfig, params: Mapping[str, Tensor],
                 roi_sizes: Sequence[int] | None = None):
        self.cfg = cfg
        self.params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        # default grid sizes of the probes: the training RoI sizes when known
        self.roi_sizes = tuple(roi_sizes) if roi_sizes is not None else full_image_roi_sizes(64)

    @classmethod
    def from_checkpoint(cls, path) -> "FeatureEncoder":
        from .trainer import load_encoder

        cfg, params, train_cfg = load_encoder(path)
        return cls(cfg, params, train_cfg.roi_sizes)

    @classmethod
    def random(cls, cfg: EncoderConfig = EncoderConfig(), seed: int = 0) -> "FeatureEncoder":
        params = init_params(cfg, np.random.default_rng(seed))
        return cls(cfg, {k: Tensor(v.data) for k, v in params.items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].data.tobytes())
        return h.hexdigest()

    def pyramid(self, images) -> list[np.ndarray]:
        return [f.data for f in forward_pyramid(self.params, images, self.cfg)]

    def cell_features(self, cells: np.ndarray, m: int, raw: bool = False) -> np.ndarray:
        """N x C x h x w backbone cells -> N x h x w x D unit vectors."""
        if raw:
            return _unit_cells(cells.transpose(0, 2, 3, 1))
        return project_patches(Tensor(cells), self.params, m).embeddings.data


class IdentityEncoder:
    """Pixels as features at stride 1 on every level; a geometry reference."""

    strides = (1, 1, 1, 1)

    def checksum(self) -> str:
        return "identity"

    def pyramid(self, images) -> list[np.ndarray]:
        a = np.asarray(images, dtype=np.float64)
        if a.ndim == 3:
            a = a[None]
        return [np.ascontiguousarray(a.transpose(0, 3, 1, 2))] * 4

    def cell_features(self, cells: np.ndarray, m: int, raw: bool = False) -> np.ndarray:
        return _unit_cells(cells.transpose(0, 2, 3, 1))


def _grid_size(encoder, level: int, S: int | None) -> int:
    if S is not None:
        return S
    sizes = getattr(encoder, "roi_sizes", None)
    if sizes is None:
        raise ValueError("grid size S is required for encoders without training RoI sizes")
    return int(sizes[level])


def roi_features(encoder, fmap: np.ndarray, boxes: Sequence[Box], m: int, S: int,
                 raw: bool = False) -> np.ndarray:
    """Image-frame boxes on one 1 x C x H x W level map -> B x S x S x D unit cells."""
    stride = encoder.strides[m]
    level_boxes = [b.to_level(stride, m) for b in boxes]
    pooled = roi_align(Tensor(fmap[None] if fmap.ndim == 3 else fmap), level_boxes, S)
    return encoder.cell_features(pooled.data, m, raw)


def patch_similarity(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Mean over grid cells of the per-cell cosine; ``q``, ``k`` are ... x S x S x D."""
    return np.einsum("...ijd,...ijd->...", q, k) / (q.shape[-3] * q.shape[-2])


# ---------------------------------------------------------------- IoU curve

@dataclass
class IoUCurve:
    bins: list[tuple[float, float, float, int]]
    skipped: int = 0
    raw_features: bool = False

    @property
    def ious(self) -> np.ndarray:
        return np.array([b[0] for b in self.bins])

    @property
    def means(self) -> np.ndarray:
        return np.array([b[1] for b in self.bins])

    def spearman(self) -> float:
        return spearman(self.ious, self.means)

    def write_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iou", "mean_sim", "std", "n"])
            for iou, mean, std, n in self.bins:
                w.writerow([repr(iou), repr(mean), repr(std), n])
        return path


def spearman(x, y) -> float:
    rho = stats.spearmanr(x, y).statistic
    return float(rho)


def _main_box(scene: Scene) -> Box | None:
    if not scene.gt_boxes:
        return None
    return max(scene.gt_boxes, key=lambda b: b.area)


def iou_similarity_curve(encoder, scenes: Sequence[Scene], n_images: int | None = None,
                         ious: Sequence[float] = DEFAULT_IOUS, S: int | None = None, level: int = 2,
                         raw_features: bool = False, seed: int = 0) -> IoUCurve:
    """Similarity between the gt-box patch grid and RoIs drawn at target IoUs.

    Per image, the largest gt box gives ``q`` and one RoI per target IoU
    gives ``k``; each bin aggregates ``mean_ij q_ij . k_ij`` over images.
    """
    S = _grid_size(encoder, level, S)
    ious = [float(v) for v in ious]
    if any(b <= a for a, b in zip(ious, ious[1:])):
        raise ValueError(f"target IoUs must be strictly increasing: {ious}")
    rng = np.random.default_rng([seed, 23])
    per_bin: list[list[float]] = [[] for _ in ious]
    skipped = 0
    scenes = list(scenes)[:n_images]
    for scene in scenes:
        gt = _main_box(scene)
        if gt is None:
            continue
        boxes, slots = [gt], []
        for b, target in enumerate(ious):
            try:
                boxes.append(sample_roi_at_iou(rng, gt, target, scene.size))
                slots.append(b)
            except SamplingError:
                skipped += 1
        fmap = encoder.pyramid(scene.image)[level]
        feats = roi_features(encoder, fmap, boxes, level, S, raw_features)
        sims = patch_similarity(feats[:1], feats[1:])
        for b, s in zip(slots, sims):
            per_bin[b].append(float(s))
    if skipped:
        log.warning("skipped %d unreachable IoU targets", skipped)
    bins = [(t, float(np.mean(v)), float(np.std(v)), len(v))
            for t, v in zip(ious, per_bin) if v]
    return IoUCurve(bins, skipped, raw_features)


# ---------------------------------------------------------------- affinity

@dataclass
class AffinityMatrix:
    """``matrix[i, j]``: softmax over view1 cells ``i`` for view2 cell ``j``."""

    matrix: np.ndarray
    tau_vis: float
    accuracy: float
    mirrored: bool = False
    views: tuple[ViewTransform, ViewTransform] | None = field(default=None, repr=False)

    def write_csv(self, path) -> Path:
        path = Path(path)
        n = self.matrix.shape[0]
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["col", "row", "value"])
            for j in range(n):
                for i in range(n):
                    w.writerow([j, i, repr(float(self.matrix[i, j]))])
        return path


def column_softmax(sim: np.ndarray, tau: float) -> np.ndarray:
    z = sim / tau
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=0, keepdims=True)


def diagonal_hits(sim: np.ndarray, partner: np.ndarray, tie_tol: float = 1e-12) -> np.ndarray:
    """Per column ``j``: does row ``partner[j]`` attain the column maximum?

    Cells whose bins clamp onto the same samples carry identical features;
    their cosines differ only by rounding, so near-equal maxima count as ties.
    """
    best = sim.max(axis=0)
    return sim[partner, np.arange(sim.shape[1])] >= best - tie_tol


def affinity_matrix(encoder, image: np.ndarray, gt_box: Box, tau_vis: float = 0.001,
                    S: int | None = None, level: int = 2, rng: np.random.Generator | None = None,
                    augment: AugmentConfig | None = None, raw_features: bool = False,
                    views: tuple[ViewTransform, ViewTransform] | None = None) -> AffinityMatrix:
    """Cross-view softmax affinity between the gt box's patch grids in two views.

    Both views keep the gt box uncut. Accuracy counts view2 cells whose
    best view1 cell is the geometric (flip-mapped) partner.
    """
    S = _grid_size(encoder, level, S)
    if tau_vis <= 0:
        raise T.ConfigError(f"tau_vis must be positive, got {tau_vis}")
    size = (image.shape[1], image.shape[0])
    if views is None:
        rng = rng if rng is not None else np.random.default_rng(0)
        augment = augment if augment is not None else AugmentConfig().geometric_only()
        views = (sample_covering_augmentation(rng, size, gt_box, augment),
                 sample_covering_augmentation(rng, size, gt_box, augment))
    t1, t2 = views
    v1, v2 = render_view(image, t1), render_view(image, t2)
    if v1.shape != v2.shape:
        raise ShapeError(f"views differ in size: {v1.shape} vs {v2.shape}")
    fmaps = encoder.pyramid(np.stack([v1, v2]))[level]
    b1 = t1.box_to_view(gt_box, VIEW1)
    b2 = t2.box_to_view(gt_box, VIEW2)
    f1 = roi_features(encoder, fmaps[:1], [b1], level, S, raw_features)[0].reshape(S * S, -1)
    f2 = roi_features(encoder, fmaps[1:], [b2], level, S, raw_features)[0].reshape(S * S, -1)
    sim = f1 @ f2.T
    corr = patch_correspondence(t1, t2, S)
    # the flip map is an involution, so view2 cell j pairs with view1 cell idx[j]
    partner = corr.index()
    acc = float(np.mean(diagonal_hits(sim, partner)))
    return AffinityMatrix(column_softmax(sim, tau_vis), tau_vis, acc, corr.mirrored, views)


def affinity_accuracy(encoder, scenes: Sequence[Scene], n_pairs: int = 50, S: int | None = None,
                      level: int = 2, seed: int = 0, raw_features: bool = False,
                      augment: AugmentConfig | None = None) -> float:
    """Mean diagonal-argmax accuracy over ``n_pairs`` geometric-only view pairs."""
    rng = np.random.default_rng([seed, 29])
    usable = [s for s in scenes if s.gt_boxes]
    if not usable:
        raise ValueError("affinity needs scenes with gt boxes")
    accs = []
    for k in range(n_pairs):
        scene = usable[k % len(usable)]
        res = affinity_matrix(encoder, scene.image, _main_box(scene), S=S, level=level, rng=rng,
                              augment=augment, raw_features=raw_features)
        accs.append(res.accuracy)
    return float(np.mean(accs))


# ---------------------------------------------------------------- dense matching

@dataclass(frozen=True)
class Match:
    src_i: int
    src_j: int
    dst_i: int
    dst_j: int
    sim: float


def patch_matching(encoder, t1: ViewTransform, t2: ViewTransform, image: np.ndarray,
                   level: int = 2, raw_features: bool = False) -> list[Match]:
    """Best view2 cell for every level cell of view1 (ties -> smallest index)."""
    v1, v2 = render_view(image, t1), render_view(image, t2)
    f = encoder.pyramid(np.stack([v1, v2]))[level]
    e = encoder.cell_features(f, level, raw_features)
    h1, w1 = e.shape[1:3]
    a, b = e[0].reshape(h1 * w1, -1), e[1].reshape(h1 * w1, -1)
    sim = a @ b.T
    best = np.argmax(sim, axis=1)
    out = []
    for src, dst in enumerate(best):
        si, sj = divmod(src, w1)
        di, dj = divmod(int(dst), w1)
        out.append(Match(si, sj, di, dj, float(sim[src, dst])))
    return out


def geometric_match_fraction(matches: Sequence[Match], t1: ViewTransform, t2: ViewTransform,
                             stride: int, grid: tuple[int, int], tol: int = 1) -> float:
    """Fraction of matches within ``tol`` cells of the true view2 cell.

    Cells whose centers leave view2 have no ground truth and are excluded.
    """
    h, w = grid
    hits = total = 0
    for mt in matches:
        x, y = (mt.src_j + 0.5) * stride, (mt.src_i + 0.5) * stride
        ox, oy = t1.view_to_original(x, y)
        vx, vy = t2.original_to_view(ox, oy)
        gi, gj = int(np.floor(vy / stride)), int(np.floor(vx / stride))
        if not (0 <= gi < h and 0 <= gj < w):
            continue
        total += 1
        hits += abs(gi - mt.dst_i) <= tol and abs(gj - mt.dst_j) <= tol
    return hits / total if total else float("nan")


def write_matches_csv(matches: Sequence[Match], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src_i", "src_j", "dst_i", "dst_j", "sim"])
        for m in matches:
            w.writerow([m.src_i, m.src_j, m.dst_i, m.dst_j, repr(m.sim)])
    return path


# ---------------------------------------------------------------- retrieval

def global_descriptor(encoder, images, level: int = 3) -> np.ndarray:
    """Flattened level map per image, L2-normalized as one vector."""
    f = encoder.pyramid(images)[level]
    return _unit_cells(f.reshape(f.shape[0], -1))


def knn_retrieval(encoder, corpus, query: np.ndarray, k: int = 4, level: int = 3,
                  batch: int = 32) -> list[tuple[int, float]]:
    """Top-``k`` corpus indices by cosine similarity, best first, ties by index."""
    n = len(corpus)
    if n == 0:
        raise ValueError("empty corpus")
    if k > n:
        log.warning("k=%d exceeds corpus size %d; clamping", k, n)
        k = n
    q = global_descriptor(encoder, query, level)[0]
    scores = np.empty(n)
    for start in range(0, n, batch):
        imgs = [corpus[i] for i in range(start, min(n, start + batch))]
        if any(im.shape != query.shape for im in imgs):
            raise ShapeError(f"corpus images must match the query shape {query.shape}")
        scores[start:start + len(imgs)] = global_descriptor(encoder, np.stack(imgs), level) @ q
    order = np.lexsort((np.arange(n), -scores))[:k]
    return [(int(i), float(scores[i])) for i in order]


def write_knn_csv(hits: Sequence[tuple[int, float]], path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "index", "score"])
        for r, (i, s) in enumerate(hits, 1):
            w.writerow([r, i, repr(s)])
    return path


# ---------------------------------------------------------------- figures

def save_iou_svg(curves: Mapping[str, IoUCurve], path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 3))
    for label, c in curves.items():
        ax.plot(c.ious, c.means, "o-", ms=3, label=label)
    ax.set_xlabel("IoU with gt box")
    ax.set_ylabel("mean patch cosine")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)


def save_affinity_svg(aff: AffinityMatrix, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4, 4))
    ax.imshow(aff.matrix, cmap="viridis", interpolation="nearest")
    ax.set_title(f"diagonal accuracy {aff.accuracy:.2f}")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return Path(path)

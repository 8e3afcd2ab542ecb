"""Augmented views with exact coordinate bookkeeping.

Coordinates are continuous pixel coordinates: pixel ``(row r, col c)`` covers
``[c, c+1) x [r, r+1)`` and its center sits at ``(c+0.5, r+0.5)``.  A
horizontal flip of a view of width ``W`` maps ``x -> W - x``, which on pixel
indices reads ``c -> W-1-c``.  Bilinear sampling (view rendering and RoI
Align alike) evaluates a continuous point ``p`` at array index ``p - 0.5``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .tensor import ConfigError, UsageError

ORIGINAL = "original"
VIEW1 = "view1"
VIEW2 = "view2"


def level_frame(m: int) -> str:
    return f"level{m}"


class SamplingError(RuntimeError):
    """A randomized search exhausted its trial budget."""


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    frame: str = ORIGINAL

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise ValueError(f"inverted box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def scaled(self, factor: float, frame: str) -> "Box":
        return Box(self.x_min * factor, self.y_min * factor,
                   self.x_max * factor, self.y_max * factor, frame)

    def to_level(self, stride: int, m: int) -> "Box":
        """Image-frame box expressed on the stride-``stride`` feature map ``m``."""
        return self.scaled(1.0 / stride, level_frame(m))

    def intersect(self, other: "Box") -> "Box | None":
        _same_frame(self, other)
        x0, y0 = max(self.x_min, other.x_min), max(self.y_min, other.y_min)
        x1, y1 = min(self.x_max, other.x_max), min(self.y_max, other.y_max)
        if x1 <= x0 or y1 <= y0:
            return None
        return Box(x0, y0, x1, y1, self.frame)


def _same_frame(a: Box, b: Box) -> None:
    if a.frame != b.frame:
        raise UsageError(f"boxes live in different frames: {a.frame} vs {b.frame}")


def box_iou(a: Box, b: Box) -> float:
    _same_frame(a, b)
    inter = a.intersect(b)
    if inter is None:
        return 0.0
    union = a.area + b.area - inter.area
    return inter.area / union if union > 0 else 0.0


# ---------------------------------------------------------------- transforms

@dataclass(frozen=True)
class Photometric:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0
    grayscale: bool = False
    blur_sigma: float = 0.0

    @property
    def is_identity(self) -> bool:
        return self == Photometric()


@dataclass(frozen=True)
class ViewTransform:
    crop: Box
    out_size: tuple[int, int]  # (W, H)
    hflip: bool = False
    photometric: Photometric = field(default_factory=Photometric)

    @property
    def scale_x(self) -> float:
        return self.out_size[0] / self.crop.width

    @property
    def scale_y(self) -> float:
        return self.out_size[1] / self.crop.height

    def view_to_original(self, x, y):
        x = np.asarray(x, dtype=float)
        if self.hflip:
            x = self.out_size[0] - x
        return (self.crop.x_min + x / self.scale_x,
                self.crop.y_min + np.asarray(y, dtype=float) / self.scale_y)

    def original_to_view(self, x, y):
        vx = (np.asarray(x, dtype=float) - self.crop.x_min) * self.scale_x
        vy = (np.asarray(y, dtype=float) - self.crop.y_min) * self.scale_y
        if self.hflip:
            vx = self.out_size[0] - vx
        return vx, vy

    def box_to_view(self, box: Box, frame: str) -> Box:
        if box.frame != ORIGINAL:
            raise UsageError(f"box_to_view expects an original-frame box, got {box.frame}")
        (xa, xb), (ya, yb) = self.original_to_view([box.x_min, box.x_max], [box.y_min, box.y_max])
        return Box(min(xa, xb), ya, max(xa, xb), yb, frame)

    def box_to_original(self, box: Box) -> Box:
        (xa, xb), (ya, yb) = self.view_to_original([box.x_min, box.x_max], [box.y_min, box.y_max])
        return Box(min(xa, xb), ya, max(xa, xb), yb, ORIGINAL)

    def geometric(self) -> "ViewTransform":
        return replace(self, photometric=Photometric())


def identity_transform(source_size: tuple[int, int]) -> ViewTransform:
    w, h = source_size
    return ViewTransform(Box(0.0, 0.0, float(w), float(h)), (w, h))


@dataclass(frozen=True)
class AugmentConfig:
    out_size: int = 64
    scale: tuple[float, float] = (0.2, 1.0)
    ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.1, 0.6)
    min_overlap: float = 0.01

    def validate(self) -> None:
        lo, hi = self.scale
        if not (0 < lo <= hi <= 1):
            raise ConfigError(f"crop scale range must lie in (0, 1], got {self.scale}")
        if not (0 < self.ratio[0] <= self.ratio[1]):
            raise ConfigError(f"aspect ratio range invalid: {self.ratio}")
        for name in ("flip_prob", "jitter_prob", "grayscale_prob", "blur_prob"):
            p = getattr(self, name)
            if not 0 <= p <= 1:
                raise ConfigError(f"{name} must be a probability, got {p}")

    def geometric_only(self) -> "AugmentConfig":
        return replace(self, jitter_prob=0.0, grayscale_prob=0.0, blur_prob=0.0)


def sample_crop(rng: np.random.Generator, source_size: tuple[int, int],
                scale: tuple[float, float], ratio: tuple[float, float]) -> Box:
    """Random-resized-crop rectangle, continuous coordinates, fully inside the source."""
    w, h = source_size
    area = float(w * h)
    log_r = (math.log(ratio[0]), math.log(ratio[1]))
    for _ in range(10):
        target = area * rng.uniform(scale[0], scale[1])
        r = math.exp(rng.uniform(*log_r))
        cw, ch = math.sqrt(target * r), math.sqrt(target / r)
        if cw <= w and ch <= h:
            x0 = rng.uniform(0.0, w - cw)
            y0 = rng.uniform(0.0, h - ch)
            return Box(x0, y0, x0 + cw, y0 + ch)
    # fallback: largest centered crop within the ratio bounds
    r = w / h
    if r < ratio[0]:
        cw, ch = float(w), w / ratio[0]
    elif r > ratio[1]:
        cw, ch = h * ratio[1], float(h)
    else:
        cw, ch = float(w), float(h)
    x0, y0 = (w - cw) / 2, (h - ch) / 2
    return Box(x0, y0, x0 + cw, y0 + ch)


def sample_photometric(rng: np.random.Generator, cfg: AugmentConfig) -> Photometric:
    b = c = s = 1.0
    hue = 0.0
    if rng.random() < cfg.jitter_prob:
        b = rng.uniform(max(0.0, 1 - cfg.brightness), 1 + cfg.brightness)
        c = rng.uniform(max(0.0, 1 - cfg.contrast), 1 + cfg.contrast)
        s = rng.uniform(max(0.0, 1 - cfg.saturation), 1 + cfg.saturation)
        hue = rng.uniform(-cfg.hue, cfg.hue)
    gray = bool(rng.random() < cfg.grayscale_prob)
    sigma = rng.uniform(*cfg.blur_sigma) if rng.random() < cfg.blur_prob else 0.0
    return Photometric(b, c, s, hue, gray, sigma)


def sample_augmentation(rng: np.random.Generator, source_size: tuple[int, int],
                        config: AugmentConfig = AugmentConfig()) -> ViewTransform:
    config.validate()
    crop = sample_crop(rng, source_size, config.scale, config.ratio)
    hflip = bool(rng.random() < config.flip_prob)
    photo = sample_photometric(rng, config)
    return ViewTransform(crop, (config.out_size, config.out_size), hflip, photo)


def sample_covering_augmentation(rng: np.random.Generator, source_size: tuple[int, int],
                                 keep: Box, config: AugmentConfig = AugmentConfig(),
                                 max_tries: int = 100) -> ViewTransform:
    """Like :func:`sample_augmentation` but the crop must contain ``keep`` entirely.

    Falls back to the full image after ``max_tries`` rejections.
    """
    for _ in range(max_tries):
        t = sample_augmentation(rng, source_size, config)
        c = t.crop
        if (c.x_min <= keep.x_min and c.y_min <= keep.y_min
                and c.x_max >= keep.x_max and c.y_max >= keep.y_max):
            return t
    full = identity_transform(source_size)
    return replace(t, crop=full.crop)


# ---------------------------------------------------------------- rendering

def bilinear_matrix(coords: np.ndarray, size: int) -> np.ndarray:
    """Rows of 1-D bilinear weights for sampling continuous ``coords`` on ``size`` cells.

    Half-pixel convention: continuous ``p`` reads array index ``p - 0.5``.
    Indices are clamped to ``[0, size-1]``; points more than one cell outside
    contribute nothing.
    """
    coords = np.asarray(coords, dtype=float)
    idx = coords - 0.5
    out = np.zeros((coords.size, size))
    valid = (idx >= -1.0) & (idx <= size)
    idx = np.clip(idx, 0.0, size - 1)
    lo = np.floor(idx).astype(int)
    hi = np.minimum(lo + 1, size - 1)
    frac = idx - lo
    rows = np.arange(coords.size)
    np.add.at(out, (rows, lo), np.where(valid, 1.0 - frac, 0.0))
    np.add.at(out, (rows, hi), np.where(valid, frac, 0.0))
    return out


def _luma(img: np.ndarray) -> np.ndarray:
    return img[..., 0] * 0.299 + img[..., 1] * 0.587 + img[..., 2] * 0.114


def _rotate_hue(img: np.ndarray, shift: float) -> np.ndarray:
    to_yiq = np.array([[0.299, 0.587, 0.114],
                       [0.596, -0.274, -0.322],
                       [0.211, -0.523, 0.312]])
    a = 2 * math.pi * shift
    rot = np.array([[1, 0, 0], [0, math.cos(a), -math.sin(a)], [0, math.sin(a), math.cos(a)]])
    m = np.linalg.inv(to_yiq) @ rot @ to_yiq
    return img @ m.T


def apply_photometric(img: np.ndarray, p: Photometric) -> np.ndarray:
    if p.brightness != 1.0:
        img = img * p.brightness
    if p.contrast != 1.0:
        m = _luma(img).mean()
        img = (img - m) * p.contrast + m
    if p.saturation != 1.0:
        g = _luma(img)[..., None]
        img = (img - g) * p.saturation + g
    if p.hue != 0.0:
        img = _rotate_hue(img, p.hue)
    if p.grayscale:
        img = np.repeat(_luma(img)[..., None], 3, axis=-1)
    if p.blur_sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(p.blur_sigma, p.blur_sigma, 0), mode="reflect")
    return img


def render_view(image: np.ndarray, t: ViewTransform) -> np.ndarray:
    """Crop, bilinear-resize, optionally flip, then apply photometrics; HxWx3 in [0,1]."""
    if image.size == 0:
        raise ValueError("render_view: empty image")
    h, w = image.shape[:2]
    ow, oh = t.out_size
    # pixel centers of the unflipped view, mapped into the source
    xs = t.crop.x_min + (np.arange(ow) + 0.5) / t.scale_x
    ys = t.crop.y_min + (np.arange(oh) + 0.5) / t.scale_y
    wy, wx = bilinear_matrix(ys, h), bilinear_matrix(xs, w)
    out = np.einsum("iy,yxc,jx->ijc", wy, image, wx, optimize=True)
    if t.hflip:
        out = out[:, ::-1]
    if not t.photometric.is_identity:
        out = apply_photometric(out, t.photometric)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- pseudo identities

def intersection_boxes(t1: ViewTransform, t2: ViewTransform,
                       min_overlap: float = 0.01) -> tuple[Box, Box] | None:
    """The shared crop region expressed in each view, or None if it is too small.

    ``min_overlap`` is relative to the smaller crop's area.
    """
    inter = t1.crop.intersect(t2.crop)
    if inter is None or inter.area < min_overlap * min(t1.crop.area, t2.crop.area):
        return None
    return t1.box_to_view(inter, VIEW1), t2.box_to_view(inter, VIEW2)


@dataclass(frozen=True)
class PatchCorrespondence:
    """Cell ``(i, j)`` of view1's S x S grid matches ``(i, j')`` of view2's grid."""

    S: int
    mirrored: bool

    def map(self, i: int, j: int) -> tuple[int, int]:
        return (i, self.S - 1 - j) if self.mirrored else (i, j)

    @property
    def pairs(self) -> list[tuple[tuple[int, int], tuple[int, int]]]:
        return [((i, j), self.map(i, j)) for i in range(self.S) for j in range(self.S)]

    def index(self) -> np.ndarray:
        """Linear (row-major) view2 index for each view1 cell."""
        i, j = np.divmod(np.arange(self.S * self.S), self.S)
        if self.mirrored:
            j = self.S - 1 - j
        return i * self.S + j


def patch_correspondence(t1: ViewTransform, t2: ViewTransform, S: int) -> PatchCorrespondence:
    return PatchCorrespondence(S, t1.hflip != t2.hflip)


# ---------------------------------------------------------------- RoI sampling for diagnostics

def _iou_arrays(gt: Box, boxes: np.ndarray) -> np.ndarray:
    ix = np.clip(np.minimum(boxes[:, 2], gt.x_max) - np.maximum(boxes[:, 0], gt.x_min), 0, None)
    iy = np.clip(np.minimum(boxes[:, 3], gt.y_max) - np.maximum(boxes[:, 1], gt.y_min), 0, None)
    inter = ix * iy
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    return inter / (areas + gt.area - inter)


def sample_roi_at_iou(rng: np.random.Generator, gt: Box, target_iou: float,
                      image_bounds: tuple[float, float], tol: float = 0.05,
                      max_trials: int = 10_000, batch: int = 500) -> Box:
    """Rejection-sample a box inside ``image_bounds`` (W, H) whose IoU with ``gt``
    is within ``tol`` of ``target_iou``.

    Candidates jitter the gt center and log-size by an amount that grows as
    the target IoU drops.
    """
    if not 0.0 <= target_iou <= 1.0:
        raise ValueError(f"target IoU must lie in [0, 1], got {target_iou}")
    if target_iou == 1.0:
        return gt
    bw, bh = image_bounds
    cx, cy = (gt.x_min + gt.x_max) / 2, (gt.y_min + gt.y_max) / 2
    tried = 0
    while tried < max_trials:
        n = min(batch, max_trials - tried)
        tried += n
        spread = (1.0 - target_iou) * rng.uniform(0.2, 2.0, n)
        w = gt.width * np.exp(rng.normal(0.0, 0.5, n) * spread)
        h = gt.height * np.exp(rng.normal(0.0, 0.5, n) * spread)
        w, h = np.minimum(w, bw), np.minimum(h, bh)
        x = cx + rng.normal(0.0, 1.0, n) * spread * gt.width - w / 2
        y = cy + rng.normal(0.0, 1.0, n) * spread * gt.height - h / 2
        x, y = np.clip(x, 0, bw - w), np.clip(y, 0, bh - h)
        # a quarter of candidates are uniform boxes, for targets far from gt
        u = rng.random(n) < 0.25
        ux, uy = np.sort(rng.uniform(0, bw, (n, 2)), axis=1), np.sort(rng.uniform(0, bh, (n, 2)), axis=1)
        x, w = np.where(u, ux[:, 0], x), np.where(u, ux[:, 1] - ux[:, 0], w)
        y, h = np.where(u, uy[:, 0], y), np.where(u, uy[:, 1] - uy[:, 0], h)
        cands = np.stack([x, y, x + w, y + h], axis=1)
        ok = (w > 1e-6) & (h > 1e-6)
        if target_iou == 0.0:
            hit = ok & (_iou_arrays(gt, cands) == 0.0)
        else:
            hit = ok & (np.abs(_iou_arrays(gt, cands) - target_iou) <= tol)
        if hit.any():
            k = int(np.argmax(hit))
            return Box(*map(float, cands[k]), frame=gt.frame)
    raise SamplingError(f"no RoI with IoU {target_iou:.2f}±{tol} after {max_trials} trials")

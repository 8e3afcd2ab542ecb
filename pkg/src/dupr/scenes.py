"""Procedural scenes with ground-truth boxes, and a PPM/PNG folder loader."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Box

log = logging.getLogger(__name__)

SHAPES = ("disk", "square", "triangle", "ring")


@dataclass
class Scene:
    image: np.ndarray  # H x W x 3, float in [0, 1]
    gt_boxes: list[Box]
    labels: list[int]

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[0]


@dataclass(frozen=True)
class ObjectSpec:
    """A fully specified object, for deterministic scene construction."""

    shape: str
    cx: float
    cy: float
    radius: float
    color: tuple[float, float, float] = (1.0, 0.2, 0.2)


@dataclass(frozen=True)
class SceneConfig:
    size: int = 64
    min_objects: int = 1
    max_objects: int = 3
    min_radius: float = 5.0
    max_radius: float = 14.0
    shapes: tuple[str, ...] = SHAPES
    noise: float = 0.06
    objects: tuple[ObjectSpec, ...] | None = field(default=None)


def shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the shape."""
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xx - cx, yy - cy
    if shape == "disk":
        return dx * dx + dy * dy <= r * r
    if shape == "square":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r)
    if shape == "ring":
        d2 = dx * dx + dy * dy
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if shape == "triangle":
        # apex up, base at cy + r
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= r * t)
    raise ValueError(f"unknown shape {shape!r}")


def mask_box(mask: np.ndarray) -> Box | None:
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        return None
    return Box(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    c0, c1, c2 = rng.uniform(0.15, 0.85, (3, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * xx + np.sin(angle) * yy
    ramp = (ramp - ramp.min()) / max(np.ptp(ramp), 1e-9)
    freq = rng.uniform(2, 6)
    wave = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (xx * np.sin(angle) - yy * np.cos(angle)))
    img = (c0 * (1 - ramp[..., None]) + c1 * ramp[..., None]) * 0.8 + 0.2 * c2 * wave[..., None]
    img = img + rng.normal(0.0, noise, img.shape)
    return img


def _render(objects, rng, cfg: SceneConfig) -> Scene:
    size = cfg.size
    img = _background(rng, size, cfg.noise)
    boxes, labels = [], []
    for ob in objects:
        mask = shape_mask(ob.shape, ob.cx, ob.cy, ob.radius, size)
        box = mask_box(mask)
        if box is None:
            continue
        shade = 0.85 + 0.15 * np.cos((np.mgrid[0:size, 0:size][1] - ob.cx) / max(ob.radius, 1) * 2.0)
        img[mask] = np.asarray(ob.color) * shade[mask][:, None]
        boxes.append(box)
        labels.append(SHAPES.index(ob.shape))
    return Scene(np.clip(img, 0.0, 1.0), boxes, labels)


def generate_scene(rng: np.random.Generator, config: SceneConfig = SceneConfig()) -> Scene:
    """Textured background with 1-3 non-overlapping shapes and their tight boxes."""
    if config.objects is not None:
        return _render(config.objects, rng, config)
    size = config.size
    want = int(rng.integers(config.min_objects, config.max_objects + 1))
    while True:
        placed: list[ObjectSpec] = []
        for _ in range(100):
            if len(placed) == want:
                break
            r = rng.uniform(config.min_radius, config.max_radius)
            cx, cy = rng.uniform(r + 1, size - r - 1, 2)
            # keep bounding squares apart so masks never touch
            if any(abs(cx - o.cx) < r + o.radius + 2 and abs(cy - o.cy) < r + o.radius + 2
                   for o in placed):
                continue
            shape = config.shapes[int(rng.integers(len(config.shapes)))]
            color = tuple(float(v) for v in rng.uniform(0.0, 1.0, 3))
            placed.append(ObjectSpec(shape, float(cx), float(cy), float(r), color))
        if len(placed) == want or want == 1:
            break
        log.warning("could not place %d objects after 100 tries, reducing to %d", want, want - 1)
        want -= 1
    return _render(placed, rng, config)


def synthetic_scenes(n: int, seed: int, config: SceneConfig = SceneConfig()) -> list[Scene]:
    """``n`` scenes; scene ``i`` depends only on ``(seed, i)``."""
    return [generate_scene(np.random.default_rng([seed, i]), config) for i in range(n)]


# ---------------------------------------------------------------- files

class DecodeError(ValueError):
    pass


def _ppm_header(buf: bytes) -> tuple[int, int, int, int]:
    """Parse a P6 header; returns (width, height, maxval, data offset)."""
    if buf[:2] != b"P6":
        raise DecodeError("not a P6 PPM (bad magic at byte offset 0)")
    pos, tokens = 2, []
    while len(tokens) < 3:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise DecodeError(f"malformed PPM header at byte offset {pos}")
        tokens.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise DecodeError(f"truncated PPM header at byte offset {pos}")
    w, h, maxval = tokens
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise DecodeError(f"invalid PPM dimensions/maxval {w}x{h}/{maxval}")
    return w, h, maxval, pos + 1


def decode_ppm(buf: bytes) -> np.ndarray:
    w, h, maxval, off = _ppm_header(buf)
    depth = 1 if maxval < 256 else 2
    need = w * h * 3 * depth
    if len(buf) - off < need:
        raise DecodeError(f"truncated PPM pixel data: expected {need} bytes from offset {off}, "
                          f"file ends at byte offset {len(buf)}")
    dtype = np.uint8 if depth == 1 else np.dtype(">u2")
    raw = np.frombuffer(buf, dtype=dtype, count=w * h * 3, offset=off)
    return raw.reshape(h, w, 3).astype(np.float64) / maxval


def encode_ppm(image: np.ndarray) -> bytes:
    h, w = image.shape[:2]
    px = np.round(np.clip(image, 0.0, 1.0) * 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode() + px.tobytes()


def read_image(path: Path) -> np.ndarray:
    path = Path(path)
    try:
        if path.suffix.lower() == ".ppm":
            return decode_ppm(path.read_bytes())
        from PIL import Image

        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    except DecodeError as exc:
        raise DecodeError(f"{path.name}: {exc}") from None
    except OSError as exc:
        raise DecodeError(f"{path.name}: {exc}") from None


class Corpus:
    """Lazily decoded image folder in lexicographic filename order."""

    SUFFIXES = (".ppm", ".png")

    def __init__(self, path):
        self.root = Path(path)
        if not self.root.is_dir():
            raise FileNotFoundError(f"corpus directory not found: {self.root}")
        self.files = sorted(p for p in self.root.iterdir() if p.suffix.lower() in self.SUFFIXES)
        if not self.files:
            raise FileNotFoundError(f"no .ppm/.png images in {self.root}")

    def __len__(self) -> int:
        return len(self.files)

    def __getitem__(self, i: int) -> np.ndarray:
        return read_image(self.files[i])

    def scene(self, i: int) -> Scene:
        """Image plus sidecar boxes/labels when a ``.json`` sidecar exists."""
        img = self[i]
        side = self.files[i].with_suffix(".json")
        boxes, labels = [], []
        if side.exists():
            meta = json.loads(side.read_text())
            boxes = [Box(*map(float, b)) for b in meta.get("boxes", [])]
            labels = list(meta.get("labels", []))
        return Scene(img, boxes, labels)


def load_corpus(path) -> Corpus:
    return Corpus(path)


def write_scene(scene: Scene, out_dir: Path, stem: str) -> Path:
    out_dir = Path(out_dir)
    img_path = out_dir / f"{stem}.ppm"
    img_path.write_bytes(encode_ppm(scene.image))
    meta = {"boxes": [list(b.as_tuple()) for b in scene.gt_boxes], "labels": scene.labels}
    (out_dir / f"{stem}.json").write_text(json.dumps(meta))
    return img_path


def generate_dataset(out_dir, count: int, seed: int, size: int = 64) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = SceneConfig(size=size)
    return [write_scene(generate_scene(np.random.default_rng([seed, i]), cfg), out_dir, f"scene_{i:05d}")
            for i in range(count)]

"""Pretraining loop: two tracked views per image, query/key encoding, the
multi-level loss, SGD + EMA updates, bank maintenance, metrics and checkpoints."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .contrastive import (LossWeights, MemoryBank, enqueue_image, enqueue_patches,
                          image_loss_level, patch_loss_level, total_loss)
from .encoder import (CheckpointError, EncoderConfig, EncoderPair, forward_pyramid,
                      full_image_roi_sizes, init_params, project_image, read_tensor_file,
                      write_tensor_file)
from .geometry import (AugmentConfig, ViewTransform, intersection_boxes,
                       patch_correspondence, render_view, sample_augmentation)
from .optim import cosine_lr, init_momentum, sgd_step
from .patches import extract_patch_grids
from .scenes import SceneConfig, load_corpus, synthetic_scenes

log = logging.getLogger(__name__)

METRIC_FIELDS = (["step", "lr", "loss_total"] + [f"loss_img_{m}" for m in range(4)]
                 + [f"loss_patch_{m}" for m in range(4)]
                 + ["bank_fill_img", "bank_fill_patch", "embed_std"])

# fields that do not change the trajectory and so stay out of the resume hash
_VOLATILE = ("out_dir", "checkpoint_every", "workers")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    steps: int = 2000
    batch_size: int = 16
    base_lr: float = 0.06 * 16 / 256
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau: float = 0.2
    alpha: tuple[float, ...] = (0.1, 0.4, 0.7, 1.0)
    beta: tuple[float, ...] = (0.0, 0.0, 1.0, 1.0)
    roi_sizes: tuple[int, ...] = full_image_roi_sizes(64)
    sampling_ratio: int = 0
    bank_size: int = 64
    bank_init: str = "empty"
    patch_reduction: str = "mean"
    patch_enqueue: int = 4
    m_coef: float = 0.99
    image_size: int = 64
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "count": 512, "seed": 1})
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    out_dir: str = "runs/default"
    checkpoint_every: int = 500
    workers: int = 1

    def validate(self) -> None:
        if len(self.alpha) != 4 or len(self.beta) != 4 or len(self.roi_sizes) != 4:
            raise T.ConfigError("alpha, beta and roi_sizes need exactly 4 entries")
        if self.tau <= 0 or self.batch_size < 1 or self.steps < 0 or self.bank_size < 1:
            raise T.ConfigError("tau, batch_size and bank_size must be positive, steps >= 0")
        if self.bank_init not in ("empty", "random"):
            raise T.ConfigError(f"bank_init must be 'empty' or 'random', got {self.bank_init!r}")
        if self.patch_reduction not in ("sum", "mean"):
            raise T.ConfigError(f"patch_reduction must be 'sum' or 'mean', got {self.patch_reduction!r}")
        if not 0.0 <= self.m_coef <= 1.0:
            raise T.ConfigError(f"m_coef must be in [0, 1], got {self.m_coef}")
        self.encoder.validate()
        self.augment.validate()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(tuple(self.alpha), tuple(self.beta), self.tau)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("alpha", "beta", "roi_sizes"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise T.ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "encoder" in d:
            d["encoder"] = EncoderConfig.from_dict({**asdict(EncoderConfig()), **d["encoder"]})
        if "augment" in d:
            aug = {**asdict(AugmentConfig()), **d["augment"]}
            for k in ("scale", "ratio", "blur_sigma"):
                aug[k] = tuple(aug[k])
            d["augment"] = AugmentConfig(**aug)
        for k in ("alpha", "beta"):
            if k in d:
                d[k] = tuple(float(v) for v in d[k])
        if "roi_sizes" in d:
            d["roi_sizes"] = tuple(int(v) for v in d["roi_sizes"])
        return cls(**d)

    def config_hash(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _VOLATILE}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def load_config(path) -> TrainConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        raw = tomllib.loads(text)
    else:
        raw = json.loads(text)
    return TrainConfig.from_dict(raw)


# ---------------------------------------------------------------- state

@dataclass
class TrainState:
    config: TrainConfig
    pair: EncoderPair
    buffers: dict[str, np.ndarray]
    banks: dict[tuple[str, int], MemoryBank]
    rng: np.random.Generator
    step: int = 0


def make_banks(config: TrainConfig) -> dict[tuple[str, int], MemoryBank]:
    enc = config.encoder
    banks = {}
    for m in range(4):
        if config.alpha[m] > 0:
            banks[("image", m)] = MemoryBank(config.bank_size, enc.embed_dim(m), "image", m)
        if config.beta[m] > 0:
            banks[("patch", m)] = MemoryBank(config.bank_size, enc.dim, "patch", m)
    return banks


def init_state(config: TrainConfig) -> TrainState:
    config.validate()
    rng = np.random.default_rng([config.seed, 0])
    pair = EncoderPair(init_params(config.encoder, rng), config.m_coef)
    banks = make_banks(config)
    if config.bank_init == "random":
        for bank in banks.values():
            bank.fill_random(rng)
    return TrainState(config, pair, init_momentum(active_params(pair.query, config)), banks, rng)


def active_params(params: dict[str, T.Tensor], config: TrainConfig) -> dict[str, T.Tensor]:
    """Parameters that receive gradient under the loss weights (backbone + used heads)."""
    used = [m for m in range(4) if config.alpha[m] > 0 or config.beta[m] > 0]
    top = max(used) if used else -1
    out = {}
    for name, p in params.items():
        head, _, _ = name.partition(".")
        if head.startswith("img"):
            keep = config.alpha[int(head[3:])] > 0
        elif head.startswith("patch"):
            keep = config.beta[int(head[5:])] > 0
        elif head != "stem":
            keep = int(head[1:]) <= top
        else:
            keep = top >= 0
        if keep:
            out[name] = p
    return out


# ---------------------------------------------------------------- data

def load_images(config: TrainConfig) -> list[np.ndarray]:
    ds = config.dataset
    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        scenes = synthetic_scenes(int(ds.get("count", 512)), int(ds.get("seed", 1)),
                                  SceneConfig(size=config.image_size))
        return [s.image for s in scenes]
    if kind == "folder":
        corpus = load_corpus(ds["path"])
        return [corpus[i] for i in range(len(corpus))]
    raise T.ConfigError(f"unknown dataset kind {kind!r}")


def batch_indices(config: TrainConfig, step: int, n_images: int) -> list[int]:
    """Image indices for ``step``: epoch-wise permutations seeded by (seed, epoch)."""
    out, perms = [], {}
    for k in range(config.batch_size):
        flat = step * config.batch_size + k
        epoch, pos = divmod(flat, n_images)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([config.seed, 7, epoch]).permutation(n_images)
        out.append(int(perms[epoch][pos]))
    return out


@dataclass
class ViewPair:
    view1: np.ndarray
    view2: np.ndarray
    t1: ViewTransform
    t2: ViewTransform
    box1: object
    box2: object


def make_view_pair(image: np.ndarray, rng: np.random.Generator, aug: AugmentConfig,
                   retries: int = 8) -> ViewPair:
    """Two views with a usable overlap; view2 is resampled up to ``retries`` times,
    then falls back to view1's crop."""
    size = (image.shape[1], image.shape[0])
    t1 = sample_augmentation(rng, size, aug)
    for _ in range(retries + 1):
        t2 = sample_augmentation(rng, size, aug)
        boxes = intersection_boxes(t1, t2, aug.min_overlap)
        if boxes is not None:
            break
    else:
        t2 = replace(t2, crop=t1.crop)
        boxes = intersection_boxes(t1, t2, aug.min_overlap)
    return ViewPair(render_view(image, t1), render_view(image, t2), t1, t2, *boxes)


def assemble_batch(state: TrainState, images: Sequence[np.ndarray], step: int,
                   indices: Sequence[int]) -> list[ViewPair]:
    cfg = state.config

    def one(k):
        rng = np.random.default_rng([cfg.seed, 11, step, k])
        return make_view_pair(images[indices[k]], rng, cfg.augment)

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            return list(ex.map(one, range(len(indices))))
    return [one(k) for k in range(len(indices))]


# ---------------------------------------------------------------- step

@dataclass
class StepMetrics:
    step: int
    lr: float
    total: float
    image: list[float | None]
    patch: list[float | None]
    bank_fill_img: int
    bank_fill_patch: int
    embed_std: float | None
    collapse: bool = False

    def row(self) -> list[str]:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ([str(self.step), fmt(self.lr), fmt(self.total)] + [fmt(v) for v in self.image]
                + [fmt(v) for v in self.patch]
                + [str(self.bank_fill_img), str(self.bank_fill_patch), fmt(self.embed_std)])


def _stack_views(pairs: Sequence[ViewPair]) -> tuple[np.ndarray, np.ndarray]:
    v1 = np.stack([p.view1 for p in pairs]).transpose(0, 3, 1, 2)
    v2 = np.stack([p.view2 for p in pairs]).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(v1), np.ascontiguousarray(v2)


def _check_finite(state: TrainState, loss: T.Tensor, what: str):
    if not math.isfinite(loss.item()):
        cfg = state.config
        dump = Path(cfg.out_dir) / f"diverged_step{state.step:06d}.dupr"
        try:
            dump.parent.mkdir(parents=True, exist_ok=True)
            save_checkpoint(state, dump)
        except OSError:
            dump = None
        raise TrainingDiverged(f"{what} is {loss.item()} at step {state.step} "
                               f"(batch seed [{cfg.seed}, 11, {state.step}, k]); state dump: {dump}")


@dataclass
class LossParts:
    total: T.Tensor
    image: list[T.Tensor | None]
    patch: list[T.Tensor | None]
    image_keys: dict[int, T.Tensor]
    patch_keys: dict[int, object]
    embed: np.ndarray | None


def step_loss(cfg: TrainConfig, pair: EncoderPair, banks: dict[tuple[str, int], MemoryBank],
              pairs: Sequence[ViewPair]) -> LossParts:
    """The multi-level loss for one batch of view pairs; levels with zero weight are skipped."""
    enc, w = cfg.encoder, cfg.weights
    v1, v2 = _stack_views(pairs)
    q_levels = forward_pyramid(pair.query, v1, enc)
    k_levels = forward_pyramid(pair.key, v2, enc)

    img_losses: list[T.Tensor | None] = [None] * 4
    patch_losses: list[T.Tensor | None] = [None] * 4
    img_keys, patch_keys, embed = {}, {}, None
    for m in range(4):
        if cfg.alpha[m] > 0:
            q = project_image(q_levels[m], pair.query, m, enc)
            k = project_image(k_levels[m], pair.key, m, enc)
            img_losses[m] = image_loss_level(q, k, banks[("image", m)], cfg.tau, m)
            img_keys[m] = k
            embed = q.data
    for m in range(4):
        if cfg.beta[m] > 0:
            S = cfg.roi_sizes[m]
            g1 = extract_patch_grids(q_levels[m], [p.box1 for p in pairs], m, S, pair.query,
                                     cfg.sampling_ratio)
            g2 = extract_patch_grids(k_levels[m], [p.box2 for p in pairs], m, S, pair.key,
                                     cfg.sampling_ratio)
            corrs = [patch_correspondence(p.t1, p.t2, S) for p in pairs]
            patch_losses[m] = patch_loss_level(g1, g2, corrs, banks[("patch", m)], cfg.tau,
                                               cfg.patch_reduction)
            patch_keys[m] = g2
    total = total_loss(img_losses, patch_losses, w)
    return LossParts(total, img_losses, patch_losses, img_keys, patch_keys, embed)


def train_step(state: TrainState, pairs: Sequence[ViewPair]) -> StepMetrics:
    cfg, pair = state.config, state.pair
    parts = step_loss(cfg, pair, state.banks, pairs)
    total, img_losses, patch_losses = parts.total, parts.image, parts.patch
    img_keys, patch_keys, embed = parts.image_keys, parts.patch_keys, parts.embed
    _check_finite(state, total, "total loss")

    lr = cosine_lr(state.step, cfg.steps, cfg.base_lr)
    if total.requires_grad:
        T.backward(total)
        sgd_step(active_params(pair.query, cfg), state.buffers, lr, cfg.momentum, cfg.weight_decay)
    pair.momentum_update()
    for m, k in img_keys.items():
        enqueue_image(state.banks[("image", m)], k)
    for m, g2 in patch_keys.items():
        enqueue_patches(state.banks[("patch", m)], g2, state.rng, cfg.patch_enqueue)

    embed_std = float(embed.std(axis=0).mean()) if embed is not None and len(embed) > 1 else None
    collapse = embed_std is not None and embed_std < 1e-3
    if collapse:
        log.warning("step %d: image embeddings nearly constant across batch (std %.2e)",
                    state.step, embed_std)

    def fill(kind):
        active = [b.filled for (k, _), b in sorted(state.banks.items()) if k == kind]
        return active[-1] if active else 0

    metrics = StepMetrics(state.step, lr, total.item(),
                          [None if t is None else t.item() for t in img_losses],
                          [None if t is None else t.item() for t in patch_losses],
                          fill("image"), fill("patch"), embed_std, collapse)
    state.step += 1
    return metrics


def image_only_step(state: TrainState, pairs: Sequence[ViewPair]) -> float:
    """Single-level, image-only contrastive step on the stride-32 map.

    A self-contained MoCo-style learner used to check that the multi-level
    loss reduces to it under alpha=(0,0,0,1), beta=0.
    """
    cfg, pair, enc = state.config, state.pair, state.config.encoder
    v1, v2 = _stack_views(pairs)
    q = project_image(forward_pyramid(pair.query, v1, enc)[3], pair.query, 3, enc)
    k = project_image(forward_pyramid(pair.key, v2, enc)[3], pair.key, 3, enc)
    bank = state.banks[("image", 3)]
    loss = image_loss_level(q, k, bank, cfg.tau, 3)
    lr = cosine_lr(state.step, cfg.steps, cfg.base_lr)
    T.backward(loss)
    sgd_step(active_params(pair.query, cfg), state.buffers, lr, cfg.momentum, cfg.weight_decay)
    pair.momentum_update()
    bank.enqueue(k)
    state.step += 1
    return loss.item()


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    arrays = {}
    for name, p in state.pair.query.items():
        arrays[f"query/{name}"] = p.data
    for name, p in state.pair.key.items():
        arrays[f"key/{name}"] = p.data
    for name, b in state.buffers.items():
        arrays[f"momentum/{name}"] = b
    for (kind, m), bank in sorted(state.banks.items()):
        arrays[f"bank/{kind}{m}"] = bank.keys
    meta = {
        "config": state.config.to_dict(),
        "config_hash": state.config.config_hash(),
        "step": state.step,
        "rng": state.rng.bit_generator.state,
        "banks": {f"{k}{m}": b.state() for (k, m), b in sorted(state.banks.items())},
    }
    return write_tensor_file(path, meta, arrays)


def load_checkpoint(path, config: TrainConfig | None = None) -> TrainState:
    """Restore a full training state; ``config`` (if given) must match the saved architecture."""
    meta, arrays = read_tensor_file(path)
    saved = TrainConfig.from_dict(meta["config"])
    if config is not None and config.encoder != saved.encoder:
        raise CheckpointError(f"architecture mismatch: checkpoint has {saved.encoder}, "
                              f"expected {config.encoder}")
    cfg = config if config is not None else saved
    query = {}
    for key, arr in arrays.items():
        if key.startswith("query/"):
            name = key[6:]
            query[name] = T.parameter(arr, name=name)
    expected = init_params(cfg.encoder, np.random.default_rng(0))
    if set(expected) != set(query) or any(expected[n].shape != query[n].shape for n in expected):
        raise CheckpointError("checkpoint parameters do not match the encoder architecture")
    pair = EncoderPair(query, cfg.m_coef)
    for name, k in pair.key.items():
        k.data = arrays[f"key/{name}"].copy()
    buffers = {key[9:]: arr.copy() for key, arr in arrays.items() if key.startswith("momentum/")}
    banks = make_banks(cfg)
    for (kind, m), bank in banks.items():
        tag = f"{kind}{m}"
        if f"bank/{tag}" in arrays:
            bank.restore(arrays[f"bank/{tag}"], meta["banks"][tag])
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return TrainState(cfg, pair, buffers, banks, rng, int(meta["step"]))


def load_encoder(path) -> tuple[EncoderConfig, dict[str, T.Tensor], TrainConfig]:
    """Query-encoder parameters of a checkpoint, as constants (no gradient)."""
    meta, arrays = read_tensor_file(path)
    cfg = TrainConfig.from_dict(meta["config"])
    params = {k[6:]: T.Tensor(v, name=k[6:]) for k, v in arrays.items() if k.startswith("query/")}
    return cfg.encoder, params, cfg


# ---------------------------------------------------------------- run

def _read_metrics_prefix(path: Path, upto: int) -> list[list[str]]:
    if not path.exists():
        return []
    with path.open(newline="") as f:
        rows = list(csv.reader(f))
    return [r for r in rows[1:] if r and int(r[0]) < upto]


def run(config: TrainConfig, resume=None, progress: bool = False) -> Path:
    """Train for ``config.steps``; writes ``metrics.csv``, periodic and final checkpoints."""
    config.validate()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if resume is not None:
        meta, _ = read_tensor_file(resume)
        if meta.get("config_hash") != config.config_hash():
            raise CheckpointError(f"config hash mismatch: checkpoint {meta.get('config_hash')}, "
                                  f"current {config.config_hash()}")
        state = load_checkpoint(resume, config)
    else:
        state = init_state(config)
    images = load_images(config)
    metrics_path = out / "metrics.csv"
    rows = _read_metrics_prefix(metrics_path, state.step) if resume is not None else []
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    writer.writerows(rows)
    metrics_path.write_text(buf.getvalue())
    with metrics_path.open("a", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        while state.step < config.steps:
            idx = batch_indices(config, state.step, len(images))
            pairs = assemble_batch(state, images, state.step, idx)
            metrics = train_step(state, pairs)
            writer.writerow(metrics.row())
            if progress and (metrics.step % 50 == 0 or state.step == config.steps):
                f.flush()
                log.info("step %d lr %.5f loss %.4f", metrics.step, metrics.lr, metrics.total)
            if config.checkpoint_every and state.step % config.checkpoint_every == 0:
                save_checkpoint(state, out / f"ckpt_{state.step:06d}.dupr")
    return save_checkpoint(state, out / "final.dupr")


def read_metrics(path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))

"""InfoNCE with memory-bank negatives at image and patch level, and the
weighted multi-level total."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .geometry import PatchCorrespondence
from .patches import PatchGrid
from .tensor import ConfigError, ShapeError, Tensor, UsageError


class ContractViolation(ValueError):
    """A key handed to a memory bank is not a detached unit vector."""


class MemoryBank:
    """Fixed-capacity FIFO ring of unit-norm key vectors."""

    def __init__(self, capacity: int, dim: int, kind: str = "image", level: int = 3):
        if capacity < 1:
            raise ConfigError(f"bank capacity must be positive, got {capacity}")
        self.capacity = capacity
        self.dim = dim
        self.kind = kind
        self.level = level
        self.keys = np.zeros((capacity, dim))
        self.head = 0
        self.filled = 0

    def __repr__(self):
        return f"MemoryBank({self.kind}{self.level}, {self.filled}/{self.capacity})"

    def enqueue(self, keys) -> None:
        if isinstance(keys, Tensor):
            if keys.requires_grad:
                raise ContractViolation("bank keys must come from the key encoder (no gradient)")
            keys = keys.data
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        if keys.shape[1] != self.dim:
            raise ShapeError(f"bank {self.kind}{self.level}: key dim {keys.shape[1]} != {self.dim}")
        norms = np.linalg.norm(keys, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ContractViolation(f"non-unit key enqueued (norms {norms.min():.6g}..{norms.max():.6g})")
        for k in keys[-self.capacity:] if len(keys) > self.capacity else keys:
            self.keys[self.head] = k
            self.head = (self.head + 1) % self.capacity
        self.filled = min(self.capacity, self.filled + len(keys))

    def negatives(self) -> np.ndarray:
        """Oldest-first copy of the filled region."""
        if self.filled < self.capacity:
            return self.keys[:self.filled].copy()
        return np.concatenate([self.keys[self.head:], self.keys[:self.head]])

    def fill_random(self, rng: np.random.Generator) -> None:
        k = rng.normal(size=(self.capacity, self.dim))
        self.enqueue(k / np.linalg.norm(k, axis=1, keepdims=True))

    def state(self) -> dict:
        return {"head": self.head, "filled": self.filled}

    def restore(self, keys: np.ndarray, state: dict) -> None:
        self.keys = np.array(keys, dtype=np.float64).reshape(self.capacity, self.dim)
        self.head = int(state["head"])
        self.filled = int(state["filled"])


def bank_negatives(bank: MemoryBank) -> np.ndarray:
    return bank.negatives()


@dataclass(frozen=True)
class LossWeights:
    alpha: tuple[float, ...] = (0.1, 0.4, 0.7, 1.0)
    beta: tuple[float, ...] = (0.0, 0.0, 1.0, 1.0)
    tau: float = 0.2

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if len(self.alpha) != len(self.beta):
            raise ConfigError(f"alpha/beta lengths differ: {len(self.alpha)} vs {len(self.beta)}")


def _as_array(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def info_nce_batch(q: Tensor, k_pos, negatives, tau: float) -> Tensor:
    """Per-row InfoNCE losses (B,) for queries ``q`` (B x D).

    Row b: ``-log softmax([q_b.k_b, q_b.n_1, ..., q_b.n_K] / tau)[0]``.
    Keys and negatives are constants; only ``q`` receives gradient.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    kp = _as_array(k_pos)
    neg = _as_array(negatives).reshape(-1, q.shape[1])
    lpos = np.einsum("bd,bd->b", q.data, kp) / tau
    if neg.shape[0] == 0:
        # only the positive logit: the loss is 0, but non-finite queries must still show
        return T.make(lpos - lpos, (q,), lambda g: (np.zeros(q.shape),))
    # the B x K logit block dominates; it is reused in place throughout
    eneg = q.data @ neg.T
    eneg /= tau
    mx = np.maximum(lpos, eneg.max(axis=1))
    eneg -= mx[:, None]
    np.exp(eneg, out=eneg)
    epos = np.exp(lpos - mx)
    z = epos + eneg.sum(axis=1)
    loss = np.log(z) + (mx - lpos)

    def bw(g):
        scale = g / z
        dq = ((epos * scale - g)[:, None] * kp + (eneg * scale[:, None]) @ neg) / tau
        return (dq,)

    return T.make(loss, (q,), bw)


def info_nce(q: Tensor, k_pos, negatives, tau: float) -> Tensor:
    """Scalar InfoNCE for a single query vector."""
    qb = T.reshape(q, (1, -1))
    out = info_nce_batch(qb, np.reshape(_as_array(k_pos), (1, -1)), negatives, tau)
    return T.reshape(out, ())


def _check_bank(bank: MemoryBank, kind: str, m: int | None):
    if bank.kind != kind or (m is not None and bank.level != m):
        raise UsageError(f"expected a {kind} bank for level {m}, got {bank!r}")


def image_loss_level(v1: Tensor, v2, bank: MemoryBank, tau: float, m: int | None = None) -> Tensor:
    """Batch-mean image InfoNCE: query ``v1`` (N x D), key positives ``v2``."""
    _check_bank(bank, "image", m)
    if v1.ndim == 1:
        v1 = T.reshape(v1, (1, -1))
    return T.mean(info_nce_batch(v1, np.reshape(_as_array(v2), v1.shape), bank.negatives(), tau))


def patch_loss_level(grid1: PatchGrid, grid2: PatchGrid | np.ndarray,
                     corr: PatchCorrespondence | Sequence[PatchCorrespondence],
                     bank: MemoryBank, tau: float, reduction: str = "sum") -> Tensor:
    """Patch InfoNCE: sum (or mean) over cells per image, mean over the batch.

    The positive of view1 cell (i, j) is view2 cell ``corr.map(i, j)``; the
    negatives are the bank's patch keys.
    """
    _check_bank(bank, "patch", grid1.level)
    e1 = grid1.embeddings
    e2 = _as_array(grid2.embeddings if isinstance(grid2, PatchGrid) else grid2)
    if e2.ndim == 3:
        e2 = e2[None]
    n, S = e1.shape[0], e1.shape[1]
    corrs = [corr] * n if isinstance(corr, PatchCorrespondence) else list(corr)
    if e2.shape[:3] != (n, S, S) or len(corrs) != n or any(c.S != S for c in corrs):
        raise UsageError(f"patch grids/correspondence disagree: {e1.shape} vs {e2.shape}, "
                         f"S={[c.S for c in corrs]}")
    if reduction not in ("sum", "mean"):
        raise ConfigError(f"patch reduction must be 'sum' or 'mean', got {reduction!r}")
    d = e1.shape[-1]
    flat2 = e2.reshape(n, S * S, d)
    pos = np.stack([flat2[k, c.index()] for k, c in enumerate(corrs)])
    q = T.reshape(e1, (n * S * S, d))
    losses = T.reshape(info_nce_batch(q, pos.reshape(-1, d), bank.negatives(), tau), (n, S * S))
    per_image = T.tsum(losses, axis=1) if reduction == "sum" else T.mean(losses, axis=1)
    return T.mean(per_image)


def total_loss(per_level_image: Sequence[Tensor | None], per_level_patch: Sequence[Tensor | None],
               w: LossWeights) -> Tensor:
    """``sum_m alpha_m L_img^m + sum_m beta_m L_patch^m``; None entries count as zero."""
    if len(per_level_image) != len(w.alpha) or len(per_level_patch) != len(w.beta):
        raise UsageError(f"expected {len(w.alpha)} levels, got {len(per_level_image)} image and "
                         f"{len(per_level_patch)} patch losses")
    total = None
    for weights, terms in ((w.alpha, per_level_image), (w.beta, per_level_patch)):
        for a, term in zip(weights, terms):
            if term is None or a == 0:
                continue
            part = T.mul(term, a)
            total = part if total is None else T.add(total, part)
    return total if total is not None else Tensor(0.0)


def enqueue_image(bank: MemoryBank, keys) -> None:
    bank.enqueue(keys)


def enqueue_patches(bank: MemoryBank, grid2: PatchGrid | np.ndarray, rng: np.random.Generator,
                    count: int = 4) -> None:
    """Enqueue ``min(count, S*S)`` distinct random cells per image."""
    e = _as_array(grid2.embeddings if isinstance(grid2, PatchGrid) else grid2)
    if e.ndim == 3:
        e = e[None]
    n, S, _, d = e.shape
    k = min(count, S * S)
    for img in e.reshape(n, S * S, d):
        bank.enqueue(img[rng.choice(S * S, size=k, replace=False)])

"""SGD with momentum and weight decay, and the cosine learning-rate schedule."""

from __future__ import annotations

import logging
import math
from typing import Mapping, MutableMapping

import numpy as np

from .tensor import Tensor, UsageError

log = logging.getLogger(__name__)


def init_momentum(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p.data) for name, p in params.items()}


def sgd_step(params: Mapping[str, Tensor], buffers: MutableMapping[str, np.ndarray],
             lr: float, momentum: float = 0.9, weight_decay: float = 0.0) -> None:
    """In-place update ``buf = momentum*buf + grad + wd*param; param -= lr*buf``.

    Gradients are cleared afterwards. Every parameter must carry a gradient.
    """
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise UsageError(f"sgd_step: no gradient for parameter(s) {', '.join(missing)}")
    for name, p in params.items():
        buf = buffers[name]
        buf *= momentum
        buf += p.grad
        if weight_decay:
            buf += weight_decay * p.data
        p.data -= lr * buf
        p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    if step > total_steps:
        log.warning("cosine_lr: step %d beyond schedule end %d, using 0", step, total_steps)
        return 0.0
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

"""Client-side training: K steps of mini-batch SGD from the broadcast model."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .objectives import Objective, ParamVector


@dataclass(frozen=True)
class LocalConfig:
    """Per-client training knobs shared by every algorithm."""

    steps: int = 1
    lr: float = 0.1
    batch_size: int = 1
    prox_mu: float = 0.0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.prox_mu < 0:
            raise ConfigError(f"prox_mu must be >= 0, got {self.prox_mu}")


def sample_batch(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    """Uniform batch without replacement; the full index range when it covers n.

    The full-batch case draws nothing from rng, so deterministic replays do
    not need a matching generator state.
    """
    if batch_size > n:
        warnings.warn(f"batch_size {batch_size} exceeds dataset size {n}; clamping")
    if batch_size >= n:
        return np.arange(n)
    return rng.choice(n, size=batch_size, replace=False)


def local_train(
    objective: Objective,
    w_start: ParamVector,
    cfg: LocalConfig,
    rng: np.random.Generator,
) -> tuple[ParamVector, ParamVector]:
    """Run K local steps; return (average uploaded gradient, final local model).

    Each step moves w by -lr * (batch_grad + prox_mu * (w - w_start)).  The
    upload is the plain average of the sampled batch gradients, so the final
    model satisfies w_final = w_start - lr * K * upload whenever prox_mu = 0.
    With prox_mu > 0 the upload is defined through that same identity, i.e.
    (w_start - w_final) / (lr * K), keeping the server update rule uniform.
    """
    L = objective.smoothness
    if L > 0 and cfg.lr > 1.0 / (10.0 * L):
        # Identical message on purpose: the default warning filter then
        # reports it once per process instead of once per client per round.
        warnings.warn("local lr exceeds 1/(10 L); small-step analysis does not apply")
    n = objective.dataset.n
    w = np.array(w_start, dtype=np.float64)
    start = w.copy()
    grad_sum = np.zeros_like(w)
    for _ in range(cfg.steps):
        g = objective.batch_grad(w, sample_batch(rng, n, cfg.batch_size))
        grad_sum += g
        if cfg.prox_mu > 0.0:
            w = w - cfg.lr * (g + cfg.prox_mu * (w - start))
        else:
            w = w - cfg.lr * g
    if cfg.prox_mu > 0.0:
        upload = (start - w) / (cfg.lr * cfg.steps)
    else:
        upload = grad_sum / cfg.steps
    return upload, w

"""First-order optimization engine shared by every refinement stage.

Stages hand the engine a *fused evaluator*: one callable that returns the
loss and the full gradient from a single pass over image pairs. The engine
itself never looks inside the problem.
"""

from dataclasses import dataclass, replace
from typing import Callable, Protocol

import numpy as np

from .errors import ConfigError, NumericalFailure


class FusedEvaluator(Protocol):
    dim: int

    def __call__(self, x: np.ndarray) -> tuple[float, np.ndarray]: ...


@dataclass(frozen=True)
class OptimConfig:
    iterations: int = 1000
    step_size: float = 1e-2
    schedule: str = "cosine"
    min_step_size: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.iterations < 0:
            raise ConfigError("iterations must be non-negative")

    def with_(self, **kw):
        return replace(self, **kw)

    def step_at(self, k):
        if self.schedule == "constant" or self.iterations <= 1:
            return self.step_size
        c = 0.5 * (1.0 + np.cos(np.pi * k / (self.iterations - 1)))
        return self.min_step_size + (self.step_size - self.min_step_size) * c


@dataclass
class OptimResult:
    x: np.ndarray
    loss: float
    initial_loss: float
    best_iteration: int
    trace: np.ndarray


def run_adam(evaluator: Callable, x0, cfg: OptimConfig) -> OptimResult:
    """Adam with bias correction; returns the best iterate seen.

    The loss trace holds the loss at every evaluated iterate (``iterations``
    updates plus the final point). Raises ``NumericalFailure`` on the first
    non-finite loss or gradient, carrying the best finite iterate.
    """
    x = np.array(x0, dtype=float, copy=True)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace = np.empty(cfg.iterations + 1)
    best_x, best_loss, best_k = x.copy(), np.inf, 0
    b1, b2 = cfg.beta1, cfg.beta2
    initial = None
    for k in range(cfg.iterations + 1):
        loss, g = evaluator(x)
        loss = float(loss)
        if not np.isfinite(loss) or not np.all(np.isfinite(g)):
            raise NumericalFailure("non-finite loss or gradient", iteration=k, last_finite=best_x)
        if initial is None:
            initial = loss
        trace[k] = loss
        if loss < best_loss:
            best_x, best_loss, best_k = x.copy(), loss, k
        if k == cfg.iterations:
            break
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        mhat = m / (1.0 - b1 ** (k + 1))
        vhat = v / (1.0 - b2 ** (k + 1))
        x = x - cfg.step_at(k) * mhat / (np.sqrt(vhat) + cfg.eps)
    return OptimResult(best_x, best_loss, initial, best_k, trace)

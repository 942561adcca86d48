"""Adam + Noam-schedule training loop with best-epoch selection."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datastore import EncodedWindow, stack_windows
from .evaluation import SingleClassError, evaluate
from .model import ModelConfig, init_params, loss_and_grad

log = logging.getLogger(__name__)


class NonFiniteError(ArithmeticError):
    pass


def noam_lr(step: int, d: int, warmup_steps: int) -> float:
    """``d**-0.5 * min(step**-0.5, step * warmup**-1.5)``."""
    if step < 1:
        raise ValueError(f"step must be >= 1, got {step}")
    return d**-0.5 * min(step**-0.5, step * warmup_steps**-1.5)


@dataclass
class OptimizerState:
    d_model: int
    warmup_steps: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def lr(self) -> float:
        return noam_lr(self.step, self.d_model, self.warmup_steps)


def adam_step(params, grads, state: OptimizerState, lr: float | None = None):
    """Bias-corrected Adam update of ``params`` in place.

    The caller increments ``state.step`` before each call. ``lr`` defaults to
    the Noam rate for the current step.
    """
    if state.step < 1:
        raise ValueError("increment state.step before calling adam_step")
    if lr is None:
        lr = state.lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for name, theta in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        theta -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(theta.dtype, copy=False)
    return params, state


def make_batches(windows: Sequence, batch_size: int, seed: int, epoch: int) -> list[list]:
    """Shuffle keyed on ``(seed, epoch)`` and cut into batches; the short tail batch is kept."""
    if not windows:
        raise ValueError("no windows to batch")
    order = np.random.default_rng([seed, epoch]).permutation(len(windows))
    return [
        [windows[i] for i in order[s : s + batch_size]]
        for s in range(0, len(windows), batch_size)
    ]


@dataclass
class TrainConfig:
    seed: int
    batch_size: int = 128
    epochs: int = 100
    val_fraction: float = 0.1
    warmup_steps: int = 60
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")


@dataclass
class EpochReport:
    epoch: int
    loss: float
    val_auc: float | None
    lr: float
    seconds: float

    def to_json(self, timing=True) -> str:
        rec = asdict(self)
        if not timing:
            del rec["seconds"]
        return json.dumps(rec)


def fit(
    train_windows: Sequence[EncodedWindow],
    val_windows: Sequence[EncodedWindow],
    model_config: ModelConfig,
    train_config: TrainConfig,
    params=None,
    on_epoch: Callable[[EpochReport], None] | None = None,
):
    """Train and return ``(best_params, reports)``.

    The best epoch is the one with the highest validation AUC (earliest on
    ties). Without usable validation windows the last epoch is returned.
    """
    if not train_windows:
        raise ValueError("empty training set")
    tc = train_config
    if params is None:
        params = init_params(model_config, tc.seed)
    state = OptimizerState(model_config.d, tc.warmup_steps, tc.beta1, tc.beta2, tc.eps_adam)
    best_auc, best_params = -np.inf, None
    reports = []

    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        drop_rng = np.random.default_rng([tc.seed, epoch, 1]) if model_config.dropout_rate > 0 else None
        total, count = 0.0, 0
        for b, batch in enumerate(make_batches(train_windows, tc.batch_size, tc.seed, epoch)):
            arrays = stack_windows(batch)
            loss, grads, _ = loss_and_grad(params, model_config, arrays, drop_rng)
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, batch {b}")
            n = int(arrays[3].sum())
            total += loss * n
            count += n
            state.step += 1
            try:
                adam_step(params, grads, state)
            except NonFiniteError as err:
                raise NonFiniteError(f"epoch {epoch}, batch {b}: {err}") from None

        val_auc = None
        if val_windows:
            try:
                val_auc = evaluate(params, model_config, val_windows).auc
            except SingleClassError:
                log.warning("validation set has a single outcome class; AUC skipped")
        report = EpochReport(epoch, total / count, val_auc, state.lr(), time.perf_counter() - t0)
        reports.append(report)
        if on_epoch is not None:
            on_epoch(report)

        if val_auc is not None and val_auc > best_auc:
            best_auc = val_auc
            best_params = {n: v.copy() for n, v in params.items()}

    if best_params is None:
        best_params = params
    return best_params, reports

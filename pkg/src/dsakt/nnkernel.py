"""Differentiable numpy kernels used to assemble the DSAKT graph.

Every forward function has a matching ``*_backward`` that maps the upstream
gradient (and whatever the forward returned or cached) to gradients of its
inputs. Kernels preserve the floating dtype of their inputs, so the same code
runs in float32 for training and float64 for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

LN_EPS = 1e-5
CLIP_EPS = 1e-7


class KernelError(ValueError):
    """Raised on a contract violation inside a kernel (shapes, masks, ...)."""


class GradCheckError(ArithmeticError):
    pass


# ---------------------------------------------------------------------------
# dense


def linear(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``x @ W + b`` over the last axis of ``x``."""
    if W.ndim != 2 or x.shape[-1] != W.shape[0]:
        raise KernelError(f"linear: cannot multiply x{x.shape} by W{W.shape}")
    y = x @ W
    if b is not None:
        if b.shape != (W.shape[1],):
            raise KernelError(f"linear: bias {b.shape} does not fit W{W.shape}")
        y = y + b
    return y


def linear_backward(dy, x, W, has_bias=True):
    """Return ``(dx, dW, db)``; ``db`` is None when the layer had no bias."""
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0) if has_bias else None
    dx = dy @ W.T
    return dx, dW, db


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dy, x):
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


def sigmoid(x):
    """Logistic function, evaluated without overflow for any finite input."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(dy, y):
    """Gradient given the sigmoid *output* ``y``."""
    return dy * y * (1 - y)


# ---------------------------------------------------------------------------
# attention pieces


def softmax_masked(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis restricted to ``mask == 1``.

    ``mask`` broadcasts against ``scores``; disallowed entries come out as
    exact zeros.
    """
    allowed = np.broadcast_to(np.asarray(mask).astype(bool), scores.shape)
    if not allowed.any(axis=-1).all():
        raise KernelError("softmax_masked: a row has no allowed entries")
    s = np.where(allowed, scores, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    ex = np.exp(s)
    return ex / ex.sum(axis=-1, keepdims=True)


def softmax_backward(dp, p):
    # masked entries have p == 0, so their gradient is 0 as well
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def layer_norm(x, gamma, beta, eps=LN_EPS):
    """Normalize the last axis with biased variance. Returns ``(y, cache)``."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def layer_norm_backward(dy, gamma, cache):
    """Return ``(dx, dgamma, dbeta)``."""
    xhat, inv_std = cache
    d = xhat.shape[-1]
    dgamma = (dy * xhat).reshape(-1, d).sum(axis=0)
    dbeta = dy.reshape(-1, d).sum(axis=0)
    dxhat = dy * gamma
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


def dropout(x, rate, rng):
    """Inverted dropout. Returns ``(y, keep_mask)``; mask is None when inactive."""
    if rate <= 0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


# ---------------------------------------------------------------------------
# loss


def bce_masked(pred, target, valid_mask, clip=CLIP_EPS):
    """Mean binary cross-entropy over positions where ``valid_mask`` is set.

    Predictions are clipped to ``[clip, 1 - clip]`` before the log. Any
    leading batch axes are pooled with the position axis.
    """
    valid = np.asarray(valid_mask).astype(bool)
    n = int(valid.sum())
    if n == 0:
        raise KernelError("bce_masked: no valid positions")
    p = np.clip(pred, clip, 1 - clip)
    t = np.asarray(target, dtype=p.dtype)
    per_pos = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    return per_pos[valid].sum(dtype=np.float64) / n


def bce_masked_backward(pred, target, valid_mask, clip=CLIP_EPS):
    """Gradient of :func:`bce_masked` with respect to ``pred``."""
    valid = np.asarray(valid_mask).astype(bool)
    n = int(valid.sum())
    if n == 0:
        raise KernelError("bce_masked: no valid positions")
    t = np.asarray(target, dtype=pred.dtype)
    inside = (pred > clip) & (pred < 1 - clip)
    p = np.clip(pred, clip, 1 - clip)
    g = (p - t) / (p * (1 - p)) / n
    return np.where(valid & inside, g, 0).astype(pred.dtype, copy=False)


def bce_logits_backward(prob, target, valid_mask):
    """Gradient of the masked mean BCE with respect to the pre-sigmoid logits.

    Equal to chaining :func:`bce_masked_backward` and :func:`sigmoid_backward`
    wherever the clip is inactive, but keeps a nonzero signal once the
    sigmoid saturates.
    """
    valid = np.asarray(valid_mask).astype(bool)
    n = int(valid.sum())
    if n == 0:
        raise KernelError("bce_masked: no valid positions")
    t = np.asarray(target, dtype=prob.dtype)
    return np.where(valid, (prob - t) / prob.dtype.type(n), 0).astype(prob.dtype, copy=False)


# ---------------------------------------------------------------------------
# finite-difference harness


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    worst_index: dict[str, tuple] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_gradient(loss_fn: Callable[[], float], value: np.ndarray, step=1e-5, name="x"):
    """Central differences of ``loss_fn()`` with respect to ``value`` (mutated in place, restored)."""
    grad = np.zeros(value.shape, dtype=np.float64)
    flat = value.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn()
        flat[i] = orig - step
        down = loss_fn()
        flat[i] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise GradCheckError(f"non-finite loss while perturbing {name}[{i}]")
        grad.reshape(-1)[i] = (up - down) / (2 * step)
    return grad


def grad_check(
    fn: Callable[[Mapping[str, np.ndarray]], tuple[float, Mapping[str, np.ndarray]]],
    params: Mapping[str, np.ndarray],
    fd_step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    ``fn(params)`` must return ``(loss, grads)`` with one gradient array per
    parameter name. Parameters should be float64; they are perturbed in place
    and restored before returning.
    """
    for name, value in params.items():
        if value.dtype != np.float64:
            raise GradCheckError(f"{name}: gradient check needs float64, got {value.dtype}")
    loss, grads = fn(params)
    if not np.isfinite(loss):
        raise GradCheckError("non-finite loss at the probe point")

    errors, where = {}, {}
    for name, value in params.items():
        analytic = np.asarray(grads[name], dtype=np.float64)
        if analytic.shape != value.shape:
            raise GradCheckError(f"{name}: gradient shape {analytic.shape} != {value.shape}")
        if not np.isfinite(analytic).all():
            raise GradCheckError(f"{name}: non-finite analytic gradient")
        numeric = numeric_gradient(lambda: fn(params)[0], value, fd_step, name)
        rel = relative_error(analytic, numeric)
        errors[name] = float(rel.max()) if rel.size else 0.0
        where[name] = np.unravel_index(int(rel.argmax()), rel.shape) if rel.size else ()
    return GradCheckReport(errors, tolerance, where)

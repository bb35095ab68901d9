"""Dense layer primitives with hand-written backward passes.

Tensors are C-contiguous numpy arrays (float64 in tests; float32 is fine on
the benchmark path). Every stateful forward returns the values its backward
needs; backwards are plain functions so the same primitive can be applied
several times per step (shared towers) without clobbering state.
"""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError


class Param:
    """A trainable tensor paired with its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.ascontiguousarray(value)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0


def scatter_add_rows(acc: np.ndarray, idx: np.ndarray, rows: np.ndarray) -> None:
    """acc[idx[k]] += rows[k], accumulating over repeated indices.

    Implemented as one bincount per column: much faster than np.add.at for
    the wide, highly repetitive index vectors embedding backprop produces.
    """
    n = acc.shape[0]
    if rows.ndim == 1:
        acc += np.bincount(idx, weights=rows, minlength=n)
        return
    for c in range(rows.shape[1]):
        acc[:, c] += np.bincount(idx, weights=rows[:, c], minlength=n)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects rank-2 operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return a @ b


def matmul_backward(grad, a, b):
    return grad @ b.T, a.T @ grad


def _check_column_operand(name: str, a: np.ndarray, operand: np.ndarray) -> None:
    if operand.ndim != a.ndim or operand.shape[-1] != 1:
        raise ShapeError(
            f"{name} must match the input rank with a trailing extent of 1, "
            f"got {operand.shape} against {a.shape}"
        )
    if operand.shape[:-1] != a.shape[:-1]:
        raise ShapeError(
            f"{name} leading extents {operand.shape} do not match input {a.shape}"
        )


def broadcast_mul_add(a, mult, bias=None):
    """Scale each row of `a` by its scalar from `mult`, optionally add `bias`.

    `a` has shape (..., e); `mult` and `bias` have shape (..., 1) and
    broadcast across the trailing axis.
    """
    _check_column_operand("mult", a, mult)
    if bias is not None:
        _check_column_operand("bias", a, bias)
    out = a * mult
    if bias is not None:
        out = out + bias
    return out


def broadcast_mul_add_backward(grad, a, mult, with_bias: bool):
    da = grad * mult
    dmult = np.sum(grad * a, axis=-1, keepdims=True)
    dbias = np.sum(grad, axis=-1, keepdims=True) if with_bias else None
    return da, dmult, dbias


def average_pool_rows(a: np.ndarray, pool: int) -> np.ndarray:
    """Mean over the sequence axis of a (batch, seq, features) tensor.

    The pool width must equal the full sequence extent; padding rows are
    deliberately included in the mean.
    """
    if a.ndim != 3:
        raise ShapeError(f"average_pool_rows expects rank 3, got {a.shape}")
    if pool != a.shape[1]:
        raise ConfigError(
            f"pool width {pool} must equal the sequence extent {a.shape[1]}"
        )
    return a.mean(axis=1, keepdims=True)


def average_pool_rows_backward(grad, seq_len: int):
    return np.repeat(grad / seq_len, seq_len, axis=1)


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(grad, x):
    return grad * (x > 0.0)


def dropout(x, rate: float, train: bool, rng):
    """Inverted-scaling dropout. Returns (out, mask); mask is None in eval."""
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / keep
    return x * mask, mask


def dropout_backward(grad, mask):
    return grad if mask is None else grad * mask


def dense(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"dense: input {x.shape} incompatible with weight {weight.shape}"
        )
    return x @ weight + bias


def dense_backward(grad, x, weight):
    return grad @ weight.T, x.T @ grad, grad.sum(axis=0)


def batchnorm(x, gamma, beta, running_mean, running_var, train: bool,
              eps: float = 1e-5, momentum: float = 0.9):
    """Feature-wise batch normalization over axis 0.

    Training normalizes with batch statistics and folds them into the running
    estimates in place (running = momentum * running + (1 - momentum) * batch);
    evaluation normalizes with the running estimates only.
    """
    if train:
        mean = x.mean(axis=0)
        var = x.var(axis=0)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, train)


def batchnorm_backward(grad, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = np.sum(grad * xhat, axis=0)
    dbeta = grad.sum(axis=0)
    dxhat = grad * gamma
    if train:
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=0)
            - xhat * np.mean(dxhat * xhat, axis=0)
        )
    else:
        dx = dxhat * inv_std
    return dx, dgamma, dbeta


def softmax_cross_entropy(logits, labels):
    """Per-row softmax cross-entropy.

    Returns (losses, probs) with losses shaped (batch,). The gradient of
    sum(losses * upstream) w.r.t. logits is (probs - onehot) * upstream.
    """
    labels = np.asarray(labels)
    k = logits.shape[1]
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise IndexError(f"label {int(labels[bad][0])} outside [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    total = expd.sum(axis=1)
    probs = expd / total[:, None]
    rows = np.arange(len(labels))
    losses = np.log(total) - shifted[rows, labels]
    return losses, probs


def softmax_cross_entropy_backward(probs, labels, dlosses):
    grad = probs * dlosses[:, None]
    grad[np.arange(len(labels)), labels] -= dlosses
    return grad

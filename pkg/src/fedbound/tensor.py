"""Dense float64 numeric kernel shared by every other module.

Tensors are plain ``numpy.ndarray`` objects of dtype float64. The helpers here
add the shape checks, finiteness guarantees and seeded random streams the rest
of the package relies on.
"""

from __future__ import annotations

import zlib

import numpy as np

BIG = 1e300


class DimensionError(ValueError):
    """Raised when tensor shapes do not line up."""


class NonFiniteError(FloatingPointError):
    """Raised when a computation produced NaN or Inf."""


def as_tensor(data, shape=None) -> np.ndarray:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    return check_finite(arr)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul result")


def elementwise_min(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """``min(a, b)`` with ``b`` either the same shape or a per-feature row."""
    if a.shape != b.shape and not (b.ndim == 1 and a.ndim == 2 and a.shape[1] == b.shape[0]):
        raise DimensionError(f"cannot take min of {a.shape} and {b.shape}")
    return np.minimum(a, b)


def l2_norm(a: np.ndarray) -> float:
    flat = np.ravel(a)
    return float(np.sqrt(np.dot(flat, flat)))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean cross-entropy of integer ``labels`` under ``logits`` (batch x C)."""
    labels = np.asarray(labels)
    n_classes = logits.shape[1]
    if logits.shape[1] < 2:
        raise DimensionError("need at least two classes")
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {logits.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"label index out of range [0, {n_classes})")
    logp = log_softmax(logits)
    return float(-logp[np.arange(len(labels)), labels].mean())


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """Mean over rows of KL(p || q); ``0 * log 0`` is taken as 0."""
    if p.shape != q.shape:
        raise DimensionError(f"KL shapes differ: {p.shape} vs {q.shape}")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    p2 = np.atleast_2d(terms)
    return float(check_finite(p2.sum(axis=-1), "KL divergence").mean())


def _key_int(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    return int(key)


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Counter-based (Philox) stream derived from ``seed`` and a path of keys.

    Each logical actor, e.g. ``make_rng(seed, "client", 3, "round", 7)``, gets
    its own stream, so the order in which actors run never changes results.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [_key_int(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))

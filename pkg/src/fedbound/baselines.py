"""Comparison defenses: norm thresholding, DP-style aggregation, Krum, pruning."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import ConfigError, LabeledDataset
from .model import MlpModel, default_bounded_layers, hidden_activations
from .tensor import l2_norm


@dataclass
class UpdateVector:
    client_id: int
    delta: np.ndarray
    norm: float | None = None
    weight: float = 1.0

    def __post_init__(self):
        if self.norm is None:
            self.norm = l2_norm(self.delta)


def norm_threshold(updates: list[UpdateVector], max_norm: float) -> list[UpdateVector]:
    """Scale each update by ``min(1, M / ||delta||)``."""
    if not max_norm > 0:
        raise ConfigError("norm threshold M must be positive")
    out = []
    for u in updates:
        # the tolerance keeps an already-clipped update (norm M plus rounding) fixed
        if u.norm > max_norm * (1 + 1e-12):
            delta = u.delta * (max_norm / u.norm)
        else:
            delta = u.delta.copy()
        out.append(UpdateVector(u.client_id, delta, weight=u.weight))
    return out


def dp_aggregate(updates: list[UpdateVector], max_norm: float, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Mean of clipped updates plus i.i.d. Gaussian noise of scale ``sigma``."""
    if sigma < 0:
        raise ConfigError("sigma must be non-negative")
    if not updates:
        raise ConfigError("no updates to aggregate")
    clipped = sorted(norm_threshold(updates, max_norm), key=lambda u: u.client_id)
    mean = np.mean(np.stack([u.delta for u in clipped]), axis=0)
    if sigma > 0:
        mean = mean + rng.normal(0.0, sigma, size=mean.shape)
    return mean


def krum_scores(updates: list[UpdateVector], f: int) -> dict[int, float]:
    n = len(updates)
    if n < f + 3:
        raise ConfigError(f"Krum needs n >= f + 3 updates, got n={n}, f={f}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    vecs = np.stack([u.delta for u in ordered])
    diff = vecs[:, None, :] - vecs[None, :, :]
    dist = np.einsum("ijk,ijk->ij", diff, diff)
    m = n - f - 2
    scores = {}
    for i, u in enumerate(ordered):
        others = np.sort(np.delete(dist[i], i))
        scores[u.client_id] = float(others[:m].sum())
    return scores


def krum_select(updates: list[UpdateVector], f: int) -> int:
    """Client id with the smallest Krum score; ties go to the lowest id."""
    scores = krum_scores(updates, f)
    return min(scores, key=lambda cid: (scores[cid], cid))


def activation_prune(model: MlpModel, data: LabeledDataset, fraction: float, layers=None) -> MlpModel:
    """Zero the ``floor(p * n_l)`` least active neurons of each hidden layer.

    A pruned neuron loses its incoming row, its bias and its outgoing column.
    Activity is the mean post-ReLU activation over ``data``.
    """
    if not 0 <= fraction < 1:
        raise ConfigError("prune fraction must lie in [0, 1)")
    out = model.copy()
    if fraction == 0:
        return out
    layers = default_bounded_layers(model) if layers is None else layers
    acts = hidden_activations(model, data.images)
    for layer in layers:
        mean = acts[layer - 1].mean(axis=0)
        k = int(np.floor(fraction * len(mean)))
        if k == 0:
            continue
        idx = np.argsort(mean, kind="stable")[:k]
        out.weights[layer - 1][idx, :] = 0.0
        out.biases[layer - 1][idx] = 0.0
        if layer < model.n_layers:
            out.weights[layer][:, idx] = 0.0
        else:
            out.head_w[:, idx] = 0.0
    return out

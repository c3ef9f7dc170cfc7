"""ReLU MLP classifiers with optional per-layer activation upper bounds.

Hidden layers are numbered ``1..L`` (the head is never bounded). A bound vector
``z_l`` replaces the layer output ``h`` with ``min(h, z_l)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError, check_finite, elementwise_min, l2_norm, log_softmax, softmax

CHECKPOINT_FORMAT = "fedbound-checkpoint"


@dataclass
class MlpModel:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    head_w: np.ndarray
    head_b: np.ndarray
    prototype_id: int = 0

    def __post_init__(self):
        if len(self.weights) < 1 or len(self.weights) != len(self.biases):
            raise DimensionError("need at least one hidden layer with matching biases")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[0],):
                raise DimensionError(f"layer {i + 1}: bias {b.shape} vs weight {w.shape}")
            if i > 0 and w.shape[1] != self.weights[i - 1].shape[0]:
                raise DimensionError(f"layer {i + 1} input width {w.shape[1]} does not chain")
        if self.head_w.shape[1] != self.weights[-1].shape[0]:
            raise DimensionError("head input width does not match last hidden layer")
        if self.head_w.shape[0] < 2 or self.head_b.shape != (self.head_w.shape[0],):
            raise DimensionError("head must map to C >= 2 classes with a matching bias")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    @property
    def n_classes(self) -> int:
        return self.head_w.shape[0]

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights] + [self.n_classes]

    def hidden_width(self, layer: int) -> int:
        return self.weights[layer - 1].shape[0]

    def copy(self) -> "MlpModel":
        return MlpModel(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            self.head_w.copy(),
            self.head_b.copy(),
            self.prototype_id,
        )

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in canonical (flatten) order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out + [self.head_w, self.head_b]


@dataclass
class BoundSet:
    bounds: dict[int, np.ndarray]

    def __post_init__(self):
        for layer, z in self.bounds.items():
            if np.any(z < 0):
                raise ValueError(f"bound for layer {layer} has negative entries")

    @property
    def layers(self) -> list[int]:
        return sorted(self.bounds)

    def copy(self) -> "BoundSet":
        return BoundSet({k: v.copy() for k, v in self.bounds.items()})

    def norms(self) -> dict[int, float]:
        return {k: l2_norm(self.bounds[k]) for k in self.layers}

    @classmethod
    def constant(cls, model: MlpModel, value: float, layers=None) -> "BoundSet":
        layers = default_bounded_layers(model) if layers is None else layers
        return cls({l: np.full(model.hidden_width(l), float(value)) for l in layers})


def default_bounded_layers(model: MlpModel) -> list[int]:
    return list(range(1, model.n_layers + 1))


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    relu: list[np.ndarray] = field(default_factory=list)
    clamped: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    logits: np.ndarray | None = None


def init_model(dims: list[int], rng: np.random.Generator, prototype_id: int = 0) -> MlpModel:
    """He-initialised MLP for ``dims = [n_0, n_1, ..., n_L, C]``."""
    if len(dims) < 3:
        raise DimensionError("dims must list input, at least one hidden width, and classes")
    weights, biases = [], []
    for n_in, n_out in zip(dims[:-2], dims[1:-1]):
        weights.append(rng.normal(0.0, np.sqrt(2.0 / n_in), size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    head_w = rng.normal(0.0, np.sqrt(1.0 / dims[-2]), size=(dims[-1], dims[-2]))
    return MlpModel(weights, biases, head_w, np.zeros(dims[-1]), prototype_id)


def _check_input(model: MlpModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[1]:
        raise DimensionError(f"input width {x.shape} does not match model input {model.weights[0].shape[1]}")
    return x


def _run(model: MlpModel, x: np.ndarray, bounds: BoundSet | None) -> ForwardTrace:
    x = _check_input(model, x)
    trace = ForwardTrace(inputs=x)
    a = x
    for layer, (w, b) in enumerate(zip(model.weights, model.biases), start=1):
        pre = a @ w.T + b
        h = np.maximum(pre, 0.0)
        z = None if bounds is None else bounds.bounds.get(layer)
        if z is None:
            out, mask = h, None
        else:
            if z.shape != (h.shape[1],):
                raise DimensionError(f"bound for layer {layer} has shape {z.shape}, layer width {h.shape[1]}")
            out = elementwise_min(h, z)
            mask = z < h
        trace.pre.append(pre)
        trace.relu.append(h)
        trace.clamped.append(out)
        trace.masks.append(mask)
        a = out
    trace.logits = check_finite(a @ model.head_w.T + model.head_b, "logits")
    return trace


def forward(model: MlpModel, x: np.ndarray) -> np.ndarray:
    """Unbounded logits, shape ``(batch, C)``."""
    return _run(model, x, None).logits


def forward_bounded(model: MlpModel, bounds: BoundSet, x: np.ndarray) -> tuple[np.ndarray, ForwardTrace]:
    trace = _run(model, x, bounds)
    return trace.logits, trace


def hidden_activations(model: MlpModel, x: np.ndarray) -> list[np.ndarray]:
    """Post-ReLU activations of every hidden layer (unbounded)."""
    return _run(model, x, None).relu


def _backprop(model: MlpModel, trace: ForwardTrace, dlogits: np.ndarray):
    """Push ``dLoss/dlogits`` back through a trace.

    Returns ``(param_grads, bound_grads)``; bound gradients only exist for
    layers that were clamped in the trace.
    """
    n = model.n_layers
    gw = [None] * n
    gb = [None] * n
    gz = {}
    last = trace.clamped[-1]
    head_w = dlogits.T @ last
    head_b = dlogits.sum(axis=0)
    d_a = dlogits @ model.head_w
    for i in range(n - 1, -1, -1):
        mask = trace.masks[i]
        if mask is not None:
            gz[i + 1] = np.where(mask, d_a, 0.0).sum(axis=0)
            d_h = np.where(mask, 0.0, d_a)
        else:
            d_h = d_a
        d_pre = np.where(trace.pre[i] > 0, d_h, 0.0)
        a_prev = trace.inputs if i == 0 else trace.clamped[i - 1]
        gw[i] = d_pre.T @ a_prev
        gb[i] = d_pre.sum(axis=0)
        if i > 0:
            d_a = d_pre @ model.weights[i]
    grads = MlpModel(gw, gb, head_w, head_b, model.prototype_id)
    return grads, gz


def backward_params(model: MlpModel, x: np.ndarray, labels: np.ndarray) -> tuple[float, MlpModel]:
    """Mean cross-entropy and its exact gradient w.r.t. every parameter."""
    trace = _run(model, x, None)
    labels = np.asarray(labels)
    probs = softmax(trace.logits)
    loss = float(-log_softmax(trace.logits)[np.arange(len(labels)), labels].mean())
    dlogits = probs
    dlogits[np.arange(len(labels)), labels] -= 1.0
    dlogits /= len(labels)
    grads, _ = _backprop(model, trace, dlogits)
    return loss, grads


def backward_logits(model: MlpModel, x: np.ndarray, dlogits_fn) -> tuple[float, MlpModel]:
    """Gradient of an arbitrary loss of the unbounded logits.

    ``dlogits_fn(logits)`` returns ``(loss, dloss/dlogits)``.
    """
    trace = _run(model, x, None)
    loss, dlogits = dlogits_fn(trace.logits)
    grads, _ = _backprop(model, trace, dlogits)
    return loss, grads


def bound_norm_penalty_grad(z: np.ndarray, lam: float) -> np.ndarray:
    return lam * z / max(l2_norm(z), 1e-12)


def backward_bounds(
    model: MlpModel,
    bounds: BoundSet,
    x: np.ndarray,
    target_logits: np.ndarray,
    lam: float,
) -> tuple[float, dict[int, np.ndarray]]:
    """Value and bound-gradient of the logit-matching Lagrangian.

    ``H = mean_{x,c} (bounded_logit - target_logit)^2 + lam * sum_l ||z_l||``.
    Model parameters are treated as constants.
    """
    logits, trace = forward_bounded(model, bounds, x)
    if target_logits.shape != logits.shape:
        raise DimensionError(f"target logits {target_logits.shape} vs logits {logits.shape}")
    diff = logits - target_logits
    fit = float(np.mean(diff * diff))
    penalty = sum(l2_norm(bounds.bounds[l]) for l in bounds.layers)
    dlogits = 2.0 * diff / diff.size
    _, gz = _backprop(model, trace, dlogits)
    grads = {}
    for layer in bounds.layers:
        grads[layer] = gz[layer] + bound_norm_penalty_grad(bounds.bounds[layer], lam)
    return fit + lam * penalty, grads


def sgd_step(values, grads, lr: float):
    """One plain SGD step on a model or a bound set.

    Bound sets are projected back onto ``z >= 0`` after the step.
    """
    if isinstance(values, BoundSet):
        return BoundSet({l: np.maximum(values.bounds[l] - lr * grads[l], 0.0) for l in values.layers})
    if isinstance(values, MlpModel):
        return MlpModel(
            [w - lr * g for w, g in zip(values.weights, grads.weights)],
            [b - lr * g for b, g in zip(values.biases, grads.biases)],
            values.head_w - lr * grads.head_w,
            values.head_b - lr * grads.head_b,
            values.prototype_id,
        )
    return np.asarray(values) - lr * np.asarray(grads)


def flatten_params(model: MlpModel) -> np.ndarray:
    return np.concatenate([a.ravel() for a in model.arrays()])


def unflatten_params(vec: np.ndarray, like: MlpModel) -> MlpModel:
    """Inverse of :func:`flatten_params` using ``like`` for the layout."""
    vec = np.asarray(vec, dtype=np.float64)
    arrays = like.arrays()
    total = sum(a.size for a in arrays)
    if vec.shape != (total,):
        raise DimensionError(f"expected {total} parameters, got {vec.shape}")
    out, pos = [], 0
    for a in arrays:
        out.append(vec[pos : pos + a.size].reshape(a.shape).copy())
        pos += a.size
    n = like.n_layers
    return MlpModel(out[0 : 2 * n : 2], out[1 : 2 * n : 2], out[-2], out[-1], like.prototype_id)


def model_to_dict(model: MlpModel, bounds: BoundSet | None = None) -> dict:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "prototype_id": model.prototype_id,
        "dims": model.dims,
        "layers": [{"weight": w.tolist(), "bias": b.tolist()} for w, b in zip(model.weights, model.biases)],
        "head": {"weight": model.head_w.tolist(), "bias": model.head_b.tolist()},
        "bounds": None,
    }
    if bounds is not None:
        doc["bounds"] = {str(l): bounds.bounds[l].tolist() for l in bounds.layers}
    return doc


def model_from_dict(doc: dict) -> tuple[MlpModel, BoundSet | None]:
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a {CHECKPOINT_FORMAT} document")
    weights = [np.array(layer["weight"], dtype=np.float64) for layer in doc["layers"]]
    biases = [np.array(layer["bias"], dtype=np.float64) for layer in doc["layers"]]
    model = MlpModel(
        weights,
        biases,
        np.array(doc["head"]["weight"], dtype=np.float64),
        np.array(doc["head"]["bias"], dtype=np.float64),
        int(doc["prototype_id"]),
    )
    if model.dims != list(doc["dims"]):
        raise DimensionError(f"checkpoint dims {doc['dims']} disagree with arrays {model.dims}")
    bounds = None
    if doc.get("bounds") is not None:
        bounds = BoundSet({int(k): np.array(v, dtype=np.float64) for k, v in doc["bounds"].items()})
    return model, bounds


def save_checkpoint(path, model: MlpModel, bounds: BoundSet | None = None) -> None:
    # json writes floats with repr(), the shortest string that round-trips a double exactly
    Path(path).write_text(json.dumps(model_to_dict(model, bounds)))


def load_checkpoint(path) -> tuple[MlpModel, BoundSet | None]:
    return model_from_dict(json.loads(Path(path).read_text()))

"""Server-side activation-bound defense.

After fusion, per-layer upper bounds on hidden activations are tuned on the
server's synthetic data by gradient descent on a Lagrangian that trades logit
fidelity against the bound norms. The multiplier adapts to the accuracy drop
the bounds cause. Model parameters are never touched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import ConfigError, LabeledDataset
from .model import BoundSet, MlpModel, backward_bounds, default_bounded_layers, forward, forward_bounded, hidden_activations, sgd_step
from .tensor import NonFiniteError, l2_norm

log = logging.getLogger(__name__)


@dataclass
class LambdaController:
    lam: float = 1.0
    alpha: float = 1.1
    delta_pi: float = 0.10
    reference_acc: float | None = None
    ups: int = 0
    downs: int = 0
    lam0: float | None = None

    def __post_init__(self):
        if not self.lam > 0:
            raise ConfigError("lambda must be positive")
        if not self.alpha > 1:
            raise ConfigError("alpha must exceed 1")
        if not 0 <= self.delta_pi <= 1:
            raise ConfigError("delta_pi must lie in [0, 1]")
        if self.lam0 is None:
            self.lam0 = self.lam

    def update(self, bounded_acc: float) -> bool:
        """Tighten (x alpha) while the accuracy drop is tolerable, else relax."""
        tighten = self.reference_acc - bounded_acc <= self.delta_pi
        if tighten:
            self.lam *= self.alpha
            self.ups += 1
        else:
            self.lam /= self.alpha
            self.downs += 1
        return tighten

    def expected_lambda(self) -> float:
        return self.lam0 * self.alpha ** (self.ups - self.downs)


@dataclass
class BoundOptReport:
    iterations: int = 0
    h_values: list[float] = field(default_factory=list)
    accuracies: list[float] = field(default_factory=list)
    lambdas: list[float] = field(default_factory=list)
    reference_acc: float = 0.0
    final_lambda: float = 0.0
    bound_norms: dict[int, float] = field(default_factory=dict)
    ups: int = 0
    downs: int = 0
    # tightest bounds seen this call that met the accuracy constraint;
    # None means none did and the model should run unbounded
    best: BoundSet | None = None
    best_index: int | None = None

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "h": self.h_values,
            "synthetic_acc": self.accuracies,
            "lambda_trace": self.lambdas,
            "reference_acc": self.reference_acc,
            "lambda": self.final_lambda,
            "bound_norms": {str(k): v for k, v in self.bound_norms.items()},
            "lambda_ups": self.ups,
            "lambda_downs": self.downs,
            "best_iteration": self.best_index,
            "best_norms": None if self.best is None else {str(k): v for k, v in self.best.norms().items()},
        }


class BoundOptimizationError(NonFiniteError):
    def __init__(self, message, report: BoundOptReport):
        super().__init__(message)
        self.report = report


def lagrangian(model: MlpModel, bounds: BoundSet, x: np.ndarray, lam: float, target_logits=None) -> float:
    if target_logits is None:
        target_logits = forward(model, x)
    logits, _ = forward_bounded(model, bounds, x)
    diff = logits - target_logits
    return float(np.mean(diff * diff)) + lam * sum(l2_norm(bounds.bounds[l]) for l in bounds.layers)


def predict(logits: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(logits, axis=1)


def synthetic_accuracy(model: MlpModel, data: LabeledDataset, bounds: BoundSet | None = None) -> float:
    if len(data) == 0:
        raise ConfigError("accuracy of an empty dataset is undefined")
    logits = forward(model, data.images) if bounds is None else forward_bounded(model, bounds, data.images)[0]
    return float(np.mean(predict(logits) == data.labels))


def init_bounds(
    model: MlpModel,
    strategy: str = "constant",
    value: float = 50.0,
    margin: float = 1.5,
    data: LabeledDataset | None = None,
    layers=None,
) -> BoundSet:
    """Initial bounds, inactive on the synthetic data.

    ``constant`` fills every entry with ``value``; ``activation_max`` uses the
    per-neuron maximum activation over ``data`` scaled by ``margin``.
    """
    layers = default_bounded_layers(model) if layers is None else list(layers)
    if strategy == "constant":
        return BoundSet.constant(model, value, layers)
    if strategy == "activation_max":
        if data is None or len(data) == 0:
            raise ConfigError("activation_max initialisation needs synthetic data")
        acts = hidden_activations(model, data.images)
        return BoundSet({l: acts[l - 1].max(axis=0) * margin for l in layers})
    raise ConfigError(f"unknown bound init strategy {strategy!r}")


def optimize_bounds(
    model: MlpModel,
    bounds: BoundSet,
    data: LabeledDataset,
    controller: LambdaController,
    iters: int = 5,
    lr: float = 5e-4,
) -> tuple[BoundSet, BoundOptReport]:
    """Run ``iters`` projected gradient steps on the bounds.

    Returns the last iterate, which is what the next round warm-starts from.
    ``report.best`` keeps the smallest-norm bounds (among the starting point
    and every iterate) whose synthetic accuracy stayed within ``delta_pi`` of
    the reference; those are the bounds to deploy. Index 0 is the start.
    The controller is mutated in place (it carries lambda across rounds).
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    x = data.images
    target = forward(model, x)
    controller.reference_acc = float(np.mean(predict(target) == data.labels))
    report = BoundOptReport(reference_acc=controller.reference_acc)

    def consider(candidate, acc, index):
        if controller.reference_acc - acc > controller.delta_pi:
            return
        total = sum(candidate.norms().values())
        if report.best is None or total < sum(report.best.norms().values()):
            report.best, report.best_index = candidate.copy(), index

    consider(bounds, synthetic_accuracy(model, data, bounds), 0)
    for i in range(iters):
        h, grads = backward_bounds(model, bounds, x, target, controller.lam)
        report.h_values.append(h)
        if not np.isfinite(h) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            report.iterations = len(report.h_values)
            raise BoundOptimizationError(f"non-finite Lagrangian value {h}", report)
        bounds = sgd_step(bounds, grads, lr)
        acc = synthetic_accuracy(model, data, bounds)
        controller.update(acc)
        consider(bounds, acc, i + 1)
        report.accuracies.append(acc)
        report.lambdas.append(controller.lam)
    report.iterations = iters
    report.final_lambda = controller.lam
    report.bound_norms = bounds.norms()
    report.ups, report.downs = controller.ups, controller.downs
    log.debug("bounds: ref acc %.3f -> %.3f, lambda %.4g", report.reference_acc, report.accuracies[-1], controller.lam)
    return bounds, report

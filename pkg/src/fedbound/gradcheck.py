"""Central finite-difference checks for the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import (
    BoundSet,
    MlpModel,
    backward_bounds,
    backward_params,
    flatten_params,
    forward,
    forward_bounded,
    init_model,
    unflatten_params,
)
from .tensor import cross_entropy, make_rng

STEP = 1e-5
KINK_TOL = 1e-6
# denominator floor so vanishing gradients are compared in absolute terms
REL_FLOOR = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float = 0.0
    worst: tuple | None = None
    checked: int = 0
    skipped: int = 0
    failures: list = field(default_factory=list)

    def record(self, coord, analytic, numeric, tol):
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), REL_FLOOR)
        self.checked += 1
        if err > self.max_rel_err:
            self.max_rel_err = err
            self.worst = coord
        if err > tol:
            self.failures.append((coord, analytic, numeric, err))


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def _pattern(model, x, bounds=None):
    """Which side of every ReLU kink / clamp tie each unit sits on."""
    if bounds is None:
        bounds = BoundSet({})
    _, trace = forward_bounded(model, bounds, x)
    parts = [p > 0 for p in trace.pre]
    parts += [m for m in trace.masks if m is not None]
    return [p.copy() for p in parts]


def _near_kink(model, x, bounds=None) -> bool:
    if bounds is None:
        bounds = BoundSet({})
    _, trace = forward_bounded(model, bounds, x)
    if any(np.any(np.abs(p) < KINK_TOL) for p in trace.pre):
        return True
    for layer, z in bounds.bounds.items():
        if np.any(np.abs(trace.relu[layer - 1] - z) < KINK_TOL):
            return True
    return False


def _same(pa, pb) -> bool:
    return all(np.array_equal(a, b) for a, b in zip(pa, pb))


def check_params(model: MlpModel, x, labels, tol: float = 1e-5, grads=None) -> CheckResult:
    """Compare backward_params against central differences of the CE loss."""
    res = CheckResult("params")
    if grads is None:
        _, grads = backward_params(model, x, labels)
    analytic = flatten_params(grads)
    theta = flatten_params(model)
    for i in range(len(theta)):
        plus, minus = theta.copy(), theta.copy()
        plus[i] += STEP
        minus[i] -= STEP
        mp, mm = unflatten_params(plus, model), unflatten_params(minus, model)
        if not _same(_pattern(mp, x), _pattern(mm, x)):
            res.skipped += 1
            continue
        numeric = (cross_entropy(forward(mp, x), labels) - cross_entropy(forward(mm, x), labels)) / (2 * STEP)
        res.record(("param", i), analytic[i], numeric, tol)
    return res


def _h(model, bounds, x, target, lam):
    logits, _ = forward_bounded(model, bounds, x)
    diff = logits - target
    return float(np.mean(diff * diff)) + lam * sum(np.linalg.norm(bounds.bounds[l]) for l in bounds.layers)


def check_bounds(model: MlpModel, bounds: BoundSet, x, lam: float, tol: float = 1e-5, grads=None) -> CheckResult:
    """Compare backward_bounds against central differences of the Lagrangian."""
    res = CheckResult("bounds")
    target = forward(model, x)
    if grads is None:
        _, grads = backward_bounds(model, bounds, x, target, lam)
    for layer in bounds.layers:
        z = bounds.bounds[layer]
        for j in range(len(z)):
            bp, bm = bounds.copy(), bounds.copy()
            bp.bounds[layer][j] += STEP
            bm.bounds[layer][j] -= STEP
            if bm.bounds[layer][j] < 0 or not _same(_pattern(model, x, bp), _pattern(model, x, bm)):
                res.skipped += 1
                continue
            numeric = (_h(model, bp, x, target, lam) - _h(model, bm, x, target, lam)) / (2 * STEP)
            res.record(("bound", layer, j), grads[layer][j], numeric, tol)
    return res


def random_case(rng: np.random.Generator, max_width: int = 16, batch: int = 8):
    """A random small model (2-3 hidden layers) with data and partly active bounds."""
    depth = int(rng.integers(2, 4))
    n_in = int(rng.integers(3, max_width + 1))
    widths = [int(rng.integers(3, max_width + 1)) for _ in range(depth)]
    n_classes = int(rng.integers(2, 6))
    model = init_model([n_in] + widths + [n_classes], rng)
    for b in model.biases:
        b += rng.normal(0, 0.1, size=b.shape)
    model.head_b += rng.normal(0, 0.1, size=model.head_b.shape)
    x = rng.normal(0, 1, size=(batch, n_in))
    labels = rng.integers(0, n_classes, size=batch)
    _, trace = forward_bounded(model, BoundSet({}), x)
    bounds = {}
    for layer in range(1, depth + 1):
        acts = trace.relu[layer - 1]
        # about half the units clamp on some samples
        scale = rng.uniform(0.3, 1.2, size=acts.shape[1])
        bounds[layer] = np.maximum(acts.max(axis=0) * scale, 0.05)
    return model, x, labels, BoundSet(bounds)


def run_gradcheck(seed: int = 0, n_models: int = 20, tol: float = 1e-5, corrupt: bool = False) -> dict:
    """Gradient self-check over ``n_models`` random cases.

    ``corrupt`` perturbs the analytic gradients (a negative control) and must
    make the check fail.
    """
    rng = make_rng(seed, "gradcheck")
    results = []
    for k in range(n_models):
        model, x, labels, bounds = random_case(rng)
        while _near_kink(model, x, bounds):
            model, x, labels, bounds = random_case(rng)
        lam = float(rng.uniform(0.0, 2.0))
        pgrads = bgrads = None
        if corrupt:
            _, pgrads = backward_params(model, x, labels)
            pgrads.head_b[0] += 1e-2
            _, bgrads = backward_bounds(model, bounds, x, forward(model, x), lam)
            first = bounds.layers[0]
            bgrads[first] = bgrads[first] + 1e-2
        rp = check_params(model, x, labels, tol, pgrads)
        rb = check_bounds(model, bounds, x, lam, tol, bgrads)
        results.append((k, rp, rb))
    worst = max((r for _, rp, rb in results for r in (rp, rb)), key=lambda r: r.max_rel_err)
    failures = [(k, r.name, f) for k, rp, rb in results for r in (rp, rb) for f in r.failures]
    return {
        "passed": not failures,
        "max_rel_err": worst.max_rel_err,
        "worst": worst.worst,
        "checked": sum(r.checked for _, rp, rb in results for r in (rp, rb)),
        "skipped": sum(r.skipped for _, rp, rb in results for r in (rp, rb)),
        "failures": failures,
    }

import math

import numpy as np
import pytest

from fedbound.gradcheck import check_bounds, check_params
from fedbound.model import (
    BoundSet,
    MlpModel,
    backward_bounds,
    backward_params,
    flatten_params,
    forward,
    forward_bounded,
    hidden_activations,
    init_model,
    load_checkpoint,
    model_from_dict,
    model_to_dict,
    save_checkpoint,
    sgd_step,
    unflatten_params,
)
from fedbound.tensor import BIG, DimensionError


def scalar_forward(model, x, bounds=None):
    """Loop-by-loop re-implementation used as an oracle."""
    out = []
    for row in x:
        h = [float(v) for v in row]
        for layer, (w, b) in enumerate(zip(model.weights, model.biases), start=1):
            nxt = []
            for i in range(w.shape[0]):
                s = float(b[i])
                for j in range(w.shape[1]):
                    s += float(w[i, j]) * h[j]
                a = s if s > 0 else 0.0
                if bounds is not None and layer in bounds.bounds:
                    a = min(a, float(bounds.bounds[layer][i]))
                nxt.append(a)
            h = nxt
        logits = []
        for c in range(model.head_w.shape[0]):
            s = float(model.head_b[c])
            for j in range(len(h)):
                s += float(model.head_w[c, j]) * h[j]
            logits.append(s)
        out.append(logits)
    return np.array(out)


def zero_model(dims):
    return MlpModel(
        [np.zeros((o, i)) for i, o in zip(dims[:-2], dims[1:-1])],
        [np.zeros(o) for o in dims[1:-1]],
        np.zeros((dims[-1], dims[-2])),
        np.zeros(dims[-1]),
    )


def test_model_rejects_unchained_layers():
    with pytest.raises(DimensionError):
        MlpModel([np.zeros((3, 2)), np.zeros((2, 4))], [np.zeros(3), np.zeros(2)], np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(DimensionError):
        MlpModel([np.zeros((3, 2))], [np.zeros(3)], np.zeros((1, 3)), np.zeros(1))


def test_zero_model_gives_zero_logits():
    assert np.all(forward(zero_model([4, 3, 2]), np.ones((5, 4))) == 0.0)


def test_hand_computed_forward():
    eye = np.eye(2)
    model = MlpModel([eye], [np.zeros(2)], eye.copy(), np.zeros(2))
    np.testing.assert_array_equal(forward(model, np.array([[1.0, -2.0]])), [[1.0, 0.0]])


def test_forward_matches_scalar_oracle(small_model, rng):
    x = rng.normal(size=(7, 6))
    np.testing.assert_allclose(forward(small_model, x), scalar_forward(small_model, x), rtol=0, atol=1e-12)
    bounds = BoundSet({1: rng.uniform(0, 1, 5), 2: rng.uniform(0, 1, 4)})
    np.testing.assert_allclose(
        forward_bounded(small_model, bounds, x)[0], scalar_forward(small_model, x, bounds), rtol=0, atol=1e-12
    )


def test_forward_width_mismatch(small_model):
    with pytest.raises(DimensionError):
        forward(small_model, np.ones((2, 5)))


def test_bounded_width_mismatch(small_model):
    with pytest.raises(DimensionError):
        forward_bounded(small_model, BoundSet({1: np.ones(3)}), np.ones((2, 6)))


def test_big_bounds_are_identity_bitwise(small_model, rng):
    x = rng.normal(size=(9, 6))
    bounds = BoundSet.constant(small_model, BIG)
    assert np.array_equal(forward_bounded(small_model, bounds, x)[0], forward(small_model, x))


def test_bounds_at_max_activation_are_identity_bitwise(small_model, rng):
    x = rng.normal(size=(9, 6))
    acts = hidden_activations(small_model, x)
    bounds = BoundSet({l: acts[l - 1].max(axis=0) for l in (1, 2)})
    logits, trace = forward_bounded(small_model, bounds, x)
    assert np.array_equal(logits, forward(small_model, x))
    # ties count as the activation path
    assert not any(m.any() for m in trace.masks)


def test_zero_bounds_give_head_bias(small_model, rng):
    x = rng.normal(size=(4, 6))
    logits, trace = forward_bounded(small_model, BoundSet.constant(small_model, 0.0), x)
    assert np.array_equal(logits, np.tile(small_model.head_b, (4, 1)))
    assert all(np.all(c == 0) for c in trace.clamped)


def test_single_unit_clamp_hand_computation():
    model = MlpModel([np.array([[1.0]])], [np.zeros(1)], np.array([[1.0], [0.0]]), np.zeros(2))
    logits, trace = forward_bounded(model, BoundSet({1: np.array([2.0])}), np.array([[3.0]]))
    assert logits[0, 0] == 2.0
    assert trace.masks[0][0, 0]


def test_trace_invariants(small_model, rng):
    x = rng.normal(size=(6, 6))
    bounds = BoundSet({2: rng.uniform(0, 0.5, 4)})
    _, trace = forward_bounded(small_model, bounds, x)
    assert np.array_equal(trace.clamped[0], trace.relu[0])
    assert trace.masks[0] is None
    assert np.array_equal(trace.clamped[1], np.minimum(trace.relu[1], bounds.bounds[2]))
    assert np.array_equal(trace.masks[1], bounds.bounds[2] < trace.relu[1])


def test_backward_params_finite_differences(rng):
    model = init_model([5, 7, 4, 3], rng)
    for b in model.biases:
        b += 0.1
    x = rng.normal(size=(8, 5))
    labels = rng.integers(0, 3, size=8)
    res = check_params(model, x, labels, tol=1e-6)
    assert res.checked > 0
    assert res.max_rel_err < 1e-6, res.failures[:3]


def test_backward_bounds_finite_differences(rng):
    model = init_model([5, 7, 4, 3], rng)
    x = rng.normal(size=(8, 5))
    acts = hidden_activations(model, x)
    bounds = BoundSet({l: np.maximum(acts[l - 1].max(axis=0) * rng.uniform(0.3, 1.2, a.shape[1]), 0.05)
                       for l, a in zip((1, 2), acts)})
    res = check_bounds(model, bounds, x, lam=0.7, tol=1e-5)
    assert res.checked > 0
    assert res.max_rel_err < 1e-5, res.failures[:3]


def test_params_gradient_vanishes_at_confident_prediction():
    model = MlpModel([np.eye(2)], [np.zeros(2)], np.array([[60.0, 0.0], [0.0, 0.0]]), np.zeros(2))
    x = np.array([[1.0, 0.0]])
    loss, grads = backward_params(model, x, np.array([0]))
    assert loss < 1e-9
    assert np.linalg.norm(flatten_params(grads)) < 1e-6


def test_params_gradient_mean_invariant_to_duplication(small_model, rng):
    x = rng.normal(size=(5, 6))
    y = rng.integers(0, 3, size=5)
    _, g1 = backward_params(small_model, x, y)
    _, g2 = backward_params(small_model, np.concatenate([x, x]), np.concatenate([y, y]))
    np.testing.assert_allclose(flatten_params(g1), flatten_params(g2), rtol=0, atol=1e-12)


def test_relu_subgradient_zero_at_kink():
    model = MlpModel([np.array([[1.0]])], [np.zeros(1)], np.array([[1.0], [-1.0]]), np.zeros(2))
    _, grads = backward_params(model, np.array([[0.0]]), np.array([0]))
    assert grads.weights[0][0, 0] == 0.0 and grads.biases[0][0] == 0.0


def test_inactive_bounds_gradient_is_norm_direction(small_model, rng):
    x = rng.normal(size=(4, 6))
    bounds = BoundSet.constant(small_model, 1e6)
    target = forward(small_model, x)
    h, grads = backward_bounds(small_model, bounds, x, target, lam=2.0)
    for l in bounds.layers:
        z = bounds.bounds[l]
        np.testing.assert_allclose(grads[l], 2.0 * z / np.linalg.norm(z), rtol=1e-15)
    assert h == pytest.approx(2.0 * sum(np.linalg.norm(bounds.bounds[l]) for l in bounds.layers))


def test_bounds_gradient_hand_case():
    model = MlpModel([np.eye(2)], [np.zeros(2)], np.zeros((2, 2)), np.zeros(2))
    bounds = BoundSet({1: np.array([3.0, 4.0])})
    x = np.zeros((1, 2))
    _, grads = backward_bounds(model, bounds, x, forward(model, x), lam=1.0)
    np.testing.assert_allclose(grads[1], [0.6, 0.8], rtol=1e-15)


def test_clamp_routing():
    # one active clamp, one inactive: only the active one sees the fit gradient
    model = MlpModel([np.eye(2)], [np.zeros(2)], np.array([[1.0, 1.0], [0.0, 0.0]]), np.zeros(2))
    x = np.array([[2.0, 0.5]])
    bounds = BoundSet({1: np.array([1.0, 1.0])})
    target = forward(model, x)
    _, grads = backward_bounds(model, bounds, x, target, lam=0.0)
    assert grads[1][0] != 0.0
    assert grads[1][1] == 0.0
    base = forward_bounded(model, bounds, x)[0]
    # nudging the clamped input leaves the output unchanged, the free one does not
    assert np.array_equal(forward_bounded(model, bounds, x + [[1e-6, 0.0]])[0], base)
    assert not np.array_equal(forward_bounded(model, bounds, x + [[0.0, 1e-6]])[0], base)


def test_sgd_step_values():
    assert sgd_step(1.0, 2.0, 0.1) == pytest.approx(0.8)
    bounds = BoundSet({1: np.array([0.01, 1.0])})
    out = sgd_step(bounds, {1: np.array([2.0, 0.0])}, 0.01)
    np.testing.assert_array_equal(out.bounds[1], [0.0, 1.0])


def test_sgd_zero_gradient_is_identity(small_model):
    zeros = unflatten_params(np.zeros_like(flatten_params(small_model)), small_model)
    assert np.array_equal(flatten_params(sgd_step(small_model, zeros, 0.5)), flatten_params(small_model))


def test_flatten_round_trip_bitwise(small_model):
    vec = flatten_params(small_model)
    back = unflatten_params(vec, small_model)
    assert np.array_equal(flatten_params(back), vec)
    assert len(flatten_params(zero_model([6, 5, 4, 3]))) == 6 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3
    assert not flatten_params(zero_model([6, 5, 4, 3])).any()


def test_flatten_single_entry_difference(small_model):
    other = small_model.copy()
    other.weights[1][2, 3] += 1.0
    assert np.count_nonzero(flatten_params(small_model) != flatten_params(other)) == 1


def test_unflatten_length_mismatch(small_model):
    with pytest.raises(DimensionError):
        unflatten_params(np.zeros(3), small_model)


def test_negative_bounds_rejected():
    with pytest.raises(ValueError):
        BoundSet({1: np.array([-0.1])})


def test_checkpoint_round_trip_is_lossless(tmp_path, small_model, rng):
    bounds = BoundSet({1: rng.uniform(0, 1, 5) / 3})
    small_model.weights[0][0, 0] = math.pi * 1e-300
    path = tmp_path / "m.json"
    save_checkpoint(path, small_model, bounds)
    model, b = load_checkpoint(path)
    assert np.array_equal(flatten_params(model), flatten_params(small_model))
    assert np.array_equal(b.bounds[1], bounds.bounds[1])
    model2, b2 = model_from_dict(model_to_dict(small_model))
    assert b2 is None and model2.dims == small_model.dims

import json

import numpy as np
import pytest

from lassornet import bilstm
from lassornet.bilstm import BiLstmModel, SequenceBatch, init_model, param_shapes
from lassornet.errors import DimensionMismatch
from helpers import flat_view, gradient_check, random_batch, random_model, relative_errors


def _sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def reference_predictions(model, xs):
    """Loop-by-loop re-statement of the forward pass, one person at a time."""
    prm = model.params
    H = model.H
    out = []
    for x in xs:
        n = len(x)

        def run(d, order):
            h, c = np.zeros(H), np.zeros(H)
            hs = np.zeros((n, H))
            for j in order:
                z = [x[j] @ prm[f"{d}.W_in"][m] + prm[f"{d}.b_in"][m] + h @ prm[f"{d}.W_rec"][m] + prm[f"{d}.b_rec"][m] for m in range(4)]
                e, p, a, o = _sigmoid(z[0]), _sigmoid(z[1]), np.tanh(z[2]), _sigmoid(z[3])
                c = p * c + e * a
                h = o * np.tanh(c)
                hs[j] = h
            return hs

        hf = run("fwd", range(n))
        hb = run("bwd", range(n - 1, -1, -1))
        o = hf @ prm["W_fo"] + hb @ prm["W_bo"] + prm["b_o"]
        out.append(o @ prm["theta"] + x @ prm["beta"] + prm["beta0"])
    return out


def test_param_count_small_model():
    assert sum(int(np.prod(s)) for s in param_shapes(6, 4, 3).values()) == 431


def test_forward_matches_reference_with_ragged_lengths():
    model = random_model(5, 3, 2, seed=1)
    _, xs, _ = random_batch(5, [4, 1, 6], seed=2)
    got = bilstm.predict_sequences(model, xs)
    for g, r in zip(got, reference_predictions(model, xs)):
        np.testing.assert_allclose(g, r, rtol=1e-12, atol=1e-12)


def test_zero_model_predicts_intercept():
    model = init_model(4, 3, 2, seed=0)
    for k in model.params:
        model.params[k][...] = 0.0
    model.params["beta0"][:] = [0.3, -0.2]
    batch, xs, _ = random_batch(4, [3, 5], seed=0)
    for p in bilstm.predict_sequences(model, xs):
        np.testing.assert_array_equal(p, np.tile([0.3, -0.2], (len(p), 1)))


def test_theta_zero_is_linear_and_order_free():
    model = random_model(4, 3, 2, seed=4)
    model.params["theta"][:] = 0.0
    _, xs, _ = random_batch(4, [5], seed=5)
    x = xs[0]
    lin = x @ model.params["beta"] + model.params["beta0"]
    np.testing.assert_allclose(bilstm.predict_sequences(model, [x])[0], lin, atol=1e-14)
    perm = np.random.default_rng(0).permutation(len(x))
    np.testing.assert_allclose(bilstm.predict_sequences(model, [x[perm]])[0], lin[perm], atol=1e-14)


def test_context_dependence():
    model = random_model(4, 3, 2, seed=6)
    _, xs, _ = random_batch(4, [5], seed=7)
    alone = bilstm.predict_sequences(model, [xs[0][2:3]])[0][0]
    inside = bilstm.predict_sequences(model, xs)[0][2]
    assert np.abs(alone - inside).max() > 1e-6


def test_reversal_symmetry():
    model = random_model(4, 3, 2, seed=8)
    swapped = model.copy()
    for k in ("W_in", "W_rec", "b_in", "b_rec"):
        swapped.params[f"fwd.{k}"], swapped.params[f"bwd.{k}"] = model.params[f"bwd.{k}"].copy(), model.params[f"fwd.{k}"].copy()
    swapped.params["W_fo"], swapped.params["W_bo"] = model.params["W_bo"].copy(), model.params["W_fo"].copy()
    _, xs, _ = random_batch(4, [5, 2, 3], seed=9)
    a = bilstm.predict_sequences(model, xs)
    b = bilstm.predict_sequences(swapped, [x[::-1] for x in xs])
    for p, q in zip(a, b):
        np.testing.assert_allclose(p, q[::-1], rtol=1e-12, atol=1e-13)


def test_forward_deterministic():
    model = random_model(4, 3, 2, seed=10)
    batch, _, _ = random_batch(4, [3, 4], seed=11)
    np.testing.assert_array_equal(bilstm.forward(model, batch), bilstm.forward(model, batch))


def test_loss_examples():
    model = init_model(3, 2, 2, seed=0)
    batch, xs, ys = random_batch(3, [2, 3], seed=12)
    model.params["beta0"][:] = [0.1, 0.2]
    # with theta = 0 and beta = 0 the prediction is beta0 everywhere
    expect = sum(np.sum((y - [0.1, 0.2]) ** 2) for y in ys) / (2 * 5)
    assert bilstm.loss(model, batch) == pytest.approx(expect, rel=1e-14)
    exact = random_model(3, 2, 2, seed=13)
    preds = bilstm.predict_sequences(exact, xs)
    perfect = SequenceBatch.from_sequences(xs, preds)
    assert bilstm.loss(exact, perfect) == pytest.approx(0.0, abs=1e-30)


def test_loss_matches_reference_formula():
    model = random_model(4, 3, 2, seed=14)
    batch, xs, ys = random_batch(4, [4, 2, 5], seed=15)
    ref = reference_predictions(model, xs)
    n = sum(len(y) for y in ys)
    expect = sum(np.sum((y - r) ** 2) for y, r in zip(ys, ref)) / (2 * n)
    assert bilstm.loss(model, batch) == pytest.approx(expect, rel=1e-12)


def test_gradient_finite_differences_every_coordinate():
    model = random_model(6, 4, 3, seed=0)
    batch, _, _ = random_batch(6, [3, 3], seed=1)
    coords = flat_view(model)
    a, b = gradient_check(model, batch, coords)
    assert np.linalg.norm(a - b) / np.linalg.norm(a) <= 1e-5
    assert relative_errors(a, b).max() <= 1e-5


def test_beta_gradient_is_least_squares_gradient():
    model = random_model(5, 3, 2, seed=2)
    model.params["theta"][:] = 0.0
    batch, xs, ys = random_batch(5, [4, 3], seed=3)
    X, Y = np.vstack(xs), np.vstack(ys)
    r = X @ model.params["beta"] + model.params["beta0"] - Y
    g = bilstm.gradients(model, batch)
    np.testing.assert_allclose(g["beta"], X.T @ r / len(X), rtol=1e-12, atol=1e-15)
    np.testing.assert_allclose(g["beta0"], r.mean(axis=0), rtol=1e-12, atol=1e-15)


def test_duplicated_person_leaves_gradient_unchanged():
    model = random_model(4, 3, 2, seed=16)
    _, xs, ys = random_batch(4, [4], seed=17)
    once = SequenceBatch.from_sequences(xs, ys)
    twice = SequenceBatch.from_sequences(xs * 2, ys * 2)
    g1, g2 = bilstm.gradients(model, once), bilstm.gradients(model, twice)
    for k in g1:
        np.testing.assert_allclose(g2[k], g1[k], rtol=1e-12, atol=1e-15)
        # the unnormalised sum doubles
        np.testing.assert_allclose(g2[k] * twice.n_samples, 2 * g1[k] * once.n_samples, rtol=1e-12, atol=1e-14)


def test_dimension_mismatch():
    model = random_model(4, 2, 2, seed=0)
    batch, _, _ = random_batch(5, [2], seed=0)
    with pytest.raises(DimensionMismatch):
        bilstm.forward(model, batch)
    with pytest.raises(DimensionMismatch):
        SequenceBatch.from_sequences([np.zeros((2, 3)), np.zeros((2, 4))])


def test_input_weight_rows_round_trip():
    model = random_model(5, 3, 2, seed=18)
    rows = model.input_weight_rows()
    assert rows.shape == (5, 24)
    np.testing.assert_array_equal(rows[2, :3], model.params["bwd.W_in"][0, 2])
    np.testing.assert_array_equal(rows[2, 12:15], model.params["fwd.W_in"][0, 2])
    other = model.copy()
    other.set_input_weight_rows(rows * 2)
    np.testing.assert_array_equal(other.params["fwd.W_in"], 2 * model.params["fwd.W_in"])


def test_constraint_violation():
    model = init_model(3, 2, 2, seed=0)
    assert model.constraint_violation(1.0) == 0.0
    model.params["fwd.W_in"][1, 0, 1] = 0.5
    assert model.constraint_violation(1.0) == pytest.approx(0.5)
    model.params["beta"][0] = [0.3, 0.4]
    assert model.constraint_violation(1.0) == pytest.approx(0.0)


def test_serialisation_round_trip():
    model = random_model(4, 3, 2, seed=19)
    model.feature_names = ["a", "b", "c", "d"]
    back = BiLstmModel.from_dict(json.loads(model.to_json()))
    assert back.feature_names == model.feature_names
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    bad = model.to_dict()
    bad["params"]["beta"]["shape"] = [5, 2]
    with pytest.raises(DimensionMismatch):
        BiLstmModel.from_dict(bad)


def test_init_model_is_seeded_and_feasible():
    a, b = init_model(5, 4, 3, seed=7), init_model(5, 4, 3, seed=7)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])
    assert not a.input_weight_rows().any()
    assert not a.params["beta"].any()
    with pytest.raises(ValueError):
        init_model(0, 1, 1, seed=0)

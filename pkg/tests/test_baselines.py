import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lassornet.baselines import (
    ElasticNetModel,
    PlsrModel,
    en_lambda_max,
    fit_elastic_net,
    fit_elastic_net_xy,
    fit_plsr,
    fit_plsr_xy,
    hyper_search_en,
    intercept_model,
    kkt_residual,
    nipals,
    panel_columns,
    predict,
    read_panel,
    solve_group_elastic_net,
)
from lassornet.circular import circ_error, encode, mae
from lassornet.data import SynthSpec, design, prepare_split, synth_cohort, targets
from lassornet.errors import DimensionMismatch, NonConvergence, RankDeficient
from oracles import group_lasso_bcd


def problem(seed, n=40, d=6):
    r = np.random.default_rng(seed)
    X = r.normal(size=(n, d))
    Y = X @ r.normal(size=(d, 2)) * 0.3 + r.normal(size=(n, 2))
    return X, Y


def test_lambda_zero_is_least_squares():
    X, Y = problem(0)
    b0, B, _, _ = solve_group_elastic_net(X, Y, 0.0, 0.5)
    A = np.hstack([np.ones((len(X), 1)), X])
    coef = np.linalg.solve(A.T @ A, A.T @ Y)
    np.testing.assert_allclose(B, coef[1:], atol=1e-6)
    np.testing.assert_allclose(b0, coef[0], atol=1e-6)


@pytest.mark.parametrize("alpha", [1.0, 0.4])
def test_lambda_max_gives_zero(alpha):
    X, Y = problem(1)
    lm = en_lambda_max(X, Y, alpha)
    b0, B, _, _ = solve_group_elastic_net(X, Y, lm * (1 + 1e-9), alpha)
    assert not B.any()
    np.testing.assert_allclose(b0, Y.mean(axis=0), atol=1e-12)
    _, B2, _, _ = solve_group_elastic_net(X, Y, lm * 0.9, alpha)
    assert B2.any()


@given(st.integers(0, 10_000), st.floats(0.05, 1.0), st.floats(0.01, 0.9), st.sampled_from(["printed", "conventional"]))
def test_kkt_at_solution(seed, alpha, frac, ridge):
    X, Y = problem(seed, n=30, d=5)
    lam = frac * en_lambda_max(X, Y, alpha)
    b0, B, kkt, _ = solve_group_elastic_net(X, Y, lam, alpha, ridge=ridge)
    assert kkt <= 1e-6
    assert kkt_residual(X, Y, b0, B, lam, alpha, ridge) <= 1e-6


def test_alpha_one_matches_block_coordinate_descent():
    X, Y = problem(2, n=50, d=10)
    lam = 0.3 * en_lambda_max(X, Y, 1.0)
    b0, B, _, _ = solve_group_elastic_net(X, Y, lam, 1.0)
    rb0, rB = group_lasso_bcd(X, Y, lam)
    np.testing.assert_allclose(B, rB, atol=1e-6)
    np.testing.assert_allclose(b0, rb0, atol=1e-6)


def test_printed_and_conventional_ridge_differ():
    X, Y = problem(3)
    lam = 0.05
    _, a, _, _ = solve_group_elastic_net(X, Y, lam, 0.2, ridge="printed")
    _, b, _, _ = solve_group_elastic_net(X, Y, lam, 0.2, ridge="conventional")
    assert np.abs(a - b).max() > 1e-6
    with pytest.raises(ValueError):
        solve_group_elastic_net(X, Y, lam, 0.2, ridge="other")


def test_non_convergence_reports_residual():
    X, Y = problem(4)
    with pytest.raises(NonConvergence) as info:
        solve_group_elastic_net(X, Y, 0.01, 0.5, max_iter=3)
    assert info.value.kkt_residual > 1e-6


def test_panel_restriction(small_split):
    genes = small_split.train.gene_ids
    m = fit_elastic_net(small_split, 1e-3, 1.0, panel=[genes[2]])
    assert m.n_selected <= 1
    assert set(m.selected) <= {2}
    cols = panel_columns(genes, [genes[2], "absent"], augmented=True)
    assert cols.tolist() == [2, len(genes), len(genes) + 1]
    with pytest.raises(DimensionMismatch):
        panel_columns(genes, ["absent"], augmented=False)


def test_full_panel_equals_all_genes(small_split):
    a = fit_elastic_net(small_split, 5e-3, 0.7)
    b = fit_elastic_net(small_split, 5e-3, 0.7, panel=list(small_split.train.gene_ids))
    np.testing.assert_array_equal(a.beta, b.beta)
    np.testing.assert_array_equal(a.beta0, b.beta0)


def test_zeroed_zt_columns_reproduce_plain():
    X, Y = problem(5)
    aug = np.hstack([X, np.zeros((len(X), 2))])
    plain = fit_elastic_net_xy(X, Y, 0.02, 0.6)
    augm = fit_elastic_net_xy(aug, Y, 0.02, 0.6)
    np.testing.assert_allclose(augm.beta[:-2], plain.beta, atol=1e-12)
    assert not augm.beta[-2:].any()


def test_hyper_search_single_cell(small_split):
    m, records = hyper_search_en(small_split, [(1e-2, 0.5)])
    direct = fit_elastic_net(small_split, 1e-2, 0.5)
    np.testing.assert_allclose(m.beta, direct.beta, atol=1e-7)
    assert len(records) == 1
    with pytest.raises(ValueError):
        hyper_search_en(small_split, [])


def test_hyper_search_is_argmin(small_split):
    grid = [(lam, a) for lam in (1e-3, 1e-2, 1e-1) for a in (0.5, 1.0)]
    m, records = hyper_search_en(small_split, grid)
    best = min(records, key=lambda r: r["val_mse"])
    assert (m.lam, m.alpha) == (best["lam"], best["alpha"])


def test_noise_cohort_prefers_heavy_penalty():
    c = synth_cohort(SynthSpec(n_people=20, n_samples=6, n_genes=30, n_rhythmic=0), seed=1)
    split = prepare_split(c, seed=1)
    X, Y = design(split.train, False), targets(split.train)
    top = en_lambda_max(X, Y, 1.0)
    grid = [(top * f, 1.0) for f in np.logspace(0, -3, 12)]
    m, _ = hyper_search_en(split, grid)
    assert m.lam >= 0.1 * top
    # the input-driven part of the prediction is small next to the target spread
    Yv = targets(split.validation)
    driven = np.mean(np.sum((design(split.validation, False) @ m.beta) ** 2, axis=1))
    assert driven <= 0.1 * np.mean(np.sum((Yv - Yv.mean(axis=0)) ** 2, axis=1))


def test_noiseless_two_gene_fit():
    spec = SynthSpec(n_people=10, n_samples=6, n_genes=2, n_rhythmic=2, noise_sd=0.0)
    split = prepare_split(synth_cohort(spec, 4), seed=4)
    m = fit_elastic_net(split, 1e-6, 1.0)
    hours, flagged = predict(m, split.test)
    truth = np.concatenate([p.ict for p in split.test.people])
    assert not flagged.any()
    assert mae(circ_error(truth, hours)) <= 0.5


def test_predict_intercept_and_passthrough():
    m = ElasticNetModel(encode(9.0), np.zeros((3, 2)), 1.0, 1.0)
    hours, flagged = predict(m, np.random.default_rng(0).normal(size=(4, 3)))
    np.testing.assert_allclose(hours, 9.0, atol=1e-12)
    assert not flagged.any()
    zt = np.array([1.0, 7.5, 23.0])
    beta = np.zeros((4, 2))
    beta[2:] = np.eye(2)
    aug = ElasticNetModel(np.zeros(2), beta, 1.0, 1.0, augmented=True)
    X = np.hstack([np.ones((3, 2)), encode(zt)])
    np.testing.assert_allclose(predict(aug, X)[0], zt, atol=1e-12)


def test_predict_flags_zero_pairs_and_checks_width():
    m = ElasticNetModel(np.zeros(2), np.zeros((2, 2)), 1.0, 1.0)
    hours, flagged = predict(m, np.ones((3, 2)))
    assert flagged.all() and np.isnan(hours).all()
    with pytest.raises(DimensionMismatch):
        predict(m, np.ones((3, 5)))


def test_intercept_model(small_split):
    m = intercept_model(small_split)
    np.testing.assert_allclose(m.beta0, targets(small_split.train).mean(axis=0))
    assert m.n_selected == 0


def test_plsr_exact_recovery():
    r = np.random.default_rng(6)
    X = r.normal(size=(30, 5))
    Y = X @ r.normal(size=(5, 2)) + [0.5, -1.0]
    m = fit_plsr_xy(X, Y, n_latent=5, K=5)
    assert np.abs(m.predict_pairs(X) - Y).max() <= 1e-8


def test_plsr_k_equals_d_is_no_op():
    r = np.random.default_rng(7)
    X, Y = r.normal(size=(25, 8)), r.normal(size=(25, 2))
    m = fit_plsr_xy(X, Y, 3, 8)
    assert m.selected.tolist() == list(range(8))
    small = fit_plsr_xy(X, Y, 3, 4)
    assert len(small.selected) == 4
    assert np.count_nonzero(np.abs(small.coef).sum(axis=1)) <= 4


def test_plsr_first_component_is_top_singular_vector():
    r = np.random.default_rng(42)
    X, Y = r.normal(size=(40, 7)), r.normal(size=(40, 2))
    Xc, Yc = X - X.mean(axis=0), Y - Y.mean(axis=0)
    W, _, _, _ = nipals(Xc, Yc, 1)
    u = np.linalg.svd(Xc.T @ Yc)[0][:, 0]
    assert min(np.abs(W[:, 0] - u).max(), np.abs(W[:, 0] + u).max()) <= 1e-8


def test_plsr_scores_orthogonal():
    r = np.random.default_rng(8)
    X, Y = r.normal(size=(40, 10)), r.normal(size=(40, 2))
    _, _, _, T = nipals(X - X.mean(axis=0), Y - Y.mean(axis=0), 6)
    gram = T.T @ T
    off = gram - np.diag(np.diag(gram))
    assert np.abs(off).max() <= 1e-8


def test_plsr_errors():
    X = np.zeros((10, 3))
    Y = np.random.default_rng(0).normal(size=(10, 2))
    with pytest.raises(RankDeficient):
        fit_plsr_xy(X, Y, 1, 3)
    with pytest.raises(ValueError):
        fit_plsr_xy(np.ones((4, 3)), Y[:4], 5, 3)
    with pytest.raises(ValueError):
        fit_plsr_xy(np.ones((4, 3)), Y[:4], 1, 4)


def test_model_dict_round_trips(small_split):
    en = fit_elastic_net(small_split, 1e-2, 0.5, augmented=True)
    back = ElasticNetModel.from_dict(en.to_dict())
    X = design(small_split.test, True)
    np.testing.assert_array_equal(back.predict_pairs(X), en.predict_pairs(X))
    pl = fit_plsr(small_split, 2, 5)
    back = PlsrModel.from_dict(pl.to_dict())
    X = design(small_split.test, False)
    np.testing.assert_array_equal(back.predict_pairs(X), pl.predict_pairs(X))


def test_read_panel(tmp_path):
    f = tmp_path / "panel.txt"
    f.write_text("# header\nPER1\n\n  ARNTL  \nNR1D1 # trailing comment\n")
    assert read_panel(f) == ["PER1", "ARNTL", "NR1D1"]

from itertools import islice

import numpy as np
import pytest

from src.main.extract.synth_data import observation_mask, smooth_instance
from src.main.ml.completion import (
    Factorization, MaskedMatrix, PenaltyWeights, factorized_complete, factorized_graph_complete,
    factorized_objective, graph_reg_complete, proximal_iterates, singular_value_threshold, svd_factors,
    svt_complete, threshold_schedule,
)
from src.main.ml.gradcheck import random_graph
from src.main.ml.graph import laplacians, path_graph
from src.utils.errors import DimensionError, ParameterError, ValidationError


def heldout_rmse(estimate, truth, mask):
    hidden = mask == 0
    return float(np.sqrt(np.mean((estimate[hidden] - truth[hidden]) ** 2)))


def rank_one(m, n, seed):
    rng = np.random.default_rng(seed)
    return np.outer(rng.uniform(1.0, 2.0, m), rng.uniform(1.0, 2.0, n))


def rank_two(m, n, seed):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((m, 2)) @ rng.standard_normal((2, n))


def test_masked_matrix_zeroes_unobserved_entries():
    y = MaskedMatrix([[1.0, np.nan], [3.0, 4.0]], [[1, 0], [0, 1]])
    assert np.array_equal(y.values, [[1.0, 0.0], [0.0, 4.0]])
    assert y.observed == 2


def test_masked_matrix_validation():
    with pytest.raises(DimensionError):
        MaskedMatrix(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValidationError):
        MaskedMatrix(np.ones((2, 2)), np.full((2, 2), 0.5))


def test_penalty_weights_reject_negative():
    with pytest.raises(ParameterError):
        PenaltyWeights(gamma_d=-1.0)


def test_singular_value_threshold_shrinks_spectrum():
    mat = np.diag([3.0, 1.0, 0.5])
    out, s = singular_value_threshold(mat, 1.0)
    assert np.allclose(s, [2.0, 0.0, 0.0])
    assert np.allclose(out, np.diag([2.0, 0.0, 0.0]))


def test_svt_full_observation_returns_input():
    truth = rank_two(6, 5, seed=0)
    x = svt_complete(MaskedMatrix(truth, np.ones_like(truth)), gamma=1.0, threshold=1e-8)
    assert np.allclose(x, truth, atol=1e-6)


def test_svt_all_zero_observations():
    mask = observation_mask(5, 4, 0.6, np.random.default_rng(0))
    x = svt_complete(MaskedMatrix(np.zeros((5, 4)), mask))
    assert np.array_equal(x, np.zeros((5, 4)))


def test_svt_recovers_rank_one_matrix():
    truth = rank_one(20, 15, seed=1)
    mask = observation_mask(20, 15, 0.6, np.random.default_rng(1))
    x = svt_complete(MaskedMatrix(truth, mask), gamma=1.0, threshold=0.1, max_iters=5000, tol=1e-9)
    assert heldout_rmse(x, truth, mask) < 0.05 * np.sqrt(np.mean(truth ** 2))


def test_svt_recovers_four_by_four_rank_one_from_eight_entries():
    rng = np.random.default_rng(0)
    truth = np.outer(rng.uniform(0.95, 1.05, 4), rng.uniform(0.95, 1.05, 4))
    # each row sees its own column and the next one: 8 entries, one cycle through every row and column
    mask = np.zeros((4, 4))
    for i in range(4):
        mask[i, i] = mask[i, (i + 1) % 4] = 1.0
    x = svt_complete(MaskedMatrix(truth, mask), gamma=1.0, threshold=1e-6, continuation=0.25,
                     max_iters=20000, tol=1e-12)
    assert mask.sum() == 8
    assert heldout_rmse(x, truth, mask) < 1e-3


def test_threshold_schedule_descends_to_target():
    truth = rank_two(6, 5, seed=8)
    y = MaskedMatrix(truth, observation_mask(6, 5, 0.6, np.random.default_rng(8)))
    schedule = threshold_schedule(y, gamma=2.0, threshold=1e-3, factor=0.5)
    assert schedule[0] == pytest.approx(2.0 * np.linalg.norm(y.values, 2))
    assert schedule[-1] == 1e-3
    assert np.all(np.diff(schedule) < 0)
    assert threshold_schedule(y, gamma=1.0, threshold=1e6, factor=0.5) == [1e6]
    for factor in (0.0, 1.0):
        with pytest.raises(ParameterError):
            threshold_schedule(y, gamma=1.0, threshold=0.1, factor=factor)
    with pytest.raises(ParameterError):
        svt_complete(y, threshold=0.0, continuation=0.5)


def test_proximal_iterates_warm_start_at_fixed_point_stays_put():
    truth = rank_two(6, 5, seed=9)
    y = MaskedMatrix(truth, np.ones_like(truth))
    prox = next(proximal_iterates(y, gamma=1.0, threshold=0.0, x0=truth))
    assert np.allclose(prox.x, truth, atol=1e-10)
    with pytest.raises(DimensionError):
        next(proximal_iterates(y, gamma=1.0, threshold=0.0, x0=np.zeros((5, 6))))


def test_proximal_iterates_threshold_singular_values():
    truth = rank_two(8, 6, seed=2)
    mask = observation_mask(8, 6, 0.5, np.random.default_rng(2))
    for prox in islice(proximal_iterates(MaskedMatrix(truth, mask), gamma=1.0, threshold=0.3), 5):
        pre_s = np.linalg.svd(prox.pre_prox, compute_uv=False)
        post_s = np.linalg.svd(prox.x, compute_uv=False)
        assert np.allclose(post_s, np.maximum(pre_s - prox.threshold, 0.0), atol=1e-10)


def test_proximal_iterates_reject_bad_input():
    y = MaskedMatrix(np.ones((3, 3)), np.zeros((3, 3)))
    with pytest.raises(ParameterError):
        next(proximal_iterates(y, gamma=1.0, threshold=1.0))
    y = MaskedMatrix(np.ones((3, 3)), np.ones((3, 3)))
    with pytest.raises(ParameterError):
        next(proximal_iterates(y, gamma=1.0, threshold=-1.0))
    with pytest.raises(DimensionError):
        next(proximal_iterates(y, gamma=1.0, threshold=1.0, row_lap=laplacians(path_graph(4)), alpha_r=1.0))


def test_graph_reg_without_graph_weight_matches_svt():
    truth = rank_two(10, 8, seed=3)
    y = MaskedMatrix(truth, observation_mask(10, 8, 0.5, np.random.default_rng(3)))
    plain = svt_complete(y, gamma=1.0, threshold=0.5, max_iters=200)
    graph = graph_reg_complete(y, laplacians(path_graph(10)), weights=PenaltyWeights(gamma=1.0, alpha_r=0.0),
                               threshold=0.5, max_iters=200)
    assert np.array_equal(plain, graph)


def test_graph_reg_is_row_permutation_equivariant():
    rng = np.random.default_rng(4)
    truth = rank_two(10, 8, seed=4)
    mask = observation_mask(10, 8, 0.5, rng)
    graph = random_graph(rng, 10)
    order = rng.permutation(10)
    weights = PenaltyWeights(gamma=1.0, alpha_r=1.0)

    x = graph_reg_complete(MaskedMatrix(truth, mask), laplacians(graph), weights=weights,
                           threshold=0.5, max_iters=300, tol=0.0)
    x_perm = graph_reg_complete(MaskedMatrix(truth[order], mask[order]), laplacians(graph.permuted(order)),
                                weights=weights, threshold=0.5, max_iters=300, tol=0.0)
    assert np.allclose(x_perm, x[order], atol=1e-8)


def test_svd_factors_reconstruct_and_pad():
    truth = rank_two(6, 5, seed=5)
    w, h = svd_factors(truth, 2, np.random.default_rng(0))
    assert np.allclose(w @ h.T, truth)
    w, h = svd_factors(truth, 7, np.random.default_rng(0), pad_scale=1e-3)
    assert w.shape == (6, 7) and h.shape == (5, 7)
    assert np.max(np.abs(h[:, 5:])) < 1e-2


def test_factorized_complete_recovers_rank_two():
    truth = rank_two(20, 15, seed=6)
    mask = observation_mask(20, 15, 0.6, np.random.default_rng(6))
    fac = factorized_complete(MaskedMatrix(truth, mask), rank=2, weights=PenaltyWeights(gamma=100.0),
                              max_iters=3000, tol=1e-9)
    assert heldout_rmse(fac.reconstruct(), truth, mask) < 1e-2


def test_factorized_objective_trace_never_increases():
    truth = rank_two(12, 10, seed=7)
    mask = observation_mask(12, 10, 0.5, np.random.default_rng(7))
    fac = factorized_complete(MaskedMatrix(truth, mask), rank=3, weights=PenaltyWeights(gamma=10.0), max_iters=200)
    trace = np.array(fac.objective_trace)
    assert np.all(np.diff(trace) <= 0)
    assert trace[-1] < trace[0]


def test_factorized_without_data_term_shrinks_to_zero():
    truth = rank_two(8, 6, seed=8)
    mask = observation_mask(8, 6, 0.5, np.random.default_rng(8))
    fac = factorized_complete(MaskedMatrix(truth, mask), rank=2, weights=PenaltyWeights(gamma=0.0))
    assert np.allclose(fac.reconstruct(), 0.0)


@pytest.mark.parametrize('graph', [False, True])
def test_factorized_objective_matches_direct_formula(graph):
    truth = rank_two(10, 8, seed=9)
    y = MaskedMatrix(truth, observation_mask(10, 8, 0.5, np.random.default_rng(9)))
    weights = PenaltyWeights(gamma=5.0)
    if graph:
        row_lap, col_lap = laplacians(path_graph(10)), laplacians(path_graph(8))
        fac = factorized_graph_complete(y, 2, row_lap, col_lap, weights=weights, max_iters=50)
    else:
        row_lap = col_lap = None
        fac = factorized_complete(y, 2, weights=weights, max_iters=50)
    direct = factorized_objective(fac, y, weights.gamma, row_lap, col_lap)
    assert direct == pytest.approx(fac.objective_trace[-1], rel=1e-10)


def test_factorized_objective_by_hand():
    y = MaskedMatrix([[1.0, 2.0]], [[1, 0]])
    fac = Factorization(w=np.array([[2.0]]), h=np.array([[1.0], [3.0]]))
    # 0.5·4 + 0.5·10 + 0.5·2·(2 − 1)²
    assert factorized_objective(fac, y, gamma=2.0) == pytest.approx(8.0)


def test_factorized_rank_validation():
    y = MaskedMatrix(np.ones((4, 3)), np.ones((4, 3)))
    with pytest.raises(ParameterError):
        factorized_complete(y, rank=0)
    with pytest.raises(ParameterError):
        factorized_complete(y, rank=4)
    with pytest.raises(DimensionError):
        factorized_graph_complete(y, 2, laplacians(path_graph(5)))


def test_graph_reg_completes_smooth_instance():
    y, truth, graph = smooth_instance(seed=0)
    x = graph_reg_complete(y, laplacians(graph), weights=PenaltyWeights(gamma=1.0, alpha_r=2.0), threshold=1.0)
    assert x.shape == truth.shape
    assert np.all(np.isfinite(x))


@pytest.mark.slow
def test_graph_regularization_beats_plain_svt_on_smooth_rows():
    wins = 0
    for seed in range(10):
        y, truth, graph = smooth_instance(seed=seed)
        plain = svt_complete(y, gamma=1.0, threshold=1.0, max_iters=5000, tol=1e-8)
        smooth = graph_reg_complete(y, laplacians(graph), weights=PenaltyWeights(gamma=1.0, alpha_r=2.0),
                                    threshold=1.0, max_iters=5000, tol=1e-8)
        wins += heldout_rmse(smooth, truth, y.mask) < heldout_rmse(plain, truth, y.mask)
    assert wins >= 8


def test_strong_row_smoothing_shrinks_row_variance():
    y, _, graph = smooth_instance(seed=1)
    lap = laplacians(graph)
    loose = graph_reg_complete(y, lap, weights=PenaltyWeights(gamma=1.0, alpha_r=0.0), threshold=0.1)
    tight = graph_reg_complete(y, lap, weights=PenaltyWeights(gamma=1.0, alpha_r=100.0), threshold=0.1)
    assert np.var(tight, axis=0).sum() < np.var(loose, axis=0).sum()


def test_observed_residual_decreases_with_small_step():
    truth = rank_two(10, 8, seed=10)
    y = MaskedMatrix(truth, observation_mask(10, 8, 0.5, np.random.default_rng(10)))
    residuals = [np.linalg.norm(y.mask * (y.values - prox.x))
                 for prox in islice(proximal_iterates(y, gamma=1.0, threshold=0.0, step=1e-2), 50)]
    assert np.all(np.diff(residuals) < 0)


@pytest.mark.slow
def test_graph_factorization_matches_or_beats_plain_on_smooth_rows():
    wins = 0
    for seed in range(10):
        y, truth, graph = smooth_instance(rank=2, seed=seed)
        weights = PenaltyWeights(gamma=10.0)
        plain = factorized_complete(y, 2, weights=weights, max_iters=5000, tol=1e-9)
        smooth = factorized_graph_complete(y, 2, laplacians(graph), weights=weights, max_iters=5000, tol=1e-9)
        wins += heldout_rmse(smooth.reconstruct(), truth, y.mask) <= heldout_rmse(plain.reconstruct(), truth, y.mask)
    assert wins >= 8

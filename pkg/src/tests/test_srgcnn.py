from dataclasses import replace

import numpy as np
import pandas as pd
import pytest
from scipy.special import expit

from src.main.evaluate.cross_validation import run_cv
from src.main.evaluate.metrics import rmse
from src.main.extract.synth_data import synth_instance, synth_raw
from src.main.ml.autodiff import Tape
from src.main.load.save_outputs import write_raw_csv
from src.main.main import main
from src.main.ml.completion import MaskedMatrix, PenaltyWeights, factorized_graph_complete
from src.main.ml.gradcheck import run_suite
from src.main.ml.graph import GraphConfig, build_graph, laplacians, path_graph
from src.main.ml.optim import Adam
from src.main.ml.srgcnn import (
    LOSS_TERMS, ModelParams, TrainConfig, diffuse, gcn_features, init_params, loss_terms, predict, train,
    training_loss,
)
from src.main.transform.assemble import permute_dataset
from src.utils.errors import DimensionError, ParameterError, TrainingDiverged

SMALL = dict(rank=6, cheb_order=2, hidden_units=4, features=4, diffusion_steps=2, learning_rate=0.01)


@pytest.fixture(scope='module')
def cohort():
    ds, truth = synth_instance(m=30, n=8, rank=2, observed_frac=0.6, seed=0)
    return ds, build_graph(ds.meta, GraphConfig())


def small_config(**overrides) -> TrainConfig:
    return TrainConfig(**{**SMALL, 'epochs': 20, **overrides})


def test_train_config_validation():
    with pytest.raises(ParameterError):
        TrainConfig(rank=0)
    with pytest.raises(ParameterError):
        TrainConfig(cheb_order=-1)
    with pytest.raises(ParameterError):
        TrainConfig(learning_rate=0.0)
    cfg = TrainConfig(weights={'gamma_e': 0.0})
    assert isinstance(cfg.weights, PenaltyWeights)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_init_params_shapes(cohort):
    ds, _ = cohort
    params = init_params(ds.z, small_config())
    assert params.arrays['w0'].shape == (ds.m, 6)
    assert params.arrays['h'].shape == (ds.n + ds.c, 6)
    assert [k for k in params.arrays if k.startswith('cheb_')] == ['cheb_0', 'cheb_1', 'cheb_2']
    assert np.all(params.arrays['lstm_b_forget'] == 1.0)


def test_init_pads_w0_with_zero_columns():
    ds, _ = synth_instance(m=10, n=4, rank=2, observed_frac=0.8, seed=1)
    params = init_params(ds.z, small_config(rank=8))
    k = ds.n + ds.c
    assert np.all(params.arrays['w0'][:, k:] == 0.0)
    assert np.any(params.arrays['h'][:, k:] != 0.0)


def test_gcn_with_order_zero_identity_is_tanh():
    tape = Tape()
    lap = laplacians(path_graph(5))
    w = tape.variable(np.random.default_rng(0).standard_normal((5, 3)))
    out = gcn_features(w, lap, [tape.constant(np.eye(3))])
    assert np.allclose(out.value, np.tanh(w.value))


def test_gcn_with_zero_coefficients_is_zero():
    tape = Tape()
    lap = laplacians(path_graph(5))
    w = tape.variable(np.ones((5, 3)))
    out = gcn_features(w, lap, [tape.constant(np.zeros((3, 2))) for _ in range(3)])
    assert np.array_equal(out.value, np.zeros((5, 2)))


def test_gcn_rejects_mismatched_coefficients():
    tape = Tape()
    lap = laplacians(path_graph(5))
    w = tape.variable(np.ones((5, 3)))
    with pytest.raises(DimensionError):
        gcn_features(w, lap, [tape.constant(np.zeros((3, 2))), tape.constant(np.zeros((3, 4)))])
    with pytest.raises(ParameterError):
        gcn_features(w, lap, [])


def test_zero_output_projection_keeps_w0(cohort):
    ds, graph = cohort
    params = init_params(ds.z, small_config())
    params.arrays['out_proj'] = np.zeros_like(params.arrays['out_proj'])
    w_t = diffuse(params, laplacians(graph), steps=3)
    assert np.array_equal(w_t.value, params.arrays['w0'])


def test_diffuse_needs_a_step(cohort):
    ds, graph = cohort
    with pytest.raises(ParameterError):
        diffuse(init_params(ds.z, small_config()), laplacians(graph), steps=0)


def test_loss_with_zero_weights_is_zero(cohort):
    ds, graph = cohort
    params = init_params(ds.z, small_config())
    tape = Tape()
    nodes = params.on_tape(tape)
    zero = PenaltyWeights(gamma_a=0.0, gamma_b=0.0, gamma_c=0.0, gamma_d=0.0, gamma_e=0.0)
    loss = training_loss(nodes['w0'], nodes['h'], ds, laplacians(graph), zero)
    assert loss.item() == 0.0


def test_loss_terms_match_direct_formulas(cohort):
    ds, graph = cohort
    lap = laplacians(graph)
    rng = np.random.default_rng(2)
    w, h = rng.standard_normal((ds.m, 5)), rng.standard_normal((ds.n + ds.c, 5))
    weights = PenaltyWeights()
    tape = Tape()
    terms = loss_terms(tape.variable(w), tape.variable(h), ds, lap, weights)
    assert list(terms) == list(LOSS_TERMS)

    x = w @ h.T
    logits = x[:, ds.n:]
    bce = np.logaddexp(0.0, logits) - ds.targets * logits
    expected = {
        'dirichlet': weights.gamma_a / 2 * np.trace(w.T @ lap.normalized @ w),
        'frob_w': weights.gamma_b / 2 * np.sum(w ** 2),
        'frob_h': weights.gamma_c / 2 * np.sum(h ** 2),
        'reconstruction': weights.gamma_d / 2 * np.sum((ds.omega_a * (x[:, :ds.n] - ds.features)) ** 2),
        'classification': weights.gamma_e * np.sum(ds.omega_b * bce) / ds.omega_b.sum(),
    }
    for name, value in expected.items():
        assert terms[name].item() == pytest.approx(value, rel=1e-10)


def test_reconstruction_only_loss(cohort):
    ds, graph = cohort
    rng = np.random.default_rng(3)
    w, h = rng.standard_normal((ds.m, 4)), rng.standard_normal((ds.n + ds.c, 4))
    tape = Tape()
    weights = PenaltyWeights(gamma_a=0.0, gamma_b=0.0, gamma_c=0.0, gamma_d=2.0, gamma_e=0.0)
    loss = training_loss(tape.variable(w), tape.variable(h), ds, laplacians(graph), weights)
    residual = ds.omega_a * ((w @ h.T)[:, :ds.n] - ds.features)
    assert loss.item() == pytest.approx(np.sum(residual ** 2), rel=1e-12)


def test_loss_rejects_missing_labels_when_classifying(cohort):
    ds, graph = cohort
    unlabeled = replace(ds, omega_b=np.zeros_like(ds.omega_b))
    tape = Tape()
    w, h = tape.variable(np.ones((ds.m, 2))), tape.variable(np.ones((ds.n + ds.c, 2)))
    with pytest.raises(ParameterError):
        loss_terms(w, h, unlabeled, laplacians(graph), PenaltyWeights())
    terms = loss_terms(w, h, unlabeled, laplacians(graph), PenaltyWeights(gamma_e=0.0))
    assert terms['classification'].item() == 0.0


def test_pure_imputation_training(cohort):
    ds, graph = cohort
    unlabeled = replace(ds, omega_b=np.zeros_like(ds.omega_b))
    with pytest.raises(ParameterError):
        train(unlabeled, graph, small_config())
    params, trace = train(unlabeled, graph, small_config(weights=PenaltyWeights(gamma_e=0.0)))
    assert trace.epochs_run == 20
    assert np.all(trace.to_frame()['classification'] == 0.0)


def test_training_reduces_loss_and_records_terms(cohort):
    ds, graph = cohort
    params, trace = train(ds, graph, small_config(epochs=30))
    frame = trace.to_frame()
    assert list(frame.columns) == ['epoch', *LOSS_TERMS, 'total']
    assert len(frame) == 30 and not trace.early_stopped
    assert np.allclose(frame[list(LOSS_TERMS)].sum(axis=1), frame['total'])
    assert trace.totals[-1] < trace.totals[0]
    assert params.parameter_count == sum(a.size for a in params.arrays.values())


def test_training_is_deterministic(cohort):
    ds, graph = cohort
    first, trace_a = train(ds, graph, small_config())
    second, trace_b = train(ds, graph, small_config())
    assert np.array_equal(trace_a.totals, trace_b.totals)
    for name in first.arrays:
        assert np.array_equal(first.arrays[name], second.arrays[name])


def test_early_stopping_fires_without_progress(cohort):
    ds, graph = cohort
    # a huge min_delta means no epoch ever counts as an improvement
    _, trace = train(ds, graph, small_config(epochs=50, patience=3, min_delta=10.0))
    assert trace.early_stopped
    assert trace.epochs_run == 4


def test_divergence_raises_with_the_partial_trace(cohort, monkeypatch):
    ds, graph = cohort
    adam_step = Adam.step

    def blow_up_h(self, params, grads):
        updated = adam_step(self, params, grads)
        if self.step_count == 2:
            updated = {**updated, 'h': np.full_like(updated['h'], np.inf)}
        return updated

    monkeypatch.setattr(Adam, 'step', blow_up_h)
    with pytest.raises(TrainingDiverged) as info:
        train(ds, graph, small_config(epochs=10, patience=100))
    trace = info.value.trace
    assert trace is not None and trace.epochs_run == 2
    assert trace.to_frame()['epoch'].tolist() == [0, 1]
    assert np.isfinite(trace.totals).all()


def test_train_cli_writes_trace_when_training_diverges(monkeypatch, tmp_path):
    raw, _ = synth_raw(m=30, n=5, seed=3)
    data = tmp_path / 'raw.csv'
    write_raw_csv(raw, data)
    adam_step = Adam.step

    def blow_up_w0(self, params, grads):
        updated = adam_step(self, params, grads)
        if self.step_count == 3:
            updated = {**updated, 'w0': np.full_like(updated['w0'], np.nan)}
        return updated

    monkeypatch.setattr(Adam, 'step', blow_up_w0)
    out = tmp_path / 'train'
    args = ['train', '--data', str(data), '--out', str(out), '--set', 'train.rank=4', '--set', 'train.cheb_order=1',
            '--set', 'train.hidden_units=4', '--set', 'train.features=4', '--set', 'train.diffusion_steps=1',
            '--set', 'train.epochs=10', '--set', 'train.patience=100']
    assert main(args) == 1
    assert len(pd.read_csv(out / 'trace.csv')) == 3
    assert not (out / 'checkpoint.json').exists()


def test_train_rejects_wrong_graph_size(cohort):
    ds, _ = cohort
    with pytest.raises(DimensionError):
        train(ds, path_graph(ds.m + 1), small_config())


def test_predict_passes_observed_entries_through(cohort):
    ds, graph = cohort
    params, _ = train(ds, graph, small_config(epochs=5))
    imputed, probs = predict(params, ds, graph)
    observed = ds.omega_a > 0
    assert np.array_equal(imputed[observed], ds.features[observed])
    assert probs.shape == (ds.m,)
    assert np.all((probs > 0) & (probs < 1))


def test_predict_matches_forward_pass(cohort):
    ds, graph = cohort
    params, _ = train(ds, graph, small_config(epochs=5))
    _, probs = predict(params, ds, graph)
    w_t = diffuse(params, laplacians(graph), params.config.diffusion_steps).value
    assert np.allclose(probs, expit(w_t @ params.arrays['h'][ds.n:].T)[:, 0])


def test_row_permutation_is_equivariant(cohort):
    ds, graph = cohort
    order = np.random.default_rng(5).permutation(ds.m)
    cfg = small_config(epochs=5, rank=12)
    params, _ = train(ds, graph, cfg)
    params_perm, _ = train(permute_dataset(ds, order), graph.permuted(order), cfg)

    imputed, probs = predict(params, ds, graph)
    imputed_perm, probs_perm = predict(params_perm, permute_dataset(ds, order), graph.permuted(order))
    assert np.allclose(probs_perm, probs[order], atol=1e-8)
    assert np.allclose(imputed_perm, imputed[order], atol=1e-8)


def test_model_params_on_tape_names_every_block(cohort):
    ds, _ = cohort
    params = init_params(ds.z, small_config())
    nodes = params.on_tape(Tape())
    assert list(nodes) == list(params.arrays)
    assert all(node.name == name for name, node in nodes.items())
    assert isinstance(params, ModelParams)


def test_gradient_suite_passes():
    report = run_suite(seed=0)
    assert report['passed'].all()
    assert {'srgcnn:w0', 'srgcnn:h', 'srgcnn:cheb_2', 'lstm_cell:lstm_wx_forget', 'masked_bce:logits'} \
        <= set(report['block'])


def test_gradient_suite_catches_a_corrupted_block():
    report = run_suite(seed=0, corrupt='srgcnn:h')
    failed = report.loc[~report['passed'], 'block'].tolist()
    assert failed == ['srgcnn:h']


@pytest.mark.slow
def test_graph_model_beats_baseline_on_planted_cohort():
    cfg = TrainConfig(rank=16, cheb_order=3, hidden_units=16, features=16, diffusion_steps=5,
                      learning_rate=0.005, epochs=300)
    gmc, baseline, wins = [], [], 0
    for seed in range(10):
        raw, _ = synth_raw(seed=seed)
        gmc_auc = run_cv(raw, GraphConfig(), cfg, k=10, seed=seed, method='gmc').auc
        base_auc = run_cv(raw, k=10, seed=seed, method='baseline').auc
        gmc.append(gmc_auc)
        baseline.append(base_auc)
        wins += gmc_auc > base_auc
    assert np.mean(gmc) >= 0.9
    assert wins >= 8


REFERENCE_CONFIG = dict(rank=16, cheb_order=3, hidden_units=16, features=16, diffusion_steps=5, learning_rate=0.005)


def normalized_truth(ds, truth):
    return (truth.features - ds.means) / ds.stds


@pytest.mark.slow
def test_imputation_beats_mean_imputation_on_planted_cohorts():
    wins = 0
    for seed in range(10):
        ds, truth = synth_instance(seed=seed)
        graph = build_graph(ds.meta, GraphConfig())
        params, _ = train(ds, graph, TrainConfig(**REFERENCE_CONFIG, epochs=300, seed=seed))
        imputed, _ = predict(params, ds, graph)
        target, hidden = normalized_truth(ds, truth), ds.omega_a == 0
        wins += rmse(imputed, target, hidden) < rmse(np.zeros_like(target), target, hidden)
    assert wins >= 8


@pytest.mark.slow
def test_loss_moving_average_never_rises_on_reference_cohort():
    ds, _ = synth_instance(seed=0)
    _, trace = train(ds, build_graph(ds.meta, GraphConfig()), TrainConfig(**REFERENCE_CONFIG, epochs=300))
    totals = trace.totals
    assert np.isfinite(totals).all() and len(totals) > 50
    moving = np.convolve(totals, np.ones(50) / 50, mode='valid')
    assert np.all(np.diff(moving) <= 1e-9 * abs(moving[0]))


@pytest.mark.slow
def test_imputation_without_labels_tracks_factorized_graph_completion():
    gamma = 10.0
    weights = PenaltyWeights(gamma_a=1.0, gamma_b=0.0, gamma_c=1.0, gamma_d=gamma, gamma_e=0.0)
    model_errors, factorized_errors = [], []
    for seed in range(10):
        ds, truth = synth_instance(seed=seed)
        unlabeled = replace(ds, omega_b=np.zeros_like(ds.omega_b))
        graph = build_graph(ds.meta, GraphConfig())
        lap = laplacians(graph)
        target, hidden = normalized_truth(ds, truth), ds.omega_a == 0

        cfg = TrainConfig(**{**REFERENCE_CONFIG, 'rank': 2}, epochs=500, weights=weights, seed=seed)
        params, _ = train(unlabeled, lap, cfg)
        imputed, _ = predict(params, unlabeled, lap)
        model_errors.append(rmse(imputed, target, hidden))

        # same objective family: Dirichlet on the normalized row Laplacian, Frobenius on H
        fac = factorized_graph_complete(MaskedMatrix(ds.features, ds.omega_a), 2,
                                        replace(lap, laplacian=lap.normalized),
                                        weights=PenaltyWeights(gamma=gamma), max_iters=5000, tol=1e-9, seed=seed)
        factorized_errors.append(rmse(fac.reconstruct(), target, hidden))
    assert np.median(model_errors) <= 1.2 * np.median(factorized_errors)

import hashlib
import json

import pandas as pd
import pytest

from src.main.evaluate.ablation import RESULT_COLUMNS
from src.main.main import main
from src.main.run_config import load_run_config, parse_override
from src.utils.errors import ConfigError

SMALL_SYNTH = ['--set', 'synth.m=30', '--set', 'synth.n=5']
SMALL_MODEL = ['--set', 'train.rank=4', '--set', 'train.cheb_order=2', '--set', 'train.hidden_units=4',
               '--set', 'train.features=4', '--set', 'train.diffusion_steps=2', '--set', 'train.epochs=5']


def digest(directory):
    return {p.relative_to(directory).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(directory.rglob('*')) if p.is_file()}


@pytest.fixture(scope='module')
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp('synth')
    assert main(['synth', '--out', str(out), '--seed', '3', *SMALL_SYNTH]) == 0
    return out


def test_parse_override():
    assert parse_override('train.epochs=50') == {'train': {'epochs': 50}}
    assert parse_override('data.path=runs/raw.csv') == {'data': {'path': 'runs/raw.csv'}}
    assert parse_override('ablate.seeds=[0,1]') == {'ablate': {'seeds': [0, 1]}}
    with pytest.raises(ConfigError):
        parse_override('train.epochs')


def test_run_config_layers(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'seed': 4, 'train': {'epochs': 7, 'weights': {'gamma_e': 0.0}}}))
    cfg = load_run_config(path, ['train.patience=2'], out='elsewhere')
    assert cfg.train.epochs == 7 and cfg.train.patience == 2
    assert cfg.train.weights.gamma_e == 0.0 and cfg.train.weights.gamma_d == 97.63
    assert cfg.train.seed == 4 and cfg.evaluate.baseline.seed == 4
    assert cfg.out == 'elsewhere'
    assert load_run_config(path, seed=9).train.seed == 9


def test_run_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(overrides=['train.dropout=0.5'])
    with pytest.raises(ConfigError):
        load_run_config(overrides=['evaluate.methods=["svm"]'])
    bad = tmp_path / 'bad.json'
    bad.write_text('{not json')
    with pytest.raises(ConfigError):
        load_run_config(bad)
    with pytest.raises(FileNotFoundError):
        load_run_config(tmp_path / 'absent.json')


def test_synth_writes_every_output(synth_dir):
    names = {p.name for p in synth_dir.iterdir()}
    assert {'config.json', 'values.csv', 'mask.csv', 'metadata.json', 'raw.csv', 'ground_truth.csv',
            'graph_edges.csv'} <= names
    config = json.loads((synth_dir / 'config.json').read_text())
    assert config['seed'] == 3 and config['synth']['m'] == 30
    assert len(pd.read_csv(synth_dir / 'raw.csv')) == 30


def test_synth_is_byte_reproducible(tmp_path):
    out = tmp_path / 'run'
    assert main(['synth', '--out', str(out), '--seed', '1', *SMALL_SYNTH]) == 0
    first = digest(out)
    assert main(['synth', '--out', str(out), '--seed', '1', *SMALL_SYNTH]) == 0
    assert digest(out) == first


def test_unknown_config_key_exits_with_error(tmp_path):
    assert main(['synth', '--out', str(tmp_path), '--set', 'synth.bogus=1']) == 1


def test_missing_data_exits_with_error(tmp_path):
    assert main(['train', '--out', str(tmp_path)]) == 1
    assert main(['train', '--out', str(tmp_path), '--data', str(tmp_path / 'absent.csv')]) == 1


def test_train_then_impute(synth_dir, tmp_path):
    raw_csv = str(synth_dir / 'raw.csv')
    train_dir, impute_dir = tmp_path / 'train', tmp_path / 'impute'
    assert main(['train', '--data', raw_csv, '--out', str(train_dir), *SMALL_MODEL]) == 0
    assert {'trace.csv', 'train_summary.json', 'checkpoint.json', 'graph_edges.csv'} <= \
        {p.name for p in train_dir.iterdir()}
    summary = json.loads((train_dir / 'train_summary.json').read_text())
    assert summary['epochs_run'] == 5

    checkpoint = str(train_dir / 'checkpoint.json')
    assert main(['impute', '--data', raw_csv, '--checkpoint', checkpoint, '--out', str(impute_dir)]) == 0
    raw = pd.read_csv(raw_csv)
    imputed = pd.read_csv(impute_dir / 'imputed.csv')
    features = [c for c in raw.columns if c.startswith('feature_')]
    assert not imputed[features].isna().any().any()
    observed = raw[features].notna()
    assert (imputed[features][observed] == raw[features][observed]).sum().sum() == observed.sum().sum()
    probs = pd.read_csv(impute_dir / 'label_probs.csv')
    assert len(probs) == 30 and probs['label_prob'].between(0, 1).all()


def test_train_is_byte_reproducible(synth_dir, tmp_path):
    args = ['train', '--data', str(synth_dir / 'raw.csv'), '--out', str(tmp_path), *SMALL_MODEL]
    assert main(args) == 0
    first = digest(tmp_path)
    assert main(args) == 0
    assert digest(tmp_path) == first


def test_impute_needs_checkpoint(synth_dir, tmp_path):
    assert main(['impute', '--data', str(synth_dir / 'raw.csv'), '--out', str(tmp_path)]) == 1


def test_evaluate_baseline(synth_dir, tmp_path):
    args = ['evaluate', '--data', str(synth_dir / 'raw.csv'), '--out', str(tmp_path),
            '--set', 'evaluate.k=3', '--set', 'evaluate.methods=["baseline"]',
            '--set', 'evaluate.baseline.epochs=20',
            '--set', f'data.reference={json.dumps(str(synth_dir / "ground_truth.csv"))}']
    assert main(args) == 0
    metrics = pd.read_csv(tmp_path / 'metrics.csv')
    assert len(metrics) == 3 and set(metrics['method']) == {'baseline'}
    assert list(metrics.columns) == RESULT_COLUMNS
    assert (metrics['seed'] == 0).all()
    assert metrics['fraction'].nunique() == 1 and 0 < metrics['fraction'].iloc[0] < 1
    summary = json.loads((tmp_path / 'metrics_summary.json').read_text())
    assert summary['baseline']['folds'] == 3
    assert summary['baseline']['metrics']['mean_rmse']['mean'] is not None


def test_evaluate_is_byte_reproducible(synth_dir, tmp_path):
    args = ['evaluate', '--data', str(synth_dir / 'raw.csv'), '--out', str(tmp_path), '--seed', '2',
            '--set', 'evaluate.k=3', '--set', 'evaluate.baseline.epochs=20', *SMALL_MODEL]
    assert main(args) == 0
    first = digest(tmp_path)
    assert main(args) == 0
    assert digest(tmp_path) == first
    assert set(pd.read_csv(tmp_path / 'metrics.csv')['method']) == {'gmc', 'baseline'}


def test_ablate_is_byte_reproducible(synth_dir, tmp_path):
    outputs = []
    for name in ('a', 'b'):
        out = tmp_path / name
        args = ['ablate', '--data', str(synth_dir / 'raw.csv'), '--out', str(out), '--seed', '1',
                '--set', 'evaluate.k=3', '--set', 'evaluate.baseline.epochs=20',
                '--set', 'ablate.fractions=[0.3,0.2]', '--set', 'ablate.seeds=[0,1]',
                '--set', 'ablate.methods=["baseline"]']
        assert main(args) == 0
        outputs.append({path: h for path, h in digest(out).items() if path != 'config.json'})
    assert outputs[0] == outputs[1]
    assert {'ablation.csv', 'ablation_summary.csv', 'ablation_summary.json'} <= set(outputs[0])
    assert len(pd.read_csv(tmp_path / 'a' / 'ablation.csv')) == 2 * 2 * 3


def test_gradcheck_reports_corrupted_block(tmp_path):
    assert main(['gradcheck', '--out', str(tmp_path), '--corrupt', 'srgcnn:h']) == 1
    report = pd.read_csv(tmp_path / 'gradcheck.csv')
    assert report.loc[~report['passed'], 'block'].tolist() == ['srgcnn:h']

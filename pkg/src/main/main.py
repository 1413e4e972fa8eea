"""
Command-line entry point.

    python -m src.main.main synth --out runs/synth
    python -m src.main.main train --data runs/synth/raw.csv --out runs/train
    python -m src.main.main evaluate --data runs/synth/raw.csv --set evaluate.k=5
    python -m src.main.main ablate --data runs/synth/raw.csv --set ablate.seeds=[0,1]
    python -m src.main.main impute --data runs/synth/raw.csv --checkpoint runs/train/checkpoint.json
    python -m src.main.main gradcheck
"""

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd

from src.main.evaluate.ablation import RESULT_COLUMNS, ablation_run
from src.main.evaluate.cross_validation import run_cv
from src.main.extract.load_csv import RawTable, load_csv
from src.main.extract.synth_data import synth_raw
from src.main.load.save_outputs import (
    load_checkpoint, save_checkpoint, save_dataset, write_csv, write_edge_list, write_ground_truth, write_json,
    write_raw_csv,
)
from src.main.ml.gradcheck import run_suite
from src.main.ml.graph import GraphConfig, build_graph
from src.main.ml.srgcnn import ModelParams, TrainConfig, predict, train
from src.main.run_config import RunConfig, load_run_config, save_run_config
from src.main.transform.assemble import assemble, denormalize, validate_dataset
from src.utils.errors import ConfigError, GmcError, SchemaError, TrainingDiverged
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

COMMANDS = ('synth', 'train', 'evaluate', 'ablate', 'impute', 'gradcheck')


def _load_raw(cfg: RunConfig) -> RawTable:
    if cfg.data.path is None:
        raise ConfigError('cli', 'data.path', 'this command needs an input CSV (--data)')
    return load_csv(Path(cfg.data.path), label_column=cfg.data.label_column,
                    meta_columns={'age': cfg.data.age_column, 'gender': cfg.data.gender_column},
                    missing_sentinel=cfg.data.missing_sentinel, id_column=cfg.data.id_column)


def _load_reference(cfg: RunConfig) -> Optional[pd.DataFrame]:
    if cfg.data.reference is None:
        return None
    path = Path(cfg.data.reference)
    if not path.exists():
        raise FileNotFoundError(f'Reference file not found: {path}')
    return pd.read_csv(path)


def _labeled_split(raw: RawTable):
    labeled = raw.labels.notna().to_numpy()
    return np.flatnonzero(labeled), np.flatnonzero(~labeled)


def cmd_synth(cfg: RunConfig, out: Path) -> int:
    raw, truth = synth_raw(seed=cfg.seed, **asdict(cfg.synth))
    ds = assemble(raw, np.arange(cfg.synth.m), np.array([], dtype=int), cfg.seed)
    validate_dataset(ds)
    save_dataset(ds, out)
    write_raw_csv(raw, out / 'raw.csv')
    write_ground_truth(truth.features, truth.labels, truth.label_probs, raw.features.columns,
                       out / 'ground_truth.csv')
    write_edge_list(build_graph(raw.meta, cfg.graph), out / 'graph_edges.csv')
    return 0


def cmd_train(cfg: RunConfig, out: Path) -> int:
    raw = _load_raw(cfg)
    train_rows, test_rows = _labeled_split(raw)
    ds = assemble(raw, train_rows, test_rows, cfg.seed)
    validate_dataset(ds)
    graph = build_graph(raw.meta, cfg.graph)
    write_edge_list(graph, out / 'graph_edges.csv')

    try:
        params, trace = train(ds, graph, cfg.train)
    except TrainingDiverged as e:
        if e.trace is not None:
            write_csv(e.trace.to_frame(), out / 'trace.csv')
        raise

    write_csv(trace.to_frame(), out / 'trace.csv')
    write_json({'epochs_run': trace.epochs_run, 'early_stopped': trace.early_stopped,
                'final_loss': float(trace.totals[-1]), 'parameter_count': params.parameter_count},
               out / 'train_summary.json')
    save_checkpoint(params.arrays, {'train': params.config.to_dict(), 'graph': asdict(cfg.graph),
                                    'dataset': ds.metadata()}, out / 'checkpoint.json')
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path) -> int:
    raw = _load_raw(cfg)
    reference = _load_reference(cfg)
    reports = [run_cv(raw, cfg.graph, cfg.train, k=cfg.evaluate.k, seed=cfg.seed, method=method,
                      reference=reference, baseline_cfg=cfg.evaluate.baseline)
               for method in cfg.evaluate.methods]
    # same long format as ablation.csv; fraction is the cohort's own feature density
    metrics = pd.concat([r.to_frame() for r in reports], ignore_index=True)
    metrics['fraction'] = round(raw.density, 4)
    metrics['seed'] = cfg.seed
    write_csv(metrics[RESULT_COLUMNS], out / 'metrics.csv')
    write_json({r.method: r.summary() for r in reports}, out / 'metrics_summary.json')
    return 0


def cmd_ablate(cfg: RunConfig, out: Path) -> int:
    raw = _load_raw(cfg)
    table, summary = ablation_run(raw, cfg.graph, cfg.train, fractions=cfg.ablate.fractions,
                                  seeds=cfg.ablate.seeds, k=cfg.evaluate.k, methods=cfg.ablate.methods,
                                  baseline_cfg=cfg.evaluate.baseline,
                                  cache_dir=out / 'cells' if cfg.ablate.cache else None)
    write_csv(table, out / 'ablation.csv')
    write_csv(summary, out / 'ablation_summary.csv')
    write_json({'rows': summary.astype(object).where(summary.notna(), None).to_dict(orient='records')},
               out / 'ablation_summary.json')
    return 0


def cmd_impute(cfg: RunConfig, out: Path) -> int:
    if cfg.impute.checkpoint is None:
        raise ConfigError('cli', 'impute.checkpoint', 'this command needs a checkpoint (--checkpoint)')
    arrays, saved = load_checkpoint(Path(cfg.impute.checkpoint))
    raw = _load_raw(cfg)

    meta = saved['dataset']
    ds = assemble(raw, meta['train_rows'], meta['test_rows'], meta['seed'])
    expected = [c['name'] for c in meta['columns'] if c['role'] == 'feature']
    if ds.feature_names != expected:
        raise SchemaError('cli', 'columns', f'CSV features {ds.feature_names} differ from checkpoint {expected}')

    params = ModelParams(arrays=arrays, config=TrainConfig.from_dict(saved['train']))
    graph = build_graph(raw.meta, GraphConfig(**saved['graph']))
    imputed, probs = predict(params, ds, graph)

    completed = raw.features.copy()
    predicted = denormalize(ds, imputed)
    for j, name in enumerate(ds.feature_names):
        missing = completed[name].isna().to_numpy()
        completed.loc[missing, name] = predicted[missing, j]
    write_csv(completed, out / 'imputed.csv')
    write_csv(pd.DataFrame({'id': list(raw.ids), 'label_prob': probs}), out / 'label_probs.csv')
    return 0


def cmd_gradcheck(cfg: RunConfig, out: Path, corrupt: Optional[str] = None) -> int:
    report = run_suite(cfg.seed, corrupt=corrupt)
    write_csv(report, out / 'gradcheck.csv')
    print(report.to_string(index=False))
    failed = report.loc[~report['passed'], 'block'].tolist()
    if failed:
        logger.error(f'Gradient check failed for {failed}')
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='gmc', description='Geometric matrix completion for joint '
                                                             'imputation and classification')
    sub = parser.add_subparsers(dest='command', required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument('--config', type=Path, help='JSON run config')
        cmd.add_argument('--seed', type=int, help='overrides the config seed')
        cmd.add_argument('--out', type=str, help='output directory')
        cmd.add_argument('--set', dest='overrides', action='append', default=[], metavar='SECTION.KEY=VALUE',
                         help='config override, repeatable')
        if name in ('train', 'evaluate', 'ablate', 'impute'):
            cmd.add_argument('--data', type=str, help='input CSV (data.path)')
        if name == 'impute':
            cmd.add_argument('--checkpoint', type=str, help='checkpoint from train (impute.checkpoint)')
        if name == 'gradcheck':
            cmd.add_argument('--corrupt', type=str, help=argparse.SUPPRESS)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = list(args.overrides)
    if getattr(args, 'data', None):
        overrides.append(f'data.path={json.dumps(args.data)}')
    if getattr(args, 'checkpoint', None):
        overrides.append(f'impute.checkpoint={json.dumps(args.checkpoint)}')

    try:
        cfg = load_run_config(args.config, overrides, seed=args.seed, out=args.out)
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        save_run_config(cfg, out / 'config.json')

        logger.info(f'=== {args.command} start (seed {cfg.seed}, out {out}) ===')
        if args.command == 'gradcheck':
            code = cmd_gradcheck(cfg, out, args.corrupt)
        else:
            code = {'synth': cmd_synth, 'train': cmd_train, 'evaluate': cmd_evaluate,
                    'ablate': cmd_ablate, 'impute': cmd_impute}[args.command](cfg, out)
        logger.info(f'=== {args.command} end ===')
        return code
    except (GmcError, FileNotFoundError) as e:
        logger.error(f'{args.command} failed: {e}')
        return 1


if __name__ == '__main__':
    sys.exit(main())

"""
Feature-completeness ablation: thin the observed features down to a series of
absolute densities and cross-validate every method at each level.

Each (method, fraction, seed) cell is cached as JSON together with a fingerprint
of the data and the settings that produced it. An interrupted sweep resumes
without recomputing finished cells; a cell whose fingerprint no longer matches
is recomputed.
"""

import hashlib
import json
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.main.evaluate.baseline import BaselineConfig
from src.main.evaluate.cross_validation import run_cv
from src.main.extract.load_csv import RawTable
from src.main.load.save_outputs import write_json
from src.main.ml.graph import GraphConfig
from src.main.ml.srgcnn import TrainConfig
from src.main.transform.dropout_features import thin_raw
from src.utils.config import load_config
from src.utils.errors import GmcError, ParameterError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_FRACTIONS = (0.4, 0.3, 0.2, 0.15, 0.1, 0.05)
ABLATION_METHODS = ('gmc_similarity', 'gmc_knn', 'baseline')
RESULT_COLUMNS = ['method', 'fraction', 'seed', 'fold', 'auc', 'accuracy', 'rmse', 'mean_rmse']


def thinned_levels(raw: RawTable, fractions: Sequence[float], seed: int) -> List[RawTable]:
    """
    Nested tables whose feature density is min(density, fraction) per level.
    Levels are produced in order by thinning the previous level with one seed.
    """
    levels, current = [], raw
    for fraction in fractions:
        density = current.density
        keep = min(1.0, fraction / density) if density > 0 else 1.0
        if keep < 1.0:
            current = thin_raw(current, keep, seed)
        levels.append(current)
    return levels


def _cell_path(cache_dir: Optional[Path], method: str, fraction: float, seed: int) -> Optional[Path]:
    return None if cache_dir is None else Path(cache_dir) / f'{method}_f{fraction:.4f}_s{seed}.json'


def table_digest(raw: RawTable) -> str:
    """Content hash of a cohort table: feature names, values, labels and demographics."""
    digest = hashlib.sha256()
    digest.update('\x1f'.join(map(str, raw.features.columns)).encode())
    for frame in (raw.features, raw.labels.to_frame(), raw.meta):
        digest.update(pd.util.hash_pandas_object(frame, index=True).to_numpy().tobytes())
    return digest.hexdigest()


def cell_fingerprint(method: str, fraction: float, seed: int, k: int, data_digest: str,
                     graph_cfg: GraphConfig, train_cfg: TrainConfig, baseline_cfg: BaselineConfig) -> str:
    """Hash of every input that determines a cell's rows; configs a method ignores are left out."""
    settings = {'method': method, 'fraction': fraction, 'seed': seed, 'k': k, 'data': data_digest}
    if method == 'baseline':
        settings['baseline'] = asdict(baseline_cfg)
    else:
        settings['graph'] = asdict(replace(graph_cfg, variant=method.split('_', 1)[1]))
        settings['train'] = train_cfg.to_dict()
    return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()


def _json_value(value):
    if isinstance(value, str):
        return value
    if isinstance(value, (int, np.integer)):
        return int(value)
    value = float(value)
    # NaN is not valid JSON
    return value if np.isfinite(value) else None


def _run_cell(level: RawTable, reference: pd.DataFrame, method: str, fraction: float, seed: int, k: int,
              graph_cfg: GraphConfig, train_cfg: TrainConfig, baseline_cfg: BaselineConfig,
              cache_path: Optional[Path], fingerprint: str) -> List[Dict]:
    if cache_path is not None and cache_path.exists():
        cached = json.loads(cache_path.read_text())
        if cached.get('fingerprint') == fingerprint:
            logger.info(f'Cell {method} @ {fraction} seed {seed}: cached, skipping')
            return cached['rows']
        logger.warning(f'Cell {method} @ {fraction} seed {seed}: cache {cache_path.name} was computed '
                       f'with different data or settings, recomputing')
    try:
        if method == 'baseline':
            report = run_cv(level, k=k, seed=seed, method='baseline', reference=reference,
                            baseline_cfg=baseline_cfg, workers=1)
        else:
            variant = method.split('_', 1)[1]
            report = run_cv(level, replace(graph_cfg, variant=variant), train_cfg, k=k, seed=seed,
                            method='gmc', reference=reference, workers=1)
    except GmcError as e:
        logger.error(f'Cell {method} @ {fraction} seed {seed} failed: {e}')
        raise

    df = report.to_frame()
    df['method'] = method
    df['fraction'] = fraction
    df['seed'] = seed
    rows = [{col: _json_value(v) for col, v in zip(RESULT_COLUMNS, record)}
            for record in df[RESULT_COLUMNS].itertuples(index=False)]
    if cache_path is not None:
        write_json({'method': method, 'fraction': fraction, 'seed': seed, 'fingerprint': fingerprint,
                    'rows': rows}, cache_path)
    return rows


def summarize(results: pd.DataFrame) -> pd.DataFrame:
    """Mean and std of every metric per method and fraction."""
    grouped = results.groupby(['method', 'fraction'], sort=False)[['auc', 'accuracy', 'rmse', 'mean_rmse']]
    summary = grouped.agg(['mean', 'std'])
    summary.columns = [f'{metric}_{stat}' for metric, stat in summary.columns]
    return summary.reset_index()


def ablation_run(raw: RawTable, graph_cfg: Optional[GraphConfig] = None, train_cfg: Optional[TrainConfig] = None,
                 fractions: Sequence[float] = DEFAULT_FRACTIONS, seeds: Sequence[int] = (0,), k: int = 10,
                 methods: Sequence[str] = ABLATION_METHODS, baseline_cfg: Optional[BaselineConfig] = None,
                 cache_dir: Optional[Path] = None, workers: Optional[int] = None) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """
    Cross-validate every method at every feature density.

    Args:
        raw: Cohort table at its natural density
        fractions: Descending absolute feature densities in (0, 1]
        seeds: One nested dropout chain and fold plan per seed
        methods: Any of gmc_similarity, gmc_knn, baseline
        cache_dir: Directory of per-cell JSON results; finished cells are reused

    Returns:
        Long results table (one row per method × fraction × seed × fold) and its summary
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(not 0 < f <= 1 for f in fractions):
        raise ParameterError('eval', 'fractions', f'need fractions in (0, 1], got {fractions}')
    if any(a <= b for a, b in zip(fractions, fractions[1:])):
        raise ParameterError('eval', 'fractions', f'must be strictly descending, got {fractions}')
    unknown = [m for m in methods if m not in ABLATION_METHODS]
    if unknown:
        raise ParameterError('eval', 'methods', f'unknown methods {unknown}, expected {ABLATION_METHODS}')

    graph_cfg = graph_cfg or GraphConfig()
    train_cfg = train_cfg or TrainConfig()
    baseline_cfg = baseline_cfg or BaselineConfig()
    workers = workers or load_config()['workers']
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)

    logger.info(f'=== Ablation: {len(methods)} methods × {len(fractions)} fractions × {len(seeds)} seeds × {k} folds ===')
    cells = []
    for seed in seeds:
        for fraction, level in zip(fractions, thinned_levels(raw, fractions, seed)):
            for method in methods:
                cells.append((level, method, fraction, seed))

    data_digest = table_digest(raw)
    results = Parallel(n_jobs=workers)(
        delayed(_run_cell)(level, raw.features, method, fraction, seed, k, graph_cfg, train_cfg, baseline_cfg,
                           _cell_path(cache_dir, method, fraction, seed),
                           cell_fingerprint(method, fraction, seed, k, data_digest,
                                            graph_cfg, train_cfg, baseline_cfg))
        for level, method, fraction, seed in cells
    )

    table = pd.DataFrame([row for rows in results for row in rows], columns=RESULT_COLUMNS)
    table[['auc', 'accuracy', 'rmse', 'mean_rmse']] = table[['auc', 'accuracy', 'rmse', 'mean_rmse']].astype(np.float64)
    summary = summarize(table)
    logger.info(f'Ablation finished: {len(table)} result rows')
    return table, summary

"""
Stratified k-fold cross-validation of the graph model and the baseline.

Unlabeled subjects never enter a test fold's scoring, but they stay in every
fold's matrix and graph (transductive setting).
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.main.evaluate.baseline import BaselineConfig, baseline_logreg
from src.main.evaluate.metrics import FoldMetrics, MetricsReport, evaluate_fold
from src.main.extract.load_csv import RawTable
from src.main.ml.graph import GraphConfig, LaplacianSet, build_graph, laplacians
from src.main.ml.srgcnn import TrainConfig, predict, train
from src.main.transform.assemble import assemble
from src.utils.config import load_config
from src.utils.errors import GmcError, ParameterError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

METHODS = ('gmc', 'baseline')


@dataclass
class FoldPlan:
    k: int
    seed: int
    labels: np.ndarray
    fold_of: np.ndarray      # fold index per row, -1 for unlabeled rows
    folds: List[Tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    @property
    def unlabeled(self) -> np.ndarray:
        return np.flatnonzero(self.fold_of < 0)

    def split(self, fold: int) -> Tuple[np.ndarray, np.ndarray]:
        """Training rows and hidden rows (the test fold plus unlabeled subjects)."""
        train_rows, test_rows = self.folds[fold]
        return train_rows, np.union1d(test_rows, self.unlabeled)


def stratified_kfold(labels, k: int, seed: int) -> FoldPlan:
    """
    Shuffle each class with the seed and deal its rows round-robin over the
    folds, continuing the deal where the previous class stopped. NaN labels
    are left out of every fold.

    Raises:
        ParameterError: If k < 2 or a class has fewer than k members
    """
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if k < 2:
        raise ParameterError('eval', 'k', f'need at least 2 folds, got {k}')
    rng = np.random.default_rng(seed)
    fold_of = np.full(labels.size, -1)
    offset = 0
    for cls in (0.0, 1.0):
        members = np.flatnonzero(labels == cls)
        if members.size < k:
            raise ParameterError('eval', 'k', f'class {int(cls)} has {members.size} members, fewer than k={k}')
        members = rng.permutation(members)
        fold_of[members] = (offset + np.arange(members.size)) % k
        offset = (offset + members.size) % k

    labeled = np.flatnonzero(fold_of >= 0)
    folds = [(labeled[fold_of[labeled] != f], np.flatnonzero(fold_of == f)) for f in range(k)]
    return FoldPlan(k=k, seed=seed, labels=labels, fold_of=fold_of, folds=folds)


def _run_fold(raw: RawTable, plan: FoldPlan, fold: int, method: str, lap: Optional[LaplacianSet],
              train_cfg: TrainConfig, baseline_cfg: BaselineConfig,
              reference: Optional[pd.DataFrame]) -> FoldMetrics:
    try:
        train_rows, test_rows = plan.split(fold)
        ds = assemble(raw, train_rows, test_rows, plan.seed)
        if method == 'baseline':
            return baseline_logreg(ds, fold, baseline_cfg.epochs, baseline_cfg.learning_rate,
                                   baseline_cfg.seed, baseline_cfg.l2, reference).folds[0]
        params, trace = train(ds, lap, train_cfg)
        imputed, probs = predict(params, ds, lap)
        metrics = evaluate_fold(ds, fold, probs, imputed, reference)
        logger.info(f'GMC fold {fold}: AUC {metrics.auc:.3f}, accuracy {metrics.accuracy:.3f} '
                    f'after {trace.epochs_run} epochs')
        return metrics
    except GmcError as e:
        logger.error(f'{method} fold {fold} failed: {e}')
        raise


def run_cv(raw: RawTable, graph_cfg: Optional[GraphConfig] = None, train_cfg: Optional[TrainConfig] = None,
           k: int = 10, seed: int = 0, method: str = 'gmc', reference: Optional[pd.DataFrame] = None,
           baseline_cfg: Optional[BaselineConfig] = None, workers: Optional[int] = None) -> MetricsReport:
    """
    k-fold CV of one method on a raw cohort table.

    Args:
        raw: Cohort table; rows without labels participate transductively
        graph_cfg: Population graph used by the graph model
        train_cfg: Model settings; its seed is replaced by seed
        k: Number of folds
        seed: Seed for the fold plan and the model initialization
        method: 'gmc' or 'baseline'
        reference: Raw features to score imputation against (entries hidden from raw)
        workers: Parallel folds (default from GMC_WORKERS)

    Returns:
        MetricsReport with one entry per fold, in fold order
    """
    if method not in METHODS:
        raise ParameterError('eval', 'method', f'{method!r} not in {METHODS}')
    train_cfg = replace(train_cfg or TrainConfig(), seed=seed)
    baseline_cfg = replace(baseline_cfg or BaselineConfig(), seed=seed)
    workers = workers or load_config()['workers']

    plan = stratified_kfold(raw.labels.to_numpy(), k, seed)
    lap = laplacians(build_graph(raw.meta, graph_cfg or GraphConfig())) if method == 'gmc' else None

    logger.info(f'=== {k}-fold CV: {method}, seed {seed}, {workers} workers ===')
    folds = Parallel(n_jobs=workers)(
        delayed(_run_fold)(raw, plan, f, method, lap, train_cfg, baseline_cfg, reference) for f in range(k)
    )
    report = MetricsReport(method=method, folds=list(folds))
    logger.info(f'{method}: mean AUC {report.auc:.3f} ± {report.std("auc"):.3f}, '
                f'mean accuracy {report.accuracy:.3f}')
    return report

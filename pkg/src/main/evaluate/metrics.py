"""
Classification and imputation metrics.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from src.main.transform.assemble import MaskedDataset
from src.utils.errors import DimensionError, ParameterError, ValidationError

METRICS = ('auc', 'accuracy', 'rmse', 'mean_rmse')


def roc_auc(scores, labels) -> float:
    """
    Rank-based (Mann–Whitney) area under the ROC curve; tied scores count 1/2.

    Raises:
        ParameterError: If only one class is present
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if scores.shape != labels.shape:
        raise DimensionError('eval', 'scores', f'{scores.size} scores for {labels.size} labels')
    if not np.all(np.isfinite(scores)):
        raise ValidationError('eval', 'scores', 'scores must be finite')
    positive = labels == 1
    n_pos, n_neg = int(positive.sum()), int((labels == 0).sum())
    if n_pos + n_neg != labels.size:
        raise ValidationError('eval', 'labels', 'labels must be 0 or 1')
    if n_pos == 0 or n_neg == 0:
        raise ParameterError('eval', 'labels', 'AUC needs both classes')

    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def accuracy(probs, labels, threshold: float = 0.5) -> float:
    probs = np.asarray(probs, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    if labels.size == 0:
        raise ParameterError('eval', 'labels', 'accuracy of an empty set is undefined')
    return float(np.mean((probs >= threshold).astype(float) == labels))


def rmse(estimate: np.ndarray, truth: np.ndarray, mask: np.ndarray) -> float:
    """RMSE over the entries where mask is set; NaN when the mask is empty."""
    selected = np.asarray(mask, dtype=bool)
    if not selected.any():
        return float('nan')
    return float(np.sqrt(np.mean((estimate[selected] - truth[selected]) ** 2)))


def heldout_reference(ds: MaskedDataset, reference: Optional[pd.DataFrame]):
    """
    Reference values in the dataset's normalized units, and the mask of entries
    hidden from the dataset but known in the reference.
    """
    if reference is None:
        return None, np.zeros(ds.omega_a.shape, dtype=bool)
    known = reference[ds.feature_names].to_numpy(dtype=np.float64)
    hidden = (ds.omega_a == 0) & ~np.isnan(known)
    return np.nan_to_num((known - ds.means) / ds.stds), hidden


@dataclass
class FoldMetrics:
    fold: int
    auc: float
    accuracy: float
    rmse: float = float('nan')
    mean_rmse: float = float('nan')


def evaluate_fold(ds: MaskedDataset, fold: int, probs: np.ndarray, imputed: Optional[np.ndarray] = None,
                  reference: Optional[pd.DataFrame] = None) -> FoldMetrics:
    """
    Score one fold on its labeled test rows. Imputation errors are measured in
    normalized units on entries hidden from ds but present in reference;
    mean imputation (0 in normalized units) is scored on the same entries.
    """
    rows = ds.test_rows[~np.isnan(ds.labels[ds.test_rows])]
    labels = ds.labels[rows]
    truth, hidden = heldout_reference(ds, reference)
    result = FoldMetrics(fold=fold, auc=roc_auc(probs[rows], labels), accuracy=accuracy(probs[rows], labels))
    if truth is not None:
        if imputed is not None:
            result.rmse = rmse(imputed, truth, hidden)
        result.mean_rmse = rmse(np.zeros_like(truth), truth, hidden)
    return result


@dataclass
class MetricsReport:
    method: str
    folds: List[FoldMetrics] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(f) for f in self.folds], columns=['fold', *METRICS])
        df.insert(0, 'method', self.method)
        return df

    def mean(self, metric: str) -> float:
        return float(np.nanmean([getattr(f, metric) for f in self.folds])) if self._has(metric) else float('nan')

    def std(self, metric: str) -> float:
        return float(np.nanstd([getattr(f, metric) for f in self.folds])) if self._has(metric) else float('nan')

    def _has(self, metric: str) -> bool:
        return any(np.isfinite(getattr(f, metric)) for f in self.folds)

    @property
    def auc(self) -> float:
        return self.mean('auc')

    @property
    def accuracy(self) -> float:
        return self.mean('accuracy')

    @property
    def feature_rmse(self) -> float:
        return self.mean('rmse')

    def summary(self) -> Dict:
        stats = {metric: {'mean': self.mean(metric), 'std': self.std(metric)} for metric in METRICS}
        return {'method': self.method, 'folds': len(self.folds),
                # JSON has no NaN
                'metrics': {k: {s: (v if np.isfinite(v) else None) for s, v in d.items()} for k, d in stats.items()}}

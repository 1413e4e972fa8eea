"""
Assembles the stacked matrix Z = [Y | T] with its feature and label masks.
Features are z-scored with statistics from observed training entries only.
"""

from dataclasses import dataclass, field, replace
from typing import Dict, List

import numpy as np
import pandas as pd

from src.main.extract.load_csv import RawTable
from src.utils.errors import ParameterError, SchemaError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class MaskedDataset:
    z: np.ndarray
    omega_a: np.ndarray
    omega_b: np.ndarray
    feature_names: List[str]
    label_names: List[str]
    means: np.ndarray
    stds: np.ndarray
    labels: np.ndarray
    train_rows: np.ndarray
    test_rows: np.ndarray
    raw: RawTable
    dropped_columns: List[str] = field(default_factory=list)
    seed: int = 0

    @property
    def m(self) -> int:
        return self.z.shape[0]

    @property
    def n(self) -> int:
        return self.omega_a.shape[1]

    @property
    def c(self) -> int:
        return self.omega_b.shape[1]

    @property
    def features(self) -> np.ndarray:
        return self.z[:, :self.n]

    @property
    def targets(self) -> np.ndarray:
        return self.z[:, self.n:]

    @property
    def meta(self) -> pd.DataFrame:
        return self.raw.meta

    @property
    def feature_density(self) -> float:
        return float(self.omega_a.mean())

    def metadata(self) -> Dict:
        return {
            'columns': [{'name': c, 'role': 'feature'} for c in self.feature_names]
                       + [{'name': c, 'role': 'label'} for c in self.label_names],
            'normalization': {c: {'mean': float(mu), 'std': float(sd)}
                              for c, mu, sd in zip(self.feature_names, self.means, self.stds)},
            'dropped_columns': list(self.dropped_columns),
            'train_rows': [int(i) for i in self.train_rows],
            'test_rows': [int(i) for i in self.test_rows],
            'seed': int(self.seed),
        }


def assemble(raw: RawTable, train_rows, test_rows, seed: int = 0) -> MaskedDataset:
    """
    Stack z-scored features with the label column.

    Args:
        raw: Loaded cohort table
        train_rows: Rows whose labels enter Ω_b
        test_rows: Rows whose labels are hidden (test fold and unlabeled subjects)
        seed: Recorded in the dataset metadata

    Raises:
        ParameterError: If the row sets overlap, miss rows, or a training row is unlabeled
        SchemaError: If no feature column survives normalization
    """
    m = len(raw.features)
    train_rows = np.sort(np.asarray(train_rows, dtype=int))
    test_rows = np.sort(np.asarray(test_rows, dtype=int))
    if np.intersect1d(train_rows, test_rows).size:
        raise ParameterError('data', 'train_rows', 'train and test rows overlap')
    if not np.array_equal(np.union1d(train_rows, test_rows), np.arange(m)):
        raise ParameterError('data', 'test_rows', f'train ∪ test must cover all {m} rows exactly')

    labels = raw.labels.to_numpy(dtype=np.float64)
    if np.isnan(labels[train_rows]).any():
        raise ParameterError('data', 'train_rows', 'training rows must be labeled')

    values = raw.features.to_numpy(dtype=np.float64)
    train = raw.features.iloc[train_rows]
    counts = train.notna().sum().to_numpy()
    means = train.mean().to_numpy(dtype=np.float64)
    stds = train.std(ddof=0).to_numpy(dtype=np.float64)

    keep = (counts > 0) & (stds > 0) & np.isfinite(stds)
    names = list(raw.features.columns)
    dropped = [c for c, k in zip(names, keep) if not k]
    if dropped:
        logger.warning(f'Dropping {len(dropped)} feature columns without usable training statistics: {dropped}')
    if not keep.any():
        raise SchemaError('data', 'features', 'no feature column has observed, non-constant training entries')

    kept = values[:, keep]
    means, stds = means[keep], stds[keep]
    observed = ~np.isnan(kept)
    normalized = np.where(observed, (kept - means) / stds, 0.0)

    omega_b = np.zeros((m, 1))
    omega_b[train_rows, 0] = 1.0
    targets = np.where(omega_b[:, 0] > 0, np.nan_to_num(labels), 0.0)

    ds = MaskedDataset(
        z=np.hstack([normalized, targets[:, None]]),
        omega_a=observed.astype(np.float64),
        omega_b=omega_b,
        feature_names=[c for c, k in zip(names, keep) if k],
        label_names=[raw.label_name],
        means=means,
        stds=stds,
        labels=labels,
        train_rows=train_rows,
        test_rows=test_rows,
        raw=raw,
        dropped_columns=dropped,
        seed=seed,
    )
    logger.info(f'Assembled Z: {ds.m}×{ds.n + ds.c}, feature density {ds.feature_density:.2f}, '
                f'{train_rows.size} train / {test_rows.size} test rows')
    return ds


def denormalize(ds: MaskedDataset, values: np.ndarray) -> np.ndarray:
    """Map z-scored feature values back to raw units."""
    return values * ds.stds + ds.means


def permute_dataset(ds: MaskedDataset, order: np.ndarray) -> MaskedDataset:
    """Dataset whose row i is row order[i] of ds."""
    order = np.asarray(order, dtype=int)
    inverse = np.argsort(order)
    return replace(
        ds,
        z=ds.z[order], omega_a=ds.omega_a[order], omega_b=ds.omega_b[order], labels=ds.labels[order],
        train_rows=np.sort(inverse[ds.train_rows]), test_rows=np.sort(inverse[ds.test_rows]),
        raw=ds.raw.permuted(order),
    )


def validate_dataset(ds: MaskedDataset) -> Dict:
    """
    Summarize a dataset and check its structural invariants.

    Returns:
        Dictionary with shape, densities, label counts and any invariant violations
    """
    known = ds.labels[~np.isnan(ds.labels)]
    test_label_mask = ds.omega_b[ds.test_rows].sum() if ds.test_rows.size else 0.0
    results = {
        'shape': {'m': ds.m, 'n': ds.n, 'c': ds.c},
        'feature_density': ds.feature_density,
        'label_counts': {'positive': int((known == 1).sum()), 'negative': int((known == 0).sum()),
                         'unlabeled': int(np.isnan(ds.labels).sum())},
        'train_rows': int(ds.train_rows.size),
        'test_rows': int(ds.test_rows.size),
        'dropped_columns': list(ds.dropped_columns),
        'issues': [],
    }
    if test_label_mask:
        results['issues'].append('label mask covers test rows')
    if np.any(ds.features[ds.omega_a == 0] != 0):
        results['issues'].append('unobserved feature entries are not zero')
    empty_rows = int(np.sum(ds.omega_a.sum(axis=1) == 0))
    if empty_rows:
        results['issues'].append(f'{empty_rows} rows have no observed feature')

    for issue in results['issues']:
        logger.warning(f'Dataset check: {issue}')
    return results

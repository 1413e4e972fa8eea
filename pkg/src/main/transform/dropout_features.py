"""
Random feature dropout for feature-completeness ablations.
"""

from typing import Optional, Sequence

import numpy as np
import pandas as pd

from src.main.extract.load_csv import RawTable
from src.main.transform.assemble import MaskedDataset, assemble
from src.utils.errors import ParameterError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


def thin_raw(raw: RawTable, keep_frac: float, seed: int, columns: Optional[Sequence[str]] = None) -> RawTable:
    """
    Keep an exact-count uniform subset of the observed feature cells of a raw table.

    Every cell gets a priority key drawn from the seed and the observed cells
    with the smallest keys survive, so repeated thinning with one seed yields
    nested masks. Cells outside columns are left as they are.

    Args:
        raw: Table to thin out
        keep_frac: Fraction of currently observed cells to keep, in (0, 1]
        seed: Seed for the priority keys
        columns: Feature columns subject to dropout (default: all)
    """
    if not 0 < keep_frac <= 1:
        raise ParameterError('data', 'keep_frac', f'must lie in (0, 1], got {keep_frac}')

    features = raw.features
    keys = np.random.default_rng(seed).random(features.shape)
    selected = list(range(features.shape[1])) if columns is None else \
        [features.columns.get_loc(c) for c in columns]

    values = features.to_numpy(dtype=np.float64, copy=True)
    observed = np.zeros(values.shape, dtype=bool)
    observed[:, selected] = ~np.isnan(values[:, selected])

    candidates = np.flatnonzero(observed)
    keep_count = int(round(keep_frac * candidates.size))
    order = np.argsort(keys.ravel()[candidates], kind='stable')
    removed = candidates[order[keep_count:]]
    values[np.unravel_index(removed, values.shape)] = np.nan

    logger.info(f'Feature dropout: kept {keep_count}/{candidates.size} observed entries (keep_frac={keep_frac:.3f})')
    return raw.with_features(pd.DataFrame(values, columns=features.columns))


def dropout_features(ds: MaskedDataset, keep_frac: float, seed: int) -> MaskedDataset:
    """
    Thin the observed feature entries of a dataset and re-assemble it.
    Labels and the train/test split are untouched.
    """
    thinned = thin_raw(ds.raw, keep_frac, seed, columns=ds.feature_names)
    return assemble(thinned, ds.train_rows, ds.test_rows, ds.seed)

"""
Cohort CSV ingestion.
Reads a subject-per-row table with numerical features, a binary label column
and the demographic columns used to build the population graph.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import pandas as pd

from src.utils.errors import ParseError, SchemaError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

# cMCI (converts within 48 months) = 1, sMCI (stable) = 0
LABEL_CODES = {'cmci': 1.0, 'smci': 0.0, '1': 1.0, '0': 0.0, '1.0': 1.0, '0.0': 0.0}
LABEL_NAMES = {1.0: 'cMCI', 0.0: 'sMCI'}

DEFAULT_META_COLUMNS = {'age': 'age', 'gender': 'gender'}


@dataclass
class RawTable:
    features: pd.DataFrame
    labels: pd.Series
    meta: pd.DataFrame
    ids: pd.Index
    label_name: str = 'label'

    @property
    def observed(self) -> np.ndarray:
        return self.features.notna().to_numpy()

    @property
    def density(self) -> float:
        obs = self.observed
        return float(obs.mean()) if obs.size else 0.0

    def with_features(self, features: pd.DataFrame) -> 'RawTable':
        return RawTable(features=features, labels=self.labels, meta=self.meta, ids=self.ids,
                        label_name=self.label_name)

    def permuted(self, order: np.ndarray) -> 'RawTable':
        return RawTable(features=self.features.iloc[order].reset_index(drop=True),
                        labels=self.labels.iloc[order].reset_index(drop=True),
                        meta=self.meta.iloc[order].reset_index(drop=True),
                        ids=self.ids[order], label_name=self.label_name)


def _missing_cells(col: pd.Series, missing_sentinel: Optional[str]) -> pd.Series:
    missing = col == ''
    if missing_sentinel is not None:
        missing |= col == missing_sentinel
    return missing


def _parse_numeric(col: pd.Series, name: str, missing_sentinel: Optional[str]) -> pd.Series:
    cells = col.str.strip()
    missing = _missing_cells(cells, missing_sentinel)
    numeric = pd.to_numeric(cells.where(~missing), errors='coerce')
    bad = numeric.isna() & ~missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError('data', row, name, f'non-numeric value {col.iloc[row]!r}')
    return numeric.astype(np.float64)


def _parse_labels(col: pd.Series, name: str, missing_sentinel: Optional[str]) -> pd.Series:
    cells = col.str.strip()
    missing = _missing_cells(cells, missing_sentinel)
    codes = cells.str.lower().map(LABEL_CODES)
    bad = codes.isna() & ~missing
    if bad.any():
        row = int(np.flatnonzero(bad.to_numpy())[0])
        raise ParseError('data', row, name, f'label {col.iloc[row]!r} is not one of cMCI/sMCI/1/0')
    return codes.where(~missing).astype(np.float64)


def load_csv(path: Path, label_column: str = 'label', meta_columns: Optional[Dict[str, str]] = None,
             missing_sentinel: Optional[str] = None, id_column: Optional[str] = None) -> RawTable:
    """
    Load a cohort CSV.

    Args:
        path: CSV with a header row
        label_column: Binary label column (cMCI/sMCI or 1/0); empty cells are unlabeled subjects
        meta_columns: Mapping of 'age' and 'gender' to their column names
        missing_sentinel: Extra string that marks a missing feature cell
        id_column: Optional subject identifier column (excluded from features)

    Returns:
        RawTable with NaN for missing feature cells and labels

    Raises:
        FileNotFoundError: If the CSV doesn't exist
        SchemaError: If required columns are absent or no feature column remains
        ParseError: If a feature, age or label cell cannot be parsed
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'CSV file not found: {path}')
    meta_columns = {**DEFAULT_META_COLUMNS, **(meta_columns or {})}

    logger.info(f'Reading {path.name}')
    df = pd.read_csv(path, dtype=str, keep_default_na=False)
    df.columns = [c.strip() for c in df.columns]

    required = [label_column, meta_columns['age'], meta_columns['gender']] + ([id_column] if id_column else [])
    missing_cols = [c for c in required if c not in df.columns]
    if missing_cols:
        raise SchemaError('data', 'columns', f'missing columns in {path.name}: {missing_cols}')

    feature_cols = [c for c in df.columns if c not in required]
    if not feature_cols:
        raise SchemaError('data', 'columns', f'no feature columns in {path.name}')

    features = pd.DataFrame({c: _parse_numeric(df[c], c, missing_sentinel) for c in feature_cols})
    labels = _parse_labels(df[label_column], label_column, missing_sentinel)

    ages = _parse_numeric(df[meta_columns['age']], meta_columns['age'], missing_sentinel)
    if ages.isna().any():
        row = int(np.flatnonzero(ages.isna().to_numpy())[0])
        raise ParseError('data', row, meta_columns['age'], 'age is required to build the population graph')
    meta = pd.DataFrame({'age': ages, 'gender': df[meta_columns['gender']].str.strip()})

    ids = pd.Index(df[id_column]) if id_column else pd.RangeIndex(len(df))

    raw = RawTable(features=features, labels=labels, meta=meta, ids=ids, label_name=label_column)
    logger.info(f'Loaded {len(df)} subjects, {len(feature_cols)} features, '
                f'feature density {raw.density:.2f}, {int(labels.notna().sum())} labeled')
    return raw

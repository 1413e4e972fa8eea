"""
Planted synthetic instances.

synth_instance builds a desk-scale cohort: low-rank features, labels driven
by the same latent factors, and ages that carry label information so the
demographic graph is informative. smooth_instance builds matrices whose rows
vary smoothly along a path graph.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import pandas as pd
from scipy.special import expit

from src.main.extract.load_csv import RawTable
from src.main.ml.completion import MaskedMatrix
from src.main.ml.graph import PopulationGraph, path_graph
from src.main.transform.assemble import MaskedDataset, assemble
from src.utils.errors import ParameterError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

GENDERS = np.array(['F', 'M'])


@dataclass
class GroundTruth:
    features: np.ndarray      # m×n, complete, noise included
    low_rank: np.ndarray      # m×n, U·Vᵀ
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    label_probs: np.ndarray
    labels: np.ndarray
    mask: np.ndarray

    def heldout_rmse(self, estimate: np.ndarray, mask: Optional[np.ndarray] = None) -> float:
        """RMSE of estimate against the complete features on the entries hidden by mask."""
        mask = self.mask if mask is None else mask
        hidden = mask == 0
        if not hidden.any():
            return 0.0
        return float(np.sqrt(np.mean((estimate[hidden] - self.features[hidden]) ** 2)))


def observation_mask(m: int, n: int, observed_frac: float, rng: np.random.Generator) -> np.ndarray:
    """
    Exact-count uniform mask with at least one observed entry per row and column.

    A cycling diagonal over randomly permuted rows and columns covers every row
    and column with max(m, n) entries; the rest are drawn uniformly.

    Raises:
        ParameterError: If observed_frac is outside (0, 1] or too small for the coverage guarantee
    """
    if not 0 < observed_frac <= 1:
        raise ParameterError('data', 'observed_frac', f'must lie in (0, 1], got {observed_frac}')
    total = int(round(observed_frac * m * n))
    base = max(m, n)
    if total < base:
        raise ParameterError('data', 'observed_frac',
                             f'{total} entries cannot touch all {m} rows and {n} columns (need {base})')

    rows, cols = rng.permutation(m), rng.permutation(n)
    mask = np.zeros((m, n))
    idx = np.arange(base)
    mask[rows[idx % m], cols[idx % n]] = 1.0

    free = np.flatnonzero(mask.ravel() == 0)
    extra = rng.choice(free, size=total - base, replace=False)
    mask[np.unravel_index(extra, mask.shape)] = 1.0
    return mask


def synth_raw(m: int = 120, n: int = 20, rank: int = 2, noise: float = 0.1, observed_frac: float = 0.5,
              label_signal: float = 5.0, seed: int = 0, base_age: float = 72.0, age_effect: float = 6.0,
              age_noise: float = 2.0) -> Tuple[RawTable, GroundTruth]:
    """
    Planted cohort table in raw units.

    Args:
        m: Subjects
        n: Features
        rank: Rank of the planted feature matrix U·Vᵀ
        noise: Standard deviation of the additive Gaussian noise
        observed_frac: Feature density of the returned table
        label_signal: Scale of the latent logit U·w; larger values make labels more predictable
        seed: Generator seed
        base_age: Mean age of stable subjects
        age_effect: Extra years for converting subjects
        age_noise: Standard deviation of age around its class mean

    Returns:
        RawTable with NaN at unobserved cells, and the complete ground truth
    """
    if rank < 1 or rank > min(m, n):
        raise ParameterError('data', 'rank', f'need 1 <= rank <= {min(m, n)}, got {rank}')
    if noise < 0:
        raise ParameterError('data', 'noise', f'must be non-negative, got {noise}')

    rng = np.random.default_rng(seed)
    u = rng.standard_normal((m, rank))
    v = rng.standard_normal((n, rank))
    low_rank = u @ v.T
    features = low_rank + noise * rng.standard_normal((m, n))

    w = rng.standard_normal(rank)
    w /= np.linalg.norm(w)
    probs = expit(label_signal * (u @ w))
    labels = (rng.random(m) < probs).astype(np.float64)

    ages = base_age + age_effect * labels + age_noise * rng.standard_normal(m)
    genders = GENDERS[rng.integers(0, 2, size=m)]

    mask = observation_mask(m, n, observed_frac, rng)

    names = [f'feature_{j:02d}' for j in range(n)]
    table = RawTable(
        features=pd.DataFrame(np.where(mask > 0, features, np.nan), columns=names),
        labels=pd.Series(labels, name='label'),
        meta=pd.DataFrame({'age': ages, 'gender': genders}),
        ids=pd.RangeIndex(m),
    )
    truth = GroundTruth(features=features, low_rank=low_rank, u=u, v=v, w=w,
                        label_probs=probs, labels=labels, mask=mask)
    logger.info(f'Synthetic cohort: {m}×{n}, rank {rank}, density {mask.mean():.2f}, '
                f'{int(labels.sum())} positive / {int(m - labels.sum())} negative')
    return table, truth


def synth_instance(m: int = 120, n: int = 20, rank: int = 2, noise: float = 0.1, observed_frac: float = 0.5,
                   label_signal: float = 5.0, seed: int = 0, **kwargs) -> Tuple[MaskedDataset, GroundTruth]:
    """Planted cohort assembled with every row in the training set."""
    raw, truth = synth_raw(m, n, rank, noise, observed_frac, label_signal, seed, **kwargs)
    ds = assemble(raw, np.arange(m), np.array([], dtype=int), seed)
    return ds, truth


def smooth_instance(m: int = 30, n: int = 20, observed_frac: float = 0.5, noise: float = 0.1,
                    rank: Optional[int] = None, seed: int = 0) -> Tuple[MaskedMatrix, np.ndarray, PopulationGraph]:
    """
    Matrix whose columns are smooth signals over a path graph on the rows.

    Without rank, column j is sin(2π·f_j·t + φ_j) on an even grid t ∈ [0, 1];
    with rank, the columns mix the first rank low-frequency cosines.

    Returns:
        Noisy masked observations, the noiseless matrix, and the path graph
    """
    rng = np.random.default_rng(seed)
    t = np.linspace(0.0, 1.0, m)
    if rank is None:
        freqs = rng.uniform(0.5, 1.5, size=n)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=n)
        truth = np.sin(2.0 * np.pi * t[:, None] * freqs[None, :] + phases[None, :])
    else:
        if rank < 1 or rank > min(m, n):
            raise ParameterError('data', 'rank', f'need 1 <= rank <= {min(m, n)}, got {rank}')
        basis = np.cos(np.pi * np.arange(rank)[None, :] * (np.arange(m)[:, None] + 0.5) / m)
        truth = basis @ rng.standard_normal((rank, n))

    observed = truth + noise * rng.standard_normal((m, n))
    mask = observation_mask(m, n, observed_frac, rng)
    return MaskedMatrix(observed, mask), truth, path_graph(m)

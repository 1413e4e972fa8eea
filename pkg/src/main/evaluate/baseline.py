"""
Mean-imputation + logistic regression baseline, trained on the same autodiff
engine and folds as the graph model so comparisons are paired.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.special import expit

from src.main.evaluate.metrics import MetricsReport, evaluate_fold
from src.main.ml.autodiff import Tape, add, add_row, frobenius_sq, masked_bce, matmul, scale
from src.main.ml.optim import Adam
from src.main.transform.assemble import MaskedDataset
from src.utils.errors import ParameterError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)


@dataclass
class BaselineConfig:
    epochs: int = 300
    learning_rate: float = 0.05
    l2: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError('eval', 'epochs', f'must be positive, got {self.epochs}')
        if self.learning_rate <= 0:
            raise ParameterError('eval', 'learning_rate', f'must be positive, got {self.learning_rate}')
        if self.l2 < 0:
            raise ParameterError('eval', 'l2', f'must be non-negative, got {self.l2}')


def fit_logreg(ds: MaskedDataset, cfg: BaselineConfig) -> np.ndarray:
    """Train on the rows of Ω_b; returns probabilities for every row."""
    if ds.omega_b.sum() == 0:
        raise ParameterError('eval', 'omega_b', 'no training labels')
    rng = np.random.default_rng(cfg.seed)
    # missing entries are 0 after z-scoring, i.e. the training-column mean
    x = ds.features
    params = {'w': 0.01 * rng.standard_normal((ds.n, 1)), 'b': np.zeros((1, 1))}
    optimizer = Adam(params, cfg.learning_rate)

    for _ in range(cfg.epochs):
        tape = Tape()
        w, b = tape.variable(params['w'], 'w'), tape.variable(params['b'], 'b')
        logits = add_row(matmul(tape.constant(x), w), b)
        loss = add(masked_bce(logits, ds.targets[:, :1], ds.omega_b[:, :1]), scale(frobenius_sq(w), cfg.l2 / 2.0))
        params = optimizer.step(params, tape.backward(loss))

    return expit(x @ params['w'] + params['b']).ravel()


def baseline_logreg(ds: MaskedDataset, fold: int = 0, epochs: int = 300, learning_rate: float = 0.05,
                    seed: int = 0, l2: float = 1e-3, reference: Optional[pd.DataFrame] = None) -> MetricsReport:
    """
    Score the baseline on the held-out labeled rows of one assembled fold.
    Its imputation is the column mean, so rmse equals mean_rmse.
    """
    probs = fit_logreg(ds, BaselineConfig(epochs=epochs, learning_rate=learning_rate, l2=l2, seed=seed))
    metrics = evaluate_fold(ds, fold, probs, np.where(ds.omega_a > 0, ds.features, 0.0), reference)
    logger.info(f'Baseline fold {fold}: AUC {metrics.auc:.3f}, accuracy {metrics.accuracy:.3f}')
    return MetricsReport(method='baseline', folds=[metrics])

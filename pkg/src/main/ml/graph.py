"""
Population graph construction and Laplacian operators.

Rows of the data matrix are subjects; the row graph links subjects with
similar demographics. Laplacians feed the Dirichlet penalties and the
Chebyshev graph filters.
"""

from dataclasses import dataclass
from typing import List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from src.main.ml.autodiff import Node, Tape, Tensor, as_tensor, matmul, scale, sub
from src.utils.errors import DimensionError, ParameterError, ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

POWER_TOL = 1e-8
POWER_MAX_ITERS = 1000
LAMBDA_FALLBACK = 2.0

GRAPH_VARIANTS = ('similarity', 'knn')


@dataclass(frozen=True)
class PopulationGraph:
    adjacency: np.ndarray

    def __post_init__(self):
        a = self.adjacency
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValidationError('graph', 'adjacency', f'must be square, got shape {a.shape}')
        if not np.array_equal(a, a.T):
            raise ValidationError('graph', 'adjacency', 'must be symmetric')
        if np.any(np.diag(a) != 0):
            raise ValidationError('graph', 'adjacency', 'diagonal must be zero')
        if np.any(a < 0):
            raise ValidationError('graph', 'adjacency', 'weights must be non-negative')

    @property
    def node_count(self) -> int:
        return self.adjacency.shape[0]

    @property
    def edges(self) -> List[Tuple[int, int, float]]:
        """Undirected edges (u < v) in row-major order."""
        us, vs = np.nonzero(np.triu(self.adjacency, k=1))
        return [(int(u), int(v), float(self.adjacency[u, v])) for u, v in zip(us, vs)]

    def permuted(self, order: np.ndarray) -> 'PopulationGraph':
        """Graph whose node i is node order[i] of this graph."""
        return PopulationGraph(self.adjacency[np.ix_(order, order)])


@dataclass(frozen=True)
class LaplacianSet:
    laplacian: np.ndarray
    normalized: np.ndarray
    scaled: np.ndarray
    lambda_max: float


@dataclass
class GraphConfig:
    variant: str = 'similarity'
    k: int = 10
    age_threshold: float = 2.0

    def __post_init__(self):
        if self.variant not in GRAPH_VARIANTS:
            raise ParameterError('graph', 'variant', f'{self.variant!r} not in {GRAPH_VARIANTS}')


def knn_graph(values, k: int) -> PopulationGraph:
    """
    k-nearest-neighbor graph over a scalar covariate (e.g. age).

    Each node links to its k closest nodes by absolute difference, ties going to
    the lower node index; the directed choices are symmetrized by union.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    m = x.size
    if k <= 0 or k >= m:
        raise ParameterError('graph', 'k', f'need 0 < k < m, got k={k}, m={m}')
    if not np.all(np.isfinite(x)):
        raise ValidationError('graph', 'values', 'covariate contains non-finite entries')

    directed = np.zeros((m, m))
    for i in range(m):
        dist = np.abs(x - x[i])
        dist[i] = np.inf
        # stable sort keeps ascending index order among equal distances
        nearest = np.argsort(dist, kind='stable')[:k]
        directed[i, nearest] = 1.0

    adjacency = np.maximum(directed, directed.T)
    logger.info(f'kNN graph: {m} nodes, k={k}, {int(adjacency.sum() // 2)} edges')
    return PopulationGraph(adjacency)


def similarity_graph(meta: pd.DataFrame, age_threshold: float = 2.0) -> PopulationGraph:
    """
    Demographic similarity graph: one unit of weight for equal gender plus one
    for an age difference within age_threshold years.
    """
    if age_threshold < 0:
        raise ParameterError('graph', 'age_threshold', f'must be non-negative, got {age_threshold}')
    missing = [c for c in ('age', 'gender') if c not in meta.columns]
    if missing:
        raise ValidationError('graph', 'meta', f'missing columns {missing}')
    m = len(meta)
    if m < 2:
        raise ParameterError('graph', 'meta', f'need at least 2 subjects, got {m}')

    ages = meta['age'].to_numpy(dtype=np.float64)
    if not np.all(np.isfinite(ages)):
        raise ValidationError('graph', 'age', 'ages must be finite')
    genders = meta['gender'].astype(str).to_numpy()

    same_gender = (genders[:, None] == genders[None, :]).astype(np.float64)
    close_age = (np.abs(ages[:, None] - ages[None, :]) <= age_threshold).astype(np.float64)
    adjacency = same_gender + close_age
    np.fill_diagonal(adjacency, 0.0)

    logger.info(f'Similarity graph: {m} nodes, threshold {age_threshold}y, '
                f'{int(np.count_nonzero(adjacency) // 2)} edges')
    return PopulationGraph(adjacency)


def path_graph(m: int) -> PopulationGraph:
    """Unit-weight path 0 - 1 - ... - (m-1)."""
    if m < 2:
        raise ParameterError('graph', 'm', f'need at least 2 nodes, got {m}')
    adjacency = np.zeros((m, m))
    idx = np.arange(m - 1)
    adjacency[idx, idx + 1] = 1.0
    adjacency[idx + 1, idx] = 1.0
    return PopulationGraph(adjacency)


def build_graph(meta: pd.DataFrame, cfg: GraphConfig) -> PopulationGraph:
    if cfg.variant == 'knn':
        return knn_graph(meta['age'].to_numpy(dtype=np.float64), cfg.k)
    return similarity_graph(meta, cfg.age_threshold)


def _power_iteration(mat: np.ndarray, tol: float = POWER_TOL, max_iters: int = POWER_MAX_ITERS) -> Optional[float]:
    """Largest eigenvalue of a symmetric PSD matrix, or None when not converged."""
    n = mat.shape[0]
    rng = np.random.default_rng(0)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iters):
        y = mat @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            return 0.0
        lam_new = float(x @ y)
        x = y / y_norm
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return lam_new
        lam = lam_new
    return None


def laplacians(g: PopulationGraph) -> LaplacianSet:
    """
    Unnormalized, normalized and Chebyshev-scaled Laplacians of a graph.

    Isolated nodes get an identity row in the normalized Laplacian.
    λ_max of the normalized Laplacian comes from power iteration and falls back
    to 2.0 (an upper bound) when it does not converge.
    """
    a = g.adjacency
    if np.any(a < 0):
        raise ValidationError('graph', 'adjacency', 'negative edge weight')
    m = g.node_count
    degree = a.sum(axis=1)
    lap = np.diag(degree) - a

    inv_sqrt = np.zeros(m)
    connected = degree > 0
    inv_sqrt[connected] = 1.0 / np.sqrt(degree[connected])
    normalized = np.eye(m) - inv_sqrt[:, None] * a * inv_sqrt[None, :]
    normalized = 0.5 * (normalized + normalized.T)

    lambda_max = _power_iteration(normalized)
    if lambda_max is None or lambda_max <= 0:
        logger.warning(f'Power iteration did not converge on {m}-node graph; using λ_max={LAMBDA_FALLBACK}')
        lambda_max = LAMBDA_FALLBACK

    scaled = 2.0 * normalized / lambda_max - np.eye(m)
    scaled = 0.5 * (scaled + scaled.T)
    return LaplacianSet(laplacian=lap, normalized=normalized, scaled=scaled, lambda_max=float(lambda_max))


def chebyshev_stack(lap: LaplacianSet, x: Union[Node, Tensor], order: int) -> List[Node]:
    """
    Chebyshev terms T_0(L̃)x ... T_p(L̃)x by the three-term recurrence,
    recorded on x's tape so they are differentiable with respect to x.
    """
    if order < 0:
        raise ParameterError('graph', 'order', f'must be non-negative, got {order}')
    if not isinstance(x, Node):
        x = Tape().constant(as_tensor(x))
    if x.rows != lap.scaled.shape[0]:
        raise DimensionError('graph', 'x', f'{x.rows} rows for a {lap.scaled.shape[0]}-node graph')

    scaled = x.tape.constant(lap.scaled)
    terms = [x]
    if order >= 1:
        terms.append(matmul(scaled, x))
    for _ in range(2, order + 1):
        terms.append(sub(scale(matmul(scaled, terms[-1]), 2.0), terms[-2]))
    return terms

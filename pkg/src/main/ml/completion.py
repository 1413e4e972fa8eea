"""
Classic matrix-completion solvers.

Nuclear-norm completion (optionally graph-regularized) is solved by proximal
gradient with singular-value soft-thresholding; the factorized forms are
solved by gradient descent on W, H with gradients from the autodiff tape.
Exact rank minimization is intractable and has no solver here.
"""

from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
from scipy import linalg

from src.main.ml.autodiff import (
    Node, Tape, add_all, dirichlet, frobenius_sq, hadamard, matmul, scale, sub, transpose,
)
from src.main.ml.graph import LaplacianSet
from src.utils.errors import DimensionError, NumericalError, ParameterError, ValidationError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

DEFAULT_MAX_ITERS = 2000
DEFAULT_TOL = 1e-6
MAX_HALVINGS = 20


@dataclass
class MaskedMatrix:
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.nan_to_num(np.asarray(self.values, dtype=np.float64))
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DimensionError('completion', 'mask',
                                 f'values {self.values.shape} and mask {self.mask.shape} must be equal 2-D shapes')
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValidationError('completion', 'mask', 'entries must be 0 or 1')
        # unobserved entries carry 0 by convention
        self.values = self.values * self.mask

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def observed(self) -> int:
        return int(self.mask.sum())


@dataclass
class Factorization:
    w: np.ndarray
    h: np.ndarray
    objective_trace: List[float] = field(default_factory=list)

    @property
    def rank(self) -> int:
        return self.w.shape[1]

    def reconstruct(self) -> np.ndarray:
        return self.w @ self.h.T


@dataclass
class PenaltyWeights:
    gamma: float = 1.0
    alpha_r: float = 0.0
    alpha_c: float = 0.0
    gamma_a: float = 563.39
    gamma_b: float = 248.91
    gamma_c: float = 688.85
    gamma_d: float = 97.63
    gamma_e: float = 890.14

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ParameterError('completion', name, f'penalty weights must be non-negative, got {value}')


class ProxStep(NamedTuple):
    x: np.ndarray
    pre_prox: np.ndarray
    singular_values: np.ndarray
    threshold: float


def singular_value_threshold(mat: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Proximal operator of tau·||X||_*: soft-threshold the singular values.

    Returns:
        Thresholded matrix and its (floored) singular values
    """
    try:
        u, s, vt = linalg.svd(mat, full_matrices=False)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalError('completion', 'svd', f'SVD failed: {e}')
    shrunk = np.maximum(s - tau, 0.0)
    return (u * shrunk) @ vt, shrunk


def _spectral_norm(lap: np.ndarray) -> float:
    return float(linalg.eigvalsh(lap)[-1]) if lap.size else 0.0


def _check_laplacian(name: str, lap: Optional[LaplacianSet], size: int):
    if lap is not None and lap.laplacian.shape != (size, size):
        raise DimensionError('completion', name, f'Laplacian of shape {lap.laplacian.shape}, expected {size}×{size}')


def proximal_iterates(y: MaskedMatrix, gamma: float, threshold: float,
                      row_lap: Optional[LaplacianSet] = None, col_lap: Optional[LaplacianSet] = None,
                      alpha_r: float = 0.0, alpha_c: float = 0.0,
                      step: Optional[float] = None, x0: Optional[np.ndarray] = None) -> Iterator[ProxStep]:
    """
    Endless proximal-gradient iterates for

        threshold·||X||_* + (gamma/2)||Ω∘(Y−X)||² + (alpha_r/2)tr(XᵀL_rX) + (alpha_c/2)tr(XL_cXᵀ)

    starting from x0 (X = 0 by default). Absent Laplacians drop their terms.
    """
    m, n = y.shape
    if y.observed == 0:
        raise ParameterError('completion', 'mask', 'no observed entries')
    if threshold < 0:
        raise ParameterError('completion', 'threshold', f'must be non-negative, got {threshold}')
    _check_laplacian('row_lap', row_lap, m)
    _check_laplacian('col_lap', col_lap, n)

    l_r = row_lap.laplacian if row_lap is not None and alpha_r > 0 else None
    l_c = col_lap.laplacian if col_lap is not None and alpha_c > 0 else None

    lipschitz = gamma
    if l_r is not None:
        lipschitz += alpha_r * _spectral_norm(l_r)
    if l_c is not None:
        lipschitz += alpha_c * _spectral_norm(l_c)
    if step is None:
        if lipschitz <= 0:
            raise ParameterError('completion', 'gamma', 'smooth part has zero curvature; pass a positive gamma')
        step = 1.0 / lipschitz
    tau = threshold * step

    if x0 is None:
        x = np.zeros((m, n))
    elif np.shape(x0) != (m, n):
        raise DimensionError('completion', 'x0', f'warm start of shape {np.shape(x0)}, expected {(m, n)}')
    else:
        x = np.array(x0, dtype=np.float64)
    while True:
        grad = gamma * y.mask * (x - y.values)
        if l_r is not None:
            grad = grad + alpha_r * (l_r @ x)
        if l_c is not None:
            grad = grad + alpha_c * (x @ l_c)
        pre = x - step * grad
        x, s = singular_value_threshold(pre, tau)
        yield ProxStep(x=x, pre_prox=pre, singular_values=s, threshold=tau)


def _run_proximal(iterates: Iterator[ProxStep], max_iters: int, tol: float, label: str) -> np.ndarray:
    x_prev = None
    for it, prox in enumerate(iterates, start=1):
        x = prox.x
        if not np.all(np.isfinite(x)):
            raise NumericalError('completion', label, f'non-finite iterate at iteration {it}')
        if x_prev is not None:
            change = np.linalg.norm(x - x_prev) / max(np.linalg.norm(x_prev), 1e-12)
            if change < tol:
                logger.info(f'{label}: converged after {it} iterations (rank {int(np.count_nonzero(prox.singular_values))})')
                return x
        x_prev = x
        if it >= max_iters:
            logger.warning(f'{label}: stopped at max_iters={max_iters} without reaching tol={tol}')
            return x
    return x_prev


def threshold_schedule(y: MaskedMatrix, gamma: float, threshold: float, factor: float) -> List[float]:
    """
    Geometrically decreasing thresholds ending at threshold.

    The first entry is gamma·||Ω∘Y||₂, the smallest threshold at which X = 0
    solves the graph-free problem.
    """
    if not 0 < factor < 1:
        raise ParameterError('completion', 'continuation', f'factor must lie in (0, 1), got {factor}')
    if threshold <= 0:
        raise ParameterError('completion', 'threshold', f'continuation needs a positive threshold, got {threshold}')
    current = gamma * float(linalg.norm(y.values, 2))
    schedule = []
    while current > threshold:
        schedule.append(current)
        current *= factor
    return schedule + [threshold]


def _solve_proximal(y: MaskedMatrix, gamma: float, threshold: float, row_lap: Optional[LaplacianSet],
                    col_lap: Optional[LaplacianSet], alpha_r: float, alpha_c: float, step: Optional[float],
                    max_iters: int, tol: float, continuation: Optional[float], label: str) -> np.ndarray:
    if continuation is None:
        iterates = proximal_iterates(y, gamma, threshold, row_lap, col_lap, alpha_r, alpha_c, step)
        return _run_proximal(iterates, max_iters, tol, label)
    x = None
    # each stage is warm-started from the previous solution; max_iters applies per stage
    for stage in threshold_schedule(y, gamma, threshold, continuation):
        iterates = proximal_iterates(y, gamma, stage, row_lap, col_lap, alpha_r, alpha_c, step, x0=x)
        x = _run_proximal(iterates, max_iters, tol, f'{label} @ {stage:.3g}')
    return x


def svt_complete(y: MaskedMatrix, gamma: float = 1.0, threshold: float = 1.0,
                 max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                 step: Optional[float] = None, continuation: Optional[float] = None) -> np.ndarray:
    """
    Nuclear-norm completion by singular value thresholding.

    With continuation = c in (0, 1) the threshold starts where X = 0 is optimal
    and shrinks by c per stage down to threshold. Small thresholds need this
    to converge in reasonable time from a zero start.
    """
    return _solve_proximal(y, gamma, threshold, None, None, 0.0, 0.0, step, max_iters, tol,
                           continuation, 'svt_complete')


def graph_reg_complete(y: MaskedMatrix, row_lap: LaplacianSet, col_lap: Optional[LaplacianSet] = None,
                       weights: Optional[PenaltyWeights] = None, threshold: float = 1.0,
                       max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                       step: Optional[float] = None, continuation: Optional[float] = None) -> np.ndarray:
    """Nuclear-norm completion with Dirichlet penalties on the row (and optional column) graph."""
    weights = weights or PenaltyWeights()
    return _solve_proximal(y, weights.gamma, threshold, row_lap, col_lap, weights.alpha_r,
                           weights.alpha_c if col_lap is not None else 0.0, step, max_iters, tol,
                           continuation, 'graph_reg_complete')


def svd_factors(matrix: np.ndarray, rank: int, rng: np.random.Generator,
                pad_scale: float = 1e-2, jitter: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
    """
    W = U_r√Σ_r, H = V_r√Σ_r from a truncated SVD of matrix.

    Signs are fixed so the largest-magnitude entry of each column of H is
    positive; components beyond min(m, n) are filled with N(0, pad_scale²).
    """
    m, n = matrix.shape
    try:
        u, s, vt = linalg.svd(matrix, full_matrices=False)
    except (linalg.LinAlgError, ValueError) as e:
        raise NumericalError('completion', 'svd', f'SVD failed: {e}')
    k = min(rank, s.size)
    root = np.sqrt(s[:k])
    w = u[:, :k] * root
    h = vt[:k].T * root
    signs = np.sign(h[np.argmax(np.abs(h), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    w, h = w * signs, h * signs
    if rank > k:
        w = np.hstack([w, pad_scale * rng.standard_normal((m, rank - k))])
        h = np.hstack([h, pad_scale * rng.standard_normal((n, rank - k))])
    if jitter > 0:
        w = w + jitter * rng.standard_normal(w.shape)
        h = h + jitter * rng.standard_normal(h.shape)
    return w, h


def _factorized_loss(tape: Tape, w: Node, h: Node, y: MaskedMatrix, gamma: float,
                     row_lap: Optional[np.ndarray], col_lap: Optional[np.ndarray]) -> Node:
    w_term = dirichlet(row_lap, w) if row_lap is not None else frobenius_sq(w)
    h_term = dirichlet(col_lap, h) if col_lap is not None else frobenius_sq(h)
    residual = hadamard(tape.constant(y.mask), sub(matmul(w, transpose(h)), tape.constant(y.values)))
    return add_all([scale(w_term, 0.5), scale(h_term, 0.5), scale(frobenius_sq(residual), gamma / 2.0)])


def factorized_objective(fac: Factorization, y: MaskedMatrix, gamma: float,
                         row_lap: Optional[LaplacianSet] = None, col_lap: Optional[LaplacianSet] = None) -> float:
    """The factorized objective (graph-free when no Laplacians are given) evaluated directly in numpy."""
    w, h = fac.w, fac.h
    w_term = np.trace(w.T @ row_lap.laplacian @ w) if row_lap is not None else np.sum(w ** 2)
    h_term = np.trace(h.T @ col_lap.laplacian @ h) if col_lap is not None else np.sum(h ** 2)
    data = np.sum((y.mask * (w @ h.T - y.values)) ** 2)
    return float(0.5 * w_term + 0.5 * h_term + 0.5 * gamma * data)


def _descend(y: MaskedMatrix, w0: np.ndarray, h0: np.ndarray,
             loss_fn: Callable[[Tape, Node, Node], Node],
             max_iters: int, tol: float, step: float, label: str) -> Factorization:
    """Gradient descent with halving backtracking; the objective never increases."""

    def evaluate(params: Dict[str, np.ndarray], with_grad: bool):
        tape = Tape()
        w, h = tape.variable(params['w'], 'w'), tape.variable(params['h'], 'h')
        loss = loss_fn(tape, w, h)
        grads = tape.backward(loss) if with_grad else None
        return loss.item(), grads

    params = {'w': w0, 'h': h0}
    try:
        f, grads = evaluate(params, with_grad=True)
    except NumericalError as e:
        raise NumericalError('completion', label, f'objective not finite at iteration 0: {e}')
    trace = [f]

    for it in range(1, max_iters + 1):
        s = step
        accepted = None
        for _ in range(MAX_HALVINGS + 1):
            candidate = {k: params[k] - s * grads[k] for k in params}
            try:
                f_c, _ = evaluate(candidate, with_grad=False)
            except NumericalError:
                f_c = np.inf
            if f_c <= f:
                accepted = candidate
                break
            s *= 0.5
        if accepted is None:
            logger.info(f'{label}: no descent step after {MAX_HALVINGS} halvings at iteration {it}')
            break
        rel = (f - f_c) / max(abs(f), 1e-12)
        params, f = accepted, f_c
        trace.append(f)
        if rel < tol:
            logger.info(f'{label}: converged after {it} iterations, objective {f:.6g}')
            break
        _, grads = evaluate(params, with_grad=True)
    else:
        logger.warning(f'{label}: stopped at max_iters={max_iters}, objective {f:.6g}')

    return Factorization(w=params['w'], h=params['h'], objective_trace=trace)


def _initial_step(gamma: float, w0: np.ndarray, *laps: Optional[LaplacianSet]) -> float:
    curvature = 1.0 + 2.0 * gamma * float(np.sum(w0 ** 2, axis=0).max(initial=0.0))
    for lap in laps:
        if lap is not None:
            curvature += _spectral_norm(lap.laplacian)
    return 1.0 / curvature


def factorized_complete(y: MaskedMatrix, rank: int, weights: Optional[PenaltyWeights] = None,
                        max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                        seed: int = 0, step: Optional[float] = None) -> Factorization:
    """Minimize (1/2)||W||² + (1/2)||H||² + (γ/2)||Ω∘(WHᵀ−Y)||² from an SVD initialization."""
    weights = weights or PenaltyWeights()
    m, n = y.shape
    if rank < 1 or rank > min(m, n):
        raise ParameterError('completion', 'rank', f'need 1 <= rank <= {min(m, n)}, got {rank}')
    rng = np.random.default_rng(seed)
    w0, h0 = svd_factors(y.values, rank, rng, jitter=1e-3)
    step = step or _initial_step(weights.gamma, w0)
    gamma = weights.gamma
    return _descend(y, w0, h0, lambda tape, w, h: _factorized_loss(tape, w, h, y, gamma, None, None),
                    max_iters, tol, step, 'factorized_complete')


def factorized_graph_complete(y: MaskedMatrix, rank: int, row_lap: LaplacianSet,
                              col_lap: Optional[LaplacianSet] = None,
                              weights: Optional[PenaltyWeights] = None,
                              max_iters: int = DEFAULT_MAX_ITERS, tol: float = DEFAULT_TOL,
                              seed: int = 0, step: Optional[float] = None) -> Factorization:
    """
    Minimize (1/2)tr(WᵀL_rW) + (1/2)tr(HᵀL_cH) + (γ/2)||Ω∘(Y−WHᵀ)||².
    Without a column graph, H is penalized by (1/2)||H||² instead.
    """
    weights = weights or PenaltyWeights()
    m, n = y.shape
    if rank < 1 or rank > min(m, n):
        raise ParameterError('completion', 'rank', f'need 1 <= rank <= {min(m, n)}, got {rank}')
    _check_laplacian('row_lap', row_lap, m)
    _check_laplacian('col_lap', col_lap, n)
    rng = np.random.default_rng(seed)
    w0, h0 = svd_factors(y.values, rank, rng, jitter=1e-3)
    step = step or _initial_step(weights.gamma, w0, row_lap, col_lap)
    gamma = weights.gamma
    l_r = row_lap.laplacian
    l_c = col_lap.laplacian if col_lap is not None else None
    return _descend(y, w0, h0, lambda tape, w, h: _factorized_loss(tape, w, h, y, gamma, l_r, l_c),
                    max_iters, tol, step, 'factorized_graph_complete')

"""
Separable recurrent graph convolutional network for joint imputation and classification.

The row factor W of Z ≈ W·Hᵀ is refined by a learned diffusion: at every step
Chebyshev graph filters extract features from W over the population graph, a
row-wise LSTM turns them into an increment dW, and W ← W + dW. H is a free
parameter. Training minimizes

    (γ_a/2)tr(WᵀL̂W) + (γ_b/2)||W||² + (γ_c/2)||H||² + (γ_d/2)||Ω_a∘(Z−WHᵀ)||²
        + γ_e·BCE(label columns of WHᵀ over Ω_b)

with L̂ the normalized row Laplacian.
"""

from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

from src.main.ml.autodiff import (
    Node, Tape, add, add_all, add_row, dirichlet, frobenius_sq, hadamard, masked_bce,
    matmul, scale, sigmoid, slice_cols, sub, tanh, transpose,
)
from src.main.ml.completion import PenaltyWeights, svd_factors
from src.main.ml.graph import LaplacianSet, PopulationGraph, chebyshev_stack, laplacians
from src.main.ml.optim import Adam
from src.main.transform.assemble import MaskedDataset
from src.utils.errors import DimensionError, NumericalError, ParameterError, TrainingDiverged
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

GATES = ('input', 'forget', 'output', 'cell')
LOSS_TERMS = ('dirichlet', 'frob_w', 'frob_h', 'reconstruction', 'classification')
PAD_SCALE = 1e-2
OUT_PROJ_SCALE = 0.1


@dataclass
class TrainConfig:
    rank: int = 156
    cheb_order: int = 18
    hidden_units: int = 36
    features: int = 32
    learning_rate: float = 0.00089
    diffusion_steps: int = 10
    epochs: int = 500
    patience: int = 50
    min_delta: float = 1e-6
    weights: PenaltyWeights = field(default_factory=PenaltyWeights)
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = PenaltyWeights(**self.weights)
        for name in ('rank', 'hidden_units', 'features', 'diffusion_steps', 'epochs', 'patience', 'log_every'):
            if getattr(self, name) < 1:
                raise ParameterError('srgcnn', name, f'must be positive, got {getattr(self, name)}')
        if self.cheb_order < 0:
            raise ParameterError('srgcnn', 'cheb_order', f'must be non-negative, got {self.cheb_order}')
        if self.learning_rate <= 0:
            raise ParameterError('srgcnn', 'learning_rate', f'must be positive, got {self.learning_rate}')
        if self.min_delta < 0:
            raise ParameterError('srgcnn', 'min_delta', f'must be non-negative, got {self.min_delta}')

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Dict) -> 'TrainConfig':
        return cls(**values)


def cheb_names(order: int) -> List[str]:
    return [f'cheb_{k}' for k in range(order + 1)]


@dataclass
class ModelParams:
    arrays: Dict[str, np.ndarray]
    config: TrainConfig

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def on_tape(self, tape: Tape) -> Dict[str, Node]:
        """Every parameter as a named variable on tape, in insertion order."""
        return {name: tape.variable(value, name) for name, value in self.arrays.items()}


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = 1.0) -> np.ndarray:
    limit = gain * np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_params(z: np.ndarray, cfg: TrainConfig) -> ModelParams:
    """
    W0 and H from the truncated SVD of the zero-filled Z; components beyond
    the matrix rank start as zero in W0 and small noise in H. Network weights
    use Glorot-uniform draws; the forget-gate bias starts at one.
    """
    rng = np.random.default_rng(cfg.seed)
    m, cols = z.shape
    r, q, hidden = cfg.rank, cfg.features, cfg.hidden_units

    k = min(r, m, cols)
    w0, h = svd_factors(z, k, rng)
    if r > k:
        w0 = np.hstack([w0, np.zeros((m, r - k))])
        h = np.hstack([h, PAD_SCALE * rng.standard_normal((cols, r - k))])

    arrays: Dict[str, np.ndarray] = {}
    for name in cheb_names(cfg.cheb_order):
        arrays[name] = _glorot(rng, r, q, gain=1.0 / np.sqrt(cfg.cheb_order + 1))
    for gate in GATES:
        arrays[f'lstm_wx_{gate}'] = _glorot(rng, q, hidden)
        arrays[f'lstm_wh_{gate}'] = _glorot(rng, hidden, hidden)
        arrays[f'lstm_b_{gate}'] = np.full((1, hidden), 1.0 if gate == 'forget' else 0.0)
    arrays['out_proj'] = _glorot(rng, hidden, r, gain=OUT_PROJ_SCALE)
    arrays['out_bias'] = np.zeros((1, r))
    arrays['w0'] = w0
    arrays['h'] = h
    return ModelParams(arrays=arrays, config=cfg)


def gcn_features(w_t: Node, lap: LaplacianSet, coeffs: List[Node]) -> Node:
    """tanh(Σ_k T_k(L̃)·W_t·Θ_k)."""
    if not coeffs:
        raise ParameterError('srgcnn', 'coeffs', 'need at least one Chebyshev coefficient matrix')
    out_cols = coeffs[0].cols
    for k, theta in enumerate(coeffs):
        if theta.rows != w_t.cols or theta.cols != out_cols:
            raise DimensionError('srgcnn', f'cheb_{k}',
                                 f'shape {theta.shape} incompatible with W {w_t.shape} and width {out_cols}')
    terms = chebyshev_stack(lap, w_t, len(coeffs) - 1)
    return tanh(add_all([matmul(t_k, theta) for t_k, theta in zip(terms, coeffs)]))


def lstm_cell(x: Node, h: Node, c: Node, nodes: Dict[str, Node]) -> Tuple[Node, Node]:
    """One LSTM step applied to every row with shared weights."""
    def gate(name: str) -> Node:
        pre = add(matmul(x, nodes[f'lstm_wx_{name}']), matmul(h, nodes[f'lstm_wh_{name}']))
        return add_row(pre, nodes[f'lstm_b_{name}'])

    i, f, o = sigmoid(gate('input')), sigmoid(gate('forget')), sigmoid(gate('output'))
    g = tanh(gate('cell'))
    c_new = add(hadamard(i, g), hadamard(f, c))
    return hadamard(o, tanh(c_new)), c_new


def diffuse(params: Union[ModelParams, Dict[str, Node]], lap: LaplacianSet, steps: int) -> Node:
    """
    Run the learned diffusion for steps iterations starting from W0.

    Raises:
        ParameterError: If steps < 1
        NumericalError: If an intermediate value is non-finite, naming the step
    """
    if steps < 1:
        raise ParameterError('srgcnn', 'steps', f'need at least one diffusion step, got {steps}')
    nodes = params.on_tape(Tape()) if isinstance(params, ModelParams) else params
    tape = nodes['w0'].tape
    coeffs = [nodes[name] for name in sorted((k for k in nodes if k.startswith('cheb_')),
                                             key=lambda k: int(k.split('_')[1]))]

    w = nodes['w0']
    hidden = nodes['lstm_wh_input'].rows
    h = tape.constant(np.zeros((w.rows, hidden)))
    c = tape.constant(np.zeros((w.rows, hidden)))
    for t in range(steps):
        try:
            x = gcn_features(w, lap, coeffs)
            h, c = lstm_cell(x, h, c, nodes)
            dw = add_row(matmul(h, nodes['out_proj']), nodes['out_bias'])
            w = add(w, dw)
        except NumericalError as e:
            raise NumericalError('srgcnn', 'diffuse', f'non-finite value at diffusion step {t}: {e.detail}')
    return w


def loss_terms(w_t: Node, h: Node, ds: MaskedDataset, lap: LaplacianSet,
               weights: PenaltyWeights) -> Dict[str, Node]:
    """
    The five weighted terms of the training objective as scalar nodes.

    Raises:
        ParameterError: If the label mask is empty while γ_e > 0
    """
    if h.rows != ds.n + ds.c or h.cols != w_t.cols:
        raise DimensionError('srgcnn', 'h', f'shape {h.shape}, expected ({ds.n + ds.c}, {w_t.cols})')
    tape = w_t.tape
    has_labels = ds.omega_b.sum() > 0
    if weights.gamma_e > 0 and not has_labels:
        raise ParameterError('srgcnn', 'omega_b', 'empty label mask with gamma_e > 0')

    x = matmul(w_t, transpose(h))
    residual = hadamard(tape.constant(ds.omega_a), sub(slice_cols(x, 0, ds.n), tape.constant(ds.features)))
    if has_labels:
        bce = masked_bce(slice_cols(x, ds.n, ds.n + ds.c), ds.targets, ds.omega_b)
        classification = scale(bce, weights.gamma_e)
    else:
        classification = tape.constant(np.zeros((1, 1)))

    return {
        'dirichlet': scale(dirichlet(lap.normalized, w_t), weights.gamma_a / 2.0),
        'frob_w': scale(frobenius_sq(w_t), weights.gamma_b / 2.0),
        'frob_h': scale(frobenius_sq(h), weights.gamma_c / 2.0),
        'reconstruction': scale(frobenius_sq(residual), weights.gamma_d / 2.0),
        'classification': classification,
    }


def training_loss(w_t: Node, h: Node, ds: MaskedDataset, lap: LaplacianSet, weights: PenaltyWeights) -> Node:
    return add_all(list(loss_terms(w_t, h, ds, lap, weights).values()))


@dataclass
class TrainTrace:
    rows: List[Dict[str, float]] = field(default_factory=list)
    early_stopped: bool = False

    @property
    def epochs_run(self) -> int:
        return len(self.rows)

    @property
    def totals(self) -> np.ndarray:
        return np.array([row['total'] for row in self.rows])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=['epoch', *LOSS_TERMS, 'total'])


def _check_graph(ds: MaskedDataset, graph: Union[PopulationGraph, LaplacianSet]) -> LaplacianSet:
    lap = laplacians(graph) if isinstance(graph, PopulationGraph) else graph
    if lap.normalized.shape[0] != ds.m:
        raise DimensionError('srgcnn', 'graph', f'{lap.normalized.shape[0]} nodes for {ds.m} rows')
    return lap


def train(ds: MaskedDataset, graph: Union[PopulationGraph, LaplacianSet],
          cfg: Optional[TrainConfig] = None) -> Tuple[ModelParams, TrainTrace]:
    """
    Full-batch Adam on the training objective.

    Test-row labels must already be excluded from ds.omega_b; all rows take part
    through their features and the graph.

    Returns:
        Fitted parameters and the per-epoch loss trace

    Raises:
        TrainingDiverged: If the loss becomes non-finite; carries the trace so far
    """
    cfg = cfg or TrainConfig()
    lap = _check_graph(ds, graph)
    if cfg.weights.gamma_e > 0 and ds.omega_b.sum() == 0:
        raise ParameterError('srgcnn', 'omega_b', 'no training labels; set gamma_e = 0 for pure imputation')

    params = init_params(ds.z, cfg)
    optimizer = Adam(params.arrays, cfg.learning_rate)
    trace = TrainTrace()
    logger.info(f'Training on {ds.m}×{ds.n + ds.c}: rank {cfg.rank}, order {cfg.cheb_order}, '
                f'{cfg.diffusion_steps} steps, {params.parameter_count} parameters')

    best, since_best = np.inf, 0
    arrays = params.arrays
    for epoch in range(cfg.epochs):
        tape = Tape()
        try:
            nodes = ModelParams(arrays, cfg).on_tape(tape)
            w_t = diffuse(nodes, lap, cfg.diffusion_steps)
            terms = loss_terms(w_t, nodes['h'], ds, lap, cfg.weights)
            total = add_all(list(terms.values()))
            grads = tape.backward(total)
        except NumericalError as e:
            logger.error(f'Training diverged at epoch {epoch}: {e}')
            raise TrainingDiverged('srgcnn', 'loss', f'non-finite at epoch {epoch}: {e.detail}', trace=trace)

        row = {'epoch': epoch, **{name: node.item() for name, node in terms.items()}, 'total': total.item()}
        trace.rows.append(row)
        if epoch % cfg.log_every == 0:
            logger.info(f'Epoch {epoch}: loss {row["total"]:.6g} (reconstruction {row["reconstruction"]:.4g}, '
                        f'classification {row["classification"]:.4g})')

        improved = not np.isfinite(best) or row['total'] < best - cfg.min_delta * max(abs(best), 1.0)
        if improved:
            best, since_best = row['total'], 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                trace.early_stopped = True
                logger.info(f'Early stop at epoch {epoch}: no improvement over {cfg.patience} epochs')
                break

        arrays = optimizer.step(arrays, grads)
        bad = sorted(name for name, value in arrays.items() if not np.all(np.isfinite(value)))
        if bad:
            logger.error(f'Training diverged after epoch {epoch}: non-finite parameters {bad}')
            raise TrainingDiverged('srgcnn', 'params', f'non-finite {bad} after the epoch {epoch} update',
                                   trace=trace)

    logger.info(f'Training finished after {trace.epochs_run} epochs, final loss {trace.totals[-1]:.6g}')
    return ModelParams(arrays=arrays, config=cfg), trace


def predict(params: ModelParams, ds: MaskedDataset,
            graph: Union[PopulationGraph, LaplacianSet]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns:
        Imputed features (normalized units, observed entries passed through) and
        label probabilities (vector for a single label column)
    """
    lap = _check_graph(ds, graph)
    tape = Tape()
    nodes = {name: tape.constant(value, name) for name, value in params.arrays.items()}
    w_t = diffuse(nodes, lap, params.config.diffusion_steps)
    x = w_t.value @ params.arrays['h'].T

    imputed = np.where(ds.omega_a > 0, ds.features, x[:, :ds.n])
    probs = expit(x[:, ds.n:])
    return imputed, probs[:, 0] if probs.shape[1] == 1 else probs

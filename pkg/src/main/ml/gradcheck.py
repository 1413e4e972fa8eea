"""
Finite-difference verification of every differentiable op and of the full
training objective through the diffusion.
"""

from typing import Callable, Dict, List, Optional

import numpy as np
import pandas as pd

from src.main.extract.synth_data import synth_instance
from src.main.ml import autodiff as ad
from src.main.ml.autodiff import Node, Tape
from src.main.ml.completion import PenaltyWeights
from src.main.ml.graph import PopulationGraph, laplacians
from src.main.ml.srgcnn import TrainConfig, diffuse, gcn_features, init_params, lstm_cell, training_loss
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

FD_STEP = 1e-5
PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

Builder = Callable[[Tape, Dict[str, Node]], Node]


def _evaluate(build: Builder, params: Dict[str, np.ndarray]):
    tape = Tape()
    nodes = {name: tape.variable(value, name) for name, value in params.items()}
    return tape, build(tape, nodes)


def numerical_gradient(build: Builder, params: Dict[str, np.ndarray], name: str,
                       step: float = FD_STEP) -> np.ndarray:
    """Central differences of the scalar built by build with respect to params[name]."""
    base = params[name]
    grad = np.zeros_like(base)
    for idx in np.ndindex(base.shape):
        shifted = dict(params)
        plus, minus = base.copy(), base.copy()
        plus[idx] += step
        minus[idx] -= step
        shifted[name] = plus
        f_plus = _evaluate(build, shifted)[1].item()
        shifted[name] = minus
        f_minus = _evaluate(build, shifted)[1].item()
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max|a − n| / max(max|a|, max|n|, 1e-8) over a parameter block."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)), 1e-8)
    return float(np.max(np.abs(analytic - numeric), initial=0.0)) / scale


def check_gradients(build: Builder, params: Dict[str, np.ndarray], step: float = FD_STEP,
                    corrupt: Optional[str] = None) -> Dict[str, float]:
    """
    Max relative error per parameter block between backward() and central differences.
    corrupt names a block whose analytic gradient is deliberately perturbed.
    """
    tape, loss = _evaluate(build, params)
    grads = tape.backward(loss)
    errors = {}
    for name in params:
        analytic = grads[name]
        if name == corrupt:
            analytic = 1.5 * analytic + 1e-2
        errors[name] = relative_error(analytic, numerical_gradient(build, params, name, step))
    return errors


def _contract(tape: Tape, out: Node, weights: np.ndarray) -> Node:
    """Σ_ij weights_ij·out_ij built from matmuls only."""
    rows, cols = out.shape
    weighted = ad.hadamard(out, tape.constant(weights))
    return ad.matmul(ad.matmul(tape.constant(np.ones((1, rows))), weighted), tape.constant(np.ones((cols, 1))))


def random_graph(rng: np.random.Generator, m: int, density: float = 0.4) -> PopulationGraph:
    upper = np.triu((rng.random((m, m)) < density) * rng.uniform(0.5, 2.0, size=(m, m)), k=1)
    return PopulationGraph(upper + upper.T)


def _primitive_cases(rng: np.random.Generator) -> List[tuple]:
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)
    contraction = u(5, 5)
    lap = laplacians(random_graph(rng, 6)).laplacian
    targets = (rng.random((5, 3)) < 0.5).astype(float)
    mask = (rng.random((5, 3)) < 0.6).astype(float)
    mask[0, 0] = 1.0

    return [
        ('matmul', {'a': u(3, 4), 'b': u(4, 2)},
         lambda t, n, g=u(3, 2): _contract(t, ad.matmul(n['a'], n['b']), g)),
        ('add', {'a': u(5, 5), 'b': u(5, 5)}, lambda t, n: _contract(t, ad.add(n['a'], n['b']), contraction)),
        ('sub', {'a': u(5, 5), 'b': u(5, 5)}, lambda t, n: _contract(t, ad.sub(n['a'], n['b']), contraction)),
        ('hadamard', {'a': u(5, 5), 'b': u(5, 5)}, lambda t, n: _contract(t, ad.hadamard(n['a'], n['b']), contraction)),
        ('sigmoid', {'a': u(5, 5)}, lambda t, n: _contract(t, ad.sigmoid(n['a']), contraction)),
        ('tanh', {'a': u(5, 5)}, lambda t, n: _contract(t, ad.tanh(n['a']), contraction)),
        ('scale', {'a': u(5, 5)}, lambda t, n: _contract(t, ad.scale(n['a'], -1.7), contraction)),
        ('add_row', {'a': u(5, 5), 'bias': u(1, 5)}, lambda t, n: _contract(t, ad.add_row(n['a'], n['bias']), contraction)),
        ('transpose', {'a': u(5, 5)}, lambda t, n: _contract(t, ad.transpose(n['a']), contraction)),
        ('slice_cols', {'a': u(5, 5)}, lambda t, n, g=u(5, 2): _contract(t, ad.slice_cols(n['a'], 1, 3), g)),
        ('frobenius_sq', {'a': u(4, 3)}, lambda t, n: ad.frobenius_sq(n['a'])),
        ('dirichlet', {'x': u(6, 3)}, lambda t, n: ad.dirichlet(lap, n['x'])),
        ('masked_bce', {'logits': u(5, 3)}, lambda t, n: ad.masked_bce(n['logits'], targets, mask)),
    ]


def _composite_cases(rng: np.random.Generator, seed: int) -> List[tuple]:
    u = lambda *shape: rng.uniform(-1.0, 1.0, size=shape)
    lap8 = laplacians(random_graph(rng, 8))

    gcn_params = {'w': u(8, 3), 'cheb_0': u(3, 4), 'cheb_1': u(3, 4), 'cheb_2': u(3, 4)}

    def gcn(t, n, g=u(8, 4)):
        return _contract(t, gcn_features(n['w'], lap8, [n['cheb_0'], n['cheb_1'], n['cheb_2']]), g)

    lstm_params = {'x': u(6, 3), 'h': u(6, 4), 'c': u(6, 4)}
    for gate in ('input', 'forget', 'output', 'cell'):
        lstm_params.update({f'lstm_wx_{gate}': u(3, 4), f'lstm_wh_{gate}': u(4, 4), f'lstm_b_{gate}': u(1, 4)})

    def lstm(t, n, g=u(6, 4), k=u(6, 4)):
        h, c = lstm_cell(n['x'], n['h'], n['c'], n)
        return ad.add(_contract(t, h, g), _contract(t, c, k))

    ds, _ = synth_instance(m=12, n=6, rank=2, observed_frac=0.7, seed=seed)
    cfg = TrainConfig(rank=3, cheb_order=2, hidden_units=4, features=4, diffusion_steps=2, seed=seed,
                      weights=PenaltyWeights())
    lap12 = laplacians(random_graph(rng, 12))
    model = init_params(ds.z, cfg)

    def end_to_end(t, n):
        return training_loss(diffuse(n, lap12, cfg.diffusion_steps), n['h'], ds, lap12, cfg.weights)

    return [('gcn_features', gcn_params, gcn), ('lstm_cell', lstm_params, lstm),
            ('srgcnn', dict(model.arrays), end_to_end)]


def run_suite(seed: int = 0, corrupt: Optional[str] = None) -> pd.DataFrame:
    """
    Check every op and the end-to-end objective.

    Args:
        seed: Seed for the random inputs
        corrupt: 'case:block' whose analytic gradient is perturbed, to prove failures are caught

    Returns:
        DataFrame with one row per parameter block: block, max_rel_error, tolerance, passed
    """
    rng = np.random.default_rng(seed)
    rows = []
    cases = [(PRIMITIVE_TOL, case) for case in _primitive_cases(rng)]
    cases += [(COMPOSITE_TOL, case) for case in _composite_cases(rng, seed)]
    for tol, (case, params, build) in cases:
        target = corrupt.split(':', 1)[1] if corrupt and corrupt.startswith(f'{case}:') else None
        for block, err in check_gradients(build, params, corrupt=target).items():
            rows.append({'block': f'{case}:{block}', 'max_rel_error': err, 'tolerance': tol, 'passed': err < tol})

    report = pd.DataFrame(rows, columns=['block', 'max_rel_error', 'tolerance', 'passed'])
    failed = int((~report['passed']).sum())
    logger.info(f'Gradient check: {len(report)} blocks, {failed} failed, '
                f'worst relative error {report["max_rel_error"].max():.3e}')
    return report

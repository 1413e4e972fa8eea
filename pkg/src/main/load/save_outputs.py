"""
Output writers for every pipeline stage.
Files are written to a .tmp sibling and renamed into place, so a crashed run
never leaves a half-written output behind.
"""

import json
from pathlib import Path
from typing import Callable, Dict, Tuple

import numpy as np
import pandas as pd

from src.main.extract.load_csv import LABEL_NAMES, RawTable
from src.main.ml.graph import PopulationGraph
from src.main.transform.assemble import MaskedDataset
from src.utils.errors import SchemaError
from src.utils.logger import setup_logger

logger = setup_logger(__name__)

CHECKPOINT_FORMAT = 'gmc-checkpoint/1'


def _atomic_write(path: Path, write: Callable[[Path], None]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_name(path.name + '.tmp')
    write(temp_path)
    temp_path.replace(path)
    return path


def write_csv(df: pd.DataFrame, path: Path, header: bool = True) -> Path:
    return _atomic_write(path, lambda p: df.to_csv(p, index=False, header=header, lineterminator='\n'))


def write_json(obj: Dict, path: Path) -> Path:
    text = json.dumps(obj, indent=2, sort_keys=True) + '\n'
    return _atomic_write(path, lambda p: p.write_text(text))


def save_dataset(ds: MaskedDataset, out_dir: Path) -> Dict[str, Path]:
    """
    Snapshot of an assembled dataset: values.csv (Z), mask.csv (Ω_a | Ω_b)
    and metadata.json (columns, normalization statistics, split, seed).
    """
    out_dir = Path(out_dir)
    columns = ds.feature_names + ds.label_names
    mask = np.hstack([ds.omega_a, ds.omega_b]).astype(int)
    paths = {
        'values': write_csv(pd.DataFrame(ds.z, columns=columns), out_dir / 'values.csv'),
        'mask': write_csv(pd.DataFrame(mask, columns=columns), out_dir / 'mask.csv'),
        'metadata': write_json(ds.metadata(), out_dir / 'metadata.json'),
    }
    logger.info(f'Saved dataset snapshot ({ds.m}×{ds.n + ds.c}) to {out_dir}')
    return paths


def write_raw_csv(raw: RawTable, path: Path) -> Path:
    """Cohort table in the format load_csv reads: empty cells for missing values."""
    df = raw.features.copy()
    df[raw.label_name] = raw.labels.map(LABEL_NAMES).fillna('')
    df['age'] = raw.meta['age'].to_numpy()
    df['gender'] = raw.meta['gender'].to_numpy()
    return write_csv(df, path)


def write_ground_truth(features: np.ndarray, labels: np.ndarray, probs: np.ndarray,
                       feature_names, path: Path) -> Path:
    df = pd.DataFrame(features, columns=list(feature_names))
    df['label'] = labels.astype(int)
    df['label_prob'] = probs
    return write_csv(df, path)


def write_edge_list(graph: PopulationGraph, path: Path) -> Path:
    """`u,v,weight` per line, 0-based, u < v, no header."""
    edges = pd.DataFrame(graph.edges, columns=['u', 'v', 'weight'])
    logger.info(f'Writing {len(edges)} edges to {Path(path).name}')
    return write_csv(edges, path, header=False)


def save_checkpoint(arrays: Dict[str, np.ndarray], config: Dict, path: Path) -> Path:
    """
    JSON checkpoint of named float64 arrays plus the config that produced them.
    Floats are written with repr precision, so loading reproduces every bit.
    """
    doc = {
        'format': CHECKPOINT_FORMAT,
        'config': config,
        'params': {name: {'shape': list(value.shape), 'values': [float(x) for x in value.ravel()]}
                   for name, value in arrays.items()},
    }
    logger.info(f'Saving checkpoint with {sum(a.size for a in arrays.values())} parameters to {path}')
    return write_json(doc, path)


def load_checkpoint(path: Path) -> Tuple[Dict[str, np.ndarray], Dict]:
    """
    Raises:
        FileNotFoundError: If the checkpoint doesn't exist
        SchemaError: If the file is not a checkpoint written by save_checkpoint
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'Checkpoint not found: {path}')
    doc = json.loads(path.read_text())
    if doc.get('format') != CHECKPOINT_FORMAT:
        raise SchemaError('load', 'checkpoint', f'{path.name} is not a {CHECKPOINT_FORMAT} file')
    arrays = {name: np.array(entry['values'], dtype=np.float64).reshape(entry['shape'])
              for name, entry in doc['params'].items()}
    return arrays, doc['config']

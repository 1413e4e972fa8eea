"""
Experiment configuration: typed sections loaded from JSON, with dotted
command-line overrides on top. Every run echoes the resolved config.
"""

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from src.main.evaluate.ablation import ABLATION_METHODS, DEFAULT_FRACTIONS
from src.main.evaluate.baseline import BaselineConfig
from src.main.evaluate.cross_validation import METHODS
from src.main.load.save_outputs import write_json
from src.main.ml.graph import GraphConfig
from src.main.ml.srgcnn import TrainConfig
from src.utils.config import load_config
from src.utils.errors import ConfigError


@dataclass
class DataConfig:
    path: Optional[str] = None
    label_column: str = 'label'
    age_column: str = 'age'
    gender_column: str = 'gender'
    id_column: Optional[str] = None
    missing_sentinel: Optional[str] = None
    reference: Optional[str] = None


@dataclass
class SynthConfig:
    m: int = 120
    n: int = 20
    rank: int = 2
    noise: float = 0.1
    observed_frac: float = 0.5
    label_signal: float = 5.0
    base_age: float = 72.0
    age_effect: float = 6.0
    age_noise: float = 2.0


@dataclass
class EvaluateConfig:
    k: int = 10
    methods: List[str] = field(default_factory=lambda: list(METHODS))
    baseline: BaselineConfig = field(default_factory=BaselineConfig)

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise ConfigError('cli', 'evaluate.methods', f'unknown methods {unknown}')


@dataclass
class AblateConfig:
    fractions: List[float] = field(default_factory=lambda: list(DEFAULT_FRACTIONS))
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    methods: List[str] = field(default_factory=lambda: list(ABLATION_METHODS))
    cache: bool = True


@dataclass
class ImputeConfig:
    checkpoint: Optional[str] = None


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    graph: GraphConfig = field(default_factory=GraphConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    impute: ImputeConfig = field(default_factory=ImputeConfig)
    seed: int = 0
    out: str = field(default_factory=lambda: load_config()['paths']['output'])

    def to_dict(self) -> Dict:
        return asdict(self)


def _build(cls, values: Dict[str, Any], prefix: str):
    if not isinstance(values, dict):
        raise ConfigError('cli', prefix or 'config', f'expected an object, got {type(values).__name__}')
    known = {f.name: f for f in fields(cls)}
    unknown = [k for k in values if k not in known]
    if unknown:
        raise ConfigError('cli', f'{prefix}{unknown[0]}', 'unknown key')
    kwargs = {}
    for name, value in values.items():
        ftype = known[name].type
        kwargs[name] = _build(ftype, value, f'{prefix}{name}.') if is_dataclass(ftype) else value
    return cls(**kwargs)


def _merge(base: Dict, update: Dict, prefix: str = '') -> Dict:
    merged = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError('cli', f'{prefix}{key}', 'unknown key')
        if isinstance(base[key], dict) and isinstance(value, dict):
            merged[key] = _merge(base[key], value, f'{prefix}{key}.')
        else:
            merged[key] = value
    return merged


def parse_override(text: str) -> Dict:
    """'train.epochs=50' → {'train': {'epochs': 50}}; values parse as JSON, else stay strings."""
    if '=' not in text:
        raise ConfigError('cli', text, "override must look like section.key=value")
    path, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    nested: Dict = value
    for key in reversed(path.strip().split('.')):
        nested = {key: nested}
    return nested


def load_run_config(path: Optional[Path] = None, overrides: Sequence[str] = (),
                    seed: Optional[int] = None, out: Optional[str] = None) -> RunConfig:
    """
    Defaults, then the JSON file, then overrides, then --seed/--out.
    The top-level seed is copied into the model and baseline seeds.

    Raises:
        FileNotFoundError: If the config file doesn't exist
        ConfigError: On unknown keys or malformed JSON
    """
    values = RunConfig().to_dict()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f'Config file not found: {path}')
        try:
            values = _merge(values, json.loads(path.read_text()))
        except json.JSONDecodeError as e:
            raise ConfigError('cli', str(path), f'invalid JSON: {e}')
    for text in overrides:
        values = _merge(values, parse_override(text))
    if seed is not None:
        values['seed'] = seed
    if out is not None:
        values['out'] = out

    values['train']['seed'] = values['seed']
    values['evaluate']['baseline']['seed'] = values['seed']
    return _build(RunConfig, values, '')


def save_run_config(cfg: RunConfig, path: Path) -> Path:
    return write_json(cfg.to_dict(), path)

import configparser
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dotenv import load_dotenv

from architectures import ARCHITECTURES
from datasets import DataConfig, Sim2DSpec
from dtlc import LeafKind, TreeSpec
from metrics import SsimParams
from schedule import CurriculumMode, ScheduleSpec, Variant, ablate
from standardization_utils import ConfigValidator, ValidationError
from trainer import DTYPES, TrainConfig

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

ROOT = Path(__file__).resolve().parent


class Config:
    """Environment-backed defaults"""

    LOG_LEVEL = os.environ.get('DTLC_LOG_LEVEL', 'INFO')
    DTYPE = os.environ.get('DTLC_DTYPE', 'float32')

    @staticmethod
    def seed_override() -> Optional[int]:
        """DTLC_SEED replaces every config seed when set"""
        value = os.environ.get('DTLC_SEED')
        if value in (None, ''):
            return None
        try:
            return int(value)
        except ValueError:
            raise ValidationError('DTLC_SEED must be an integer', field_errors={'DTLC_SEED': value})


REQUIRED = object()

# section -> key -> (kind, default)
SCHEMA: Dict[str, Dict[str, tuple]] = {
    'tree': {
        'depth': ('int', None),
        'k': ('int_list', REQUIRED),
        'leaf_kind': ('str', 'discrete'),
        'supervised_root': ('bool', False),
        'root_codes': ('int', 1),
    },
    'net': {
        'arch': ('str', 'sim_mlp'),
        'dim_z': ('int', 64),
        'noise_prior': ('str', 'uniform'),
        'non_saturating': ('bool', True),
        'dtype': ('str', None),
    },
    'train': {
        'iterations': ('int', REQUIRED),
        'batch_size': ('int', 64),
        'lr_d': ('float', 0.0002),
        'lr_g': ('float', 0.001),
        'beta1': ('float', 0.5),
        'lambda': ('float_list', None),
        'seed': ('int', 0),
        'checkpoint_every': ('int', 0),
        'log_every': ('int', 100),
        'diversity_every': ('int', 0),
        'diversity_pairs': ('int', 200),
    },
    'curriculum': {
        'mode': ('str', 'unsupervised'),
        'base': ('int', 1000),
        'variant': ('str', 'full'),
        'activation': ('int_list', None),
    },
    'data': {
        'dataset': ('str', 'sim2d'),
        'n_global': ('int', 10),
        'radius': ('float', 2.0),
        'local_offset': ('float', 0.05),
        'noise_std': ('float', 0.1),
        'input_scale': ('float', 0.25),
        'points_csv': ('str', ''),
        'images': ('str', ''),
        'labels': ('str', ''),
        'keep_digits': ('int_list', None),
    },
    'metrics': {
        'ssim_window': ('int', 8),
        'ssim_weighting': ('str', 'uniform'),
        'dynamic_range': ('float', 1.0),
        'diversity_pairs': ('int', 2000),
        'coverage_samples': ('int', 10000),
        'coverage_threshold': ('float', 0.3),
        'top_n': ('int', 5),
        'threads': ('int', 1),
    },
}


def _coerce(kind: str, value: Any):
    """Checked conversion; returns (value, error message or None)"""
    def is_int(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def is_number(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    if kind == 'int':
        return value, None if is_int(value) else 'must be an integer'
    if kind == 'float':
        return (float(value), None) if is_number(value) else (value, 'must be a number')
    if kind == 'bool':
        return value, None if isinstance(value, bool) else 'must be true or false'
    if kind == 'str':
        if isinstance(value, (list, dict)):
            return value, 'must be a string'
        return str(value), None
    if kind in ('int_list', 'float_list') and isinstance(value, str) and ',' in value:
        value = [parse_value(part) for part in value.split(',')]
    if kind == 'int_list':
        ok = isinstance(value, list) and all(is_int(v) for v in value)
        return value, None if ok else 'must be a list of integers'
    if kind == 'float_list':
        if isinstance(value, list) and all(is_number(v) for v in value):
            return [float(v) for v in value], None
        return value, 'must be a list of numbers'
    raise ValueError(f'unknown schema kind {kind}')


def parse_value(raw: str) -> Any:
    """JSON literal when it parses, bare string otherwise"""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


@dataclass
class ConfigFile:
    sections: Dict[str, Dict[str, Any]]
    source: str = '<text>'

    @classmethod
    def parse(cls, source: Union[str, Path]) -> 'ConfigFile':
        """Read `[section]` headers, `key = value` lines and `#` comments from a path or text"""
        parser = configparser.ConfigParser(interpolation=None, comment_prefixes=('#',),
                                           inline_comment_prefixes=('#',), empty_lines_in_values=False)
        parser.optionxform = str
        is_path = isinstance(source, Path) or ("\n" not in source and Path(source).is_file())
        label = str(source) if is_path else "<text>"
        try:
            text = Path(source).read_text() if is_path else source
            parser.read_string(text, source=label)
        except configparser.Error as e:
            raise ValidationError(f'Cannot parse config {label}', details={'reason': str(e).splitlines()[0]})
        sections = {name: {key: parse_value(raw) for key, raw in parser.items(name)} for name in parser.sections()}
        return cls(sections, label)

    def resolve(self) -> Dict[str, Dict[str, Any]]:
        """Schema-checked values with defaults filled in; every problem reported at once"""
        validator = ConfigValidator()
        for section in self.sections:
            if section not in SCHEMA:
                validator.add(section, 'unknown section')
        resolved: Dict[str, Dict[str, Any]] = {}
        for section, keys in SCHEMA.items():
            given = self.sections.get(section, {})
            for key in given:
                if key not in keys:
                    validator.add(f'{section}.{key}', 'unknown key')
            values = {}
            for key, (kind, default) in keys.items():
                if key in given:
                    value, error = _coerce(kind, given[key])
                    if error:
                        validator.add(f'{section}.{key}', error)
                    values[key] = value
                elif default is REQUIRED:
                    validator.add(f'{section}.{key}', 'required')
                else:
                    if default is not None:
                        logger.info(f"{self.source}: {section}.{key} not set, using default {default!r}")
                    values[key] = default
            resolved[section] = values
        validator.raise_if_errors(f'Invalid config {self.source}')
        return resolved


@dataclass
class MetricsConfig:
    ssim: SsimParams
    diversity_pairs: int = 2000
    coverage_samples: int = 10000
    coverage_threshold: float = 0.3
    top_n: int = 5
    threads: int = 1


@dataclass
class RunConfig:
    train: TrainConfig
    metrics: MetricsConfig
    source: str = '<text>'


def _collect(validator: ConfigValidator, build):
    """Run a constructor, folding its ValidationError into validator"""
    try:
        return build()
    except ValidationError as e:
        validator.merge(e.field_errors or {'config': e.message})
        return None


def build_run_config(config_file: ConfigFile) -> RunConfig:
    values = config_file.resolve()
    tree_v, net, train_v, cur, data_v, met = (values[s] for s in ('tree', 'net', 'train', 'curriculum', 'data', 'metrics'))
    validator = ConfigValidator()
    if tree_v['depth'] is not None and tree_v['depth'] != len(tree_v['k']):
        validator.add('tree.depth', f"must equal the length of tree.k ({len(tree_v['k'])})")
    validator.require_choice('tree.leaf_kind', tree_v['leaf_kind'], [kind.value for kind in LeafKind])
    validator.require_choice('curriculum.mode', cur['mode'], [mode.value for mode in CurriculumMode])
    validator.require_choice('curriculum.variant', cur['variant'], [variant.value for variant in Variant])
    validator.require_choice('net.arch', net['arch'], sorted(ARCHITECTURES))
    validator.require_choice('data.dataset', data_v['dataset'], ['sim2d', 'mnist'])
    validator.require_choice('net.dtype', net['dtype'] or Config.DTYPE, list(DTYPES))
    weak = cur['mode'] == CurriculumMode.WEAKLY_SUPERVISED.value
    if weak != tree_v['supervised_root']:
        validator.add('tree.supervised_root', 'must be true exactly when curriculum.mode is weakly_supervised')
    validator.require_int('curriculum.base', cur['base'], minimum=0)
    validator.require_int('metrics.threads', met['threads'], minimum=1)
    validator.require_int('metrics.top_n', met['top_n'], minimum=1)
    validator.require_int('metrics.coverage_samples', met['coverage_samples'], minimum=1)
    validator.require_int('metrics.diversity_pairs', met['diversity_pairs'], minimum=1)
    validator.raise_if_errors(f'Invalid config {config_file.source}')

    depth = len(tree_v['k'])
    tree = _collect(validator, lambda: TreeSpec(depth, tuple(tree_v['k']), LeafKind(tree_v['leaf_kind']),
                                                tree_v['supervised_root'], tree_v['root_codes']))
    if cur['activation'] is not None:
        schedule = _collect(validator, lambda: ScheduleSpec(CurriculumMode(cur['mode']), tuple(cur['activation']),
                                                            train_v['iterations']))
    else:
        schedule = _collect(validator, lambda: ScheduleSpec.default(CurriculumMode(cur['mode']), depth, cur['base'],
                                                                    train_v['iterations']))
    sim = _collect(validator, lambda: Sim2DSpec(data_v['n_global'], data_v['radius'], data_v['local_offset'],
                                                data_v['noise_std'], data_v['input_scale']))
    ssim_params = _collect(validator, lambda: SsimParams(met['ssim_window'], met['ssim_weighting'],
                                                         met['dynamic_range']))
    validator.raise_if_errors(f'Invalid config {config_file.source}')

    data = DataConfig(
        dataset=data_v['dataset'],
        sim=sim,
        points_csv=data_v['points_csv'] or None,
        images=data_v['images'] or None,
        labels=data_v['labels'] or None,
        keep_digits=tuple(data_v['keep_digits']) if data_v['keep_digits'] else None,
    )
    seed = Config.seed_override()
    if seed is not None:
        logger.info(f"DTLC_SEED overrides train.seed ({train_v['seed']} -> {seed})")
    trade_offs = train_v['lambda'] if train_v['lambda'] is not None else [1.0] * depth
    train = _collect(validator, lambda: TrainConfig(
        tree=tree,
        schedule=ablate(schedule, cur['variant']),
        dim_z=net['dim_z'],
        batch_size=train_v['batch_size'],
        iterations=train_v['iterations'],
        lr_d=train_v['lr_d'],
        lr_g=train_v['lr_g'],
        beta1=train_v['beta1'],
        trade_offs=tuple(trade_offs),
        seed=seed if seed is not None else train_v['seed'],
        data=data,
        arch=net['arch'],
        noise_prior=net['noise_prior'],
        non_saturating=net['non_saturating'],
        checkpoint_every=train_v['checkpoint_every'] or None,
        log_every=train_v['log_every'],
        diversity_every=train_v['diversity_every'],
        diversity_pairs=train_v['diversity_pairs'],
        dtype=net['dtype'] or Config.DTYPE,
    ))
    validator.raise_if_errors(f'Invalid config {config_file.source}')
    metrics = MetricsConfig(ssim_params, met['diversity_pairs'], met['coverage_samples'], met['coverage_threshold'],
                            met['top_n'], met['threads'])
    return RunConfig(train, metrics, config_file.source)


# Shipped run configurations
presets = {
    'sim2d': ROOT / 'sim2d.cfg',
    'mnist45': ROOT / 'mnist45.cfg',
    'sim2d_infogan': ROOT / 'sim2d_infogan.cfg',
    'sim2d_infogan2x10': ROOT / 'sim2d_infogan2x10.cfg',
}


def resolve_config_path(name_or_path: Union[str, Path]) -> Path:
    if str(name_or_path) in presets:
        return presets[str(name_or_path)]
    return Path(name_or_path)


def _read_config_file(path: Union[str, Path]) -> ConfigFile:
    path = resolve_config_path(path)
    if not path.is_file():
        raise ValidationError(f'Config file not found: {path}', field_errors={'--config': str(path)})
    return ConfigFile.parse(path)


def load_run_config(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Parse, validate and assemble a run config from a file path or preset name.
    overrides maps 'section.key' to a value and wins over the file.
    """
    config_file = _read_config_file(path)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        section, key = dotted.split('.', 1)
        config_file.sections.setdefault(section, {})[key] = value
    return build_run_config(config_file)


def load_sim2d_spec(path: Union[str, Path, None] = None) -> Sim2DSpec:
    """Simulated-data geometry from the [data] section of a config, defaults without one"""
    if path is None:
        return Sim2DSpec()
    given = _read_config_file(path).sections.get('data', {})
    validator = ConfigValidator()
    values = {}
    for key in ('n_global', 'radius', 'local_offset', 'noise_std', 'input_scale'):
        kind, default = SCHEMA['data'][key]
        value, error = _coerce(kind, given.get(key, default))
        if error:
            validator.add(f'data.{key}', error)
        values[key] = value
    validator.raise_if_errors('Invalid simulated-data specification')
    return Sim2DSpec(**values)

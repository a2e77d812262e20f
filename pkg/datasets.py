"""
Datasets
Simulated hierarchical 2D data (ten global positions on a ring, each split into two
local cells), MNIST IDX ingestion, and the shuffled batch streams used in training
"""

import gzip
import logging
import struct
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from dtlc import RandomSource, as_generator
from export_utils import read_csv, write_csv
from standardization_utils import ConfigurationError, IdxParseError, ValidationError

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
SIM2D_COLUMNS = ['x', 'y', 'global_id', 'local_id']


class LocalDirection(IntEnum):
    """Local cell of a global position; anticlockwise adds +local_offset to the angle"""
    CLOCKWISE = 0
    ANTICLOCKWISE = 1


@dataclass(frozen=True)
class Sim2DSpec:
    n_global: int = 10
    radius: float = 2.0
    local_offset: float = 0.05
    noise_std: float = 0.1
    input_scale: float = 0.25

    def __post_init__(self):
        errors = {}
        if not isinstance(self.n_global, (int, np.integer)) or self.n_global < 1:
            errors['data.n_global'] = 'must be an integer >= 1'
        for name in ('radius', 'noise_std', 'input_scale'):
            if getattr(self, name) <= 0:
                errors[f'data.{name}'] = 'must be > 0'
        if self.local_offset < 0:
            errors['data.local_offset'] = 'must be >= 0'
        if errors:
            raise ValidationError('Invalid simulated-data specification', field_errors=errors)

    def global_angles(self) -> np.ndarray:
        """Counter-clockwise from +x"""
        return 2.0 * np.pi * np.arange(self.n_global) / self.n_global

    def global_means(self) -> np.ndarray:
        angles = self.global_angles()
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)

    def cell_means(self) -> np.ndarray:
        """(n_global, 2, 2): [global_id, local_id] -> mean (x, y)"""
        angles = self.global_angles()[:, None] + np.array([-self.local_offset, self.local_offset])[None, :]
        return self.radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)


@dataclass
class LabeledPoint:
    x: float
    y: float
    global_id: int
    local_id: LocalDirection


def sample_sim2d(spec: Sim2DSpec, n: int, rng: RandomSource = None) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized draw: points (n, 2) in unscaled units, global ids, local ids"""
    if n < 0:
        raise ValidationError('n must be >= 0', details={'n': n})
    rng = as_generator(rng)
    global_ids = rng.integers(0, spec.n_global, size=n)
    local_ids = rng.integers(0, 2, size=n)
    means = spec.cell_means()[global_ids, local_ids]
    points = means + rng.normal(0.0, spec.noise_std, size=(n, 2))
    return points, global_ids, local_ids


def gen_sim2d(spec: Sim2DSpec, n: int, rng: RandomSource = None) -> List[LabeledPoint]:
    points, global_ids, local_ids = sample_sim2d(spec, n, rng)
    return [LabeledPoint(float(x), float(y), int(g), LocalDirection(int(l)))
            for (x, y), g, l in zip(points, global_ids, local_ids)]


def save_sim2d_csv(path, points: np.ndarray, global_ids: np.ndarray, local_ids: np.ndarray) -> Path:
    rows = ((repr(float(x)), repr(float(y)), int(g), int(l)) for (x, y), g, l in zip(points, global_ids, local_ids))
    return write_csv(path, SIM2D_COLUMNS, rows)


def load_sim2d_csv(path) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    rows = read_csv(path)
    if rows and set(SIM2D_COLUMNS) - set(rows[0]):
        raise ValidationError('Simulated-data CSV is missing columns', details={'path': str(path)})
    points = np.array([[float(r['x']), float(r['y'])] for r in rows]).reshape(-1, 2)
    global_ids = np.array([int(r['global_id']) for r in rows], dtype=np.int64)
    local_ids = np.array([int(r['local_id']) for r in rows], dtype=np.int64)
    return points, global_ids, local_ids


def cell_counts(spec: Sim2DSpec, global_ids: np.ndarray, local_ids: np.ndarray) -> np.ndarray:
    """(n_global, 2) histogram of (global, local) cells"""
    counts = np.zeros((spec.n_global, 2), dtype=np.int64)
    np.add.at(counts, (global_ids, local_ids), 1)
    return counts


def _open(path: Path):
    return gzip.open(path, 'rb') if path.suffix == '.gz' else path.open('rb')


def read_idx(path: Union[str, Path], expected_magic: int) -> np.ndarray:
    """
    Parse an IDX file of unsigned bytes. Header: u32 magic, one big-endian u32 per
    dimension (magic & 0xff dimensions), then the payload.
    """
    path = Path(path)
    with _open(path) as source:
        payload = source.read()
    if len(payload) < 4:
        raise IdxParseError(path, len(payload), 'File too short for the magic number')
    magic = struct.unpack('>I', payload[:4])[0]
    if magic != expected_magic:
        raise IdxParseError(path, 0, f'Bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}')
    ndim = magic & 0xFF
    header_end = 4 + 4 * ndim
    if len(payload) < header_end:
        raise IdxParseError(path, len(payload), 'Truncated dimension header')
    dims = struct.unpack(f'>{ndim}I', payload[4:header_end])
    count = int(np.prod(dims))
    if len(payload) < header_end + count:
        raise IdxParseError(path, len(payload), f'Truncated payload: expected {count} bytes after offset {header_end}')
    if len(payload) > header_end + count:
        raise IdxParseError(path, header_end + count, 'Trailing bytes after payload')
    return np.frombuffer(payload, dtype=np.uint8, count=count, offset=header_end).reshape(dims)


def write_idx(path: Union[str, Path], array: np.ndarray) -> Path:
    """Unsigned-byte IDX writer: magic 0x0801 for 1-D labels, 0x0803 for 3-D images"""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = struct.pack('>I', 0x0800 | array.ndim) + struct.pack(f'>{array.ndim}I', *array.shape)
    payload = header + array.tobytes()
    if path.suffix == '.gz':
        with gzip.open(path, 'wb') as sink:
            sink.write(payload)
    else:
        path.write_bytes(payload)
    return path


@dataclass
class MnistSet:
    images: np.ndarray  # (N, 1, 28, 28) in [0, 1]
    labels: np.ndarray  # digit values

    def __len__(self):
        return len(self.labels)


def load_mnist(images_path, labels_path, keep_digits: Optional[Sequence[int]] = None) -> MnistSet:
    raw_images = read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
    if raw_images.shape[0] != labels.shape[0]:
        raise IdxParseError(labels_path, 4, f'Label count {labels.shape[0]} does not match image count {raw_images.shape[0]}')
    images = raw_images.astype(np.float32) / 255.0
    if keep_digits:
        keep = np.isin(labels, sorted(keep_digits))
        images, labels = images[keep], labels[keep]
    logger.info(f"loaded {len(labels)} MNIST images from {images_path}")
    return MnistSet(images[:, None, :, :], labels)


def save_mnist(images_path, labels_path, dataset: MnistSet):
    write_idx(images_path, np.round(dataset.images[:, 0] * 255.0))
    write_idx(labels_path, dataset.labels)


class SimStream:
    """Fresh simulated samples every batch, scaled into discriminator space"""

    def __init__(self, spec: Sim2DSpec, rng: RandomSource = None):
        self.spec = spec
        self.rng = as_generator(rng)

    def next_batch(self, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        points, global_ids, _ = sample_sim2d(self.spec, batch_size, self.rng)
        return points * self.spec.input_scale, global_ids


class ArrayStream:
    """Epoch-shuffled minibatches over a fixed array set"""

    def __init__(self, samples: np.ndarray, labels: np.ndarray, rng: RandomSource = None):
        if len(samples) == 0:
            raise ConfigurationError('Dataset is empty')
        self.samples, self.labels = samples, labels
        self.rng = as_generator(rng)
        self._order = self.rng.permutation(len(samples))
        self._cursor = 0

    def next_batch(self, batch_size: int) -> Tuple[np.ndarray, np.ndarray]:
        picks = []
        while len(picks) < batch_size:
            if self._cursor == len(self._order):
                self._order = self.rng.permutation(len(self.samples))
                self._cursor = 0
            take = min(batch_size - len(picks), len(self._order) - self._cursor)
            picks.extend(self._order[self._cursor:self._cursor + take])
            self._cursor += take
        picks = np.asarray(picks)
        return self.samples[picks], self.labels[picks]


@dataclass
class DataConfig:
    dataset: str = 'sim2d'
    sim: Sim2DSpec = field(default_factory=Sim2DSpec)
    points_csv: Optional[str] = None
    images: Optional[str] = None
    labels: Optional[str] = None
    keep_digits: Optional[Tuple[int, ...]] = None

    @property
    def input_scale(self) -> float:
        return self.sim.input_scale if self.dataset == 'sim2d' else 1.0


def class_index(labels: np.ndarray, keep_digits: Optional[Sequence[int]]) -> np.ndarray:
    """Digit labels to root categories 0..len(keep_digits)-1"""
    if not keep_digits:
        return labels
    return np.searchsorted(np.array(sorted(keep_digits)), labels)


def build_stream(config: DataConfig, rng: RandomSource = None):
    """Batch stream for training; labels are root categories"""
    if config.dataset == 'sim2d':
        if config.points_csv:
            points, global_ids, _ = load_sim2d_csv(config.points_csv)
            return ArrayStream(points * config.sim.input_scale, global_ids, rng)
        return SimStream(config.sim, rng)
    if config.dataset == 'mnist':
        if not config.images or not config.labels:
            raise ConfigurationError('MNIST runs need data.images and data.labels',
                                     {'field_errors': {'data.images': 'required', 'data.labels': 'required'}})
        mnist = load_mnist(config.images, config.labels, config.keep_digits)
        return ArrayStream(mnist.images, class_index(mnist.labels, config.keep_digits), rng)
    raise ConfigurationError(f"Unknown dataset '{config.dataset}'", {'data.dataset': config.dataset})

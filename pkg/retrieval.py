"""
Code Retrieval
Predicts hierarchical codes for images with the trained auxiliary heads and ranks a
database of items by L2 distance over the codes of layers 1..d
"""

import logging
import re
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from architectures import head_name
from checkpoint import Checkpoint
from dtlc import mask_layers
from export_utils import read_csv, write_csv
from standardization_utils import DimensionError, ValidationError
from tensornet import Mode

logger = logging.getLogger(__name__)

PREDICT_BATCH = 256
COLUMN = re.compile(r'^c(\d+)_(\d+)$')


@dataclass
class CodeIndex:
    """Flattened masked codes per layer, (items, N_l * k_l) each, plus item ids"""

    ids: np.ndarray
    codes: List[np.ndarray]

    def __len__(self):
        return len(self.ids)

    @property
    def depth(self) -> int:
        return len(self.codes)

    def vectors(self, depth: int) -> np.ndarray:
        return np.concatenate(self.codes[:depth], axis=1)

    def item(self, item_id) -> List[np.ndarray]:
        position = int(np.flatnonzero(self.ids == item_id)[0])
        return [layer[position] for layer in self.codes]


@dataclass
class RetrievalHit:
    rank: int
    item_id: int
    distance: float


def _hard(probabilities: np.ndarray) -> np.ndarray:
    return np.eye(probabilities.shape[-1])[probabilities.argmax(axis=-1)]


def predict_codes(checkpoint: Checkpoint, images: np.ndarray, hard: bool = False) -> List[np.ndarray]:
    """
    Per-layer masked code predictions (batch, N_l, k_l): layer 1 is the Q_1 softmax and
    deeper layers are gated by their predicted ancestors (soft masking). hard=True takes
    argmax one-hots per node before masking.
    """
    models = checkpoint.models
    tree = models.tree
    images = np.asarray(images)
    if images.shape == models.sample_shape:
        images = images[None]
    if images.shape[1:] != models.sample_shape:
        raise DimensionError('input', (None,) + models.sample_shape, images.shape)
    heads = [head_name(layer) for layer in range(1, tree.depth + 1)]

    per_layer: List[List[np.ndarray]] = [[] for _ in heads]
    for start in range(0, len(images), PREDICT_BATCH):
        outputs = models.discriminator.forward(images[start:start + PREDICT_BATCH], Mode.EVAL, heads=heads)
        for index, head in enumerate(heads):
            per_layer[index].append(outputs[head].data.astype(np.float64))
    layers = [np.concatenate(chunks, axis=0) for chunks in per_layer]
    if hard:
        layers = [_hard(codes) if tree.is_discrete(layer) else codes
                  for layer, codes in enumerate(layers, start=1)]
    return mask_layers(layers)


def build_index(checkpoint: Checkpoint, images: np.ndarray, ids: Optional[Sequence[int]] = None,
                hard: bool = False) -> CodeIndex:
    masked = predict_codes(checkpoint, images, hard)
    count = masked[0].shape[0]
    ids = np.arange(count) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != count:
        raise ValidationError('ids and images disagree in length', details={'ids': len(ids), 'images': count})
    logger.info(f"indexed {count} items over {len(masked)} layers")
    return CodeIndex(ids, [layer.reshape(count, -1) for layer in masked])


def retrieve(query_codes: Sequence[np.ndarray], index: CodeIndex, depth: int, top_n: int = 5) -> List[RetrievalHit]:
    """Ascending Euclidean distance over layers 1..depth; ties go to the smaller item id"""
    if len(index) == 0:
        raise ValidationError('Cannot retrieve from an empty index')
    if not 1 <= depth <= index.depth:
        raise ValidationError(f'depth must be within 1..{index.depth}', details={'depth': depth})
    query = np.concatenate([np.asarray(codes, dtype=np.float64).reshape(-1) for codes in query_codes[:depth]])
    distances = np.linalg.norm(index.vectors(depth) - query[None, :], axis=1)
    order = np.lexsort((index.ids, distances))[:top_n]
    return [RetrievalHit(rank, int(index.ids[i]), float(distances[i])) for rank, i in enumerate(order, start=1)]


def label_mismatch_rate(index: CodeIndex, labels: np.ndarray, query_ids: Sequence[int], depth: int,
                        top_n: int = 5) -> float:
    """Share of top-n neighbours (self excluded) whose label differs from the query's"""
    label_of = dict(zip(index.ids.tolist(), np.asarray(labels).tolist()))
    mismatches = []
    for query_id in query_ids:
        hits = [hit for hit in retrieve(index.item(query_id), index, depth, top_n + 1) if hit.item_id != query_id]
        mismatches.extend(label_of[hit.item_id] != label_of[query_id] for hit in hits[:top_n])
    return float(np.mean(mismatches)) if mismatches else 0.0


def save_index(path, index: CodeIndex):
    header = ['id'] + [f'c{layer}_{j}' for layer, codes in enumerate(index.codes, start=1)
                       for j in range(codes.shape[1])]
    rows = ([int(item_id)] + [repr(float(v)) for v in np.concatenate([codes[i] for codes in index.codes])]
            for i, item_id in enumerate(index.ids))
    return write_csv(path, header, rows)


def load_index(path) -> CodeIndex:
    rows = read_csv(path)
    if not rows:
        return CodeIndex(np.zeros(0, dtype=np.int64), [])
    columns = [name for name in rows[0] if name != 'id']
    layers: dict = {}
    for name in columns:
        match = COLUMN.match(name)
        if match is None:
            raise ValidationError(f"Unexpected index column '{name}'", details={'path': str(path)})
        layers.setdefault(int(match.group(1)), []).append(name)
    ids = np.array([int(row['id']) for row in rows], dtype=np.int64)
    codes = [np.array([[float(row[name]) for name in layers[layer]] for row in rows]) for layer in sorted(layers)]
    return CodeIndex(ids, codes)


def write_results(path, hits: Sequence[RetrievalHit]):
    return write_csv(path, ['rank', 'id', 'distance'], ([hit.rank, hit.item_id, repr(hit.distance)] for hit in hits))

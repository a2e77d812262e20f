"""
Checkpoint Persistence
Binary model snapshots: tree shape, iteration, run metadata, and every graph's layer
table and tensors (parameters then batch-norm running statistics)

Layout, all integers little-endian:
    b"DTLC" | u32 version | u32 depth | u32 k_1..k_L | u8 leaf_kind | u8 supervised_root
    | u64 iteration | str metadata_json | u32 graph_count
    | per graph: str name | u32 layer_count | str layer... | u32 tensor_count
    | per tensor: str name | u32 ndim | u32 dim... | f32 values...
Strings are a u32 byte length followed by UTF-8.
metadata_json carries root_codes when the controller has independent root codes.
"""

import io
import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, BinaryIO, Dict, Union

import numpy as np

from architectures import Models, build_models
from dtlc import LeafKind, TreeSpec
from standardization_utils import CheckpointError, DTLCError

logger = logging.getLogger(__name__)

MAGIC = b"DTLC"
FORMAT_VERSION = 1
LEAF_CODES = {LeafKind.DISCRETE: 0, LeafKind.CONTINUOUS: 1}


@dataclass
class Checkpoint:
    tree: TreeSpec
    iteration: int
    meta: Dict[str, Any]
    models: Models


def _write_str(out: BinaryIO, text: str):
    data = text.encode('utf-8')
    out.write(struct.pack('<I', len(data)))
    out.write(data)


class _Reader:
    """Bounds-checked reads that report the byte offset of a truncation"""

    def __init__(self, payload: bytes, path: str):
        self.payload = payload
        self.path = path
        self.offset = 0

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.payload):
            raise CheckpointError('Checkpoint is truncated', {'path': self.path, 'offset': self.offset})
        chunk = self.payload[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        values = struct.unpack(fmt, self.take(struct.calcsize(fmt)))
        return values[0] if len(values) == 1 else values

    def string(self) -> str:
        return self.take(self.unpack('<I')).decode('utf-8')


def encode_checkpoint(models: Models, iteration: int, meta: Dict[str, Any]) -> bytes:
    tree = models.tree
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack('<I', FORMAT_VERSION))
    out.write(struct.pack('<I', tree.depth))
    out.write(struct.pack(f'<{tree.depth}I', *tree.branching))
    out.write(struct.pack('<BB', LEAF_CODES[tree.leaf_kind], int(tree.supervised_root)))
    out.write(struct.pack('<Q', iteration))
    full_meta = dict(meta)
    full_meta.update({'arch': models.arch, 'dim_z': models.dim_z})
    if models.tree.root_codes > 1:
        full_meta['root_codes'] = models.tree.root_codes
    _write_str(out, json.dumps(full_meta, sort_keys=True))

    graphs = models.graphs()
    out.write(struct.pack('<I', len(graphs)))
    for graph in graphs:
        _write_str(out, graph.name)
        table = graph.layer_table()
        out.write(struct.pack('<I', len(table)))
        for entry in table:
            _write_str(out, entry)
        state = graph.state()
        out.write(struct.pack('<I', len(state)))
        for name, values in state.items():
            _write_str(out, name)
            out.write(struct.pack('<I', values.ndim))
            out.write(struct.pack(f'<{values.ndim}I', *values.shape))
            out.write(np.ascontiguousarray(values, dtype='<f4').tobytes())
    return out.getvalue()


def save_checkpoint(path: Union[str, Path], models: Models, iteration: int, meta: Dict[str, Any] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(models, iteration, meta or {}))
    logger.debug(f"checkpoint written: {path} (iteration {iteration})")
    return path


def decode_checkpoint(payload: bytes, dtype=np.float32, path: str = '<memory>') -> Checkpoint:
    reader = _Reader(payload, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError('Not a checkpoint file (bad magic)', {'path': path, 'offset': 0})
    version = reader.unpack('<I')
    if version != FORMAT_VERSION:
        raise CheckpointError(f'Unsupported checkpoint version {version}', {'path': path, 'offset': 4})

    depth = reader.unpack('<I')
    branching = reader.unpack(f'<{depth}I') if depth else ()
    branching = (branching,) if isinstance(branching, int) else branching
    leaf_code, supervised = reader.unpack('<BB')
    kinds = {code: kind for kind, code in LEAF_CODES.items()}
    if leaf_code not in kinds:
        raise CheckpointError('Unknown leaf kind', {'path': path, 'offset': reader.offset - 2})
    iteration = reader.unpack('<Q')
    try:
        meta = json.loads(reader.string())
        arch, dim_z = meta['arch'], meta['dim_z']
    except (ValueError, KeyError) as e:
        raise CheckpointError('Checkpoint metadata is unreadable', {'path': path, 'reason': str(e)})
    try:
        tree = TreeSpec(depth, tuple(branching), kinds[leaf_code], bool(supervised), meta.get('root_codes', 1))
    except DTLCError as e:
        raise CheckpointError('Checkpoint holds an invalid tree', {'path': path, 'reason': e.message})

    models = build_models(arch, tree, dim_z, dtype=dtype)
    graphs = {graph.name: graph for graph in models.graphs()}
    for _ in range(reader.unpack('<I')):
        name = reader.string()
        if name not in graphs:
            raise CheckpointError(f"Unexpected graph '{name}'", {'path': path, 'offset': reader.offset})
        graph = graphs[name]
        table = [reader.string() for _ in range(reader.unpack('<I'))]
        if table != graph.layer_table():
            raise CheckpointError(f"Layer table of '{name}' does not match architecture '{meta['arch']}'",
                                  {'path': path})
        values = {}
        for _ in range(reader.unpack('<I')):
            tensor_name = reader.string()
            ndim = reader.unpack('<I')
            shape = reader.unpack(f'<{ndim}I') if ndim else ()
            shape = (shape,) if isinstance(shape, int) else tuple(shape)
            count = int(np.prod(shape))
            values[tensor_name] = np.frombuffer(reader.take(4 * count), dtype='<f4').reshape(shape)
        missing = sorted(set(graph.state()) - set(values))
        if missing:
            raise CheckpointError(f"Graph '{name}' is missing tensors", {'path': path, 'missing': missing[:5]})
        graph.load_state(values)
    if reader.offset != len(payload):
        raise CheckpointError('Trailing bytes after checkpoint payload', {'path': path, 'offset': reader.offset})
    return Checkpoint(tree, iteration, meta, models)


def load_checkpoint(path: Union[str, Path], dtype=np.float32) -> Checkpoint:
    path = Path(path)
    checkpoint = decode_checkpoint(path.read_bytes(), dtype=dtype, path=str(path))
    logger.debug(f"checkpoint loaded: {path} ({checkpoint.models.arch}, iteration {checkpoint.iteration})")
    return checkpoint

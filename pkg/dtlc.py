"""
Decision Tree Latent Controller
Hierarchical latent-code sampling, parent-gated masking and curriculum average-fill

Layer l (1-based) holds N_l node codes of width k_l. Node j of layer l+1 is gated by
entry j of the flattened masked layer l, so the flattening order is node-major,
child-minor: child i (1-based) of parent node n sits at node k_l * (n - 1) + i.
All arrays carry a leading batch axis.
"""

import itertools
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from standardization_utils import ConfigurationError, ValidationError

logger = logging.getLogger(__name__)

RandomSource = Union[np.random.Generator, int, None]


class LeafKind(Enum):
    """Kind of the lowest-layer codes"""
    DISCRETE = "discrete"
    CONTINUOUS = "continuous"


def as_generator(rng: RandomSource) -> np.random.Generator:
    """Accept a Generator, a seed, or None"""
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class TreeSpec:
    """
    Shape of the controller: depth L, branching k_1..k_L, leaf kind, root supervision.
    root_codes > 1 gives a flat controller of that many independent categorical codes.
    """

    depth: int
    branching: Tuple[int, ...]
    leaf_kind: LeafKind = LeafKind.DISCRETE
    supervised_root: bool = False
    root_codes: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'branching', tuple(int(k) for k in self.branching))
        if isinstance(self.leaf_kind, str):
            object.__setattr__(self, 'leaf_kind', LeafKind(self.leaf_kind))
        errors = {}
        if not isinstance(self.depth, int) or self.depth < 1:
            errors['tree.depth'] = 'must be an integer >= 1'
        elif len(self.branching) != self.depth:
            errors['tree.k'] = f'expected {self.depth} branching factors, got {len(self.branching)}'
        if any(k < 1 for k in self.branching):
            errors['tree.k'] = 'every branching factor must be >= 1'
        if not isinstance(self.root_codes, int) or self.root_codes < 1:
            errors['tree.root_codes'] = 'must be an integer >= 1'
        elif self.root_codes > 1 and (self.depth != 1 or self.leaf_kind != LeafKind.DISCRETE or self.supervised_root):
            errors['tree.root_codes'] = 'independent root codes need a single discrete unsupervised layer'
        if errors:
            raise ValidationError('Invalid tree specification', field_errors=errors)

    @classmethod
    def from_branching(cls, branching: Sequence[int], leaf_kind: LeafKind = LeafKind.DISCRETE,
                       supervised_root: bool = False, root_codes: int = 1) -> 'TreeSpec':
        return cls(len(branching), tuple(branching), leaf_kind, supervised_root, root_codes)

    @property
    def node_counts(self) -> Tuple[int, ...]:
        """N_1 = root_codes (1 for a tree), N_{l+1} = N_l * k_l"""
        counts = [self.root_codes]
        for k in self.branching[:-1]:
            counts.append(counts[-1] * k)
        return tuple(counts)

    @property
    def leaf_dim(self) -> int:
        return self.node_counts[-1] * self.branching[-1]

    @property
    def path_widths(self) -> Tuple[int, ...]:
        """Choices per path_indices column: one per discrete layer, or one per independent root code"""
        if self.root_codes > 1:
            return (self.branching[0],) * self.root_codes
        return self.branching if self.leaf_kind == LeafKind.DISCRETE else self.branching[:-1]

    def layer_width(self, layer: int) -> int:
        """Flattened width N_l * k_l of layer l"""
        return self.node_counts[layer - 1] * self.branching[layer - 1]

    def is_discrete(self, layer: int) -> bool:
        return layer < self.depth or self.leaf_kind == LeafKind.DISCRETE

    def check_layer(self, layer: int, name: str = 'layer'):
        if not 1 <= layer <= self.depth:
            raise ValidationError(f'{name} must be within 1..{self.depth}', details={name: layer})

    def to_dict(self) -> Dict[str, Any]:
        return {
            'depth': self.depth,
            'k': list(self.branching),
            'leaf_kind': self.leaf_kind.value,
            'supervised_root': self.supervised_root,
            'root_codes': self.root_codes,
        }


@dataclass
class CodeAssignment:
    """
    Raw per-node codes and, once masked, the gated codes of every layer
    raw[l - 1] and masked[l - 1] have shape (batch, N_l, k_l)
    """

    spec: TreeSpec
    raw: List[np.ndarray]
    masked: Optional[List[np.ndarray]] = None
    active_layer: Optional[int] = None

    @property
    def batch_size(self) -> int:
        return self.raw[0].shape[0]

    @property
    def flattened_leaf(self) -> np.ndarray:
        if self.masked is None:
            raise ValidationError('Assignment has not been masked yet')
        return self.masked[-1].reshape(self.batch_size, -1)

    def flattened(self, layer: int) -> np.ndarray:
        """Masked layer l flattened to (batch, N_l * k_l)"""
        if self.masked is None:
            raise ValidationError('Assignment has not been masked yet')
        return self.masked[layer - 1].reshape(self.batch_size, -1)

    def gates(self, layer: int) -> np.ndarray:
        """Parent gate of every node of layer l, shape (batch, N_l)"""
        if layer == 1:
            return np.ones((self.batch_size, self.spec.root_codes))
        return self.flattened(layer - 1)

    def root(self) -> np.ndarray:
        return self.raw[0][:, 0, :]

    def take(self, index) -> 'CodeAssignment':
        """Sub-batch selected by an index or slice"""
        pick = (lambda arr: arr[index]) if not isinstance(index, int) else (lambda arr: arr[index:index + 1])
        return CodeAssignment(
            self.spec,
            [pick(layer) for layer in self.raw],
            None if self.masked is None else [pick(layer) for layer in self.masked],
            self.active_layer,
        )


@dataclass
class LatentSample:
    """Noise plus the flattened masked leaf code fed to the generator"""

    noise: np.ndarray
    assignment: CodeAssignment

    @property
    def code(self) -> np.ndarray:
        return self.assignment.flattened_leaf

    def generator_input(self, dtype=np.float64) -> np.ndarray:
        return np.concatenate([self.noise, self.code], axis=1).astype(dtype, copy=False)


@dataclass
class ActivePath:
    """Root-to-leaf chain of (layer, node, selected) with 1-based indices"""

    steps: List[Tuple[int, int, int]] = field(default_factory=list)
    complete: bool = True
    leaf_node: Optional[int] = None


def _check_one_hot(codes: np.ndarray, name: str):
    binary = np.all((codes == 0) | (codes == 1))
    if not binary or not np.all(codes.sum(axis=-1) == 1):
        raise ValidationError(f'{name} must be one-hot', details={'name': name})


def sample_raw(spec: TreeSpec, fixed_root: Optional[np.ndarray] = None, rng: RandomSource = None,
               batch_size: int = 1) -> CodeAssignment:
    """
    Draw raw codes for every node: uniform categorical one-hots for discrete layers,
    Unif(-1, 1) for continuous leaves. fixed_root replaces the sampled root when the
    root is supervised; it may be one one-hot or one per sample.
    """
    rng = as_generator(rng)
    if fixed_root is not None:
        if not spec.supervised_root:
            raise ConfigurationError('fixed_root given for an unsupervised tree')
        fixed_root = np.asarray(fixed_root, dtype=np.float64)
        if fixed_root.shape[-1] != spec.branching[0]:
            raise ValidationError('fixed_root length must equal k_1',
                                  details={'expected': spec.branching[0], 'received': fixed_root.shape[-1]})
        _check_one_hot(fixed_root, 'fixed_root')
        if fixed_root.ndim == 2:
            batch_size = fixed_root.shape[0]

    raw = []
    for layer, (nodes, k) in enumerate(zip(spec.node_counts, spec.branching), start=1):
        if spec.is_discrete(layer):
            picks = rng.integers(0, k, size=(batch_size, nodes))
            codes = np.eye(k)[picks]
        else:
            codes = rng.uniform(-1.0, 1.0, size=(batch_size, nodes, k))
        raw.append(codes)

    if fixed_root is not None:
        raw[0] = np.broadcast_to(fixed_root.reshape(-1, 1, spec.branching[0]), raw[0].shape).copy()
    return CodeAssignment(spec, raw)


def mask_layers(layers: Sequence[np.ndarray]) -> List[np.ndarray]:
    """Apply the parent gate recursively; works for hard and soft (probability) codes"""
    masked = [np.array(layers[0], dtype=np.float64)]
    for codes in layers[1:]:
        gate = masked[-1].reshape(masked[-1].shape[0], -1)
        masked.append(gate[:, :, None] * codes)
    return masked


def apply_mask(assignment: CodeAssignment) -> CodeAssignment:
    """Gated codes for every layer; masked layer 1 equals raw layer 1"""
    return CodeAssignment(assignment.spec, [layer.copy() for layer in assignment.raw],
                          mask_layers(assignment.raw), assignment.active_layer)


def average_code(spec: TreeSpec, layer: int) -> float:
    """Fill value used for layers that are not sampled yet"""
    return 1.0 / spec.branching[layer - 1] if spec.is_discrete(layer) else 0.0


def curriculum_fill(spec: TreeSpec, assignment: CodeAssignment, active_layer: int) -> CodeAssignment:
    """
    Keep raw codes of layers <= active_layer and replace deeper ones by their average
    (1/k_l discrete, 0 continuous), then re-mask
    """
    if not isinstance(active_layer, (int, np.integer)) or not 1 <= active_layer <= spec.depth:
        raise ValidationError(f'active_layer must be within 1..{spec.depth}', details={'active_layer': active_layer})
    raw = []
    for layer, codes in enumerate(assignment.raw, start=1):
        if layer <= active_layer:
            raw.append(codes.copy())
        else:
            raw.append(np.full_like(codes, average_code(spec, layer), dtype=np.float64))
    return CodeAssignment(spec, raw, mask_layers(raw), int(active_layer))


def _is_hard(codes: np.ndarray) -> np.ndarray:
    return np.all((codes == 0) | (codes == 1), axis=-1) & (codes.sum(axis=-1) == 1)


def _independent_picks(codes: np.ndarray) -> np.ndarray:
    """Selection of every independent root code, -1 from the first soft one"""
    alive = np.cumprod(_is_hard(codes), axis=1).astype(bool)
    return np.where(alive, codes.argmax(axis=-1), -1).astype(np.int64)


def path_indices(assignment: CodeAssignment) -> np.ndarray:
    """
    Selected child index per discrete layer, shape (batch, discrete depth), 0-based;
    -1 from the first layer whose on-path node is not a hard one-hot
    Flat controllers with independent root codes give one column per code instead.
    """
    if assignment.masked is None:
        assignment = apply_mask(assignment)
    spec = assignment.spec
    if spec.root_codes > 1:
        return _independent_picks(assignment.masked[0])
    discrete_depth = len(spec.path_widths)
    batch = assignment.batch_size
    picks = np.full((batch, discrete_depth), -1, dtype=np.int64)
    node = np.zeros(batch, dtype=np.int64)
    alive = np.ones(batch, dtype=bool)
    rows = np.arange(batch)
    for layer in range(1, discrete_depth + 1):
        codes = assignment.masked[layer - 1][rows, node]
        alive &= _is_hard(codes)
        selected = codes.argmax(axis=1)
        picks[alive, layer - 1] = selected[alive]
        node = node * spec.branching[layer - 1] + selected
    return picks


def active_path(assignment: CodeAssignment, index: int = 0) -> ActivePath:
    """Root-to-leaf selections of one sample, truncated and flagged under curriculum fill"""
    spec = assignment.spec
    picks = path_indices(assignment)[index]
    path = ActivePath()
    if spec.root_codes > 1:
        # one step per independent code, all on layer 1
        path.steps = [(1, code, int(selected) + 1) for code, selected in enumerate(picks, start=1) if selected >= 0]
        path.complete = len(path.steps) == len(picks)
        return path
    node = 0
    for layer, selected in enumerate(picks, start=1):
        if selected < 0:
            path.complete = False
            break
        path.steps.append((layer, node + 1, int(selected) + 1))
        node = node * spec.branching[layer - 1] + int(selected)
    if path.complete:
        path.leaf_node = node + 1 if spec.leaf_kind == LeafKind.CONTINUOUS else path.steps[-1][1]
    return path


def assignment_from_paths(spec: TreeSpec, paths: np.ndarray, leaf_values: Optional[np.ndarray] = None) -> CodeAssignment:
    """
    Hard assignment whose active chain follows paths (batch, discrete depth), 0-based.
    Off-path discrete nodes select child 0; they are masked out anyway. Continuous trees
    take leaf_values (batch, k_L) for the on-path leaf node and zeros elsewhere.
    """
    paths = np.atleast_2d(np.asarray(paths, dtype=np.int64))
    if spec.root_codes > 1:
        return apply_mask(CodeAssignment(spec, [np.eye(spec.branching[0])[paths]]))
    batch = paths.shape[0]
    rows = np.arange(batch)
    raw = []
    node = np.zeros(batch, dtype=np.int64)
    for layer, (nodes, k) in enumerate(zip(spec.node_counts, spec.branching), start=1):
        if spec.is_discrete(layer):
            codes = np.zeros((batch, nodes, k))
            codes[:, :, 0] = 1.0
            codes[rows, node, :] = 0.0
            codes[rows, node, paths[:, layer - 1]] = 1.0
            node = node * k + paths[:, layer - 1]
        else:
            codes = np.zeros((batch, nodes, k))
            if leaf_values is not None:
                codes[rows, node, :] = np.asarray(leaf_values, dtype=np.float64).reshape(batch, k)
        raw.append(codes)
    return apply_mask(CodeAssignment(spec, raw))


def enumerate_paths(spec: TreeSpec) -> np.ndarray:
    """Every discrete root-to-leaf path in flattening order"""
    widths = spec.path_widths
    if not widths:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.product(*[range(k) for k in widths])), dtype=np.int64)


def code_grid(spec: TreeSpec, n_steps: int = 5) -> CodeAssignment:
    """
    Sampling grid in flattening order. Discrete trees enumerate every path once;
    continuous trees sweep each leaf dimension of every path over [-1, 1].
    """
    paths = enumerate_paths(spec)
    if spec.leaf_kind == LeafKind.DISCRETE:
        return assignment_from_paths(spec, paths)
    k_leaf = spec.branching[-1]
    sweep = np.linspace(-1.0, 1.0, n_steps)
    rows, values = [], []
    for path in paths:
        for dim in range(k_leaf):
            for value in sweep:
                leaf = np.zeros(k_leaf)
                leaf[dim] = value
                rows.append(path)
                values.append(leaf)
    rows = np.array(rows, dtype=np.int64).reshape(len(rows), paths.shape[1])
    return assignment_from_paths(spec, rows, np.array(values))


def sample_latent(spec: TreeSpec, dim_z: int, batch_size: int, rng: RandomSource = None,
                  fixed_root: Optional[np.ndarray] = None, active_layer: Optional[int] = None,
                  noise_prior: str = 'uniform') -> LatentSample:
    """Noise plus a masked code batch, average-filled below active_layer when given"""
    rng = as_generator(rng)
    assignment = sample_raw(spec, fixed_root, rng, batch_size)
    batch_size = assignment.batch_size
    if active_layer is None:
        assignment = apply_mask(assignment)
    else:
        assignment = curriculum_fill(spec, assignment, active_layer)
    return LatentSample(sample_noise(dim_z, batch_size, rng, noise_prior), assignment)


def sample_noise(dim_z: int, batch_size: int, rng: RandomSource = None, prior: str = 'uniform') -> np.ndarray:
    rng = as_generator(rng)
    if prior == 'uniform':
        return rng.uniform(-1.0, 1.0, size=(batch_size, dim_z))
    if prior == 'normal':
        return rng.standard_normal(size=(batch_size, dim_z))
    raise ConfigurationError(f"Unknown noise prior '{prior}'", {'net.noise_prior': prior})


def with_root_labels(spec: TreeSpec, labels: np.ndarray) -> np.ndarray:
    """Integer root labels to one-hot rows of width k_1"""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= spec.branching[0]):
        raise ValidationError('root labels out of range', details={'k_1': spec.branching[0]})
    return np.eye(spec.branching[0])[labels]

"""
Curriculum Schedule
Which regularizers are live and how deep codes are sampled, as a pure function of the
iteration counter
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import FrozenSet, List, Tuple

from standardization_utils import ValidationError

logger = logging.getLogger(__name__)


class CurriculumMode(Enum):
    UNSUPERVISED = "unsupervised"
    WEAKLY_SUPERVISED = "weakly_supervised"


class Variant(Enum):
    """Curriculum ablations"""
    NONE = "none"
    REGULARIZER_ONLY = "regularizer_only"
    FULL = "full"


@dataclass(frozen=True)
class CurriculumState:
    iteration: int
    active_regularizer_layers: FrozenSet[int]
    sampling_active_layer: int

    def is_active(self, layer: int) -> bool:
        return layer in self.active_regularizer_layers

    @property
    def deepest_active(self) -> int:
        return max(self.active_regularizer_layers)


@dataclass(frozen=True)
class ScheduleSpec:
    """
    activation_iterations[l - 1] is the iteration at which layer l's regularizer goes live.
    With staggered_sampling off, every layer is sampled from iteration 0.
    """

    mode: CurriculumMode
    activation_iterations: Tuple[int, ...]
    total_iterations: int
    staggered_sampling: bool = True

    def __post_init__(self):
        if isinstance(self.mode, str):
            object.__setattr__(self, 'mode', CurriculumMode(self.mode))
        object.__setattr__(self, 'activation_iterations', tuple(int(a) for a in self.activation_iterations))
        errors = {}
        starts = self.activation_iterations
        if not starts:
            errors['curriculum.activation'] = 'at least one layer is required'
        elif starts[0] != 0:
            errors['curriculum.activation'] = 'layer 1 must be active from iteration 0'
        elif any(a < 0 for a in starts):
            errors['curriculum.activation'] = 'activation iterations must be >= 0'
        elif any(later < earlier for earlier, later in zip(starts, starts[1:])):
            errors['curriculum.activation'] = 'activation iterations must be nondecreasing in layer'
        elif self.mode == CurriculumMode.WEAKLY_SUPERVISED and len(starts) > 1 and starts[1] != 0:
            errors['curriculum.activation'] = 'weakly supervised runs keep layers 1 and 2 live from iteration 0'
        if self.total_iterations < 0:
            errors['train.iterations'] = 'must be >= 0'
        if errors:
            raise ValidationError('Invalid curriculum schedule', field_errors=errors)

    @property
    def depth(self) -> int:
        return len(self.activation_iterations)

    @classmethod
    def default(cls, mode: CurriculumMode, depth: int, base: int, total_iterations: int) -> 'ScheduleSpec':
        """
        Unsupervised: layer l >= 2 activates at 2(l-1)*base.
        Weakly supervised: layers 1-2 from 0, layer l >= 3 at 2(l-2)*base.
        """
        mode = CurriculumMode(mode)
        offset = 1 if mode == CurriculumMode.UNSUPERVISED else 2
        starts = [max(0, 2 * (layer - offset) * base) for layer in range(1, depth + 1)]
        starts[0] = 0
        return cls(mode, tuple(starts), total_iterations)

    def activation_events(self) -> List[Tuple[int, int]]:
        """(layer, iteration) for every layer that is not live from the start"""
        return [(layer, start) for layer, start in enumerate(self.activation_iterations, start=1) if start > 0]


def state_at(spec: ScheduleSpec, iteration: int) -> CurriculumState:
    if iteration < 0 or iteration > spec.total_iterations:
        raise ValidationError(f'iteration must be within 0..{spec.total_iterations}',
                              details={'iteration': iteration})
    active = frozenset(layer for layer, start in enumerate(spec.activation_iterations, start=1)
                       if start <= iteration)
    sampling = max(active) if spec.staggered_sampling else spec.depth
    return CurriculumState(int(iteration), active, sampling)


def ablate(spec: ScheduleSpec, variant) -> ScheduleSpec:
    variant = Variant(variant)
    if variant == Variant.NONE:
        return replace(spec, activation_iterations=(0,) * spec.depth, staggered_sampling=True)
    if variant == Variant.REGULARIZER_ONLY:
        return replace(spec, staggered_sampling=False)
    return spec

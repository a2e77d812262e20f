"""
Training Objectives
Adversarial loss, the root-layer information terms (MI, or AC with real labels), the
per-layer hierarchical conditional MI terms, and their gated combination

All functions take probability tensors from the network heads and return scalar
Tensors, so every term is differentiable through tensornet.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from dtlc import CodeAssignment
from schedule import CurriculumState
from standardization_utils import ConfigurationError, CurriculumError, NonFiniteError, ValidationError
from tensornet import Tensor, as_tensor

logger = logging.getLogger(__name__)

PROB_EPSILON = 1e-7
HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
ROW_SUM_TOLERANCE = 1e-5


def clamp_probabilities(p: Tensor) -> Tensor:
    return as_tensor(p).clip(PROB_EPSILON, 1.0 - PROB_EPSILON)


def _require_batch(tensor: Tensor, name: str):
    if tensor.ndim == 0 or tensor.shape[0] == 0:
        raise ValidationError(f'{name} must hold a non-empty batch', details={'shape': tensor.shape})


def gan_loss(d_real, d_fake) -> Tensor:
    """E[log D(x)] + E[log(1 - D(G(z)))], maximized by the discriminator"""
    d_real, d_fake = as_tensor(d_real), as_tensor(d_fake)
    _require_batch(d_real, 'd_real')
    _require_batch(d_fake, 'd_fake')
    return clamp_probabilities(d_real).log().mean() + (1.0 - clamp_probabilities(d_fake)).log().mean()


def generator_gan_loss(d_fake, non_saturating: bool = True) -> Tensor:
    """
    Generator's adversarial term, to be minimized.
    Non-saturating: -E[log D(G(z))]; saturating: E[log(1 - D(G(z)))].
    """
    d_fake = as_tensor(d_fake)
    _require_batch(d_fake, 'd_fake')
    if non_saturating:
        return -clamp_probabilities(d_fake).log().mean()
    return (1.0 - clamp_probabilities(d_fake)).log().mean()


def _log_likelihood(q, codes: np.ndarray, discrete: bool) -> Tensor:
    """Per-node log Q(c|x), shape (batch, nodes); q and codes are (batch, nodes, k)"""
    if discrete:
        return (clamp_probabilities(q).log() * codes).sum(axis=-1)
    diff = q - codes
    return (diff * diff).sum(axis=-1) * -0.5 - HALF_LOG_2PI * codes.shape[-1]


def _as_node_batch(q, codes: np.ndarray, name: str):
    q = as_tensor(q)
    codes = np.asarray(codes, dtype=np.float64)
    _require_batch(q, name)
    if q.ndim == 2:
        q = q.reshape(q.shape[0], 1, q.shape[1])
    if codes.ndim == 2:
        codes = codes.reshape(codes.shape[0], 1, codes.shape[1])
    if q.shape != codes.shape:
        raise ValidationError(f'{name} and its codes disagree in shape',
                              details={'q': q.shape, 'codes': codes.shape})
    return q, codes


def _check_rows(q: Tensor, name: str):
    sums = q.data.sum(axis=-1)
    if not np.all(np.abs(sums - 1.0) <= ROW_SUM_TOLERANCE):
        raise ValidationError(f'{name} rows must sum to 1', details={'max_deviation': float(np.abs(sums - 1.0).max())})


def mi_loss(q1_output, c1, discrete: bool = True) -> Tensor:
    """
    Batch mean of log Q_1(c_1|x) for the sampled root code; the code entropy is a
    constant and omitted.
    """
    q, codes = _as_node_batch(q1_output, c1, 'q1_output')
    if discrete:
        _check_rows(q, 'q1_output')
    return _log_likelihood(q, codes, discrete).sum(axis=-1).mean()


def labels_to_one_hot(labels, width: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim == 2:
        return labels.astype(np.float64)
    labels = labels.astype(np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= width):
        raise ValidationError('labels out of range', details={'width': width})
    return np.eye(width)[labels]


def ac_loss(q1_fake, c1_fake, q1_real, c1_real_labels) -> Tensor:
    """
    MI on generated samples plus the same log-likelihood on labelled real samples.
    The real half only depends on the discriminator/auxiliary network.
    """
    if c1_real_labels is None:
        raise ConfigurationError('AC regularization needs real labels (weakly supervised run without labels)')
    q1_real = as_tensor(q1_real)
    width = q1_real.shape[-1]
    return mi_loss(q1_fake, c1_fake) + mi_loss(q1_real, labels_to_one_hot(c1_real_labels, width))


def hcmi_loss(layer: int, q_head, assignment: CodeAssignment) -> Tensor:
    """
    Batch mean over samples of sum_m gate_m * log Q_l^m(c_l^m|x). With hard parent codes
    exactly one node per sample is gated on; off-path nodes contribute 0.
    """
    spec = assignment.spec
    if layer < 2:
        raise ValidationError('hcmi_loss is defined for layers >= 2; use mi_loss or ac_loss for layer 1',
                              details={'layer': layer})
    spec.check_layer(layer)
    if assignment.active_layer is not None and layer > assignment.active_layer:
        raise CurriculumError(f'layer {layer} codes are still average-filled',
                              details={'layer': layer, 'sampling_active_layer': assignment.active_layer})
    if assignment.masked is None:
        raise ValidationError('hcmi_loss needs a masked assignment')

    gates = assignment.gates(layer)
    if not (np.all((gates == 0) | (gates == 1)) and np.all(gates.sum(axis=1) == 1)):
        raise ValidationError(f'layer {layer - 1} codes must be one-hot to select the conditioning node',
                              details={'layer': layer})
    q, codes = _as_node_batch(q_head, assignment.raw[layer - 1], f'q{layer}')
    discrete = spec.is_discrete(layer)
    if discrete:
        _check_rows(q, f'q{layer}')
    per_node = _log_likelihood(q, codes, discrete)
    return (per_node * gates).sum(axis=-1).mean()


@dataclass
class ObjectiveTerms:
    """
    Unweighted terms of one update. gan is the full adversarial value; generator_gan,
    when present, is what the generator minimizes instead of gan.
    """

    gan: Optional[Tensor] = None
    generator_gan: Optional[Tensor] = None
    root: Optional[Tensor] = None
    root_kind: str = 'mi'
    hcmi: Dict[int, Tensor] = field(default_factory=dict)


@dataclass
class LossReport:
    gan_term: float
    info_terms: Dict[str, float]
    hcmi: Dict[int, float]
    weighted_total_for_g: float
    weighted_total_for_d: float
    trade_offs: Sequence[float]
    active_layers: Sequence[int]
    g_objective: Tensor = field(repr=False, default=None)
    d_objective: Tensor = field(repr=False, default=None)

    @property
    def root_term(self) -> Optional[float]:
        return next(iter(self.info_terms.values()), None)

    def csv_row(self, iteration: int, depth: int) -> List:
        """iteration, gan, mi_or_ac, hcmi_2..hcmi_L, g_total, d_total; blanks for inactive terms"""
        row = [iteration, self.gan_term, '' if self.root_term is None else self.root_term]
        row += [self.hcmi.get(layer, '') for layer in range(2, depth + 1)]
        row += [self.weighted_total_for_g, self.weighted_total_for_d]
        return row


def csv_header(depth: int) -> List[str]:
    return ['iteration', 'gan', 'mi_or_ac'] + [f'hcmi_{layer}' for layer in range(2, depth + 1)] + ['g_total', 'd_total']


def _finite(name: str, tensor: Tensor) -> float:
    value = tensor.item()
    if not math.isfinite(value):
        raise NonFiniteError(name, f"Loss term '{name}' is not finite", {'value': value})
    return value


def full_objective(terms: ObjectiveTerms, curriculum: CurriculumState, trade_offs: Sequence[float]) -> LossReport:
    """
    g_total = gan_G - lambda_1 * root - sum_l lambda_l * hcmi_l    (minimized by G and Q)
    d_total = -gan  - lambda_1 * root - sum_l lambda_l * hcmi_l    (minimized by D and Q)
    Terms of layers the curriculum has not activated are dropped entirely.
    """
    negative = {f'train.lambda[{index}]': 'must be >= 0' for index, value in enumerate(trade_offs) if value < 0}
    if negative:
        raise ConfigurationError('Trade-off weights must be non-negative', {'field_errors': negative})

    info: Optional[Tensor] = None
    info_terms: Dict[str, float] = {}
    hcmi_values: Dict[int, float] = {}
    if terms.root is not None and curriculum.is_active(1):
        info_terms[terms.root_kind] = _finite(terms.root_kind, terms.root)
        info = terms.root * float(trade_offs[0])
    for layer, term in sorted(terms.hcmi.items()):
        if not curriculum.is_active(layer):
            continue
        hcmi_values[layer] = _finite(f'hcmi_{layer}', term)
        weighted = term * float(trade_offs[layer - 1])
        info = weighted if info is None else info + weighted

    gan_value = _finite('gan', terms.gan) if terms.gan is not None else 0.0
    g_gan = terms.generator_gan if terms.generator_gan is not None else terms.gan

    g_objective = d_objective = None
    if g_gan is not None:
        g_objective = g_gan if info is None else g_gan - info
    if terms.gan is not None:
        d_objective = -terms.gan if info is None else -terms.gan - info
    elif info is not None:
        d_objective = -info
    if g_objective is None and info is not None:
        g_objective = -info

    return LossReport(
        gan_term=gan_value,
        info_terms=info_terms,
        hcmi=hcmi_values,
        weighted_total_for_g=_finite('g_total', g_objective) if g_objective is not None else 0.0,
        weighted_total_for_d=_finite('d_total', d_objective) if d_objective is not None else 0.0,
        trade_offs=tuple(trade_offs),
        active_layers=sorted(curriculum.active_regularizer_layers),
        g_objective=g_objective,
        d_objective=d_objective,
    )

"""
Adversarial Trainer
Alternating discriminator/auxiliary and generator updates under the curriculum,
with a per-iteration CSV metric log and periodic checkpoints
"""

import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from architectures import D_HEAD, X_HEAD, Models, build_models, head_name
from checkpoint import Checkpoint, save_checkpoint
from datasets import DataConfig, build_stream
from dtlc import CodeAssignment, LatentSample, TreeSpec, sample_latent, sample_noise, with_root_labels
from export_utils import CsvLog
from objectives import (LossReport, ObjectiveTerms, ac_loss, csv_header, full_objective, gan_loss,
                        generator_gan_loss, hcmi_loss, mi_loss)
from schedule import CurriculumState, ScheduleSpec, state_at
from standardization_utils import CheckpointError, ConfigValidator, NonFiniteError
from tensornet import AdamState, GradientCheckResult, Mode, adam_step, gradient_check

logger = logging.getLogger(__name__)

DTYPES = {'float32': np.float32, 'float64': np.float64}
SAMPLE_CHUNK = 256


@dataclass
class TrainConfig:
    tree: TreeSpec
    schedule: ScheduleSpec
    dim_z: int
    batch_size: int
    iterations: int
    lr_d: float
    lr_g: float
    beta1: float
    trade_offs: Tuple[float, ...]
    seed: int
    data: DataConfig
    arch: str
    noise_prior: str = 'uniform'
    non_saturating: bool = True
    checkpoint_every: Optional[int] = None
    log_every: int = 100
    diversity_every: int = 0
    diversity_pairs: int = 200
    dtype: str = 'float32'

    def __post_init__(self):
        self.trade_offs = tuple(float(v) for v in self.trade_offs)
        validator = ConfigValidator()
        validator.require_int('net.dim_z', self.dim_z, minimum=1)
        validator.require_int('train.batch_size', self.batch_size, minimum=1)
        validator.require_int('train.iterations', self.iterations, minimum=0)
        for name in ('lr_d', 'lr_g'):
            validator.require_positive(f'train.{name}', getattr(self, name))
        if not 0 <= self.beta1 < 1:
            validator.add('train.beta1', 'must be within [0, 1)')
        if len(self.trade_offs) != self.tree.depth:
            validator.add('train.lambda', f'expected {self.tree.depth} values, got {len(self.trade_offs)}')
        elif any(v < 0 for v in self.trade_offs):
            validator.add('train.lambda', 'must be >= 0')
        if self.schedule.depth != self.tree.depth:
            validator.add('curriculum.activation', f'expected {self.tree.depth} layers')
        if self.schedule.total_iterations != self.iterations:
            validator.add('curriculum.total_iterations', 'must equal train.iterations')
        if self.tree.supervised_root and not self.tree.is_discrete(1):
            validator.add('tree.supervised_root', 'a supervised root must be discrete')
        validator.require_choice('net.noise_prior', self.noise_prior, ['uniform', 'normal'])
        validator.require_choice('train.dtype', self.dtype, list(DTYPES))
        if self.checkpoint_every is not None:
            validator.require_int('train.checkpoint_every', self.checkpoint_every, minimum=1)
        validator.require_int('train.log_every', self.log_every, minimum=1)
        validator.require_int('train.diversity_every', self.diversity_every, minimum=0)
        validator.raise_if_errors('Invalid training configuration')

    @property
    def checkpoint_interval(self) -> int:
        return self.checkpoint_every or max(1, self.iterations // 10)

    def checkpoint_meta(self) -> Dict:
        return {
            'noise_prior': self.noise_prior,
            'input_scale': self.data.input_scale,
            'dataset': self.data.dataset,
            'seed': self.seed,
        }


@dataclass
class TrainResult:
    models: Models
    iteration: int
    out_dir: Optional[Path]
    metrics_path: Optional[Path] = None
    checkpoint_path: Optional[Path] = None
    reports: List[LossReport] = field(default_factory=list)


class Trainer:
    """
    One instance owns the models, both optimizers and the random streams.
    Streams come from one SeedSequence, so a fixed seed replays the same run.
    """

    def __init__(self, config: TrainConfig, out_dir: Union[str, Path, None] = None, progress: bool = True):
        self.config = config
        self.tree = config.tree
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.progress = progress
        self.dtype = DTYPES[config.dtype]
        latent_seq, data_seq, eval_seq = np.random.SeedSequence(config.seed).spawn(3)
        self.models = build_models(config.arch, config.tree, config.dim_z, self.dtype, seed=config.seed)
        self.latent_rng = np.random.default_rng(latent_seq)
        self.eval_rng = np.random.default_rng(eval_seq)
        self.stream = build_stream(config.data, np.random.default_rng(data_seq))
        self.opt_d = AdamState(config.lr_d, beta1=config.beta1)
        self.opt_g = AdamState(config.lr_g, beta1=config.beta1)
        self.iteration = 0
        self.last_report: Optional[LossReport] = None

    @property
    def generator(self):
        return self.models.generator

    @property
    def discriminator(self):
        return self.models.discriminator

    def sample_batch(self, state: CurriculumState):
        x_real, labels = self.stream.next_batch(self.config.batch_size)
        fixed_root = with_root_labels(self.tree, labels) if self.tree.supervised_root else None
        latent = sample_latent(self.tree, self.config.dim_z, self.config.batch_size, self.latent_rng,
                               fixed_root=fixed_root, active_layer=state.sampling_active_layer,
                               noise_prior=self.config.noise_prior)
        return x_real, labels, latent

    def _information_terms(self, q_out: Dict, assignment: CodeAssignment, state: CurriculumState,
                           q1_real=None, labels=None) -> ObjectiveTerms:
        terms = ObjectiveTerms(root_kind='ac' if self.tree.supervised_root else 'mi')
        c1 = assignment.raw[0]
        if self.tree.supervised_root and q1_real is not None:
            terms.root = ac_loss(q_out[head_name(1)], c1, q1_real, labels)
        else:
            terms.root = mi_loss(q_out[head_name(1)], c1, discrete=self.tree.is_discrete(1))
        for layer in sorted(state.active_regularizer_layers):
            if layer >= 2:
                terms.hcmi[layer] = hcmi_loss(layer, q_out[head_name(layer)], assignment)
        return terms

    def step(self, iteration: int) -> LossReport:
        """One D/Q update followed by one G/Q update on the same latent batch"""
        config = self.config
        state = state_at(config.schedule, iteration)
        q_heads = [head_name(layer) for layer in sorted(state.active_regularizer_layers)]
        x_real, labels, latent = self.sample_batch(state)

        self.generator.zero_grad()
        self.discriminator.zero_grad()
        fake = self.generator.forward(latent.generator_input(self.dtype), Mode.TRAIN)[X_HEAD]

        # discriminator and active Q heads
        real_heads = [D_HEAD] + ([head_name(1)] if self.tree.supervised_root else [])
        real_out = self.discriminator.forward(x_real, Mode.TRAIN, heads=real_heads)
        fake_out = self.discriminator.forward(fake.detach(), Mode.TRAIN, heads=[D_HEAD] + q_heads)
        terms = self._information_terms(fake_out, latent.assignment, state,
                                        q1_real=real_out.get(head_name(1)), labels=labels)
        terms.gan = gan_loss(real_out[D_HEAD], fake_out[D_HEAD])
        report_d = full_objective(terms, state, config.trade_offs)
        self.discriminator.backward(report_d.d_objective)
        adam_step(self.opt_d, self.discriminator.parameters(heads=[D_HEAD] + q_heads))

        # generator, then the Q heads again on the information terms alone
        self.discriminator.zero_grad()
        fake_out = self.discriminator.forward(fake, Mode.TRAIN, heads=[D_HEAD] + q_heads)
        terms = self._information_terms(fake_out, latent.assignment, state)
        terms.generator_gan = generator_gan_loss(fake_out[D_HEAD], config.non_saturating)
        report_g = full_objective(terms, state, config.trade_offs)
        self.generator.backward(report_g.g_objective)
        adam_step(self.opt_g, self.generator.parameters())

        info_only = full_objective(ObjectiveTerms(root=terms.root, root_kind=terms.root_kind, hcmi=terms.hcmi),
                                   state, config.trade_offs)
        self.discriminator.zero_grad()
        if info_only.g_objective is not None:
            self.discriminator.backward(info_only.g_objective)
            adam_step(self.opt_d, self.discriminator.parameters(heads=q_heads))

        return replace(report_d, weighted_total_for_g=report_g.weighted_total_for_g,
                       g_objective=report_g.g_objective)

    def _save(self, name: str) -> Optional[Path]:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.out_dir / name, self.models, self.iteration, self.config.checkpoint_meta())

    def _abort(self, error: NonFiniteError):
        logger.error(f"aborting at iteration {self.iteration}: {error}")
        if self.out_dir is None:
            return
        self._save('abort.dtlc')
        diagnostics = {
            'iteration': self.iteration,
            'error': error.to_dict()['error'],
            'last_report': None if self.last_report is None else {
                'gan': self.last_report.gan_term,
                'info': self.last_report.info_terms,
                'hcmi': {str(k): v for k, v in self.last_report.hcmi.items()},
                'g_total': self.last_report.weighted_total_for_g,
                'd_total': self.last_report.weighted_total_for_d,
            },
        }
        (self.out_dir / 'abort.json').write_text(json.dumps(diagnostics, indent=2, sort_keys=True, default=str))

    def _log_diversity(self, log: CsvLog):
        from metrics import inter_category_diversity

        for layer in range(1, self.tree.depth + 1):
            value = inter_category_diversity(self.models, layer, self.config.diversity_pairs, self.eval_rng)
            log.write([self.iteration, layer, value])
            logger.info(f"iteration {self.iteration}: layer {layer} mean SSIM {value:.4f}")

    def run(self, keep_reports: bool = False) -> TrainResult:
        config = self.config
        depth = self.tree.depth
        result = TrainResult(self.models, 0, self.out_dir)
        metrics_log = diversity_log = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            metrics_log = CsvLog(self.out_dir / 'metrics.csv', csv_header(depth))
            result.metrics_path = metrics_log.path
            if config.diversity_every and self.models.is_image:
                diversity_log = CsvLog(self.out_dir / 'diversity.csv', ['iteration', 'layer', 'mean_ssim'])

        activation = dict((layer, start) for layer, start in config.schedule.activation_events())
        logger.info(f"training {config.arch} tree k={list(self.tree.branching)} for {config.iterations} iterations")
        try:
            for iteration in tqdm(range(config.iterations), disable=not self.progress, file=sys.stderr,
                                  desc='train', unit='it'):
                for layer, start in activation.items():
                    if start == iteration:
                        logger.info(f"layer {layer} regularizer activated at iteration {iteration}")
                report = self.step(iteration)
                self.iteration = iteration + 1
                self.last_report = report
                if keep_reports:
                    result.reports.append(report)
                if metrics_log is not None:
                    metrics_log.write(report.csv_row(iteration, depth))
                if self.iteration % config.log_every == 0:
                    logger.info(f"iteration {self.iteration}: gan={report.gan_term:.4f} "
                                f"info={report.info_terms} hcmi={report.hcmi} "
                                f"g_total={report.weighted_total_for_g:.4f} d_total={report.weighted_total_for_d:.4f}")
                if diversity_log is not None and self.iteration % config.diversity_every == 0:
                    self._log_diversity(diversity_log)
                if self.iteration % config.checkpoint_interval == 0 and self.iteration < config.iterations:
                    self._save(f'checkpoint_{self.iteration:06d}.dtlc')
        except NonFiniteError as e:
            self._abort(e)
            raise
        finally:
            for log in (metrics_log, diversity_log):
                if log is not None:
                    log.close()

        result.iteration = self.iteration
        result.checkpoint_path = self._save('final.dtlc')
        logger.info(f"training finished at iteration {self.iteration}")
        return result


def train(config: TrainConfig, out_dir: Union[str, Path, None] = None, progress: bool = True) -> TrainResult:
    return Trainer(config, out_dir, progress).run()


def _resolve_models(source) -> Models:
    return source.models if isinstance(source, Checkpoint) else source


def sample_images(checkpoint, assignment: CodeAssignment, noise: Optional[np.ndarray] = None,
                  rng=None, noise_prior: Optional[str] = None) -> np.ndarray:
    """
    Generator outputs for every code of the assignment, in eval mode. noise is either one
    vector shared by the whole grid or one row per code; when omitted, one shared vector
    is drawn from rng.
    """
    models = _resolve_models(checkpoint)
    if assignment.spec != models.tree:
        raise CheckpointError('Requested codes do not match the checkpoint tree',
                              {'checkpoint': models.tree.to_dict(), 'requested': assignment.spec.to_dict()})
    batch = assignment.batch_size
    if noise is None:
        prior = noise_prior or (checkpoint.meta.get('noise_prior', 'uniform') if isinstance(checkpoint, Checkpoint)
                                else 'uniform')
        noise = sample_noise(models.dim_z, 1, rng, prior)
    noise = np.atleast_2d(np.asarray(noise, dtype=np.float64))
    if noise.shape[0] == 1:
        noise = np.repeat(noise, batch, axis=0)
    if noise.shape != (batch, models.dim_z):
        raise CheckpointError('Noise does not match the checkpoint', {'expected': (batch, models.dim_z),
                                                                      'received': noise.shape})
    sample = LatentSample(noise, assignment)
    inputs = sample.generator_input(models.generator.dtype)
    outputs = [models.generator.forward(inputs[start:start + SAMPLE_CHUNK], Mode.EVAL)[X_HEAD].data
               for start in range(0, batch, SAMPLE_CHUNK)]
    return np.concatenate(outputs, axis=0)


def objective_gradient_check(arch: str, tree: Optional[TreeSpec] = None, dim_z: int = 8, batch_size: int = 4,
                             seed: int = 0, h: float = 1e-4, max_entries: Optional[int] = 8) -> GradientCheckResult:
    """
    Finite-difference check of the composite objective (adversarial, root information
    and every hierarchical term) through both graphs of an architecture, in float64.
    A supervised-root tree checks the AC term, fed real labels through Q_1 on real data.
    """
    tree = tree or TreeSpec.from_branching((2, 2))
    models = build_models(arch, tree, dim_z, np.float64, seed)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, tree.branching[0], size=batch_size) if tree.supervised_root else None
    fixed_root = with_root_labels(tree, labels) if tree.supervised_root else None
    latent = sample_latent(tree, dim_z, batch_size, rng, fixed_root=fixed_root)
    real = rng.uniform(0.0, 1.0, size=(batch_size,) + models.sample_shape)
    real_heads = [D_HEAD] + ([head_name(1)] if tree.supervised_root else [])
    state = CurriculumState(0, frozenset(range(1, tree.depth + 1)), tree.depth)
    heads = [D_HEAD] + [head_name(layer) for layer in range(1, tree.depth + 1)]
    g_input = latent.generator_input(np.float64)

    def loss():
        fake = models.generator.forward(g_input, Mode.TRAIN)[X_HEAD]
        real_out = models.discriminator.forward(real, Mode.TRAIN, heads=real_heads)
        fake_out = models.discriminator.forward(fake, Mode.TRAIN, heads=heads)
        c1 = latent.assignment.raw[0]
        if tree.supervised_root:
            root = ac_loss(fake_out[head_name(1)], c1, real_out[head_name(1)], labels)
        else:
            root = mi_loss(fake_out[head_name(1)], c1, discrete=tree.is_discrete(1))
        terms = ObjectiveTerms(
            gan=gan_loss(real_out[D_HEAD], fake_out[D_HEAD]),
            generator_gan=generator_gan_loss(fake_out[D_HEAD]),
            root=root,
            root_kind='ac' if tree.supervised_root else 'mi',
            hcmi={layer: hcmi_loss(layer, fake_out[head_name(layer)], latent.assignment)
                  for layer in range(2, tree.depth + 1)},
        )
        report = full_objective(terms, state, [1.0] * tree.depth)
        return report.g_objective + report.d_objective

    params = {f"{graph.name}.{name}": tensor for graph in models.graphs()
              for name, tensor in graph.parameters().items()}
    return gradient_check(loss, params, h=h, max_entries=max_entries, seed=seed)

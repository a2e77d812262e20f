#!/usr/bin/env python3
"""
Trainer tests
Curriculum gating of the auxiliary heads, run artifacts, determinism and sampling
"""

import json

import numpy as np
import pytest

from architectures import build_models
from checkpoint import load_checkpoint
from datasets import DataConfig, MnistSet, Sim2DSpec, save_mnist
from dtlc import TreeSpec, apply_mask, assignment_from_paths, code_grid, sample_raw
from export_utils import read_csv
from schedule import CurriculumMode, ScheduleSpec, state_at
from standardization_utils import CheckpointError, NonFiniteError, ValidationError
from trainer import TrainConfig, Trainer, objective_gradient_check, sample_images, train


def sim_config(branching=(2, 2), iterations=20, base=5, mode=CurriculumMode.UNSUPERVISED, batch_size=16,
               seed=0, **overrides):
    tree = TreeSpec.from_branching(branching, supervised_root=mode == CurriculumMode.WEAKLY_SUPERVISED)
    values = dict(
        tree=tree,
        schedule=ScheduleSpec.default(mode, tree.depth, base, iterations),
        dim_z=4,
        batch_size=batch_size,
        iterations=iterations,
        lr_d=1e-3,
        lr_g=1e-3,
        beta1=0.5,
        trade_offs=(1.0,) * tree.depth,
        seed=seed,
        data=DataConfig(sim=Sim2DSpec(n_global=branching[0])),
        arch='sim_mlp',
    )
    values.update(overrides)
    return TrainConfig(**values)


def head_snapshot(trainer, head):
    return {name: tensor.data.copy()
            for name, tensor in trainer.discriminator.parameters(heads=[head], include_trunk=False).items()}


def unchanged(trainer, head, snapshot):
    current = head_snapshot(trainer, head)
    return all(np.array_equal(current[name], value) for name, value in snapshot.items())


def test_inactive_heads_stay_bit_identical_until_activation():
    config = sim_config(branching=(2, 2, 2, 2), iterations=500, base=100, batch_size=100,
                        mode=CurriculumMode.WEAKLY_SUPERVISED)
    trainer = Trainer(config, progress=False)
    q3, q4 = head_snapshot(trainer, 'q3'), head_snapshot(trainer, 'q4')
    q2 = head_snapshot(trainer, 'q2')
    early = trainer.sample_batch(state_at(config.schedule, 150))[2].assignment
    assert np.all(early.raw[2] == 0.5) and np.all(early.raw[3] == 0.5)

    for iteration in range(200):
        trainer.step(iteration)
    assert not unchanged(trainer, 'q2', q2)
    assert unchanged(trainer, 'q3', q3)
    assert unchanged(trainer, 'q4', q4)

    trainer.step(200)
    assert not unchanged(trainer, 'q3', q3)
    filled = trainer.sample_batch(state_at(config.schedule, 250))[2].assignment
    assert np.all(filled.raw[3] == 0.5)
    np.testing.assert_array_equal(filled.raw[2].sum(axis=-1), np.ones((100, 4)))
    for iteration in range(201, 400):
        trainer.step(iteration)
    assert unchanged(trainer, 'q4', q4)
    trainer.step(400)
    assert not unchanged(trainer, 'q4', q4)


def test_reports_follow_curriculum():
    config = sim_config(iterations=12, base=5)
    result = Trainer(config, progress=False).run(keep_reports=True)
    assert [sorted(r.hcmi) for r in result.reports[:10]] == [[]] * 10
    assert sorted(result.reports[10].hcmi) == [2]
    assert all(np.isfinite(r.weighted_total_for_g) for r in result.reports)


def test_zero_iteration_run_keeps_initial_models(tmp_path):
    config = sim_config(iterations=0)
    result = train(config, tmp_path, progress=False)
    assert result.iteration == 0
    fresh = build_models('sim_mlp', config.tree, config.dim_z, seed=config.seed)
    loaded = load_checkpoint(result.checkpoint_path)
    for graph, expected in zip(loaded.models.graphs(), fresh.graphs()):
        for name, value in expected.state().items():
            np.testing.assert_array_equal(graph.state()[name], value)
    assert read_csv(result.metrics_path) == []


def test_run_writes_metrics_and_checkpoints(tmp_path):
    config = sim_config(iterations=30, base=5)
    result = train(config, tmp_path, progress=False)
    rows = read_csv(result.metrics_path)
    assert len(rows) == 30
    assert list(rows[0]) == ['iteration', 'gan', 'mi_or_ac', 'hcmi_2', 'g_total', 'd_total']
    assert rows[0]['hcmi_2'] == '' and rows[-1]['hcmi_2'] != ''
    assert len(list(tmp_path.glob('checkpoint_*.dtlc'))) == 9
    checkpoint = load_checkpoint(tmp_path / 'final.dtlc')
    assert checkpoint.iteration == 30
    assert checkpoint.meta['input_scale'] == 0.25


def test_same_seed_replays_the_same_run():
    first = Trainer(sim_config(iterations=15, seed=3), progress=False).run()
    second = Trainer(sim_config(iterations=15, seed=3), progress=False).run()
    for a, b in zip(first.models.graphs(), second.models.graphs()):
        for name, value in a.state().items():
            np.testing.assert_array_equal(b.state()[name], value)


def test_non_finite_loss_dumps_diagnostics(tmp_path, monkeypatch):
    trainer = Trainer(sim_config(iterations=10), tmp_path, progress=False)
    real_step = trainer.step

    def failing_step(iteration):
        if iteration == 4:
            raise NonFiniteError('gan', "Loss term 'gan' is not finite")
        return real_step(iteration)

    monkeypatch.setattr(trainer, 'step', failing_step)
    with pytest.raises(NonFiniteError):
        trainer.run()
    assert (tmp_path / 'abort.dtlc').is_file()
    diagnostics = json.loads((tmp_path / 'abort.json').read_text())
    assert diagnostics['iteration'] == 4
    assert diagnostics['error']['code'] == 'NON_FINITE'
    assert len(read_csv(tmp_path / 'metrics.csv')) == 4


def test_invalid_config_lists_every_field():
    with pytest.raises(ValidationError) as excinfo:
        sim_config(batch_size=0, lr_d=-1.0, trade_offs=(1.0,))
    assert {'train.batch_size', 'train.lr_d', 'train.lambda'} <= set(excinfo.value.field_errors)


def test_mnist_subset_training_smoke(tmp_path):
    rng = np.random.default_rng(0)
    images = (rng.integers(0, 256, size=(12, 1, 28, 28)) / 255.0).astype(np.float32)
    labels = np.array([4, 5, 7] * 4)
    save_mnist(tmp_path / 'images.idx', tmp_path / 'labels.idx', MnistSet(images, labels))
    tree = TreeSpec.from_branching([2, 2])
    config = TrainConfig(
        tree=tree, schedule=ScheduleSpec.default('unsupervised', 2, 1, 3), dim_z=8, batch_size=4, iterations=3,
        lr_d=0.0002, lr_g=0.001, beta1=0.5, trade_offs=(0.1, 0.1), seed=0, arch='mnist_conv',
        data=DataConfig(dataset='mnist', images=str(tmp_path / 'images.idx'), labels=str(tmp_path / 'labels.idx'),
                        keep_digits=(4, 5)),
    )
    result = train(config, tmp_path / 'run', progress=False)
    assert result.iteration == 3
    assert len(read_csv(result.metrics_path)) == 3


def test_sampling_is_deterministic_for_fixed_noise():
    models = build_models('sim_mlp', TreeSpec.from_branching([3, 2]), dim_z=4, seed=0)
    assignment = assignment_from_paths(models.tree, np.array([[1, 0], [1, 0]]))
    noise = np.full((1, 4), 0.3)
    out = sample_images(models, assignment, noise=noise)
    np.testing.assert_array_equal(out[0], out[1])
    np.testing.assert_array_equal(out, sample_images(models, assignment, noise=noise))


def test_sampling_grid_covers_every_path():
    models = build_models('sim_mlp', TreeSpec.from_branching([3, 2]), dim_z=4, seed=0)
    assert sample_images(models, code_grid(models.tree), rng=0).shape == (6, 2)


def test_sampling_rejects_foreign_tree():
    models = build_models('sim_mlp', TreeSpec.from_branching([3, 2]), dim_z=4, seed=0)
    other = apply_mask(sample_raw(TreeSpec.from_branching([2, 2]), rng=0))
    with pytest.raises(CheckpointError):
        sample_images(models, other, rng=0)


def test_objective_gradients_on_sim_mlp():
    result = objective_gradient_check('sim_mlp', seed=1)
    assert result.checked_entries > 0
    assert result.max_relative_error < 1e-4


def test_objective_gradients_on_mnist_conv():
    result = objective_gradient_check('mnist_conv', seed=1, max_entries=3)
    assert result.checked_entries > 0
    assert result.max_relative_error < 1e-4


def test_objective_gradients_with_auxiliary_classifier_root():
    tree = TreeSpec.from_branching([3, 2], supervised_root=True)
    result = objective_gradient_check('sim_mlp', tree, seed=2)
    assert result.checked_entries > 0
    assert result.max_relative_error < 1e-4


def test_flat_independent_codes_train():
    tree = TreeSpec.from_branching([10], root_codes=2)
    config = sim_config(branching=(10,), iterations=6, base=1, tree=tree,
                        schedule=ScheduleSpec.default(CurriculumMode.UNSUPERVISED, 1, 1, 6))
    result = Trainer(config, progress=False).run(keep_reports=True)
    assert result.iteration == 6
    assert all(np.isfinite(report.root_term) for report in result.reports)

#!/usr/bin/env python3
"""
Config tests
Shipped presets, schema validation and command-line / environment overrides
"""

import pytest

from config import ConfigFile, build_run_config, load_run_config, load_sim2d_spec, presets
from datasets import Sim2DSpec
from schedule import CurriculumMode
from standardization_utils import ValidationError

MINIMAL = """
[tree]
k = [3, 2]

[train]
iterations = 40
"""


@pytest.mark.parametrize('name', sorted(presets))
def test_presets_load(name):
    run = load_run_config(name)
    assert run.train.tree.depth == len(run.train.trade_offs)
    assert run.train.schedule.total_iterations == run.train.iterations


def test_sim2d_preset_matches_ring_experiment():
    run = load_run_config('sim2d')
    assert run.train.tree.branching == (10, 2)
    assert run.train.schedule.activation_iterations == (0, 20000)
    assert run.train.data.sim == Sim2DSpec()
    assert run.metrics.coverage_threshold == 0.3


def test_mnist_preset_filters_digits():
    run = load_run_config('mnist45')
    assert run.train.data.keep_digits == (4, 5)
    assert run.train.trade_offs == (0.1, 0.1)
    assert run.metrics.ssim.window == 8


def test_defaults_fill_missing_keys():
    run = build_run_config(ConfigFile.parse(MINIMAL))
    assert run.train.dim_z == 64
    assert run.train.trade_offs == (1.0, 1.0)
    assert run.train.schedule.activation_iterations == (0, 2000)
    assert run.train.checkpoint_every is None


def test_every_schema_error_is_reported_at_once():
    text = MINIMAL.replace("iterations = 40", "iterations = \"long\"\nbatch_size = 1.5") + "\n[net]\ndim_z = \"wide\"\n"
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(text))
    assert {'train.iterations', 'train.batch_size', 'net.dim_z'} <= set(excinfo.value.field_errors)


def test_every_bad_choice_is_reported_at_once():
    text = MINIMAL + "\n[net]\narch = resnet\n\n[curriculum]\nmode = sideways\nvariant = half\n"
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(text))
    assert {'net.arch', 'curriculum.mode', 'curriculum.variant'} <= set(excinfo.value.field_errors)


def test_missing_required_keys():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse('[net]\ndim_z = 4\n'))
    assert {'tree.k', 'train.iterations'} <= set(excinfo.value.field_errors)


def test_unknown_section_and_key():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(MINIMAL + '\n[extras]\nx = 1\n[net]\nwidth = 3\n'))
    assert {'extras', 'net.width'} <= set(excinfo.value.field_errors)


def test_supervised_flag_must_follow_mode():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(MINIMAL + '\n[curriculum]\nmode = weakly_supervised\n'))
    assert 'tree.supervised_root' in excinfo.value.field_errors


def test_weakly_supervised_schedule():
    text = MINIMAL.replace('k = [3, 2]', 'k = [3, 2, 2]\nsupervised_root = true') + '\n[curriculum]\nmode = weakly_supervised\nbase = 5\n'
    run = build_run_config(ConfigFile.parse(text))
    assert run.train.schedule.mode == CurriculumMode.WEAKLY_SUPERVISED
    assert run.train.schedule.activation_iterations == (0, 0, 10)


def test_explicit_activation_list():
    run = build_run_config(ConfigFile.parse(MINIMAL + '\n[curriculum]\nactivation = [0, 7]\n'))
    assert run.train.schedule.activation_iterations == (0, 7)


def test_lambda_length_must_match_depth():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(MINIMAL.replace('iterations = 40', 'iterations = 40\nlambda = [1.0]')))
    assert 'train.lambda' in excinfo.value.field_errors


def test_overrides_win_over_file(tmp_path):
    path = tmp_path / 'run.cfg'
    path.write_text(MINIMAL)
    run = load_run_config(path, {'curriculum.variant': 'none', 'data.images': None})
    assert run.train.schedule.activation_iterations == (0, 0)
    assert run.train.data.images is None


def test_missing_file_names_the_option(tmp_path):
    with pytest.raises(ValidationError) as excinfo:
        load_run_config(tmp_path / 'absent.cfg')
    assert '--config' in excinfo.value.field_errors


def test_environment_seed_overrides_file(monkeypatch):
    monkeypatch.setenv('DTLC_SEED', '99')
    assert build_run_config(ConfigFile.parse(MINIMAL)).train.seed == 99
    monkeypatch.setenv('DTLC_SEED', 'abc')
    with pytest.raises(ValidationError):
        build_run_config(ConfigFile.parse(MINIMAL))


def test_sim2d_spec_from_config(tmp_path):
    path = tmp_path / 'ring.cfg'
    path.write_text('[data]\nn_global = 4\nnoise_std = 0.05\n')
    assert load_sim2d_spec(path) == Sim2DSpec(n_global=4, noise_std=0.05)
    assert load_sim2d_spec() == Sim2DSpec()


def test_tree_section_with_depth_and_supervised_root_keys():
    text = '[tree]\ndepth = 2\nk = 4,3\nleaf_kind = discrete\nsupervised_root = false\n\n[train]\niterations = 40\n'
    run = build_run_config(ConfigFile.parse(text))
    assert run.train.tree.depth == 2
    assert run.train.tree.branching == (4, 3)
    assert not run.train.tree.supervised_root


def test_depth_must_match_branching():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(MINIMAL.replace('k = [3, 2]', 'depth = 3\nk = [3, 2]')))
    assert 'tree.depth' in excinfo.value.field_errors


def test_two_code_baseline_preset():
    tree = load_run_config('sim2d_infogan2x10').train.tree
    assert tree.root_codes == 2
    assert tree.node_counts == (2,)
    assert tree.leaf_dim == load_run_config('sim2d_infogan').train.tree.leaf_dim == 20


def test_independent_root_codes_need_a_flat_tree():
    with pytest.raises(ValidationError) as excinfo:
        build_run_config(ConfigFile.parse(MINIMAL.replace('k = [3, 2]', 'k = [3, 2]\nroot_codes = 2')))
    assert 'tree.root_codes' in excinfo.value.field_errors

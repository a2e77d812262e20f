#!/usr/bin/env python3
"""
Decision-tree latent controller tests
Sampling marginals, parent-gated masking, curriculum fill and path recovery
"""

import itertools

import numpy as np
import pytest

from dtlc import (CodeAssignment, LeafKind, TreeSpec, active_path, apply_mask, assignment_from_paths, code_grid, curriculum_fill,
                  enumerate_paths, mask_layers, path_indices, sample_latent, sample_raw, with_root_labels)
from standardization_utils import ConfigurationError, ValidationError


def hard_assignment(spec, layers):
    """Build a raw assignment from per-layer lists of node codes (single sample)"""
    raw = [np.asarray(codes, dtype=np.float64)[None] for codes in layers]
    return CodeAssignment(spec, raw)


def test_tree_node_counts_and_leaf_dim():
    spec = TreeSpec.from_branching([10, 3, 3, 3])
    assert spec.node_counts == (1, 10, 30, 90)
    assert spec.leaf_dim == 270
    assert spec.layer_width(2) == 30


def test_tree_rejects_inconsistent_branching():
    with pytest.raises(ValidationError) as excinfo:
        TreeSpec(2, (10,))
    assert 'tree.k' in excinfo.value.field_errors


def test_single_layer_sample_is_one_hot():
    spec = TreeSpec.from_branching([10])
    assignment = sample_raw(spec, rng=0)
    root = assignment.raw[0]
    assert root.shape == (1, 1, 10)
    assert root.sum() == 1.0
    assert set(np.unique(root)) <= {0.0, 1.0}


def test_second_layer_holds_twenty_entries():
    spec = TreeSpec.from_branching([10, 2])
    assignment = sample_raw(spec, rng=1)
    assert assignment.raw[1].shape == (1, 10, 2)
    assert assignment.raw[1].size == 20
    assert np.all(assignment.raw[1].sum(axis=-1) == 1.0)


def test_root_marginal_is_uniform():
    spec = TreeSpec.from_branching([10])
    assignment = sample_raw(spec, rng=np.random.default_rng(42), batch_size=100_000)
    frequencies = assignment.raw[0][:, 0, :].mean(axis=0)
    assert np.all(np.abs(frequencies - 0.1) <= 0.01)


def test_continuous_leaves_are_uniform_in_range():
    spec = TreeSpec.from_branching([4, 2], leaf_kind=LeafKind.CONTINUOUS)
    leaves = sample_raw(spec, rng=3, batch_size=500).raw[1]
    assert leaves.min() >= -1.0 and leaves.max() <= 1.0
    assert abs(leaves.mean()) < 0.05


def test_fixed_root_requires_supervised_tree():
    spec = TreeSpec.from_branching([2, 2])
    with pytest.raises(ConfigurationError):
        sample_raw(spec, fixed_root=np.array([1.0, 0.0]))


def test_fixed_root_must_be_one_hot():
    spec = TreeSpec.from_branching([2, 2], supervised_root=True)
    with pytest.raises(ValidationError):
        sample_raw(spec, fixed_root=np.array([0.5, 0.5]))


def test_fixed_root_replaces_sampled_root():
    spec = TreeSpec.from_branching([3, 2], supervised_root=True)
    roots = with_root_labels(spec, [2, 0, 1, 2])
    assignment = sample_raw(spec, fixed_root=roots, rng=0)
    assert assignment.batch_size == 4
    np.testing.assert_array_equal(assignment.root(), roots)


def test_mask_selects_single_leaf_block():
    spec = TreeSpec.from_branching([2, 2])
    masked = apply_mask(hard_assignment(spec, [[[1, 0]], [[0, 1], [1, 0]]]))
    np.testing.assert_array_equal(masked.flattened_leaf[0], [0, 1, 0, 0])
    np.testing.assert_array_equal(masked.masked[0], masked.raw[0])


def test_exactly_one_leaf_block_for_every_discrete_assignment():
    spec = TreeSpec.from_branching([2, 2, 2])
    one_hots = [np.eye(2)[0], np.eye(2)[1]]
    checked = 0
    for root in one_hots:
        for second in itertools.product(one_hots, repeat=2):
            for third in itertools.product(one_hots, repeat=4):
                leaf = apply_mask(hard_assignment(spec, [[root], list(second), list(third)])).flattened_leaf[0]
                blocks = leaf.reshape(4, 2)
                assert (blocks.sum(axis=1) > 0).sum() == 1
                checked += 1
    assert checked == 2 * 2 ** 2 * 2 ** 4


def test_random_trees_keep_one_leaf_block_and_uniform_leaf_marginals():
    rng = np.random.default_rng(11)
    n = 10_000
    for _ in range(200):
        spec = TreeSpec.from_branching(rng.integers(1, 5, size=rng.integers(1, 5)).tolist())
        leaf = apply_mask(sample_raw(spec, rng=rng, batch_size=n)).flattened_leaf
        blocks = leaf.reshape(n, spec.node_counts[-1], spec.branching[-1])
        assert np.all((blocks.sum(axis=2) > 0).sum(axis=1) == 1)
        p = 1.0 / spec.leaf_dim
        standard_error = np.sqrt(p * (1 - p) / n)
        assert np.all(np.abs(leaf.mean(axis=0) - p) <= 5 * standard_error + 1e-12)


def test_masked_entries_have_live_parents():
    spec = TreeSpec.from_branching([3, 2, 2])
    assignment = apply_mask(sample_raw(spec, rng=5, batch_size=50))
    for layer in range(2, spec.depth + 1):
        child = assignment.masked[layer - 1]
        gates = assignment.gates(layer)
        live = child.sum(axis=-1) > 0
        assert np.all(gates[live] > 0)


def test_continuous_leaf_under_closed_parent_is_zero():
    spec = TreeSpec.from_branching([2, 3], leaf_kind=LeafKind.CONTINUOUS)
    assignment = hard_assignment(spec, [[[1, 0]], [[0.5, -0.2, 0.9], [0.7, 0.1, -0.4]]])
    masked = apply_mask(assignment)
    np.testing.assert_array_equal(masked.masked[1][0, 1], [0.0, 0.0, 0.0])
    np.testing.assert_allclose(masked.masked[1][0, 0], [0.5, -0.2, 0.9])


def test_curriculum_fill_averages_deeper_layers():
    spec = TreeSpec.from_branching([2, 2, 2])
    assignment = sample_raw(spec, rng=0)
    assignment.raw[0] = np.array([[[1.0, 0.0]]])
    filled = curriculum_fill(spec, assignment, 1)
    leaf = filled.flattened_leaf[0]
    np.testing.assert_allclose(leaf[:4], 0.25)
    np.testing.assert_array_equal(leaf[4:], 0.0)


def test_curriculum_fill_at_full_depth_matches_mask():
    spec = TreeSpec.from_branching([3, 2])
    assignment = sample_raw(spec, rng=9, batch_size=8)
    np.testing.assert_array_equal(curriculum_fill(spec, assignment, 2).flattened_leaf,
                                  apply_mask(assignment).flattened_leaf)


def test_curriculum_fill_continuous_leaves_are_zero():
    spec = TreeSpec.from_branching([10, 2], leaf_kind=LeafKind.CONTINUOUS)
    filled = curriculum_fill(spec, sample_raw(spec, rng=2), 1)
    np.testing.assert_array_equal(filled.flattened_leaf, 0.0)


def test_curriculum_fill_rejects_bad_layer():
    spec = TreeSpec.from_branching([2, 2])
    with pytest.raises(ValidationError):
        curriculum_fill(spec, sample_raw(spec, rng=0), 3)


def test_active_path_inverts_masking():
    spec = TreeSpec.from_branching([2, 2])
    masked = apply_mask(hard_assignment(spec, [[[1, 0]], [[0, 1], [1, 0]]]))
    path = active_path(masked)
    assert path.complete
    assert path.steps == [(1, 1, 1), (2, 1, 2)]


def test_single_layer_path_is_root_argmax():
    spec = TreeSpec.from_branching([10])
    assignment = apply_mask(sample_raw(spec, rng=4))
    assert active_path(assignment).steps[0][2] - 1 == int(assignment.raw[0][0, 0].argmax())


def test_paths_reproduce_leaf_codes():
    spec = TreeSpec.from_branching([3, 2, 2])
    assignment = apply_mask(sample_raw(spec, rng=np.random.default_rng(11), batch_size=10_000))
    rebuilt = assignment_from_paths(spec, path_indices(assignment))
    np.testing.assert_array_equal(rebuilt.flattened_leaf, assignment.flattened_leaf)


def test_path_truncates_under_curriculum_fill():
    spec = TreeSpec.from_branching([2, 2, 2])
    filled = curriculum_fill(spec, sample_raw(spec, rng=0), 1)
    path = active_path(filled)
    assert not path.complete
    assert len(path.steps) == 1


def test_code_grid_enumerates_every_path_once():
    spec = TreeSpec.from_branching([10, 3, 3, 3])
    grid = code_grid(spec)
    paths = path_indices(grid)
    assert grid.batch_size == 270
    assert len({tuple(p) for p in paths}) == 270
    np.testing.assert_array_equal(paths, enumerate_paths(spec))


def test_code_grid_sweeps_continuous_leaves():
    spec = TreeSpec.from_branching([2, 2], leaf_kind=LeafKind.CONTINUOUS)
    grid = code_grid(spec, n_steps=3)
    assert grid.batch_size == 2 * 2 * 3
    assert grid.flattened_leaf.min() == -1.0 and grid.flattened_leaf.max() == 1.0


def test_soft_masking_of_uniform_probabilities():
    masked = mask_layers([np.full((1, 1, 2), 0.5), np.full((1, 2, 2), 0.5)])
    np.testing.assert_allclose(masked[1].reshape(-1), [0.25, 0.25, 0.25, 0.25])


def test_sample_latent_shapes():
    spec = TreeSpec.from_branching([2, 2])
    latent = sample_latent(spec, dim_z=5, batch_size=7, rng=0, active_layer=1)
    assert latent.noise.shape == (7, 5)
    assert latent.generator_input().shape == (7, 9)
    assert latent.assignment.active_layer == 1


def test_independent_root_codes_are_flat_and_ungated():
    spec = TreeSpec.from_branching([10], root_codes=2)
    assert spec.node_counts == (2,)
    assert spec.leaf_dim == 20
    assignment = apply_mask(sample_raw(spec, rng=0, batch_size=500))
    assert assignment.flattened_leaf.shape == (500, 20)
    np.testing.assert_array_equal(assignment.flattened_leaf.sum(axis=1), 2.0)
    picks = path_indices(assignment)
    assert picks.shape == (500, 2)
    assert len({tuple(p) for p in picks}) > 50


def test_independent_root_codes_grid_and_path():
    spec = TreeSpec.from_branching([10], root_codes=2)
    grid = code_grid(spec)
    assert grid.batch_size == 100
    np.testing.assert_array_equal(path_indices(grid), enumerate_paths(spec))
    path = active_path(grid, 23)
    assert path.complete
    assert path.steps == [(1, 1, 3), (1, 2, 4)]


def test_independent_root_codes_need_a_flat_discrete_tree():
    for build in (lambda: TreeSpec.from_branching([10, 2], root_codes=2),
                  lambda: TreeSpec.from_branching([10], leaf_kind=LeafKind.CONTINUOUS, root_codes=2),
                  lambda: TreeSpec.from_branching([10], supervised_root=True, root_codes=2),
                  lambda: TreeSpec.from_branching([10], root_codes=0)):
        with pytest.raises(ValidationError) as excinfo:
            build()
        assert 'tree.root_codes' in excinfo.value.field_errors


def test_code_grid_of_a_single_continuous_layer():
    spec = TreeSpec.from_branching([3], leaf_kind=LeafKind.CONTINUOUS)
    grid = code_grid(spec, n_steps=5)
    assert grid.batch_size == 15
    assert path_indices(grid).shape == (15, 0)


def test_masking_is_idempotent():
    rng = np.random.default_rng(21)
    for branching in ([2, 3], [3, 2, 2], [4, 1, 3]):
        spec = TreeSpec.from_branching(branching)
        once = apply_mask(sample_raw(spec, rng=rng, batch_size=64))
        twice = apply_mask(once)
        for first, second in zip(once.masked, twice.masked):
            np.testing.assert_array_equal(first, second)
        for first, regated in zip(once.masked, mask_layers(once.masked)):
            np.testing.assert_array_equal(first, regated)

#!/usr/bin/env python3
"""
Metric tests
SSIM, inter-category diversity and mode coverage on the simulated ring
"""

import numpy as np
import pytest

from architectures import build_models
from checkpoint import Checkpoint
from datasets import Sim2DSpec, sample_sim2d
from dtlc import LeafKind, TreeSpec
from export_utils import read_csv
from metrics import (CoverageReport, SsimParams, evaluate_coverage, inter_category_diversity, mode_coverage, sample_points,
                     ssim, write_coverage_report)
from standardization_utils import ConfigurationError, ValidationError


def test_ssim_of_identical_images_is_one():
    rng = np.random.default_rng(0)
    for _ in range(100):
        image = rng.uniform(size=(1, 28, 28))
        assert ssim(image, image) == pytest.approx(1.0, abs=1e-9)


def test_ssim_is_symmetric():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(1, 16, 16)), rng.uniform(size=(1, 16, 16))
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_reduce_to_luminance_term():
    c1 = SsimParams().c1
    assert ssim(np.zeros((10, 10)), np.ones((10, 10))) == pytest.approx(c1 / (1 + c1), rel=1e-9)


def test_ssim_gaussian_weighting_agrees_on_identical_images():
    image = np.random.default_rng(2).uniform(size=(12, 12))
    assert ssim(image, image, SsimParams(window=7, weighting='gaussian')) == pytest.approx(1.0, abs=1e-12)


def test_ssim_rejects_small_or_mismatched_images():
    with pytest.raises(ValidationError):
        ssim(np.zeros((4, 4)), np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        ssim(np.zeros((10, 10)), np.zeros((10, 12)))
    with pytest.raises(ValidationError):
        SsimParams(window=1)


@pytest.fixture(scope='module')
def conv_models():
    return build_models('mnist_conv', TreeSpec.from_branching([2, 2]), dim_z=4, seed=0)


def test_identical_code_control_scores_one(conv_models):
    assert inter_category_diversity(conv_models, 3, n_pairs=3, rng=0) == pytest.approx(1.0, abs=1e-9)


def test_diversity_at_root_is_a_valid_similarity(conv_models):
    value = inter_category_diversity(conv_models, 1, n_pairs=3, rng=0, threads=2)
    assert np.isfinite(value)
    assert -1.0 <= value <= 1.0


def test_diversity_rejects_layer_out_of_range(conv_models):
    with pytest.raises(ValidationError):
        inter_category_diversity(conv_models, 4, n_pairs=1)


def test_diversity_needs_image_generator():
    models = build_models('sim_mlp', TreeSpec.from_branching([2, 2]), dim_z=4, seed=0)
    with pytest.raises(ConfigurationError):
        inter_category_diversity(models, 1, n_pairs=1)


@pytest.fixture
def ring_sample():
    return sample_sim2d(Sim2DSpec(), 5000, np.random.default_rng(4))


def test_true_cells_cover_every_mode(ring_sample):
    points, global_ids, local_ids = ring_sample
    report = mode_coverage(points, global_ids, Sim2DSpec(), local_ids, n_categories=10)
    assert report.n_covered == 10
    assert report.coverage == 1.0
    assert report.purity > 0.99
    assert report.split_consistent == 10


def test_collapsed_samples_cover_nothing():
    categories = np.random.default_rng(5).integers(0, 10, size=1000)
    report = mode_coverage(np.zeros((1000, 2)), categories, Sim2DSpec(), n_categories=10)
    assert report.n_covered == 0
    assert report.split_consistent == 0


def test_categories_unrelated_to_position_give_chance_purity():
    rng = np.random.default_rng(6)
    radius = 2.5 * np.sqrt(rng.uniform(size=20000))
    angle = rng.uniform(0, 2 * np.pi, size=20000)
    points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    report = mode_coverage(points, rng.integers(0, 10, size=20000), Sim2DSpec(), n_categories=10)
    assert report.purity == pytest.approx(0.1, abs=0.02)


def test_empty_category_is_left_blank(ring_sample):
    points, global_ids, local_ids = ring_sample
    keep = global_ids != 3
    report = mode_coverage(points[keep], global_ids[keep], Sim2DSpec(), local_ids[keep], n_categories=10)
    assert report.n_covered == 9
    row = report.rows()[3]
    assert row[1] == 0 and row[2] == '' and row[4] == ''


def test_untrained_generator_coverage_report(tmp_path):
    models = build_models('sim_mlp', TreeSpec.from_branching([10, 2]), dim_z=4, seed=0)
    checkpoint = Checkpoint(models.tree, 0, {'noise_prior': 'uniform', 'input_scale': 0.25}, models)
    report, points, categories = evaluate_coverage(checkpoint, Sim2DSpec(), n_samples=500, rng=0)
    assert isinstance(report, CoverageReport)
    assert report.n_modes == 10
    assert points.shape == (500, 2)
    csv_path, svg_path = write_coverage_report(tmp_path, report, Sim2DSpec(), points, categories)
    assert len(read_csv(csv_path)) == 10
    assert svg_path.read_text().startswith('<svg')


def test_coverage_needs_a_discrete_root():
    tree = TreeSpec.from_branching([2], leaf_kind=LeafKind.CONTINUOUS)
    models = build_models('sim_mlp', tree, dim_z=4, seed=0)
    checkpoint = Checkpoint(tree, 0, {'noise_prior': 'uniform', 'input_scale': 0.25}, models)
    with pytest.raises(ConfigurationError):
        sample_points(checkpoint, 10, rng=0)


def test_independent_root_codes_use_the_first_code_as_category():
    tree = TreeSpec.from_branching([10], root_codes=2)
    models = build_models('sim_mlp', tree, dim_z=4, seed=0)
    checkpoint = Checkpoint(tree, 0, {'noise_prior': 'uniform', 'input_scale': 0.25}, models)
    points, categories, local_ids = sample_points(checkpoint, 300, rng=0)
    assert points.shape == (300, 2)
    assert categories.min() >= 0 and categories.max() < 10
    assert local_ids is None


def test_coverage_ignores_point_order(ring_sample):
    points, global_ids, local_ids = ring_sample
    order = np.random.default_rng(7).permutation(len(points))
    first = mode_coverage(points, global_ids, Sim2DSpec(), local_ids, n_categories=10)
    second = mode_coverage(points[order], global_ids[order], Sim2DSpec(), local_ids[order], n_categories=10)
    assert (first.n_covered, first.split_consistent, first.matches) == (second.n_covered, second.split_consistent,
                                                                         second.matches)
    assert first.purity == second.purity
    np.testing.assert_allclose(first.centroids, second.centroids, atol=1e-12)


def test_points_at_cell_means_cover_every_mode():
    truth = Sim2DSpec()
    cells = truth.cell_means()
    points = cells.reshape(-1, 2)
    global_ids = np.repeat(np.arange(truth.n_global), 2)
    local_ids = np.tile([0, 1], truth.n_global)
    report = mode_coverage(points, global_ids, truth, local_ids, n_categories=truth.n_global)
    assert report.n_covered == 10
    assert report.purity == 1.0
    assert report.split_consistent == 10
    assert all(report.matches[category] == category for category in range(10))

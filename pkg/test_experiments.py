#!/usr/bin/env python3
"""
Desk-scale experiments
Full training runs on the simulated ring and the MNIST 4/5 subset. They take minutes
to hours on a CPU and only run with DTLC_RUN_SLOW=1.
"""

import os
from dataclasses import replace
from pathlib import Path

import pytest

from checkpoint import load_checkpoint
from config import load_run_config
from metrics import evaluate_coverage, inter_category_diversity
from schedule import Variant, ablate
from trainer import train

pytestmark = [
    pytest.mark.slow,
    pytest.mark.skipif(os.environ.get('DTLC_RUN_SLOW') != '1', reason='set DTLC_RUN_SLOW=1 for full training runs'),
]

SEEDS = (0, 1, 2)


def ring_report(run, seed, out_dir, variant=Variant.FULL):
    config = replace(run.train, seed=seed, schedule=ablate(run.train.schedule, variant))
    result = train(config, out_dir, progress=False)
    checkpoint = load_checkpoint(result.checkpoint_path)
    report, _, _ = evaluate_coverage(checkpoint, run.train.data.sim, run.metrics.coverage_samples, rng=seed,
                                     threshold=run.metrics.coverage_threshold)
    return report


def test_ring_modes_are_recovered_with_local_splits(tmp_path):
    run = load_run_config('sim2d')
    outcomes = []
    for seed in SEEDS:
        report = ring_report(run, seed, tmp_path / f'seed_{seed}')
        outcomes.append((report.n_covered, report.purity, report.split_consistent))
        if report.n_covered >= 8 and report.purity >= 0.8 and report.split_consistent >= 6:
            return
    pytest.fail(f'no seed reached coverage >= 8, purity >= 0.8, splits >= 6: {outcomes}')


def test_curriculum_covers_at_least_as_many_modes_as_no_curriculum(tmp_path):
    run = load_run_config('sim2d')
    wins = 0
    for seed in SEEDS:
        full = ring_report(run, seed, tmp_path / f'full_{seed}')
        none = ring_report(run, seed, tmp_path / f'none_{seed}', Variant.NONE)
        wins += full.n_covered >= none.n_covered
    assert wins >= 2


def test_flat_baselines_against_the_hierarchical_controller(tmp_path):
    hierarchical = load_run_config('sim2d')
    baselines = {name: load_run_config(name) for name in ('sim2d_infogan', 'sim2d_infogan2x10')}
    assert baselines['sim2d_infogan2x10'].train.tree.leaf_dim == hierarchical.train.tree.leaf_dim == 20
    wins = 0
    for seed in SEEDS:
        full = ring_report(hierarchical, seed, tmp_path / f'dtlc_{seed}')
        reports = {name: ring_report(run, seed, tmp_path / f'{name}_{seed}') for name, run in baselines.items()}
        for report in reports.values():
            assert report.split_consistent == 0
        wins += full.purity >= reports['sim2d_infogan2x10'].purity
    assert wins >= 2


def test_mnist_diversity_grows_toward_the_root(tmp_path):
    run = load_run_config('mnist45')
    if not (Path(run.train.data.images).is_file() and Path(run.train.data.labels).is_file()):
        pytest.skip('MNIST training files are not present under data/')
    outcomes = []
    for seed in SEEDS:
        result = train(replace(run.train, seed=seed), tmp_path / f'seed_{seed}', progress=False)
        checkpoint = load_checkpoint(result.checkpoint_path)
        root = inter_category_diversity(checkpoint, 1, run.metrics.diversity_pairs, rng=seed, params=run.metrics.ssim)
        second = inter_category_diversity(checkpoint, 2, run.metrics.diversity_pairs, rng=seed, params=run.metrics.ssim)
        outcomes.append((root, second))
        if root < second:
            return
    pytest.fail(f'layer 1 SSIM never fell below layer 2 SSIM: {outcomes}')

import math
from pathlib import Path

import click
import numpy as np

from config import Config, MetricsConfig, load_run_config, load_sim2d_spec
from checkpoint import load_checkpoint
from datasets import IDX_IMAGES_MAGIC, cell_counts, load_mnist, read_idx, sample_sim2d, save_sim2d_csv
from dtlc import TreeSpec, apply_mask, code_grid, path_indices, sample_noise, sample_raw
from export_utils import tile_images, write_csv, write_pgm, write_svg_scatter
from metrics import SsimParams, evaluate_coverage, inter_category_diversity, write_coverage_report
from retrieval import build_index, load_index, retrieve, save_index, write_results
from schedule import Variant
from standardization_utils import standardized_command
from trainer import objective_gradient_check, sample_images, train

GRAD_TOLERANCE = 1e-4


def _seed(flag_value: int) -> int:
    override = Config.seed_override()
    return flag_value if override is None else override


@click.command('gen-data')
@click.option('--spec', 'spec_path', default=None, help='Config file or preset whose [data] section sets the geometry')
@click.option('--n', 'count', default=10000, show_default=True, type=click.IntRange(min=0), help='Number of points')
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--out', required=True, type=click.Path(dir_okay=False), help='Destination CSV')
@standardized_command
def gen_data(spec_path, count, seed, out):
    """Generate simulated hierarchical 2D data as CSV"""
    spec = load_sim2d_spec(spec_path)
    points, global_ids, local_ids = sample_sim2d(spec, count, np.random.default_rng(_seed(seed)))
    path = save_sim2d_csv(out, points, global_ids, local_ids)
    counts = cell_counts(spec, global_ids, local_ids)
    cells = ' '.join(f'{g}/{l}={counts[g, l]}' for g in range(spec.n_global) for l in range(2))
    click.echo(f'Wrote {count} points to {path}; cells {cells}')


@click.command('train')
@click.option('--config', 'config_path', required=True, help='Config file or preset name (sim2d, mnist45, sim2d_infogan)')
@click.option('--out-dir', required=True, type=click.Path(file_okay=False))
@click.option('--images', default=None, help='MNIST image IDX file, overrides data.images')
@click.option('--labels', default=None, help='MNIST label IDX file, overrides data.labels')
@click.option('--variant', type=click.Choice([v.value for v in Variant]), default=None, help='Curriculum ablation')
@click.option('--quiet', is_flag=True, help='No progress bar')
@standardized_command
def train_command(config_path, out_dir, images, labels, variant, quiet):
    """Train a model from a run config"""
    run = load_run_config(config_path, overrides={
        'data.images': images,
        'data.labels': labels,
        'curriculum.variant': variant,
    })
    result = train(run.train, out_dir, progress=not quiet)
    click.echo(f'Trained {result.iteration} iterations; metrics {result.metrics_path}; '
               f'checkpoint {result.checkpoint_path}')


@click.command('sample')
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--grid', type=click.Choice(['paths', 'random']), default='paths', show_default=True,
              help='Every code path in flattening order, or randomly drawn codes')
@click.option('--n', 'count', default=64, show_default=True, type=click.IntRange(min=1), help='Codes for --grid random')
@click.option('--steps', default=5, show_default=True, type=click.IntRange(min=2), help='Values per continuous dimension')
@click.option('--per-code', default=200, show_default=True, type=click.IntRange(min=1),
              help='Points per code for 2D checkpoints')
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--out-dir', required=True, type=click.Path(file_okay=False))
@standardized_command
def sample_command(checkpoint_path, grid, count, steps, per_code, seed, out_dir):
    """Generate samples for a grid of codes"""
    checkpoint = load_checkpoint(checkpoint_path)
    tree = checkpoint.tree
    rng = np.random.default_rng(_seed(seed))
    out_dir = Path(out_dir)
    if grid == 'paths':
        assignment = code_grid(tree, steps)
    else:
        assignment = apply_mask(sample_raw(tree, rng=rng, batch_size=count))

    if checkpoint.models.is_image:
        images = sample_images(checkpoint, assignment, rng=rng)
        for index, image in enumerate(images):
            write_pgm(out_dir / f'sample_{index:04d}.pgm', image)
        batch = len(images)
        if grid == 'paths' and batch % tree.branching[0] == 0:
            columns = batch // tree.branching[0]
        else:
            columns = math.ceil(math.sqrt(batch))
        write_pgm(out_dir / 'grid.pgm', tile_images(images, columns))
        click.echo(f'Wrote {batch} images and grid.pgm to {out_dir}')
        return

    repeated = assignment.take(np.repeat(np.arange(assignment.batch_size), per_code))
    noise = sample_noise(checkpoint.models.dim_z, repeated.batch_size, rng, checkpoint.meta.get('noise_prior', 'uniform'))
    points = sample_images(checkpoint, repeated, noise=noise) / checkpoint.meta.get('input_scale', 1.0)
    paths = path_indices(repeated)
    rows = ([repr(float(x)), repr(float(y)), int(path[0]) if len(path) else '',
             '-'.join(str(int(p)) for p in path)]
            for (x, y), path in zip(points, paths))
    write_csv(out_dir / 'samples.csv', ['x', 'y', 'root', 'path'], rows)
    write_svg_scatter(out_dir / 'samples.svg', points=points, point_categories=paths[:, 0] if paths.shape[1] else None)
    click.echo(f'Wrote {len(points)} points to {out_dir / "samples.csv"} and samples.svg')


@click.command('eval')
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--metric', type=click.Choice(['diversity', 'coverage']), required=True)
@click.option('--layer', type=int, default=None, help='Diversity layer; every layer when omitted')
@click.option('--n-pairs', type=click.IntRange(min=1), default=None, help='Image pairs per diversity layer')
@click.option('--samples', type=click.IntRange(min=1), default=None, help='Generated points for coverage')
@click.option('--config', 'config_path', default=None, help='Run config supplying metric settings and data geometry')
@click.option('--threads', type=click.IntRange(min=1), default=None, help='Parallel SSIM workers')
@click.option('--seed', default=0, show_default=True, type=int)
@click.option('--out-dir', default=None, type=click.Path(file_okay=False), help='Defaults to the checkpoint directory')
@standardized_command
def eval_command(checkpoint_path, metric, layer, n_pairs, samples, config_path, threads, seed, out_dir):
    """Evaluate a checkpoint"""
    checkpoint = load_checkpoint(checkpoint_path)
    out_dir = Path(out_dir) if out_dir else Path(checkpoint_path).parent
    if config_path:
        run = load_run_config(config_path)
        settings, truth = run.metrics, run.train.data.sim
    else:
        settings, truth = MetricsConfig(SsimParams()), load_sim2d_spec()
    rng = np.random.default_rng(_seed(seed))

    if metric == 'diversity':
        layers = [layer] if layer is not None else list(range(1, checkpoint.tree.depth + 1))
        rows = []
        for current in layers:
            value = inter_category_diversity(checkpoint, current, n_pairs or settings.diversity_pairs, rng,
                                             threads=threads or settings.threads, params=settings.ssim,
                                             progress=True)
            rows.append([current, value])
            click.echo(f'layer {current}: mean SSIM {value:.6f}')
        write_csv(out_dir / 'diversity.csv', ['layer', 'mean_ssim'], rows)
        return

    report, points, categories = evaluate_coverage(checkpoint, truth, samples or settings.coverage_samples, rng,
                                                   settings.coverage_threshold)
    csv_path, svg_path = write_coverage_report(out_dir, report, truth, points, categories)
    click.echo(f'coverage {report.n_covered}/{report.n_modes} purity {report.purity:.4f} '
               f'split {report.split_consistent}/{report.n_covered}; wrote {csv_path} and {svg_path}')


@click.command('retrieve')
@click.option('--checkpoint', 'checkpoint_path', required=True, type=click.Path(exists=True, dir_okay=False))
@click.option('--index', 'index_path', required=True, type=click.Path(dir_okay=False), help='Index CSV')
@click.option('--images', default=None, help='IDX images to index; the index CSV is (re)built when given')
@click.option('--labels', default=None, help='IDX labels, used with --keep-digits to filter --images')
@click.option('--keep-digits', default=None, help='Comma-separated digits to keep, e.g. 4,5')
@click.option('--hard', is_flag=True, help='Argmax codes instead of soft probabilities')
@click.option('--query', type=int, default=None, help='Item id of the query within the index')
@click.option('--depth', type=click.IntRange(min=1), default=None, help='Deepest layer compared; defaults to all')
@click.option('--top-n', default=5, show_default=True, type=click.IntRange(min=1))
@click.option('--out', default=None, type=click.Path(dir_okay=False), help='Results CSV')
@standardized_command
def retrieve_command(checkpoint_path, index_path, images, labels, keep_digits, hard, query, depth, top_n, out):
    """Build a code index and/or rank its items against a query"""
    if images is None and query is None:
        raise click.UsageError('Give --images to build an index, --query to search one, or both')
    checkpoint = load_checkpoint(checkpoint_path)
    if images is not None:
        if labels is not None:
            keep = [int(d) for d in keep_digits.split(',')] if keep_digits else None
            data = load_mnist(images, labels, keep).images
        else:
            data = (read_idx(images, IDX_IMAGES_MAGIC).astype(np.float32) / 255.0)[:, None]
        index = build_index(checkpoint, data, hard=hard)
        save_index(index_path, index)
        click.echo(f'Indexed {len(index)} items into {index_path}')
    else:
        index = load_index(index_path)

    if query is not None:
        hits = retrieve(index.item(query), index, depth or index.depth, top_n)
        out = out or str(Path(index_path).with_name('results.csv'))
        write_results(out, hits)
        for hit in hits:
            click.echo(f'{hit.rank}\t{hit.item_id}\t{hit.distance:.6f}')


@click.command('grad-check')
@click.option('--arch', type=click.Choice(['sim_mlp', 'mnist_conv', 'all']), default='all', show_default=True)
@click.option('--max-entries', default=8, show_default=True, type=click.IntRange(min=1),
              help='Sampled entries per parameter tensor')
@click.option('--seed', default=0, show_default=True, type=int)
@standardized_command
def grad_check(arch, max_entries, seed):
    """Finite-difference check of every objective through an architecture"""
    architectures = ['sim_mlp', 'mnist_conv'] if arch == 'all' else [arch]
    failed = False
    for name in architectures:
        for root in ('mi', 'ac'):
            tree = TreeSpec.from_branching((2, 2), supervised_root=root == 'ac')
            result = objective_gradient_check(name, tree, seed=_seed(seed), max_entries=max_entries)
            passed = result.checked_entries > 0 and result.max_relative_error < GRAD_TOLERANCE
            status = 'ok' if passed else 'FAILED'
            failed |= status != 'ok'
            click.echo(f'{name} ({root} root): max relative error {result.max_relative_error:.3e} '
                       f'over {result.checked_entries} entries, {result.skipped_entries} skipped at kinks '
                       f'(worst {result.worst_parameter}) {status}')
    if failed:
        raise SystemExit(1)


def register_commands(cli):
    """Register CLI commands with the group"""
    cli.add_command(gen_data)
    cli.add_command(train_command)
    cli.add_command(sample_command)
    cli.add_command(eval_command)
    cli.add_command(retrieve_command)
    cli.add_command(grad_check)

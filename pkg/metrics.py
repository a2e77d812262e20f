"""
Evaluation Metrics
SSIM, inter-category diversity of generated images, and mode coverage/purity for the
simulated 2D experiment
"""

import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal
from tqdm import tqdm

from architectures import Models
from checkpoint import Checkpoint
from datasets import Sim2DSpec
from dtlc import CodeAssignment, RandomSource, apply_mask, as_generator, path_indices, sample_noise, sample_raw
from export_utils import write_csv, write_svg_scatter
from standardization_utils import ConfigurationError, ValidationError
from trainer import sample_images

logger = logging.getLogger(__name__)

DIVERSITY_BATCH = 256


@dataclass(frozen=True)
class SsimParams:
    window: int = 8
    weighting: str = 'uniform'
    dynamic_range: float = 1.0
    sigma: float = 1.5

    def __post_init__(self):
        errors = {}
        if self.window < 2:
            errors['metrics.ssim_window'] = 'must be >= 2'
        if self.weighting not in ('uniform', 'gaussian'):
            errors['metrics.ssim_weighting'] = 'must be one of uniform, gaussian'
        if self.dynamic_range <= 0:
            errors['metrics.dynamic_range'] = 'must be > 0'
        if errors:
            raise ValidationError('Invalid SSIM parameters', field_errors=errors)

    @property
    def c1(self) -> float:
        return (0.01 * self.dynamic_range) ** 2

    @property
    def c2(self) -> float:
        return (0.03 * self.dynamic_range) ** 2

    def kernel(self) -> np.ndarray:
        if self.weighting == 'uniform':
            weights = np.ones((self.window, self.window))
        else:
            offsets = np.arange(self.window) - (self.window - 1) / 2.0
            profile = np.exp(-(offsets ** 2) / (2.0 * self.sigma ** 2))
            weights = np.outer(profile, profile)
        return weights / weights.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray, params: SsimParams) -> float:
    kernel = params.kernel()

    def local(image):
        return signal.correlate2d(image, kernel, mode='valid')

    mu_a, mu_b = local(a), local(b)
    var_a = local(a * a) - mu_a * mu_a
    var_b = local(b * b) - mu_b * mu_b
    cov = local(a * b) - mu_a * mu_b
    numerator = (2.0 * mu_a * mu_b + params.c1) * (2.0 * cov + params.c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + params.c1) * (var_a + var_b + params.c2)
    return float(np.mean(numerator / denominator))


def ssim(a: np.ndarray, b: np.ndarray, params: Optional[SsimParams] = None) -> float:
    """Mean local SSIM over valid sliding windows; (C, H, W) inputs average the channels"""
    params = params or SsimParams()
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError('SSIM needs equally shaped images', details={'a': a.shape, 'b': b.shape})
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValidationError('SSIM expects (H, W) or (C, H, W) images', details={'shape': a.shape})
    if min(a.shape[1:]) < params.window:
        raise ValidationError('Image is smaller than the SSIM window', details={'shape': a.shape, 'window': params.window})
    return float(np.mean([_ssim_channel(x, y, params) for x, y in zip(a, b)]))


def _resolve_models(source) -> Models:
    return source.models if isinstance(source, Checkpoint) else source


def _partner_assignment(first: CodeAssignment, layer: int, rng: np.random.Generator) -> CodeAssignment:
    """Same codes above layer, freshly drawn codes at layer and below"""
    spec = first.spec
    fresh = sample_raw(spec, rng=rng, batch_size=first.batch_size)
    raw = [first.raw[index].copy() if index < layer - 1 else fresh.raw[index] for index in range(spec.depth)]
    return apply_mask(CodeAssignment(spec, raw))


def inter_category_diversity(checkpoint, layer: int, n_pairs: int = 2000, rng: RandomSource = None,
                             threads: int = 1, params: Optional[SsimParams] = None, progress: bool = False) -> float:
    """
    Mean SSIM over image pairs sharing noise and the codes above layer, with independently
    drawn codes at layer and below. Lower means more diverse. layer = depth + 1 is the
    identical-code control.
    """
    models = _resolve_models(checkpoint)
    tree = models.tree
    if not models.is_image:
        raise ConfigurationError('Inter-category diversity needs an image generator', {'arch': models.arch})
    if not 1 <= layer <= tree.depth + 1:
        raise ValidationError(f'layer must be within 1..{tree.depth + 1}', details={'layer': layer})
    if n_pairs < 1:
        raise ValidationError('n_pairs must be >= 1', details={'n_pairs': n_pairs})
    rng = as_generator(rng)
    prior = checkpoint.meta.get('noise_prior', 'uniform') if isinstance(checkpoint, Checkpoint) else 'uniform'
    params = params or SsimParams()

    scores: List[float] = []
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        batches = tqdm(range(0, n_pairs, DIVERSITY_BATCH), disable=not progress, file=sys.stderr,
                       desc=f'ssim layer {layer}', unit='batch', leave=False)
        for start in batches:
            count = min(DIVERSITY_BATCH, n_pairs - start)
            first = apply_mask(sample_raw(tree, rng=rng, batch_size=count))
            second = _partner_assignment(first, layer, rng) if layer <= tree.depth else first
            noise = sample_noise(models.dim_z, count, rng, prior)
            images_a = sample_images(models, first, noise=noise)
            images_b = sample_images(models, second, noise=noise)
            scores.extend(pool.map(lambda pair: ssim(pair[0], pair[1], params), zip(images_a, images_b)))
    value = float(np.mean(scores))
    logger.debug(f"inter-category diversity at layer {layer}: {value:.4f} over {n_pairs} pairs")
    return value


@dataclass
class CoverageReport:
    n_modes: int
    n_covered: int
    purity: float
    split_consistent: int
    centroids: np.ndarray
    counts: np.ndarray
    matches: Dict[int, int] = field(default_factory=dict)
    distances: Dict[int, float] = field(default_factory=dict)
    covered: Dict[int, bool] = field(default_factory=dict)
    splits: Dict[int, bool] = field(default_factory=dict)

    @property
    def coverage(self) -> float:
        return self.n_covered / self.n_modes

    HEADER = ['category', 'n_points', 'centroid_x', 'centroid_y', 'matched_mode', 'distance', 'covered', 'split_ok']

    def rows(self) -> List[List]:
        rows = []
        for category in range(len(self.counts)):
            centroid = self.centroids[category]
            rows.append([
                category, int(self.counts[category]),
                '' if np.isnan(centroid[0]) else float(centroid[0]),
                '' if np.isnan(centroid[1]) else float(centroid[1]),
                self.matches.get(category, ''),
                self.distances.get(category, ''),
                int(self.covered.get(category, False)),
                '' if category not in self.splits else int(self.splits[category]),
            ])
        return rows


def _split_ok(sub_points: Sequence[np.ndarray], angle: float, truth: Sim2DSpec) -> Optional[bool]:
    """Two local sub-centroids separated along the tangent by at least half the true chord"""
    if len(sub_points) != 2 or any(len(p) == 0 for p in sub_points):
        return None
    delta = sub_points[1].mean(axis=0) - sub_points[0].mean(axis=0)
    tangent = np.array([-np.sin(angle), np.cos(angle)])
    radial = np.array([np.cos(angle), np.sin(angle)])
    expected = 2.0 * truth.radius * np.sin(truth.local_offset)
    along = abs(float(delta @ tangent))
    return bool(along >= 0.5 * expected and along > abs(float(delta @ radial)))


def mode_coverage(points: np.ndarray, categories: np.ndarray, truth: Sim2DSpec, local_ids: Optional[np.ndarray] = None,
                  n_categories: Optional[int] = None, threshold: float = 0.3) -> CoverageReport:
    """
    Greedy one-to-one matching of category centroids to the true global means, nearest
    pair first. Covered modes are matches within threshold (unscaled units). Purity is the
    share of points whose nearest true mode is their category's mode, the matched one or,
    for categories left unmatched, the nearest one.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    categories = np.asarray(categories, dtype=np.int64)
    n_categories = n_categories or (int(categories.max()) + 1 if categories.size else 1)
    modes = truth.global_means()
    angles = truth.global_angles()

    counts = np.bincount(categories, minlength=n_categories)[:n_categories]
    centroids = np.full((n_categories, 2), np.nan)
    for category in np.flatnonzero(counts):
        centroids[category] = points[categories == category].mean(axis=0)

    present = np.flatnonzero(counts)
    distance = np.linalg.norm(centroids[present, None, :] - modes[None, :, :], axis=-1) if present.size else np.zeros((0, len(modes)))
    candidates = sorted((float(distance[i, m]), int(present[i]), m)
                        for i in range(len(present)) for m in range(len(modes)))
    report = CoverageReport(len(modes), 0, 0.0, 0, centroids, counts)
    used_modes = set()
    for dist, category, mode in candidates:
        if category in report.matches or mode in used_modes:
            continue
        report.matches[category] = mode
        report.distances[category] = dist
        report.covered[category] = dist <= threshold
        used_modes.add(mode)
    report.n_covered = sum(report.covered.values())

    if points.size:
        nearest = np.linalg.norm(points[:, None, :] - modes[None, :, :], axis=-1).argmin(axis=1)
        own = np.empty(n_categories, dtype=np.int64)
        for index, category in enumerate(present):
            own[category] = report.matches.get(int(category), int(distance[index].argmin()))
        report.purity = float(np.mean(nearest == own[categories]))

    if local_ids is not None:
        local_ids = np.asarray(local_ids, dtype=np.int64)
        for category, mode in report.matches.items():
            if not report.covered[category]:
                continue
            mask = categories == category
            subs = [points[mask & (local_ids == local)] for local in (0, 1)]
            verdict = _split_ok(subs, angles[mode], truth)
            if verdict is not None:
                report.splits[category] = verdict
        report.split_consistent = sum(report.splits.values())
    return report


def sample_points(checkpoint: Checkpoint, n_samples: int, rng: RandomSource = None) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    """
    Generated 2D points in unscaled units with root category and, for deeper trees, the
    layer-2 choice. With independent root codes the first code is the category.
    """
    models = checkpoint.models
    if models.is_image:
        raise ConfigurationError('Coverage needs a 2D generator', {'arch': models.arch})
    if not models.tree.is_discrete(1):
        raise ConfigurationError('Mode coverage needs a discrete root code',
                                 {'tree.leaf_kind': models.tree.leaf_kind.value, 'depth': models.tree.depth})
    rng = as_generator(rng)
    assignment = apply_mask(sample_raw(models.tree, rng=rng, batch_size=n_samples))
    noise = sample_noise(models.dim_z, n_samples, rng, checkpoint.meta.get('noise_prior', 'uniform'))
    points = sample_images(checkpoint, assignment, noise=noise) / checkpoint.meta.get('input_scale', 1.0)
    paths = path_indices(assignment)
    categories = paths[:, 0]
    local_ids = paths[:, 1] if paths.shape[1] > 1 and models.tree.root_codes == 1 else None
    return points, categories, local_ids


def evaluate_coverage(checkpoint: Checkpoint, truth: Sim2DSpec, n_samples: int = 10000, rng: RandomSource = None,
                      threshold: float = 0.3) -> Tuple[CoverageReport, np.ndarray, np.ndarray]:
    points, categories, local_ids = sample_points(checkpoint, n_samples, rng)
    report = mode_coverage(points, categories, truth, local_ids, n_categories=checkpoint.tree.branching[0],
                           threshold=threshold)
    logger.info(f"coverage {report.n_covered}/{report.n_modes}, purity {report.purity:.3f}, "
                f"split consistency {report.split_consistent}/{report.n_covered}")
    return report, points, categories


def write_coverage_report(out_dir, report: CoverageReport, truth: Sim2DSpec, points: Optional[np.ndarray] = None,
                          categories: Optional[np.ndarray] = None) -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    csv_path = write_csv(out_dir / 'coverage.csv', CoverageReport.HEADER, report.rows())
    present = ~np.isnan(report.centroids[:, 0])
    svg_path = write_svg_scatter(
        out_dir / 'coverage.svg', points=points, point_categories=categories,
        crosses=truth.global_means(), circles=report.centroids[present],
        circle_categories=np.flatnonzero(present),
        title=f"coverage {report.n_covered}/{report.n_modes}  purity {report.purity:.3f}",
    )
    return csv_path, svg_path

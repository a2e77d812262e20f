"""
Export Utilities
Writers for the artifacts the toolkit produces: CSV tables and logs, binary PGM
images and image grids, and SVG scatter plots for the 2D experiment
"""

import csv
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Union

import numpy as np

from standardization_utils import ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

# Category colours, cycled by root category
PALETTE = [
    '#1f77b4', '#ff7f0e', '#2ca02c', '#d62728', '#9467bd',
    '#8c564b', '#e377c2', '#7f7f7f', '#bcbd22', '#17becf',
]


def _prepare(path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    """
    Write a header and rows as CSV

    Args:
        path: Destination file, parent directories are created
        header: Column names
        rows: Row sequences, written with str() formatting

    Returns:
        Path: The written file
    """
    path = _prepare(path)
    with path.open('w', newline='') as output:
        writer = csv.writer(output)
        writer.writerow(header)
        writer.writerows(rows)
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with Path(path).open(newline='') as source:
        return list(csv.DictReader(source))


class CsvLog:
    """Append-only CSV log flushed after every row"""

    def __init__(self, path: PathLike, header: Sequence[str]):
        self.path = _prepare(path)
        self._file = self.path.open('w', newline='')
        self._writer = csv.writer(self._file)
        self._writer.writerow(header)
        self._file.flush()

    def write(self, row: Sequence):
        self._writer.writerow(row)
        self._file.flush()

    def close(self):
        if not self._file.closed:
            self._file.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def to_bytes_image(image: np.ndarray) -> np.ndarray:
    """[0, 1] floats to 8-bit grey levels"""
    return np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path: PathLike, image: np.ndarray) -> Path:
    """
    Write a single-channel image as binary PGM (P5)

    Args:
        path: Destination file
        image: (H, W) or (1, H, W) array with values in [0, 1]
    """
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] == 1:
        image = image[0]
    if image.ndim != 2:
        raise ValidationError('PGM export needs a single-channel image', details={'shape': image.shape})
    height, width = image.shape
    path = _prepare(path)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode('ascii') + to_bytes_image(image).tobytes())
    return path


def tile_images(images: np.ndarray, columns: int, padding: int = 1) -> np.ndarray:
    """(N, H, W) or (N, 1, H, W) images to one row-major grid with background 0"""
    images = np.asarray(images)
    if images.ndim == 4:
        images = images[:, 0]
    count, height, width = images.shape
    columns = max(1, min(columns, count))
    rows = -(-count // columns)
    canvas = np.zeros((rows * (height + padding) + padding, columns * (width + padding) + padding))
    for index, image in enumerate(images):
        top = padding + (index // columns) * (height + padding)
        left = padding + (index % columns) * (width + padding)
        canvas[top:top + height, left:left + width] = image
    return canvas


def color_for(category: int) -> str:
    return PALETTE[int(category) % len(PALETTE)]


def write_svg_scatter(path: PathLike, points: Optional[np.ndarray] = None, point_categories: Optional[Sequence[int]] = None,
                      crosses: Optional[np.ndarray] = None, circles: Optional[np.ndarray] = None,
                      circle_categories: Optional[Sequence[int]] = None, title: str = '', size: int = 480) -> Path:
    """
    Scatter plot of 2D data: generated points as small dots, reference means as crosses,
    category centroids as circles; dots and circles are coloured by category
    """
    layers = [np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in (points, crosses, circles) if a is not None and len(a)]
    extent = max([float(np.abs(a).max()) for a in layers] + [1.0]) * 1.1
    margin = 20

    def project(xy):
        scale = (size - 2 * margin) / (2 * extent)
        return margin + (xy[0] + extent) * scale, size - margin - (xy[1] + extent) * scale

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        parts.append(f'<text x="{margin}" y="14" font-family="sans-serif" font-size="12">{title}</text>')
    if points is not None:
        categories = point_categories if point_categories is not None else [0] * len(points)
        for xy, category in zip(np.asarray(points).reshape(-1, 2), categories):
            x, y = project(xy)
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.2" fill="{color_for(category)}" fill-opacity="0.5"/>')
    if crosses is not None:
        for xy in np.asarray(crosses).reshape(-1, 2):
            x, y = project(xy)
            parts.append(f'<path d="M{x - 5:.2f},{y - 5:.2f}L{x + 5:.2f},{y + 5:.2f}M{x - 5:.2f},{y + 5:.2f}'
                         f'L{x + 5:.2f},{y - 5:.2f}" stroke="black" stroke-width="1.5"/>')
    if circles is not None:
        categories = circle_categories if circle_categories is not None else range(len(circles))
        for xy, category in zip(np.asarray(circles).reshape(-1, 2), categories):
            x, y = project(xy)
            parts.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="6" fill="none" '
                         f'stroke="{color_for(category)}" stroke-width="2"/>')
    parts.append('</svg>')
    path = _prepare(path)
    path.write_text('\n'.join(parts) + '\n')
    return path

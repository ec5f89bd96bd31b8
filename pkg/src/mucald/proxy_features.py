"""Morphological and intensity proxy features from (image, mask) pairs.

These weak-supervision vectors describe the target-class region of a
segmentation mask. Definitions are discrete and orientation-robust:

* area: pixel count of the region
* perimeter: count of pixel edges bordering a different class or the
  image border (4-connectivity boundary-edge count)
* circularity: 4*pi*A / P^2; compactness: P^2 / (4*pi*A)
* solidity: A / convex area, where convex area counts the lattice points
  inside or on the hull of the region's pixel centers; every region pixel
  lies in its own hull, so solidity <= 1 exactly, and convex regions give
  1 up to boundary discretization
* bbox_width / bbox_height: bounding-box extents in pixels
* orientation: 0.5 * atan2(2*mu11, mu20 - mu02) from second central
  moments of (row, col) coordinates
* asymmetry: 1 - (minor / major eigenvalue of the moment matrix)
* mean_intensity / std_intensity: over all channels inside the region
* brightness: mean of the first channel inside the region
* entropy: Shannon entropy (bits) of first-channel intensities, 32 bins
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .exceptions import ConfigError, DataError

SUPPORTED_FEATURES = (
    "area", "perimeter", "circularity", "compactness", "solidity",
    "bbox_width", "bbox_height", "orientation", "asymmetry",
    "mean_intensity", "std_intensity", "entropy", "brightness",
)


@dataclass(frozen=True)
class ProxySpec:
    """Ordered, unique selection of supported feature names."""

    names: tuple

    def __post_init__(self):
        names = tuple(self.names)
        if not names:
            raise ConfigError("proxy spec: feature list is empty")
        if len(set(names)) != len(names):
            raise ConfigError(f"proxy spec: duplicate feature names in {names}")
        for name in names:
            if name not in SUPPORTED_FEATURES:
                raise ConfigError(f"proxy spec: unknown feature name {name!r}")
        object.__setattr__(self, "names", names)

    def __len__(self):
        return len(self.names)


@dataclass
class ProxyVector:
    """Feature values aligned to a ProxySpec; ``empty`` marks a missing region."""

    values: np.ndarray
    names: tuple
    empty: bool = False


@dataclass
class NormalizationStats:
    """Per-feature z-score statistics; zero-variance features carry std 1."""

    mean: np.ndarray
    std: np.ndarray


def convex_hull(points):
    """Monotone-chain convex hull of integer 2-D points, counter-clockwise.

    Collinear interior vertices are dropped; degenerate inputs of one or
    two distinct points return the distinct points themselves.
    """
    pts = sorted(set((int(p[0]), int(p[1])) for p in points))
    if not pts:
        raise DataError("convex_hull: needs at least one point")
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) < 2:  # all points identical up to one axis
        return pts
    return hull


def polygon_area(vertices):
    """Shoelace area of a simple polygon given as a vertex sequence."""
    if len(vertices) < 3:
        return 0.0
    v = np.asarray(vertices, dtype=np.float64)
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def shannon_entropy(values, bins=32):
    """Histogram entropy in bits over [min, max]; constant input gives 0."""
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DataError("shannon_entropy: empty input")
    if not np.all(np.isfinite(values)):
        raise DataError("shannon_entropy: non-finite values")
    lo, hi = values.min(), values.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(values, bins=bins, range=(lo, hi))
    p = counts[counts > 0] / values.size
    return float(-(p * np.log2(p)).sum())


def region_perimeter(region):
    """4-connectivity boundary-edge count; image-border edges count."""
    padded = np.pad(region, 1, constant_values=False)
    edges = 0
    for shift_axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        neighbour = np.roll(padded, shift, axis=shift_axis)
        edges += int(np.count_nonzero(padded & ~neighbour))
    return edges


def _region_corner_points(region):
    rows, cols = np.nonzero(region)
    corners = set()
    for r, c in zip(rows.tolist(), cols.tolist()):
        corners.update(((r, c), (r + 1, c), (r, c + 1), (r + 1, c + 1)))
    return list(corners)


def extract(image, mask, target_class, spec):
    """Compute the proxy vector of the target-class region.

    ``image`` is [ch, H, W] with values in [0, 1]; ``mask`` is [H, W]
    integer class labels. An empty region yields an all-zero vector with
    the ``empty`` flag set.
    """
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(mask)
    if image.ndim != 3 or image.shape[1:] != mask.shape:
        raise DataError(f"extract: image shape {image.shape} does not match mask shape {mask.shape}")
    if image.min() < -1e-9 or image.max() > 1.0 + 1e-9:
        raise DataError("extract: image values must lie in [0, 1]")
    if not isinstance(spec, ProxySpec):
        spec = ProxySpec(tuple(spec))

    region = mask == target_class
    if not region.any():
        return ProxyVector(np.zeros(len(spec)), spec.names, empty=True)

    area = float(region.sum())
    values = {}
    needed = set(spec.names)

    if needed & {"perimeter", "circularity", "compactness"}:
        perim = float(region_perimeter(region))
        values["perimeter"] = perim
        values["circularity"] = 4.0 * np.pi * area / (perim * perim)
        values["compactness"] = (perim * perim) / (4.0 * np.pi * area)
    values["area"] = area

    if "solidity" in needed:
        hull = convex_hull(_region_corner_points(region))
        hull_area = polygon_area(hull)
        values["solidity"] = area / hull_area if hull_area > 0 else 1.0

    rows, cols = np.nonzero(region)
    if needed & {"bbox_width", "bbox_height"}:
        values["bbox_height"] = float(rows.max() - rows.min() + 1)
        values["bbox_width"] = float(cols.max() - cols.min() + 1)

    if needed & {"orientation", "asymmetry"}:
        r0, c0 = rows.mean(), cols.mean()
        mu20 = np.mean((rows - r0) ** 2)
        mu02 = np.mean((cols - c0) ** 2)
        mu11 = np.mean((rows - r0) * (cols - c0))
        values["orientation"] = 0.5 * np.arctan2(2.0 * mu11, mu20 - mu02)
        cov = np.array([[mu20, mu11], [mu11, mu02]])
        eig = np.linalg.eigvalsh(cov)
        lo, hi = float(eig[0]), float(eig[1])
        values["asymmetry"] = 0.0 if hi <= 0 else 1.0 - max(lo, 0.0) / hi

    if needed & {"mean_intensity", "std_intensity", "brightness", "entropy"}:
        all_channel = image[:, region]
        values["mean_intensity"] = float(all_channel.mean())
        values["std_intensity"] = float(all_channel.std())
        first_channel = image[0][region]
        values["brightness"] = float(first_channel.mean())
        values["entropy"] = shannon_entropy(first_channel)

    return ProxyVector(np.array([values[name] for name in spec.names]), spec.names)


def normalize_dataset(vectors):
    """Z-score each feature across the dataset.

    Zero-variance features map to 0 and record a std of 1, so the
    normalize/denormalize pair is exactly invertible.
    """
    if len(vectors) < 2:
        raise DataError("normalize_dataset: needs at least two vectors")
    matrix = np.stack([v.values for v in vectors])
    mean = matrix.mean(axis=0)
    std = matrix.std(axis=0)
    std = np.where(std == 0.0, 1.0, std)
    stats = NormalizationStats(mean=mean, std=std)
    normalized = [
        ProxyVector((v.values - mean) / std, v.names, empty=v.empty) for v in vectors
    ]
    return normalized, stats


def denormalize(vector, stats):
    return ProxyVector(vector.values * stats.std + stats.mean, vector.names, empty=vector.empty)


def write_features_csv(path, spec, vectors):
    """Header = feature names, one row per sample."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(spec.names)
        for v in vectors:
            writer.writerow([format(x, ".12g") for x in v.values])


def read_features_csv(path):
    """Returns (names, matrix); raises DataError naming the bad line."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows or len(rows[0]) < 2:
        raise DataError("features csv: needs a header with at least 2 columns")
    names = tuple(rows[0])
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(names):
            raise DataError(f"features csv: line {lineno} has {len(row)} cells, expected {len(names)}")
        try:
            data.append([float(cell) for cell in row])
        except ValueError:
            raise DataError(f"features csv: non-numeric cell at line {lineno}") from None
    if not data:
        raise DataError("features csv: no data rows")
    return names, np.asarray(data, dtype=np.float64)


class ProxyFeatureExtractor(BaseEstimator, TransformerMixin):
    """Turns (image, mask) samples into z-scored proxy feature rows.

    ``fit`` learns per-feature normalisation statistics; ``transform``
    returns the normalised feature matrix. Samples are (image, mask)
    pairs; the region of ``target_class`` is described.
    """

    def __init__(self, features=None, target_class=1, normalize=True):
        self.features = features
        self.target_class = target_class
        self.normalize = normalize

    def _spec(self):
        return ProxySpec(tuple(self.features) if self.features else SUPPORTED_FEATURES)

    def _extract_all(self, samples):
        spec = self._spec()
        return [extract(img, msk, self.target_class, spec) for img, msk in samples]

    def fit(self, X, y=None):
        vectors = self._extract_all(X)
        kept = [v for v in vectors if not v.empty]
        if len(kept) < 2:
            raise DataError("proxy extractor: needs at least two non-empty samples to fit")
        _, self.stats_ = normalize_dataset(kept)
        self.feature_names_ = self._spec().names
        return self

    def transform(self, X):
        vectors = self._extract_all(X)
        if not self.normalize:
            return np.stack([v.values for v in vectors])
        if not hasattr(self, "stats_"):
            raise NotFittedError("ProxyFeatureExtractor is not fitted")
        return np.stack([(v.values - self.stats_.mean) / self.stats_.std for v in vectors])

    def empty_flags(self, X):
        return np.array([v.empty for v in self._extract_all(X)], dtype=bool)

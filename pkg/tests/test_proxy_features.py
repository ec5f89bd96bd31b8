import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mucald.exceptions import ConfigError, DataError
from mucald.proxy_features import (ProxyFeatureExtractor, ProxySpec, SUPPORTED_FEATURES,
                                   convex_hull, denormalize, extract, normalize_dataset,
                                   polygon_area, read_features_csv, region_perimeter,
                                   shannon_entropy, write_features_csv)


def disc_mask(size, center, radius):
    rr, cc = np.mgrid[0:size, 0:size]
    return (np.hypot(rr - center[0], cc - center[1]) <= radius).astype(np.int64)


def brute_force_region_stats(mask, target_class):
    """Pixel-counting oracle: area and boundary-edge perimeter by loops."""
    region = mask == target_class
    h, w = region.shape
    area = 0
    perimeter = 0
    for i in range(h):
        for j in range(w):
            if not region[i, j]:
                continue
            area += 1
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if ni < 0 or nj < 0 or ni >= h or nj >= w or not region[ni, nj]:
                    perimeter += 1
    return area, perimeter


def brute_force_hull(points):
    """O(n^3) hull oracle: a point is a vertex iff it is not strictly inside
    or on the interior of any triangle/segment of other points."""
    pts = sorted(set(map(tuple, points)))
    if len(pts) <= 2:
        return pts
    hull = []
    for p in pts:
        inside = False
        others = [q for q in pts if q != p]
        for i in range(len(others)):
            for j in range(i + 1, len(others)):
                for k in range(j + 1, len(others)):
                    a, b, c = others[i], others[j], others[k]
                    d1 = _sign(p, a, b)
                    d2 = _sign(p, b, c)
                    d3 = _sign(p, c, a)
                    has_neg = (d1 < 0) or (d2 < 0) or (d3 < 0)
                    has_pos = (d1 > 0) or (d2 > 0) or (d3 > 0)
                    if not (has_neg and has_pos):
                        inside = True
        if not inside:
            hull.append(p)
    return sorted(hull)


def _sign(p, a, b):
    return (p[0] - b[0]) * (a[1] - b[1]) - (a[0] - b[0]) * (p[1] - b[1])


class TestProxySpec:
    def test_duplicate_rejected(self):
        with pytest.raises(ConfigError):
            ProxySpec(("area", "area"))

    def test_unknown_rejected(self):
        with pytest.raises(ConfigError, match="color_variance"):
            ProxySpec(("area", "color_variance"))

    def test_empty_rejected(self):
        with pytest.raises(ConfigError):
            ProxySpec(())


class TestExtract:
    def test_square_area(self):
        mask = np.zeros((20, 20), dtype=np.int64)
        mask[5:15, 5:15] = 1
        image = np.full((1, 20, 20), 0.5)
        vec = extract(image, mask, 1, ProxySpec(("area",)))
        assert vec.values[0] == 100.0

    def test_constant_intensity_degenerate_stats(self):
        mask = disc_mask(20, (10, 10), 5)
        image = np.full((1, 20, 20), 0.7)
        vec = extract(image, mask, 1, ProxySpec(("entropy", "std_intensity")))
        assert vec.values[0] == 0.0
        assert vec.values[1] == 0.0

    def test_disc_circularity_matches_pixel_oracle(self):
        mask = disc_mask(24, (12, 12), 8)
        image = np.full((1, 24, 24), 0.5)
        vec = extract(image, mask, 1, ProxySpec(("area", "perimeter", "circularity")))
        area, perimeter = brute_force_region_stats(mask, 1)
        assert vec.values[0] == area
        assert vec.values[1] == perimeter
        assert vec.values[2] == 4.0 * np.pi * area / perimeter ** 2

    def test_compactness_reciprocal_of_circularity(self):
        mask = disc_mask(24, (12, 12), 7)
        image = np.full((1, 24, 24), 0.5)
        vec = extract(image, mask, 1, ProxySpec(("circularity", "compactness")))
        assert vec.values[0] * vec.values[1] == pytest.approx(1.0, abs=1e-12)

    def test_empty_region_flagged(self):
        mask = np.zeros((10, 10), dtype=np.int64)
        image = np.zeros((1, 10, 10))
        vec = extract(image, mask, 1, ProxySpec(("area", "solidity")))
        assert vec.empty
        assert np.array_equal(vec.values, np.zeros(2))

    def test_rotation_invariance(self):
        rng = np.random.default_rng(3)
        mask = disc_mask(20, (8, 11), 5)
        image = np.clip(rng.normal(0.5, 0.1, (1, 20, 20)), 0, 1)
        spec = ProxySpec(("area", "perimeter", "circularity", "solidity", "entropy",
                          "mean_intensity", "std_intensity", "brightness"))
        base = extract(image, mask, 1, spec)
        rot = extract(np.rot90(image, axes=(1, 2)).copy(), np.rot90(mask).copy(), 1, spec)
        assert np.allclose(base.values, rot.values, atol=1e-12)

    def test_purity_bit_identical(self):
        mask = disc_mask(16, (8, 8), 4)
        image = np.clip(np.random.default_rng(1).normal(0.5, 0.1, (1, 16, 16)), 0, 1)
        spec = ProxySpec(SUPPORTED_FEATURES)
        a = extract(image, mask, 1, spec)
        b = extract(image, mask, 1, spec)
        assert np.array_equal(a.values, b.values)

    def test_solidity_bounds(self):
        # convex disc: solidity within discretization slack of 1
        mask = disc_mask(24, (12, 12), 8)
        image = np.full((1, 24, 24), 0.5)
        solidity = extract(image, mask, 1, ProxySpec(("solidity",))).values[0]
        assert solidity <= 1.0 + 1e-9
        assert solidity >= 0.98
        # concave: markedly below 1
        concave = mask.copy()
        concave[12:, :] = 0
        concave[:, 10:14] = 0
        solidity_concave = extract(image, concave, 1, ProxySpec(("solidity",))).values[0]
        assert solidity_concave < 0.95

    def test_orientation_of_horizontal_bar(self):
        mask = np.zeros((20, 20), dtype=np.int64)
        mask[9:11, 2:18] = 1
        image = np.full((1, 20, 20), 0.5)
        vec = extract(image, mask, 1, ProxySpec(("orientation", "asymmetry",
                                                 "bbox_width", "bbox_height")))
        # long axis along columns: mu02 >> mu20 -> orientation = 0.5*atan2(0, neg) = pi/2
        assert abs(vec.values[0]) == pytest.approx(np.pi / 2, abs=1e-9)
        assert vec.values[1] > 0.9  # strongly elongated
        assert vec.values[2] == 16.0
        assert vec.values[3] == 2.0

    def test_image_range_validated(self):
        mask = disc_mask(10, (5, 5), 2)
        with pytest.raises(DataError):
            extract(np.full((1, 10, 10), 2.0), mask, 1, ProxySpec(("area",)))


class TestConvexHull:
    def test_square_with_interior_point(self):
        pts = [(0, 0), (0, 4), (4, 0), (4, 4), (2, 2)]
        hull = convex_hull(pts)
        assert sorted(hull) == [(0, 0), (0, 4), (4, 0), (4, 4)]

    def test_collinear_returns_endpoints(self):
        hull = convex_hull([(0, 0), (1, 1), (2, 2)])
        assert sorted(hull) == [(0, 0), (2, 2)]

    def test_single_point(self):
        assert convex_hull([(3, 3)]) == [(3, 3)]

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(7)
        pts = [tuple(p) for p in rng.integers(0, 30, size=(50, 2))]
        hull = convex_hull(pts)
        assert sorted(hull) == brute_force_hull(pts)

    def test_hull_area_at_least_any_triangle(self):
        rng = np.random.default_rng(8)
        pts = [tuple(p) for p in rng.integers(0, 30, size=(50, 2))]
        hull_area = polygon_area(convex_hull(pts))
        for _ in range(100):
            tri = [pts[i] for i in rng.choice(len(pts), 3, replace=False)]
            assert hull_area >= polygon_area(tri) - 1e-9


class TestShannonEntropy:
    def test_constant_zero(self):
        assert shannon_entropy(np.full(100, 0.3)) == 0.0

    def test_two_equal_bins_one_bit(self):
        values = np.array([0.0] * 50 + [1.0] * 50)
        assert shannon_entropy(values) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_four_bins_two_bits(self):
        values = np.repeat([0.0, 1.0, 2.0, 3.0], 25)
        assert shannon_entropy(values, bins=4) == pytest.approx(2.0, abs=1e-12)

    @given(st.lists(st.floats(min_value=0, max_value=1, allow_nan=False), min_size=1,
                    max_size=200))
    @settings(max_examples=50, deadline=None)
    def test_entropy_nonnegative_and_bounded(self, values):
        out = shannon_entropy(np.array(values))
        assert 0.0 <= out <= np.log2(32) + 1e-12


class TestNormalization:
    def _vectors(self, matrix):
        from mucald.proxy_features import ProxyVector
        return [ProxyVector(row, ("a", "b")) for row in np.asarray(matrix, dtype=float)]

    def test_identical_vectors_zero_out(self):
        normalized, _ = normalize_dataset(self._vectors([[2.0, 5.0]] * 4))
        for v in normalized:
            assert np.array_equal(v.values, np.zeros(2))

    def test_two_point_z_scores(self):
        normalized, stats = normalize_dataset(self._vectors([[0.0, 1.0], [2.0, 1.0]]))
        assert normalized[0].values[0] == -1.0
        assert normalized[1].values[0] == 1.0
        assert stats.std[1] == 1.0  # zero-variance sentinel

    def test_roundtrip(self):
        rng = np.random.default_rng(5)
        vectors = self._vectors(rng.normal(size=(10, 2)))
        normalized, stats = normalize_dataset(vectors)
        for orig, norm in zip(vectors, normalized):
            back = denormalize(norm, stats)
            assert np.allclose(back.values, orig.values, atol=1e-12)

    def test_needs_two_vectors(self):
        with pytest.raises(DataError):
            normalize_dataset(self._vectors([[1.0, 2.0]]))


class TestCsv:
    def test_roundtrip(self, tmp_path):
        from mucald.proxy_features import ProxyVector
        spec = ProxySpec(("area", "entropy"))
        vectors = [ProxyVector(np.array([1.5, 0.25]), spec.names),
                   ProxyVector(np.array([2.0, 0.5]), spec.names)]
        path = tmp_path / "features.csv"
        write_features_csv(path, spec, vectors)
        names, matrix = read_features_csv(path)
        assert names == spec.names
        assert np.allclose(matrix, [[1.5, 0.25], [2.0, 0.5]])

    def test_non_numeric_cell_reports_line(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1.0,2.0\n1.0,oops\n")
        with pytest.raises(DataError, match="line 3"):
            read_features_csv(path)


class TestEstimator:
    def test_fit_transform_shapes(self):
        rng = np.random.default_rng(0)
        samples = []
        for _ in range(8):
            mask = disc_mask(16, rng.integers(5, 11, 2), rng.integers(3, 6))
            image = np.clip(rng.normal(0.5, 0.1, (1, 16, 16)), 0, 1)
            samples.append((image, mask))
        extractor = ProxyFeatureExtractor(features=("area", "perimeter", "entropy"))
        out = extractor.fit(samples).transform(samples)
        assert out.shape == (8, 3)
        assert abs(out.mean(axis=0)).max() < 1e-9

    def test_unfitted_transform_raises(self):
        from sklearn.exceptions import NotFittedError
        extractor = ProxyFeatureExtractor(features=("area",))
        with pytest.raises(NotFittedError):
            extractor.transform([(np.zeros((1, 16, 16)), disc_mask(16, (8, 8), 3))])

    def test_sklearn_get_params(self):
        params = ProxyFeatureExtractor(features=("area",)).get_params()
        assert params["target_class"] == 1

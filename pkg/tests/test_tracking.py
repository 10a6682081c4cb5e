import numpy as np
import pytest

from musq.errors import (BadWindowError, MisalignedTracksError,
                         TooFewPointsError)
from musq.numerics import SeededRng, bilinear_sample_many
from musq.synth import gen_speckle_texture
from musq.tracking import (ClusterModel, Feature, assign_clusters,
                           build_pyramid, integrate_cluster_motion,
                           klt_track, kmeans_fit, min_eigenvalue_map,
                           select_good_features)


def _speckle(h, w, seed=0, grain=2.0):
    return gen_speckle_texture(h, w, grain, SeededRng(seed)).pixels


def _shifted(img, dx, dy=0.0):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    return bilinear_sample_many(img, xx - dx, yy - dy)


def _brute_force_min_eig(img, window):
    h, w = img.shape
    ix = np.zeros_like(img)
    iy = np.zeros_like(img)
    ix[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    iy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    r = window // 2
    out = np.zeros((h, w))
    for y in range(r, h - r):
        for x in range(r, w - r):
            gx = ix[y - r:y + r + 1, x - r:x + r + 1].ravel()
            gy = iy[y - r:y + r + 1, x - r:x + r + 1].ravel()
            m = np.array([[gx @ gx, gx @ gy], [gx @ gy, gy @ gy]])
            out[y, x] = max(np.linalg.eigvalsh(m)[0], 0.0)
    return out


class TestMinEigenvalueMap:
    def test_matches_brute_force(self):
        img = _speckle(32, 32, seed=3)
        for window in (3, 5, 7):
            got = min_eigenvalue_map(img, window)
            want = _brute_force_min_eig(img, window)
            assert np.allclose(got, want, atol=1e-9), window

    def test_borders_are_zero(self):
        img = _speckle(32, 32, seed=4)
        out = min_eigenvalue_map(img, 5)
        assert np.all(out[:2, :] == 0.0) and np.all(out[-2:, :] == 0.0)
        assert np.all(out[:, :2] == 0.0) and np.all(out[:, -2:] == 0.0)

    def test_flat_image_scores_zero(self):
        assert np.all(min_eigenvalue_map(np.full((20, 20), 0.5), 5) == 0.0)

    def test_edge_scores_below_corner(self):
        img = np.zeros((40, 40))
        img[20:, 20:] = 1.0          # corner at (20, 20)
        out = min_eigenvalue_map(img, 7)
        corner = out[20, 20]
        edge = out[30, 20]           # straight vertical edge
        assert corner > 10 * edge

    def test_window_validation(self):
        img = _speckle(32, 32)
        with pytest.raises(ValueError):
            min_eigenvalue_map(img, 4)
        with pytest.raises(BadWindowError):
            min_eigenvalue_map(img, 33)


class TestSelectGoodFeatures:
    def test_matches_brute_force_greedy(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            img = rng.random((36, 44))
            feats = select_good_features(img, 40, 4.0)
            scores = min_eigenvalue_map(img, 5)
            ys, xs = np.nonzero(scores > 0)
            vals = scores[ys, xs]
            order = np.argsort(-vals, kind="stable")
            want = []
            for i in order:
                x, y = float(xs[i]), float(ys[i])
                if all((x - a) ** 2 + (y - b) ** 2 >= 16.0
                       for a, b in want):
                    want.append((x, y))
                    if len(want) >= 40:
                        break
            assert [(f.x, f.y) for f in feats] == want

    def test_scores_descend(self):
        img = _speckle(48, 48, seed=6)
        feats = select_good_features(img, 30, 3.0)
        scores = [f.score for f in feats]
        assert scores == sorted(scores, reverse=True)

    def test_min_distance_respected(self):
        img = _speckle(48, 64, seed=7)
        feats = select_good_features(img, 100, 5.0)
        for i, a in enumerate(feats):
            for b in feats[i + 1:]:
                assert (a.x - b.x) ** 2 + (a.y - b.y) ** 2 >= 25.0

    def test_zero_distance_keeps_everything(self):
        img = _speckle(32, 32, seed=8)
        n_positive = int((min_eigenvalue_map(img, 5) > 0).sum())
        feats = select_good_features(img, 10 ** 6, 0.0)
        assert len(feats) == n_positive

    def test_max_n_cap(self):
        img = _speckle(48, 48, seed=9)
        assert len(select_good_features(img, 7, 2.0)) == 7
        with pytest.raises(ValueError):
            select_good_features(img, 0, 2.0)

    def test_flat_image_yields_nothing(self):
        assert select_good_features(np.full((32, 32), 0.3), 10, 2.0) == []


class TestPyramid:
    def test_levels_halve(self):
        img = _speckle(64, 96)
        pyr = build_pyramid(img, 3)
        assert [p.shape for p in pyr] == [(64, 96), (32, 48), (16, 24)]
        assert pyr[0] is img

    def test_stops_when_too_small(self):
        pyr = build_pyramid(_speckle(32, 32), 10)
        assert min(pyr[-1].shape) >= 4
        assert len(pyr) < 10


class TestKlt:
    def _interior_features(self, img, margin=20, n=60):
        return [f for f in select_good_features(img, 200, 4.0)
                if margin <= f.x < img.shape[1] - margin
                and margin <= f.y < img.shape[0] - margin][:n]

    @pytest.mark.parametrize("shift,tol", [(0.5, 0.25), (1.0, 0.1),
                                           (3.0, 0.1)])
    def test_known_shift_recovered(self, shift, tol):
        img = _speckle(96, 96, seed=10)
        nxt = _shifted(img, shift)
        feats = self._interior_features(img)
        tracks = klt_track(img, nxt, feats, pyramid_levels=3)
        dx = np.array([t[0] for t in tracks if t[2] == "ok"])
        dy = np.array([t[1] for t in tracks if t[2] == "ok"])
        assert len(dx) > 20
        assert np.sqrt(np.mean((dx - shift) ** 2)) < tol
        assert np.sqrt(np.mean(dy ** 2)) < tol

    def test_large_shift_needs_pyramid(self):
        img = _speckle(128, 128, seed=11)
        nxt = _shifted(img, 8.0)
        feats = self._interior_features(img, margin=24)
        multi = klt_track(img, nxt, feats, pyramid_levels=4)
        dx = np.array([t[0] for t in multi if t[2] == "ok"])
        assert np.sqrt(np.mean((dx - 8.0) ** 2)) < 0.1
        single = klt_track(img, nxt, feats, pyramid_levels=1)
        dx1 = np.array([t[0] for t in single if t[2] == "ok"])
        assert np.sqrt(np.mean((dx1 - 8.0) ** 2)) > 1.0

    def test_vertical_shift(self):
        img = _speckle(96, 96, seed=12)
        nxt = _shifted(img, 0.0, 2.0)
        feats = self._interior_features(img)
        tracks = klt_track(img, nxt, feats)
        dy = np.array([t[1] for t in tracks if t[2] == "ok"])
        assert np.sqrt(np.mean((dy - 2.0) ** 2)) < 0.1

    def test_flat_patch_is_lost(self):
        img = _speckle(64, 64, seed=13)
        img[:20, :20] = 0.5
        nxt = _shifted(img, 1.0)
        feats = [Feature(x=8.0, y=8.0, score=0.0)]
        assert klt_track(img, nxt, feats)[0][2] == "lost"

    def test_empty_and_window_validation(self):
        img = _speckle(64, 64)
        assert klt_track(img, img, []) == []
        with pytest.raises(ValueError):
            klt_track(img, img, [Feature(5, 5, 1.0)], window=4)

    def test_identical_frames_give_zero(self):
        img = _speckle(64, 64, seed=14)
        feats = self._interior_features(img, margin=10, n=20)
        tracks = klt_track(img, img, feats)
        d = np.array([(t[0], t[1]) for t in tracks])
        assert np.abs(d).max() < 1e-6


class TestKmeans:
    def test_recovers_separated_blobs(self):
        rng = SeededRng(0)
        centers = np.array([[0.0, 0.0], [20.0, 0.0], [0.0, 20.0]])
        pts = np.concatenate([c + rng.normal(size=(50, 2), scale=0.5)
                              for c in centers])
        model = kmeans_fit(pts, 3, rng=SeededRng(1))
        got = model.centroids[np.lexsort(model.centroids.T)]
        want = centers[np.lexsort(centers.T)]
        assert np.allclose(got, want, atol=0.3)

    def test_deterministic_given_rng(self):
        rng = SeededRng(2)
        pts = rng.normal(size=(200, 2))
        a = kmeans_fit(pts, 8, rng=SeededRng(3)).centroids
        b = kmeans_fit(pts, 8, rng=SeededRng(3)).centroids
        assert np.array_equal(a, b)

    def test_duplicate_points_fill_clusters(self):
        # more clusters than distinct locations: empty-cluster reseeding
        # must still terminate and return k centroids
        pts = np.array([[0.0, 0.0]] * 10 + [[5.0, 5.0]] * 10)
        model = kmeans_fit(pts, 4, rng=SeededRng(4))
        assert model.k == 4
        assert np.all(np.isfinite(model.centroids))

    def test_too_few_points(self):
        with pytest.raises(TooFewPointsError):
            kmeans_fit(np.zeros((3, 2)), 5, rng=SeededRng(0))

    def test_requires_rng(self):
        with pytest.raises(ValueError):
            kmeans_fit(np.zeros((10, 2)), 2)

    def test_assign_clusters_nearest(self):
        model = ClusterModel(centroids=np.array([[0.0, 0.0], [10.0, 0.0]]))
        assign = assign_clusters(np.array([1.0, 9.0, 4.9]),
                                 np.array([0.0, 0.0, 0.0]), model)
        assert list(assign) == [0, 1, 0]


class TestIntegrateClusterMotion:
    def test_hand_computed_means(self):
        model = ClusterModel(centroids=np.array([[0.0, 0.0], [10.0, 0.0]]))
        feats = [Feature(0.0, 0.0, 1.0), Feature(1.0, 0.0, 1.0),
                 Feature(10.0, 0.0, 1.0)]
        tracks = [(1.0, 0.5, "ok"), (3.0, 1.5, "ok"), (-2.0, 0.0, "ok")]
        vec = integrate_cluster_motion(feats, tracks, model)
        assert np.allclose(vec.values, [2.0, 1.0, -2.0, 0.0])
        assert vec.empty_clusters == 0

    def test_lost_features_excluded_and_empty_zeroed(self):
        model = ClusterModel(centroids=np.array([[0.0, 0.0], [10.0, 0.0]]))
        feats = [Feature(0.0, 0.0, 1.0), Feature(10.0, 0.0, 1.0)]
        tracks = [(1.0, 1.0, "ok"), (9.0, 9.0, "lost")]
        vec = integrate_cluster_motion(feats, tracks, model)
        assert np.allclose(vec.values, [1.0, 1.0, 0.0, 0.0])
        assert vec.empty_clusters == 1

    def test_no_features(self):
        model = ClusterModel(centroids=np.zeros((3, 2)))
        vec = integrate_cluster_motion([], [], model)
        assert np.all(vec.values == 0.0)
        assert vec.empty_clusters == 3

    def test_misaligned_raises(self):
        model = ClusterModel(centroids=np.zeros((1, 2)))
        with pytest.raises(MisalignedTracksError):
            integrate_cluster_motion([Feature(0, 0, 1.0)], [], model)

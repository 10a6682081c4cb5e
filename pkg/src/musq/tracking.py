"""Corner selection, pyramidal Lucas-Kanade tracking, and motion clustering.

The tracker front end: per frame, the strongest minimum-eigenvalue corners
are selected fresh, tracked one frame forward with iterative coarse-to-fine
Lucas-Kanade, assigned to frozen K-means centroids, and averaged per cluster
into a fixed-length motion vector (dx, dy interleaved per cluster).
"""

from dataclasses import dataclass

import numpy as np

from .errors import (BadWindowError, MisalignedTracksError,
                     TooFewPointsError)
from .numerics import bilinear_sample_many, gaussian_kernel1d, \
    separable_convolve


@dataclass(frozen=True)
class Feature:
    x: float
    y: float
    score: float


@dataclass(frozen=True)
class ClusterModel:
    centroids: np.ndarray   # (K, 2) as (x, y)

    @property
    def k(self):
        return len(self.centroids)


@dataclass(frozen=True)
class ClusterMotionVector:
    """2K values, interleaved (dx_c, dy_c) per cluster in centroid order."""

    values: np.ndarray
    empty_clusters: int


def _gradients(img):
    ix = np.zeros_like(img)
    iy = np.zeros_like(img)
    ix[:, 1:-1] = 0.5 * (img[:, 2:] - img[:, :-2])
    iy[1:-1, :] = 0.5 * (img[2:, :] - img[:-2, :])
    return ix, iy


def _box_sum(a, window):
    win = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    return win.sum(axis=(2, 3))


def min_eigenvalue_map(img, window):
    """Smaller structure-tensor eigenvalue per pixel; borders score 0."""
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    h, w = img.shape
    if window > h or window > w:
        raise BadWindowError(f"window {window} exceeds image {h}x{w}")
    ix, iy = _gradients(img)
    sxx = _box_sum(ix * ix, window)
    sxy = _box_sum(ix * iy, window)
    syy = _box_sum(iy * iy, window)
    trace = sxx + syy
    root = np.sqrt((sxx - syy) ** 2 + 4.0 * sxy * sxy)
    inner = 0.5 * (trace - root)
    out = np.zeros((h, w))
    r = window // 2
    out[r:h - r, r:w - r] = np.maximum(inner, 0.0)
    return out


def select_good_features(img, max_n, min_distance, window=5):
    """Top corners by score with greedy minimum-distance suppression."""
    if max_n < 1:
        raise ValueError("max_n must be >= 1")
    scores = min_eigenvalue_map(img, window)
    h, w = scores.shape
    ys, xs = np.nonzero(scores > 0.0)
    if len(xs) == 0:
        return []
    vals = scores[ys, xs]
    order = np.argsort(-vals, kind="stable")
    xs, ys, vals = xs[order], ys[order], vals[order]

    # exact greedy suppression: accepting a feature paints a disc of radius
    # min_distance into a blocked mask, so each candidate check is O(1).
    # The mask is padded by r so discs near the border need no clipping.
    r = int(np.floor(min_distance))
    dy, dx = np.mgrid[-r:r + 1, -r:r + 1]
    disc = np.nonzero(dy * dy + dx * dx < float(min_distance) ** 2)
    wp = w + 2 * r
    disc_flat = dy[disc] * wp + dx[disc]
    blocked = np.zeros((h + 2 * r) * wp, bool)
    centers = (ys + r) * wp + (xs + r)

    accepted = []
    for x, y, v, c in zip(xs, ys, vals, centers):
        if blocked[c]:
            continue
        accepted.append(Feature(x=float(x), y=float(y), score=float(v)))
        if len(accepted) >= max_n:
            break
        blocked[c + disc_flat] = True
    return accepted


_PYR_KERNEL = gaussian_kernel1d(1.0, radius=2)


def build_pyramid(img, levels):
    """Factor-2 Gaussian pyramid, level 0 = full resolution."""
    pyr = [img]
    for _ in range(levels - 1):
        cur = pyr[-1]
        if min(cur.shape) < 8:
            break
        blurred = separable_convolve(cur, _PYR_KERNEL)
        pyr.append(blurred[::2, ::2].copy())
    return pyr


def klt_track(prev, nxt, feats, window=11, pyramid_levels=3, max_iters=30,
              eps=0.01, min_eig_threshold=1e-7, prev_pyramid=None,
              next_pyramid=None, prev_gradients=None):
    """Track features one frame forward; returns [(dx, dy, status), ...].

    Iterative Lucas-Kanade on the 2x2 normal equations, refined coarse to
    fine. A feature is "lost" when its normal matrix is near-singular or the
    tracked position leaves the frame. Precomputed pyramids/gradients may be
    passed in when tracking many pairs of the same sequence.
    """
    if not feats:
        return []
    if window % 2 == 0 or window < 3:
        raise ValueError("window must be odd and >= 3")
    h, w = prev.shape
    n = len(feats)
    px = np.array([f.x for f in feats])
    py = np.array([f.y for f in feats])

    levels = int(pyramid_levels)
    pyr_prev = prev_pyramid if prev_pyramid is not None \
        else build_pyramid(prev, levels)
    pyr_next = next_pyramid if next_pyramid is not None \
        else build_pyramid(nxt, levels)
    levels = min(len(pyr_prev), len(pyr_next))
    grads = prev_gradients if prev_gradients is not None \
        else [_gradients(im) for im in pyr_prev]

    r = window // 2
    off = np.arange(-r, r + 1, dtype=float)
    offx = np.tile(off, window)            # (window*window,)
    offy = np.repeat(off, window)

    d = np.zeros((n, 2))
    ok = np.ones(n, bool)
    for level in range(levels - 1, -1, -1):
        scale = 2.0 ** level
        im_p = pyr_prev[level]
        im_n = pyr_next[level]
        gx, gy = grads[level]
        cx = px / scale
        cy = py / scale
        sx = cx[:, None] + offx[None, :]   # (n, k)
        sy = cy[:, None] + offy[None, :]

        patch = bilinear_sample_many(im_p, sx, sy)
        ixp = bilinear_sample_many(gx, sx, sy)
        iyp = bilinear_sample_many(gy, sx, sy)
        gxx = (ixp * ixp).sum(axis=1)
        gxy = (ixp * iyp).sum(axis=1)
        gyy = (iyp * iyp).sum(axis=1)
        trace = gxx + gyy
        mineig = 0.5 * (trace - np.sqrt((gxx - gyy) ** 2 + 4 * gxy * gxy))
        area = window * window
        ok &= mineig / area >= min_eig_threshold
        det = gxx * gyy - gxy * gxy
        safe_det = np.where(det == 0.0, 1.0, det)

        # d is kept in full-resolution pixels; tx/ty convert per level.
        # Converged features drop out of the per-iteration working set.
        idx = np.nonzero(ok)[0]
        for _ in range(max_iters):
            if len(idx) == 0:
                break
            tx = sx[idx] + d[idx, 0:1] / scale
            ty = sy[idx] + d[idx, 1:2] / scale
            diff = patch[idx] - bilinear_sample_many(im_n, tx, ty)
            bx = (diff * ixp[idx]).sum(axis=1)
            by = (diff * iyp[idx]).sum(axis=1)
            step_x = (gyy[idx] * bx - gxy[idx] * by) / safe_det[idx] * scale
            step_y = (gxx[idx] * by - gxy[idx] * bx) / safe_det[idx] * scale
            d[idx, 0] += step_x
            d[idx, 1] += step_y
            idx = idx[np.hypot(step_x, step_y) >= eps]

    tx = px + d[:, 0]
    ty = py + d[:, 1]
    ok &= (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    return [(float(d[i, 0]), float(d[i, 1]), "ok" if ok[i] else "lost")
            for i in range(n)]


def kmeans_fit(points, k, max_iters=100, rng=None):
    """Lloyd's algorithm with distance-weighted seeding.

    Empty clusters are re-seeded to the point farthest from the cluster's
    former centroid. Inertia is asserted non-increasing every iteration.
    """
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("points must be (n, 2)")
    if len(pts) < k:
        raise TooFewPointsError(f"{len(pts)} points for k={k}")
    if rng is None:
        raise ValueError("rng is required")

    # distance-weighted (k-means++ style) seeding
    centroids = np.empty((k, 2))
    centroids[0] = pts[int(rng.integers(len(pts)))]
    d2 = ((pts - centroids[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[i] = pts[int(rng.integers(len(pts)))]
        else:
            centroids[i] = pts[rng.choice_weighted(len(pts), d2 / total)]
        d2 = np.minimum(d2, ((pts - centroids[i]) ** 2).sum(axis=1))

    prev_inertia = np.inf
    for _ in range(max_iters):
        dists = ((pts[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dists.argmin(axis=1)
        inertia = dists[np.arange(len(pts)), assign].sum()
        assert inertia <= prev_inertia + 1e-9, "inertia increased"
        new_centroids = centroids.copy()
        for c in range(k):
            members = pts[assign == c]
            if len(members):
                new_centroids[c] = members.mean(axis=0)
            else:
                far = ((pts - centroids[c]) ** 2).sum(axis=1).argmax()
                new_centroids[c] = pts[far]
        if np.allclose(new_centroids, centroids):
            break
        centroids = new_centroids
        prev_inertia = inertia
    return ClusterModel(centroids=centroids)


def assign_clusters(xs, ys, clusters):
    pts = np.stack([xs, ys], axis=1)
    dists = ((pts[:, None, :] - clusters.centroids[None, :, :]) ** 2) \
        .sum(axis=2)
    return dists.argmin(axis=1)


def integrate_cluster_motion(feats, tracks, clusters):
    """Mean (dx, dy) of surviving features per cluster; empties emit (0,0)."""
    if len(feats) != len(tracks):
        raise MisalignedTracksError(
            f"{len(feats)} features vs {len(tracks)} tracks")
    k = clusters.k
    values = np.zeros(2 * k)
    empty = k
    if feats:
        ok = np.array([t[2] == "ok" for t in tracks])
        if ok.any():
            xs = np.array([f.x for f in feats])[ok]
            ys = np.array([f.y for f in feats])[ok]
            dx = np.array([t[0] for t in tracks])[ok]
            dy = np.array([t[1] for t in tracks])[ok]
            assign = assign_clusters(xs, ys, clusters)
            counts = np.bincount(assign, minlength=k).astype(float)
            sum_dx = np.bincount(assign, weights=dx, minlength=k)
            sum_dy = np.bincount(assign, weights=dy, minlength=k)
            nonempty = counts > 0
            values[0::2][nonempty] = sum_dx[nonempty] / counts[nonempty]
            values[1::2][nonempty] = sum_dy[nonempty] / counts[nonempty]
            empty = int((~nonempty).sum())
    return ClusterMotionVector(values=values, empty_clusters=empty)

"""Shared numerics: seeded randomness, image sampling, basic statistics.

Images are plain 2-D float64 numpy arrays with intensities in [0, 1]
(row = y, column = x). Higher-rank arrays ("tensors") are float64 and
row-major throughout; 32-bit precision only appears at file boundaries.
"""

import numpy as np

from .errors import DegenerateSignalError


class SeededRng:
    """Deterministic random stream backed by the Philox counter-based generator.

    The stream is a pure function of (seed, path). Child streams are derived
    through the spawn-key mechanism, so independently seeded workers stay
    reproducible regardless of draw order in the parent.
    """

    ALGORITHM = "philox4x64"

    def __init__(self, seed, _path=()):
        self.seed = int(seed)
        self._path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, index):
        """Independent stream #index derived from this stream's identity."""
        return SeededRng(self.seed, self._path + (int(index),))

    def normal(self, size=None, loc=0.0, scale=1.0):
        return self._gen.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size=size)

    def shuffle(self, arr):
        self._gen.shuffle(arr)

    def permutation(self, n):
        return self._gen.permutation(n)

    def choice_weighted(self, n, p):
        return int(self._gen.choice(n, p=p))


def gaussian_draws(rng, n):
    """n i.i.d. standard normal draws from the given stream."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.normal(size=n)


def _clamp(v, lo, hi):
    return np.clip(v, lo, hi)


def bilinear_sample(img, x, y):
    """Bilinear interpolation at sub-pixel (x, y), clamp-to-edge borders."""
    return float(bilinear_sample_many(img, np.asarray([x], float),
                                      np.asarray([y], float))[0])


def bilinear_sample_many(img, xs, ys):
    """Vectorized bilinear sampling; xs/ys arbitrary-shape float arrays."""
    h, w = img.shape
    xs = np.asarray(xs, float).clip(0.0, w - 1.0)
    ys = np.asarray(ys, float).clip(0.0, h - 1.0)
    x0 = xs.astype(np.intp)
    y0 = ys.astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    flat = img.ravel()
    base = y0 * w + x0
    xstep = (x0 < w - 1).astype(np.intp)
    ystep = (y0 < h - 1).astype(np.intp) * w
    top = flat[base] * (1.0 - fx) + flat[base + xstep] * fx
    base += ystep
    bot = flat[base] * (1.0 - fx) + flat[base + xstep] * fx
    return top * (1.0 - fy) + bot * fy


def zscore_normalize(series):
    """Zero-mean unit-variance rescaling; returns (normalized, mean, std).

    Sample std (divisor n-1). Raises DegenerateSignalError on constant input.
    """
    x = np.asarray(series, float)
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    mean = float(x.mean())
    std = float(x.std(ddof=1))
    if std <= 0.0:
        raise DegenerateSignalError("constant series has no z-score")
    return (x - mean) / std, mean, std


def _rank_average_ties(x):
    order = np.argsort(x, kind="stable")
    ranks = np.empty(len(x), float)
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def correlation(x, y, kind="pearson"):
    """Pearson or Spearman correlation coefficient in [-1, 1]."""
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("need equal-length series of length >= 3")
    if kind == "spearman":
        x = _rank_average_ties(x)
        y = _rank_average_ties(y)
    elif kind != "pearson":
        raise ValueError("kind must be pearson or spearman")
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc * xc).sum())
    sy = np.sqrt((yc * yc).sum())
    if sx == 0.0 or sy == 0.0:
        raise DegenerateSignalError("constant series has no correlation")
    return float((xc * yc).sum() / (sx * sy))


def separable_convolve(img, kernel):
    """Convolve a 2-D array with a 1-D kernel along both axes (reflect pad)."""
    k = np.asarray(kernel, float)
    r = len(k) // 2

    def conv_axis(a):
        padded = np.pad(a, ((0, 0), (r, r)), mode="reflect")
        win = np.lib.stride_tricks.sliding_window_view(padded, len(k), axis=1)
        return win @ k[::-1]

    out = conv_axis(img)
    out = conv_axis(out.T).T
    return out


def gaussian_kernel1d(sigma, radius=None):
    if radius is None:
        radius = max(1, int(round(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img, sigma):
    return separable_convolve(img, gaussian_kernel1d(sigma))

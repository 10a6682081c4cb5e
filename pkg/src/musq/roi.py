"""Region-of-interest standardization.

The muscle's main axis is fitted by ordinary least squares to centerline
samples; a rectangular region is then resampled with its horizontal axis
aligned to the fitted axis (rotated to 0 degrees). Synthetic sequences are
generated pre-registered, so the pipeline default is an axis-aligned crop,
but the rotation path is fully functional for unregistered imagery.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateAxisError
from .numerics import bilinear_sample_many


@dataclass(frozen=True)
class AxisFit:
    slope: float
    intercept: float

    @property
    def angle_degrees(self):
        return math.degrees(math.atan(self.slope))


def fit_muscle_axis(points):
    """OLS fit y = slope*x + intercept minimizing vertical residuals."""
    pts = np.asarray(points, float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise DegenerateAxisError("need >= 2 (x, y) points")
    x, y = pts[:, 0], pts[:, 1]
    if np.unique(x).size < 2:
        raise DegenerateAxisError("need >= 2 distinct x values")
    xm, ym = x.mean(), y.mean()
    slope = float(((x - xm) * (y - ym)).sum() / ((x - xm) ** 2).sum())
    return AxisFit(slope=slope, intercept=float(ym - slope * xm))


def extract_standardized_region(img, fit, center, out_w, out_h):
    """Resample an out_h x out_w region whose x-axis lies along the fit.

    Sampling axes are rotated by the fitted angle about `center`; bilinear
    interpolation with clamp-to-edge covers out-of-bounds coordinates.
    """
    if out_w < 1 or out_h < 1:
        raise ValueError("output dims must be >= 1")
    cx, cy = center
    theta = math.atan(fit.slope)
    ct, st = math.cos(theta), math.sin(theta)
    u = np.arange(out_w, dtype=float) - (out_w - 1) / 2.0
    v = np.arange(out_h, dtype=float)[:, None] - (out_h - 1) / 2.0
    xs = cx + u * ct - v * st
    ys = cy + u * st + v * ct
    return bilinear_sample_many(img, np.broadcast_to(xs, (out_h, out_w)),
                                np.broadcast_to(ys, (out_h, out_w)))


def axis_center(points):
    """Default region center: centroid of the fitted points."""
    pts = np.asarray(points, float)
    return float(pts[:, 0].mean()), float(pts[:, 1].mean())

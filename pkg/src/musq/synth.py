"""Synthetic speckle sequences with known motion, plus the dataset format.

A large speckle canvas is generated once per participant; each frame is the
canvas backward-warped by the cumulative motion field of that frame and
cropped to the region of interest. Motion is an active shear (driven by emg)
plus a passive horizontal translation (driven by joint angle), so the label
track is, by construction, decodable from the imagery.
"""

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (BadDimsError, CorruptDatasetError,
                     InconsistentDatasetError, MotionOutOfCanvasError,
                     NotADatasetError)
from .numerics import bilinear_sample_many, gaussian_blur
from .signals import LabelTrack

FRAMES_MAGIC = b"MUSQ"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class SpeckleTexture:
    pixels: np.ndarray   # (h, w) in [0, 1]
    seed: int


@dataclass(frozen=True)
class MotionField:
    dx: np.ndarray
    dy: np.ndarray

    @property
    def shape(self):
        return self.dx.shape


@dataclass
class UltrasoundSequence:
    frames: np.ndarray            # (n, h, w) float
    fps: float
    pixel_pitch_mm: float
    participant: str
    condition: str

    def __len__(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]


def gen_speckle_texture(h, w, grain, rng):
    """Band-limited speckle with faint fascicle-like horizontal bands."""
    if h < 32 or w < 32:
        raise BadDimsError(f"texture {h}x{w} too small (min 32)")
    if grain < 1:
        raise BadDimsError("grain must be >= 1 pixel")
    noise = rng.normal(size=(h, w))
    tex = gaussian_blur(noise, float(grain) / 2.0)
    # a few brighter horizontal striations, phase drawn from the stream
    y = np.arange(h, dtype=float)[:, None]
    phase = rng.uniform(0.0, 2.0 * np.pi)
    period = max(8.0, h / 6.0)
    tex = tex + 0.35 * tex.std() * np.cos(2.0 * np.pi * y / period + phase)
    lo, hi = tex.min(), tex.max()
    tex = (tex - lo) / (hi - lo)
    return SpeckleTexture(pixels=tex, seed=rng.seed)


@dataclass(frozen=True)
class MotionGains:
    """Pixels of displacement per full-span excursion of each drive."""

    active_px: float = 2.0    # shear amplitude per emg_span
    passive_px: float = 3.0   # translation per angle_span


def depth_profile(h):
    """Antisymmetric shear profile: +1 at the top row, -1 at the bottom."""
    if h < 2:
        raise BadDimsError("need at least 2 rows")
    y = np.arange(h, dtype=float)
    return 1.0 - 2.0 * y / (h - 1)


def motion_field(alpha, beta, h, w):
    """dx = alpha * depth_profile(y) + beta, dy = 0."""
    if h < 2 or w < 2:
        raise BadDimsError("field dims must be >= 2")
    s = depth_profile(h)
    dx = np.broadcast_to((alpha * s + beta)[:, None], (h, w)).copy()
    return MotionField(dx=dx, dy=np.zeros((h, w)))


def motion_coefficients(labels, plant, gains):
    """Per-frame (alpha, beta) arrays from the label track."""
    alpha = gains.active_px * labels.emg / plant.emg_span
    beta = gains.passive_px * labels.angle / plant.angle_span
    return alpha, beta


def render_sequence(texture, labels, plant, gains, region_h, region_w,
                    fps=None, pixel_pitch_mm=0.118, participant="P00",
                    condition="combined"):
    """Warp-and-crop one frame per label sample.

    Each frame k uses the cumulative (absolute) field of frame k applied to
    the base texture, which keeps interpolation blur from compounding. The
    canvas must be large enough that the region plus worst-case displacement
    never leaves it.
    """
    tex = texture.pixels
    th, tw = tex.shape
    if region_h > th or region_w > tw:
        raise BadDimsError("region larger than texture")
    alpha, beta = motion_coefficients(labels, plant, gains)

    oy = (th - region_h) // 2
    ox = (tw - region_w) // 2
    max_dx = float(np.max(np.abs(alpha)) + np.max(np.abs(beta)))
    if ox - max_dx < 0 or ox + region_w + max_dx > tw:
        raise MotionOutOfCanvasError(
            f"needs {max_dx:.2f}px margin, canvas offers {ox}px")

    ys, xs = np.mgrid[0:region_h, 0:region_w].astype(float)
    profile = depth_profile(region_h)[:, None]
    frames = np.empty((len(labels), region_h, region_w), float)
    for k in range(len(labels)):
        dx = alpha[k] * profile + beta[k]
        frames[k] = bilinear_sample_many(tex, ox + xs - dx, oy + ys)
    return UltrasoundSequence(
        frames=frames, fps=float(fps if fps is not None else labels.fps),
        pixel_pitch_mm=pixel_pitch_mm, participant=participant,
        condition=condition)


LABEL_COLUMNS = ("emg", "torque", "angle", "d_emg", "d_torque", "d_angle")
LABEL_HEADER = "frame," + ",".join(LABEL_COLUMNS)


def write_dataset(seq, labels, out_dir):
    """Dataset directory: meta.txt, frames.bin (MUSQ), labels.csv."""
    if len(seq) != len(labels):
        raise InconsistentDatasetError(
            f"{len(seq)} frames vs {len(labels)} label rows")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    meta = {
        "version": FORMAT_VERSION,
        "fps": repr(seq.fps),
        "pixel_pitch_mm": repr(seq.pixel_pitch_mm),
        "condition": seq.condition,
        "participant": seq.participant,
        "frames": len(seq),
        "height": seq.height,
        "width": seq.width,
    }
    with open(out / "meta.txt", "w") as f:
        for k, v in meta.items():
            f.write(f"{k}={v}\n")

    with open(out / "frames.bin", "wb") as f:
        f.write(FRAMES_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, len(seq),
                            seq.height, seq.width))
        f.write(np.ascontiguousarray(seq.frames, dtype="<f4").tobytes())

    with open(out / "labels.csv", "w") as f:
        f.write(LABEL_HEADER + "\n")
        cols = [getattr(labels, c) for c in LABEL_COLUMNS]
        for i in range(len(labels)):
            f.write(str(i) + "," + ",".join("%.17g" % c[i] for c in cols)
                    + "\n")


def read_dataset(in_dir):
    """Inverse of write_dataset; returns (UltrasoundSequence, LabelTrack)."""
    d = Path(in_dir)
    for name in ("meta.txt", "frames.bin", "labels.csv"):
        if not (d / name).exists():
            raise NotADatasetError(f"missing {name} in {d}")

    meta = {}
    for line in (d / "meta.txt").read_text().splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            meta[k.strip()] = v.strip()

    raw = (d / "frames.bin").read_bytes()
    if raw[:4] != FRAMES_MAGIC:
        raise NotADatasetError(f"bad magic {raw[:4]!r}")
    if len(raw) < 20:
        raise CorruptDatasetError("truncated header")
    version, count, h, w = struct.unpack("<IIII", raw[4:20])
    if version != FORMAT_VERSION:
        raise CorruptDatasetError(f"unsupported version {version}")
    expected = 20 + 4 * count * h * w
    if len(raw) != expected:
        raise CorruptDatasetError(
            f"frames.bin is {len(raw)} bytes, expected {expected}")
    frames = np.frombuffer(raw[20:], dtype="<f4").astype(np.float64)
    frames = frames.reshape(count, h, w)

    lines = (d / "labels.csv").read_text().splitlines()
    if not lines or lines[0] != LABEL_HEADER:
        raise CorruptDatasetError("bad labels.csv header")
    rows = [line.split(",") for line in lines[1:] if line]
    if len(rows) != count:
        raise InconsistentDatasetError(
            f"{len(rows)} label rows vs {count} frames")
    try:
        table = np.array([[float(v) for v in r[1:]] for r in rows])
    except ValueError as e:
        raise CorruptDatasetError(f"unparseable labels.csv: {e}") from None
    if table.shape[1] != len(LABEL_COLUMNS):
        raise CorruptDatasetError("wrong labels.csv column count")

    labels = LabelTrack(fps=float(meta["fps"]),
                        emg=table[:, 0], torque=table[:, 1],
                        angle=table[:, 2], d_emg=table[:, 3],
                        d_torque=table[:, 4], d_angle=table[:, 5])
    seq = UltrasoundSequence(frames=frames, fps=float(meta["fps"]),
                             pixel_pitch_mm=float(meta["pixel_pitch_mm"]),
                             participant=meta["participant"],
                             condition=meta["condition"])
    return seq, labels

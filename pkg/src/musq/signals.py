"""Driving/label signal generation.

Two deterministic command signals (one shown on the participant's screen,
one driving the foot pedal) are stitched from three sinusoidal bases on a
fixed alternation schedule, then pushed through a small linear muscle plant
to produce per-frame (emg, torque, angle) label tracks with deltas.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import BadPlantConfigError
from .numerics import SeededRng


BASIS_A = "A"
BASIS_B = "B"
BASIS_C = "C"


def eval_basis(basis_id, t):
    """One of the three bounded bases, evaluated at absolute time t seconds."""
    t = np.asarray(t, float)
    if basis_id == BASIS_A:
        out = np.sin(0.4 * t * math.pi - math.pi / 2)
    elif basis_id == BASIS_B:
        out = np.sin(0.5 * t * math.pi - math.pi / 2)
    elif basis_id == BASIS_C:
        out = np.sin(np.sin(t * math.pi / 30 - math.pi / 2) * 30 * math.pi
                     - math.pi / 2)
    else:
        raise ValueError(f"unknown basis {basis_id!r}")
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class Schedule:
    """Half-open segments [t0, t1) tiling [0, duration), each with a basis."""

    role: str                    # "screen" or "pedal"
    duration: float
    segments: tuple              # ((t0, t1, basis_id), ...)

    def basis_at(self, t):
        if not 0.0 <= t < self.duration:
            raise ValueError(f"t={t} outside [0, {self.duration})")
        for t0, t1, b in self.segments:
            if t0 <= t < t1:
                return b
        raise AssertionError("segments do not tile the duration")

    def evaluate(self, t):
        """Signal value(s) at time(s) t; bases take absolute time."""
        ts = np.atleast_1d(np.asarray(t, float))
        out = np.empty_like(ts)
        for t0, t1, b in self.segments:
            m = (ts >= t0) & (ts < t1)
            if m.any():
                out[m] = eval_basis(b, ts[m])
        if np.isscalar(t) or np.asarray(t).ndim == 0:
            return float(out[0])
        return out


def compose_schedule(role, duration):
    """Build the screen or pedal schedule.

    Screen: 10 s segments, A/B alternating from A; every segment starting at
    an odd multiple of 30 s is replaced by C. Pedal: 20 s segments with C at
    odd multiples of 60 s. The A/B alternation follows segment-index parity,
    so a C segment consumes a slot in the alternation (this variant is the
    one whose screen/pedal correlation lands on the expected 0.33/0.34).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    if role == "screen":
        seg_len, c_step = 10.0, 30.0
    elif role == "pedal":
        seg_len, c_step = 20.0, 60.0
    else:
        raise ValueError(f"unknown role {role!r}")

    segments = []
    t0 = 0.0
    index = 0
    while t0 < duration:
        t1 = min(t0 + seg_len, duration)
        ratio = t0 / c_step
        is_c = abs(ratio - round(ratio)) < 1e-9 and round(ratio) % 2 == 1
        if is_c:
            basis = BASIS_C
        else:
            basis = BASIS_A if index % 2 == 0 else BASIS_B
        segments.append((t0, t1, basis))
        index += 1
        t0 = t1
    return Schedule(role=role, duration=float(duration),
                    segments=tuple(segments))


@dataclass(frozen=True)
class PlantConfig:
    """Linear muscle plant: spans set the physical units, gains mix torque."""

    emg_span: float = 0.0481      # volts
    torque_span: float = 100.182  # newton-meters
    angle_span: float = 12.371    # degrees
    k_active: float = 0.7
    k_passive: float = 0.3
    emg_noise_frac: float = 0.001     # noise std as fraction of each span
    torque_noise_frac: float = 0.005
    neutral_seconds: float = 10.0

    def validate(self):
        if min(self.emg_span, self.torque_span, self.angle_span) <= 0:
            raise BadPlantConfigError("spans must be positive")
        if self.neutral_seconds < 0 or self.emg_noise_frac < 0 \
                or self.torque_noise_frac < 0:
            raise BadPlantConfigError("negative plant parameter")


@dataclass
class LabelTrack:
    """Per-frame (emg, torque, angle) and their first differences."""

    fps: float
    emg: np.ndarray
    torque: np.ndarray
    angle: np.ndarray
    d_emg: np.ndarray = field(default=None)
    d_torque: np.ndarray = field(default=None)
    d_angle: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.d_emg is None:
            self.d_emg = _deltas(self.emg)
        if self.d_torque is None:
            self.d_torque = _deltas(self.torque)
        if self.d_angle is None:
            self.d_angle = _deltas(self.angle)

    def __len__(self):
        return len(self.emg)

    def targets(self):
        """(n, 3) regression targets: columns d_emg, d_torque, d_angle."""
        return np.stack([self.d_emg, self.d_torque, self.d_angle], axis=1)


def _deltas(x):
    d = np.empty_like(x)
    d[0] = 0.0
    d[1:] = np.diff(x)
    return d


def make_label_track(screen, pedal, plant, fps, rng):
    """Sample the plant at frame rate over a neutral hold plus the trial.

    Either schedule may be None, which zeroes that drive (isometric trials
    have no pedal drive, passive trials no screen drive). The two schedules,
    when both given, must share a duration.
    """
    plant.validate()
    if fps <= 0:
        raise ValueError("fps must be positive")
    durations = [s.duration for s in (screen, pedal) if s is not None]
    if not durations:
        raise ValueError("at least one schedule required")
    if len(durations) == 2 and durations[0] != durations[1]:
        raise ValueError("schedules must share a duration")
    trial = durations[0]

    n_hold = int(round(plant.neutral_seconds * fps))
    n_trial = int(round(trial * fps))
    t_trial = np.arange(n_trial) / fps

    screen_v = screen.evaluate(t_trial) if screen is not None \
        else np.zeros(n_trial)
    pedal_v = pedal.evaluate(t_trial) if pedal is not None \
        else np.zeros(n_trial)
    screen_v = np.concatenate([np.zeros(n_hold), screen_v])
    pedal_v = np.concatenate([np.zeros(n_hold), pedal_v])
    n = n_hold + n_trial

    def noise(frac):
        if frac == 0.0:
            return np.zeros(n)
        return frac * rng.normal(size=n)

    angle = plant.angle_span * pedal_v
    emg = plant.emg_span * np.maximum(0.0, screen_v) \
        + plant.emg_span * noise(plant.emg_noise_frac)
    emg = np.maximum(emg, 0.0)
    torque = (plant.k_active * (emg / plant.emg_span) * plant.torque_span
              + plant.k_passive * (angle / plant.angle_span)
              * plant.torque_span
              + plant.torque_span * noise(plant.torque_noise_frac))
    return LabelTrack(fps=float(fps), emg=emg, torque=torque, angle=angle)


CONDITIONS = ("isometric", "passive", "combined")


def make_condition_label_track(condition, duration, plant, fps, rng):
    """Label track for one experimental condition.

    isometric: screen drive only (fixed pedal); passive: pedal drive only
    (relaxed muscle); combined: both drives active.
    """
    if condition not in CONDITIONS:
        raise ValueError(f"unknown condition {condition!r}")
    screen = compose_schedule("screen", duration) \
        if condition in ("isometric", "combined") else None
    pedal = compose_schedule("pedal", duration) \
        if condition in ("passive", "combined") else None
    return make_label_track(screen, pedal, plant, fps, rng)

"""Synthetic study of temporal aliasing in keyframe + windowed-TSR cascades.

A bright disk moves along a line on a dark background. Keyframes are taken at
stride ``s``; an idealised temporal super-resolution (TSR) stage fills the gaps
one window of ``w`` keyframes at a time. The TSR interpolates perfectly except
for what the keyframes cannot tell it: when the motion is above the keyframe
Nyquist rate the direction of phase progression is ambiguous, and each window
resolves it on its own.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

KINDS = ("sinusoid", "bounce", "linear")


@dataclass(frozen=True)
class MotionSpec:
    kind: str = "sinusoid"
    amplitude: float = 8.0  # px
    frequency: float = 0.1  # cycles / frame
    phase: float = 0.0  # rad
    size: float = 6.0  # disk diameter, px
    direction: float = 0.0  # rad, 0 = +x
    velocity: float = 0.0  # px / frame, linear kind only
    noise: float = 0.0  # background noise std, drawn from the render seed

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown motion kind {self.kind!r}")
        if self.frequency < 0:
            raise ValueError("frequency must be >= 0")


@dataclass(frozen=True)
class CascadeSpec:
    keyframe_stride: int = 4
    tsr_window: int = 2

    def __post_init__(self):
        if self.keyframe_stride < 1:
            raise ValueError("keyframe_stride must be >= 1")
        if self.tsr_window < 2:
            raise ValueError("tsr_window must be >= 2")


def displacement(spec: MotionSpec, t, T: int) -> np.ndarray:
    """Signed offset along the motion direction at (possibly fractional) times ``t``."""
    t = np.asarray(t, dtype=np.float64)
    if spec.kind == "sinusoid":
        return spec.amplitude * np.sin(2 * math.pi * spec.frequency * t + spec.phase)
    if spec.kind == "bounce":
        return spec.amplitude * (2 * np.abs(np.sin(math.pi * spec.frequency * t + spec.phase)) - 1)
    return spec.velocity * (t - (T - 1) / 2.0)


def positions(spec: MotionSpec, T: int, H: int, W: int, t=None) -> np.ndarray:
    """Object centres ``(y, x)`` per frame, about the frame centre."""
    t = np.arange(T) if t is None else np.asarray(t)
    d = displacement(spec, t, T)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    return np.stack([cy + d * math.sin(spec.direction), cx + d * math.cos(spec.direction)], axis=1)


SUPERSAMPLE = 4


def _raster(centres, H, W, radius):
    # a one-pixel linear rim, box-filtered over SUPERSAMPLE² sub-pixels
    n = SUPERSAMPLE
    off = (np.arange(n) + 0.5) / n - 0.5
    yy = (np.arange(H, dtype=np.float64)[:, None] + off[None, :]).reshape(-1)
    xx = (np.arange(W, dtype=np.float64)[:, None] + off[None, :]).reshape(-1)
    dy = yy[None, :, None] - centres[:, 0][:, None, None]
    dx = xx[None, None, :] - centres[:, 1][:, None, None]
    sub = np.clip(radius - np.sqrt(dy * dy + dx * dx) + 0.5, 0.0, 1.0)
    return sub.reshape(len(centres), H, n, W, n).mean(axis=(2, 4))


def render_positions(centres, H: int, W: int, size: float) -> np.ndarray:
    centres = np.asarray(centres, dtype=np.float64)
    r = size / 2.0
    lo, hi = centres.min(axis=0) - r - 1, centres.max(axis=0) + r + 1
    if lo[0] < 0 or lo[1] < 0 or hi[0] > H - 1 or hi[1] > W - 1:
        raise ValueError(f"object leaves the {H}x{W} frame (extent y {lo[0]:.1f}..{hi[0]:.1f}, "
                         f"x {lo[1]:.1f}..{hi[1]:.1f})")
    frames = _raster(centres, H, W, r)
    return np.repeat(frames[..., None], 3, axis=3)


def render_video(spec: MotionSpec, T: int, H: int, W: int, seed: int = 0) -> np.ndarray:
    """Clip ``[T, H, W, 3]`` in [0, 1] (plus optional background noise)."""
    video = render_positions(positions(spec, T, H, W), H, W, spec.size)
    if spec.noise:
        rng = np.random.default_rng(seed)
        video = video + spec.noise * rng.standard_normal(video.shape[:3])[..., None]
    return video


def xt_slice(video, row: int) -> np.ndarray:
    """Row ``row`` of every frame stacked over time, channel-averaged: ``[T, W]``."""
    video = np.asarray(video)
    if not 0 <= row < video.shape[1]:
        raise ValueError(f"row {row} outside [0, {video.shape[1]})")
    return video[:, row, :, :].mean(axis=-1)


def centroids(video) -> np.ndarray:
    """Intensity-weighted centre ``(y, x)`` of every frame."""
    img = np.asarray(video, dtype=np.float64).mean(axis=-1)
    mass = img.sum(axis=(1, 2))
    if np.any(mass <= 0):
        raise ValueError(f"empty frames: {np.flatnonzero(mass <= 0).tolist()}")
    H, W = img.shape[1:]
    cy = (img * np.arange(H)[None, :, None]).sum(axis=(1, 2)) / mass
    cx = (img * np.arange(W)[None, None, :]).sum(axis=(1, 2)) / mass
    return np.stack([cy, cx], axis=1)


def consistency_metric(video) -> float:
    """Mean squared second temporal difference of the centroid trajectory (px²)."""
    c = centroids(video)
    if c.shape[0] < 3:
        raise ValueError("need at least 3 frames")
    d2 = c[2:] - 2 * c[1:-1] + c[:-2]
    return float(np.mean(np.sum(d2 * d2, axis=1)))


# ---------------------------------------------------------------------------
# aliasing


def _alias_family(spec: MotionSpec, s: int, sign: int):
    """Frequencies ``sign*f + k/s`` in [0, 0.5]; the reflected family needs phase π - φ."""
    out = []
    f = spec.frequency
    kmax = int(math.ceil((0.5 + f) * s)) + 1
    for k in range(-kmax, kmax + 1):
        fp = sign * f + k / s
        if -1e-12 <= fp <= 0.5 + 1e-12:
            fp = min(max(fp, 0.0), 0.5)
            phase = spec.phase if sign > 0 else math.pi - spec.phase
            out.append(replace(spec, frequency=round(fp, 12), phase=phase))
    return out


def alias_ambiguity(spec: MotionSpec, s: int, H: int = 32, W: int = 32, T: int | None = None,
                    tol: float = 1e-9) -> list:
    """All sinusoids with frequency in [0, 0.5] whose stride-``s`` keyframes match ``spec``'s.

    Candidates come from f' ≡ ±f (mod 1/s); each is kept only if its rendered
    keyframes agree with ``spec``'s within ``tol``. Sorted by frequency.
    """
    if spec.kind != "sinusoid":
        raise ValueError("alias_ambiguity is defined for sinusoidal motion")
    if spec.frequency == 0:
        return [spec]
    T = T if T is not None else 12 * s + 1
    keys = np.arange(0, T, s)
    ref = render_positions(positions(spec, T, H, W, keys), H, W, spec.size)
    seen, out = set(), []
    for cand in _alias_family(spec, s, +1) + _alias_family(spec, s, -1):
        key = (cand.frequency, round(math.remainder(cand.phase, 2 * math.pi), 9))
        if cand.frequency == 0:
            key = (0.0, round(math.sin(cand.phase), 9))
        if key in seen:
            continue
        vid = render_positions(positions(cand, T, H, W, keys), H, W, cand.size)
        if np.max(np.abs(vid - ref)) <= tol:
            seen.add(key)
            out.append(cand)
    return sorted(out, key=lambda c: (c.frequency, c.phase))


def keyframes_aliased(spec: MotionSpec, s: int) -> bool:
    """True when the motion exceeds the Nyquist rate of the stride-``s`` keyframes."""
    return spec.kind == "sinusoid" and spec.frequency > 1.0 / (2 * s) + 1e-12


def _family_minimum(spec: MotionSpec, s: int, sign: int) -> MotionSpec:
    """Lowest-frequency (minimum-motion) member of one direction family."""
    return min(_alias_family(spec, s, sign), key=lambda c: c.frequency)


@dataclass
class CascadeResult:
    video: np.ndarray
    windows: list  # (first frame, last frame) per TSR call
    directions: list  # +1 forward / -1 reversed phase progression per window
    chosen: list  # MotionSpec used to fill each window


def simulate_cascade(video, cascade: CascadeSpec, spec: MotionSpec, seed: int = 0,
                     return_info: bool = False):
    """Keep every ``s``-th frame and refill the rest with an idealised windowed TSR.

    The TSR knows the motion law up to what stride-``s`` keyframes leave open.
    Below the keyframe Nyquist rate it recovers the minimum-motion (true)
    trajectory. Above it, forward and reversed phase progression fit the
    keyframes equally well; each window of ``w`` keyframes picks a direction by
    a coin flip seeded from ``(seed, window index)`` and then takes the
    minimum-motion trajectory in that direction. Keyframes are copied verbatim.
    """
    video = np.asarray(video)
    s, w = cascade.keyframe_stride, cascade.tsr_window
    T, H, W = video.shape[:3]
    if s == 1:
        out = video.copy()
        return CascadeResult(out, [], [], []) if return_info else out
    span = s * (w - 1)
    if (T - 1) % span:
        raise ValueError(f"T-1 = {T - 1} must be a multiple of s*(w-1) = {span}")
    out = video.copy()
    windows, dirs, chosen = [], [], []
    aliased = keyframes_aliased(spec, s)
    for idx, start in enumerate(range(0, T - 1, span)):
        stop = start + span
        if aliased:
            coin = np.random.default_rng([seed, idx]).integers(0, 2)
            direction = 1 if coin else -1
            cand = _family_minimum(spec, s, direction)
        elif spec.kind == "sinusoid":
            fwd, rev = _family_minimum(spec, s, +1), _family_minimum(spec, s, -1)
            cand, direction = (fwd, 1) if fwd.frequency <= rev.frequency else (rev, -1)
        else:
            cand, direction = spec, 1
        inner = np.array([t for t in range(start + 1, stop) if t % s])
        if inner.size:
            out[inner] = render_positions(positions(cand, T, H, W, inner), H, W, cand.size)
        windows.append((start, stop))
        dirs.append(direction)
        chosen.append(cand)
    return CascadeResult(out, windows, dirs, chosen) if return_info else out


def direction_flips(result: CascadeResult, axis: int = 1) -> list:
    """Window boundaries where adjacent windows chose opposite directions and the
    framewise displacement along ``axis`` changes sign across the boundary."""
    c = centroids(result.video)[:, axis]
    flips = []
    for i in range(1, len(result.windows)):
        b = result.windows[i][0]
        if result.directions[i] == result.directions[i - 1]:
            continue
        before, after = c[b] - c[b - 1], c[b + 1] - c[b]
        if before * after < 0:
            flips.append(b)
    return flips


# ---------------------------------------------------------------------------
# exports

CSV_FIELDS = [f.name for f in fields(MotionSpec)] + ["s", "w", "metric", "ambiguity_count"]


def write_metric_csv(path, rows) -> None:
    """Rows are dicts with the MotionSpec fields plus s, w, metric, ambiguity_count."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in CSV_FIELDS})


def sweep_row(spec: MotionSpec, cascade: CascadeSpec, metric: float, ambiguity_count: int) -> dict:
    row = asdict(spec)
    row.update(s=cascade.keyframe_stride, w=cascade.tsr_window, metric=repr(float(metric)),
               ambiguity_count=ambiguity_count)
    return row

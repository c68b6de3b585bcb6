"""Conditioning-mask constructors, style interpolation and SDEdit video editing."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffusion, stunet
from .diffusion import ConditioningPair


def _binary(mask, what):
    mask = np.asarray(mask)
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError(f"{what} must contain only 0 and 1")
    return mask.astype(np.float64)


def cond_image_to_video(first_frame, T: int) -> ConditioningPair:
    """First frame given, the rest left to the model."""
    if T < 2:
        raise ValueError(f"image-to-video needs T >= 2, got {T}")
    first_frame = np.asarray(first_frame, dtype=np.float64)
    H, W, _ = first_frame.shape
    C = np.zeros((T,) + first_frame.shape)
    C[0] = first_frame
    M = np.zeros((T, H, W, 1))
    M[0] = 1.0
    return ConditioningPair(C, M)


def cond_inpaint(video, region_mask) -> ConditioningPair:
    """``region_mask`` is 1 where content must be synthesised (outpainting: a border region)."""
    video = np.asarray(video, dtype=np.float64)
    region = _binary(region_mask, "region mask")
    if region.shape != video.shape[:3] + (1,):
        raise ValueError(f"region mask {region.shape} does not match video {video.shape}")
    M = 1.0 - region
    return ConditioningPair(video * M, M)


def cond_cinemagraph(image, region_mask, T: int) -> ConditioningPair:
    """Animate only ``region_mask`` (H×W×1, 1 = animate) of a still image."""
    image = np.asarray(image, dtype=np.float64)
    region = _binary(region_mask, "region mask")
    if region.shape != image.shape[:2] + (1,):
        raise ValueError(f"region mask {region.shape} does not match image {image.shape}")
    M = np.repeat((1.0 - region)[None], T, axis=0)
    M[0] = 1.0
    C = np.repeat(image[None], T, axis=0) * M
    return ConditioningPair(C, M)


@dataclass
class StylePair:
    W_orig: dict
    W_style: dict
    alpha: float

    def __post_init__(self):
        if set(self.W_orig) != set(self.W_style):
            diff = sorted(set(self.W_orig) ^ set(self.W_style))
            raise ValueError(f"style and original weights differ in names: {diff[:5]}")
        for name, a in self.W_orig.items():
            if a.shape != self.W_style[name].shape:
                raise ValueError(f"shape mismatch at {name!r}: {a.shape} vs {self.W_style[name].shape}")

    def check_range(self):
        """The recommended operating range is alpha in [0.5, 1]."""
        return 0.5 <= self.alpha <= 1.0


def interpolate_style(pair: StylePair) -> dict:
    """alpha * W_style + (1 - alpha) * W_orig, tensor by tensor."""
    a = float(pair.alpha)
    out = {}
    for name, w0 in pair.W_orig.items():
        mixed = a * pair.W_style[name].astype(np.float64) + (1.0 - a) * w0.astype(np.float64)
        out[name] = mixed.astype(w0.dtype)
    return out


def install_spatial(weights: stunet.Weights, spatial: dict) -> stunet.Weights:
    """Copy of ``weights`` with the spatial map replaced; temporal tensors are shared untouched."""
    if set(spatial) != set(weights.spatial):
        raise ValueError("spatial map names differ from the model's")
    for name, arr in spatial.items():
        if arr.shape != weights.spatial[name].shape:
            raise ValueError(f"shape mismatch at {name!r}")
    return stunet.Weights(weights.config, dict(spatial), weights.temporal, weights.cond_channels)


def sdedit_video(weights, schedule, input_video, strength: float = 0.97, seed: int = 0,
                 n_steps: int = 50, label: int = 0, mode: str = "ddim", dtype=np.float64) -> np.ndarray:
    """Noise ``input_video`` to t0 = round(strength * steps) and denoise from there.

    ``strength == 1`` re-noises completely (the input is ignored), matching
    :func:`stvid.diffusion.sample` for the same seed.
    """
    if not 0.0 < strength <= 1.0:
        raise ValueError(f"strength must lie in (0, 1], got {strength}")
    x_in = np.asarray(input_video, dtype=dtype)
    eps_fn = weights if callable(weights) else diffusion.model_eps_fn(weights, label, None, dtype)
    grid = diffusion.timestep_grid(schedule.steps, n_steps)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(x_in.shape).astype(dtype)
    if strength == 1.0:
        x = eps
    else:
        t0 = max(1, int(round(strength * schedule.steps))) - 1
        grid = np.concatenate([[t0], grid[grid < t0]])
        x = diffusion.q_sample(x_in, t0, eps, schedule).astype(dtype)
    return diffusion.sample_loop(eps_fn, schedule, grid, x, rng, diffusion.MODES[mode])

"""Temporal MultiDiffusion for windowed spatial super-resolution.

Each reverse step splits the noisy high-res clip into overlapping temporal
segments, denoises every segment independently, and reconciles the per-segment
results as the least-squares solution

    J' = argmin_J  sum_i || J - Phi(J_i) ||^2

whose per-frame solution is the mean of all segment predictions covering that
frame.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import diffusion, stunet


@dataclass(frozen=True)
class WindowPlan:
    T: int
    T_prime: int
    stride: int
    segments: tuple

    @property
    def N(self) -> int:
        return len(self.segments)

    def coverage(self) -> np.ndarray:
        count = np.zeros(self.T, dtype=np.int64)
        for s, e in self.segments:
            count[s:e] += 1
        return count


def plan_windows(T: int, T_prime: int, stride: int) -> WindowPlan:
    """Segments of length ``T_prime`` starting every ``stride`` frames; the last
    one is shifted back to end at ``T``."""
    if T_prime == T:
        return WindowPlan(T, T_prime, stride, ((0, T),))
    if not (1 <= stride < T_prime <= T):
        raise ValueError(f"need 1 <= stride < T_prime <= T, got stride={stride}, T_prime={T_prime}, T={T}")
    starts = list(range(0, T - T_prime + 1, stride))
    if starts[-1] != T - T_prime:
        starts.append(T - T_prime)
    return WindowPlan(T, T_prime, stride, tuple((s, s + T_prime) for s in starts))


@dataclass
class SegmentPredictions:
    plan: WindowPlan
    preds: list

    def __post_init__(self):
        if len(self.preds) != self.plan.N:
            raise ValueError(f"{len(self.preds)} predictions for {self.plan.N} segments")
        shapes = {np.shape(p) for p in self.preds}
        if len(shapes) != 1:
            raise ValueError(f"segment predictions differ in shape: {sorted(shapes)}")
        for (s, e), p in zip(self.plan.segments, self.preds):
            if np.shape(p)[0] != e - s:
                raise ValueError(f"segment [{s}, {e}) has a {np.shape(p)[0]}-frame prediction")


def aggregate(preds: SegmentPredictions) -> np.ndarray:
    """Per-frame mean over the segments covering each frame."""
    plan = preds.plan
    first = np.asarray(preds.preds[0])
    acc = np.zeros((plan.T,) + first.shape[1:], dtype=first.dtype)
    for (s, e), p in zip(plan.segments, preds.preds):
        acc[s:e] += p
    count = plan.coverage()
    if np.any(count == 0):
        raise ValueError(f"frames {np.flatnonzero(count == 0).tolist()} are not covered by any segment")
    return acc / count.reshape((-1,) + (1,) * (acc.ndim - 1)).astype(acc.dtype)


def upsample_nearest(video, factor: int = 2) -> np.ndarray:
    """Nearest-neighbour spatial upsampling of ``[T, H, W, C]``."""
    return np.repeat(np.repeat(video, factor, axis=1), factor, axis=2)


def ssr_eps_fn(ssr_weights: stunet.Weights, label: int = 0, dtype=np.float64):
    """ε callable ``(x_seg, t, low_seg)`` for an SSR model."""
    def eps_fn(x, t, low):
        inp = np.concatenate([x, upsample_nearest(low).astype(x.dtype)], axis=-1)
        return stunet.forward(ssr_weights, inp, t, label, dtype=dtype)
    return eps_fn


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("STUNET_THREADS", "1")))
    except ValueError:
        return 1


def ssr_multidiffusion_sample(ssr_weights, low_res_video, plan: WindowPlan, schedule, n_steps: int = 50,
                              seed: int = 0, label: int = 0, mode: str = "ddim", factor: int = 2,
                              dtype=np.float64) -> np.ndarray:
    """Windowed SSR sampling with per-step least-squares reconciliation.

    ``ssr_weights`` is SSR :class:`~stvid.stunet.Weights` or a callable
    ``eps_fn(x_seg, t, low_seg)``. Each step converts every segment's ε̂ into its
    DDIM/DDPM update and aggregates the updates; the aggregate is the only
    state carried to the next step.
    """
    low = np.asarray(low_res_video, dtype=dtype)
    if low.shape[0] != plan.T:
        raise ValueError(f"low-res clip has {low.shape[0]} frames, plan expects {plan.T}")
    eps_fn = ssr_weights if callable(ssr_weights) else ssr_eps_fn(ssr_weights, label, dtype)
    shape = (plan.T, low.shape[1] * factor, low.shape[2] * factor, low.shape[3])
    ab = schedule.alpha_bar
    eta = diffusion.MODES[mode]
    pool = ThreadPoolExecutor(_workers()) if _workers() > 1 else None

    def segment_update(args, x, t, tp, z):
        s, e = args
        eps = eps_fn(x[s:e], t, low[s:e])
        return diffusion.ddim_update(x[s:e], eps, ab[t], ab[tp], eta, None if z is None else z[s:e])

    def step(x, t, tp, z):
        jobs = plan.segments
        if pool is None:
            updates = [segment_update(se, x, t, tp, z) for se in jobs]
        else:
            updates = list(pool.map(lambda se: segment_update(se, x, t, tp, z), jobs))
        return aggregate(SegmentPredictions(plan, updates))

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    try:
        return diffusion.sample_loop(None, schedule, diffusion.timestep_grid(schedule.steps, n_steps),
                                     x, rng, eta, step_fn=step)
    finally:
        if pool is not None:
            pool.shutdown()


def naive_stitch(preds: SegmentPredictions) -> np.ndarray:
    """Non-overlapping baseline: each frame taken from the last segment covering it."""
    plan = preds.plan
    first = np.asarray(preds.preds[0])
    out = np.zeros((plan.T,) + first.shape[1:], dtype=first.dtype)
    for (s, e), p in zip(plan.segments, preds.preds):
        out[s:e] = p
    return out

"""Noise schedules, the ε-prediction objective, conditional inputs and samplers.

Timesteps index the schedule tables directly: ``t`` runs over
``0 .. steps-1`` and the state at ``t`` has signal level ``alpha_bar[t]``.
Samplers start from pure noise at ``t = steps-1`` and return the state at
``t = 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from . import stunet
from .numerics import Tensor


class SamplingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    steps: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    kind: str = "linear"


def make_schedule(kind: str = "linear", steps: int = 1000) -> NoiseSchedule:
    if steps < 2:
        raise ValueError(f"schedule needs at least 2 steps, got {steps}")
    if kind == "linear":
        beta = np.linspace(1e-4, 0.02, steps, dtype=np.float64)
    elif kind == "cosine":
        s = 0.008
        f = np.cos((np.arange(steps + 1) / steps + s) / (1 + s) * math.pi / 2) ** 2
        beta = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
    else:
        raise ValueError(f"unknown schedule kind {kind!r} (expected 'linear' or 'cosine')")
    alpha = 1.0 - beta
    return NoiseSchedule(steps, beta, alpha, np.cumprod(alpha), kind)


def _check_t(t, schedule):
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t >= schedule.steps):
        raise ValueError(f"timestep {t} outside [0, {schedule.steps})")
    return t


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(ab_t) x0 + sqrt(1 - ab_t) eps; ``t`` may be per-item (leading axis)."""
    t = _check_t(t, schedule)
    x0 = np.asarray(x0)
    ab = schedule.alpha_bar[t]
    if ab.ndim:
        ab = ab.reshape((-1,) + (1,) * (x0.ndim - 1))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# conditioning


@dataclass
class ConditioningPair:
    """Masked conditioning clip ``C[T,H,W,3]`` and binary mask ``M[T,H,W,1]`` (1 = keep)."""

    C: np.ndarray
    M: np.ndarray

    def __post_init__(self):
        if self.C.shape[:3] != self.M.shape[:3] or self.M.shape[3] != 1:
            raise ValueError(f"conditioning shapes differ: C {self.C.shape}, M {self.M.shape}")
        if not np.all((self.M == 0) | (self.M == 1)):
            raise ValueError("mask M must be binary")

    def validate(self):
        if not np.array_equal(self.C, self.C * self.M):
            raise ValueError("C must be zero wherever M is zero")
        return self


def assemble_conditional_input(J, pair: ConditioningPair) -> np.ndarray:
    """Channel concatenation ⟨J, C, M⟩ → ``[T, H, W, 7]``."""
    J = np.asarray(J)
    if J.shape[:3] != pair.C.shape[:3]:
        raise ValueError(f"J {J.shape} and conditioning {pair.C.shape} differ in T, H, W")
    return np.concatenate([J, pair.C.astype(J.dtype), pair.M.astype(J.dtype)], axis=-1)


def expand_input_conv(weights: stunet.Weights, extra: int = 4) -> stunet.Weights:
    """Grow the first conv from 3 to 3 + ``extra`` input channels.

    The original kernel slice is kept (frozen, bit-identical); the new slices
    live in the trainable map as ``in_conv.cond_weight`` and start at zero.
    """
    if weights.cond_channels:
        raise ValueError("input conv already expanded")
    out = weights.copy()
    k = weights.spatial["in_conv.weight"]
    out.temporal["in_conv.cond_weight"] = np.zeros((k.shape[0], extra) + k.shape[2:], dtype=k.dtype)
    out.cond_channels = extra
    return out


# ---------------------------------------------------------------------------
# objective


def make_predictor(weights: stunet.Weights, P: dict):
    """ε-predictor over channels-last arrays for use with :func:`training_loss`.

    Image weights take ``x[N,H,W,C]`` with per-item ``t``/labels; video weights
    take a clip batch ``x[B,T,H,W,C]`` and run each clip through the network.
    """
    def to_cf(a):
        return Tensor(np.ascontiguousarray(np.moveaxis(a, -1, 1)))

    if not weights.is_video:
        def predict(x, t, labels):
            out = stunet.apply(weights, P, to_cf(x), t, labels)
            return nx.transpose(out, (0, 2, 3, 1))
        return predict

    def predict_video(x, t, labels):
        outs = []
        for b in range(x.shape[0]):
            out = stunet.apply(weights, P, to_cf(x[b]), int(t[b]), int(labels[b]))
            outs.append(nx.reshape(nx.transpose(out, (0, 2, 3, 1)), (1,) + x.shape[1:-1] + (out.shape[1],)))
        return outs[0] if len(outs) == 1 else nx.concat(outs, axis=0)
    return predict_video


def training_loss(predict, x0, labels, schedule: NoiseSchedule, rng, cond=None):
    """ε-prediction MSE  E‖ε − ε̂(x_t, t, cond)‖² with t ~ U{0..steps-1}.

    ``x0`` is a batch (leading axis) of images or clips in [-1, 1]. ``cond`` is
    an optional list of :class:`ConditioningPair` (one per clip); when given the
    model input is ⟨x_t, C, M⟩. Returns ``(loss, t, eps)``.
    """
    x0 = np.asarray(x0)
    B = x0.shape[0]
    t = rng.integers(0, schedule.steps, size=B)
    eps = rng.standard_normal(x0.shape).astype(x0.dtype)
    x_t = q_sample(x0, t, eps, schedule).astype(x0.dtype)
    if cond is not None:
        x_t = np.stack([assemble_conditional_input(x_t[b], cond[b]) for b in range(B)])
    pred = predict(x_t, t, np.asarray(labels))
    loss = nx.mse(pred, Tensor(eps))
    if not np.isfinite(loss.data):
        raise nx.NonFiniteError(f"non-finite loss at t={t.tolist()}")
    return loss, t, eps


# ---------------------------------------------------------------------------
# sampling


def timestep_grid(steps: int, n_steps: int) -> np.ndarray:
    """``n_steps`` decreasing, distinct timesteps from ``steps-1`` down to 0."""
    if not 2 <= n_steps <= steps:
        raise ValueError(f"n_steps must lie in [2, {steps}], got {n_steps}")
    return np.unique(np.round(np.linspace(0, steps - 1, n_steps)).astype(np.int64))[::-1]


def ddim_update(x, eps, ab_t, ab_prev, eta=0.0, z=None):
    """One generalized DDIM move from signal level ``ab_t`` to ``ab_prev``."""
    x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    sigma = eta * math.sqrt((1.0 - ab_prev) / (1.0 - ab_t) * (1.0 - ab_t / ab_prev)) if eta else 0.0
    out = math.sqrt(ab_prev) * x0 + math.sqrt(max(1.0 - ab_prev - sigma * sigma, 0.0)) * eps
    if sigma:
        out = out + sigma * z
    return out


MODES = {"ddim": 0.0, "ddpm": 1.0}


def sample_loop(eps_fn, schedule: NoiseSchedule, grid, x, rng, eta=0.0, step_fn=None):
    """Reverse process over ``grid`` starting from state ``x`` at ``grid[0]``.

    ``step_fn(x, t, t_prev, z)`` overrides the per-step update (used by the
    windowed sampler); by default it is one DDIM/DDPM move driven by ``eps_fn``.
    """
    ab = schedule.alpha_bar
    for i in range(len(grid) - 1):
        t, tp = int(grid[i]), int(grid[i + 1])
        z = rng.standard_normal(x.shape).astype(x.dtype) if eta else None
        if step_fn is None:
            x = ddim_update(x, eps_fn(x, t), ab[t], ab[tp], eta, z)
        else:
            x = step_fn(x, t, tp, z)
        x = np.asarray(x, dtype=x.dtype)
        if not np.all(np.isfinite(x)):
            raise SamplingError(f"non-finite state at step {i} (t={t} -> {tp})")
    return x


def model_eps_fn(weights: stunet.Weights, label: int = 0, cond: ConditioningPair | None = None, dtype=np.float64):
    def eps_fn(x, t):
        inp = assemble_conditional_input(x, cond) if cond is not None else x
        return stunet.forward(weights, inp, t, label, dtype=dtype)
    return eps_fn


def sample(weights, schedule: NoiseSchedule, mode: str = "ddim", n_steps: int = 50,
           cond: ConditioningPair | None = None, seed: int = 0, shape=None, label: int = 0,
           dtype=np.float64) -> np.ndarray:
    """Draw one clip ``[T, H, W, 3]``.

    ``weights`` is either video :class:`~stvid.stunet.Weights` or an ε callable
    ``eps_fn(x_t, t)``. ``shape`` defaults to ``(16, S, S, 3)`` with S the
    model's image size.
    """
    if mode not in MODES:
        raise ValueError(f"unknown sampler mode {mode!r}")
    if callable(weights):
        eps_fn = weights
    else:
        eps_fn = model_eps_fn(weights, label, cond, dtype)
        if shape is None:
            s = weights.t2i.image_size
            shape = (cond.C.shape[0] if cond is not None else 16, s, s, weights.t2i.out_channels)
    if shape is None:
        raise ValueError("shape is required with a callable denoiser")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(shape).astype(dtype)
    return sample_loop(eps_fn, schedule, timestep_grid(schedule.steps, n_steps), x, rng, MODES[mode])

"""Training loops for the toy image model, its inflation and the SSR models.

Training runs in float32. All randomness (batch choice, timesteps, noise,
masks) comes from a single generator seeded from the run seed; its state is
stored in checkpoints together with the Adam moments, so a resumed run
continues the loss curve exactly.

Per-step losses are noisy because t is uniform. Each run therefore also
reports ``probe_loss``: the loss on a fixed probe batch (fixed items,
timesteps evenly spread over the schedule, fixed noise) evaluated with the
weights used at that step.
"""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass

import numpy as np

from . import applications, data, diffusion, io, stunet
from . import numerics as nx
from .multidiffusion import upsample_nearest
from .numerics import Tensor

TASKS = ("base", "image2video", "inpaint", "cinemagraph")
STYLES = ("none", "invert")


class FrozenWeightError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch: int = 16
    lr: float = 1e-3
    seed: int = 0
    schedule: str = "linear"
    schedule_steps: int = 1000
    probe_every: int = 100
    probe_size: int = 64
    task: str = "base"
    style: str = "none"
    model: str = "base"  # base | ssr
    clip_frames: int = 16

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.lr <= 0:
            raise ValueError("steps, batch and lr must be positive")
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; choose from {TASKS}")
        if self.style not in STYLES:
            raise ValueError(f"unknown style {self.style!r}; choose from {STYLES}")
        if self.model not in ("base", "ssr"):
            raise ValueError(f"unknown model {self.model!r}")


class Adam:
    def __init__(self, lr, b1=0.9, b2=0.999, eps=1e-8, state=None, step=0):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m, self.v = {}, {}
        self.t = step
        for key, arr in (state or {}).items():
            kind, name = key.split(".", 1)
            (self.m if kind == "m" else self.v)[name] = arr.astype(np.float32)

    def step(self, params: dict, grads: dict) -> None:
        self.t += 1
        c1 = np.float32(1.0 - self.b1 ** self.t)
        c2 = np.float32(1.0 - self.b2 ** self.t)
        b1, b2 = np.float32(self.b1), np.float32(self.b2)
        for name in sorted(grads):
            g = grads[name].astype(np.float32)
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = b1 * m + (np.float32(1) - b1) * g
            v = b2 * v + (np.float32(1) - b2) * g * g
            self.m[name], self.v[name] = m, v
            upd = np.float32(self.lr) * (m / c1) / (np.sqrt(v / c2) + np.float32(self.eps))
            params[name] = (params[name] - upd).astype(np.float32)

    def state(self) -> dict:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out


def _style(clips, style):
    return 1.0 - clips if style == "invert" else clips


def _to_model(x):
    return (x * 2.0 - 1.0).astype(np.float32)


def _random_box(rng, T, H, W, all_frames=True):
    h, w = rng.integers(H // 4, H // 2 + 1), rng.integers(W // 4, W // 2 + 1)
    y, x = rng.integers(0, H - h + 1), rng.integers(0, W - w + 1)
    m = np.zeros((T, H, W, 1))
    m[:, y:y + h, x:x + w] = 1.0
    return m if all_frames else m[0]


def make_pair(task, clip, rng):
    T, H, W, _ = clip.shape
    if task == "image2video":
        return applications.cond_image_to_video(clip[0], T)
    if task == "inpaint":
        return applications.cond_inpaint(clip, _random_box(rng, T, H, W))
    return applications.cond_cinemagraph(clip[0], _random_box(rng, T, H, W, all_frames=False), T)


class _Batches:
    """Draws training batches; everything random comes from the caller's rng."""

    def __init__(self, weights, clips, labels, tcfg):
        self.w, self.cfg = weights, tcfg
        self.labels = labels
        size = weights.t2i.image_size
        clips = _style(clips, tcfg.style)
        if tcfg.model == "ssr":
            hi = clips if clips.shape[2] == size else data.downsample(clips, clips.shape[2] // size)
            self.hi = _to_model(hi)
            self.lo = _to_model(data.downsample(hi, 2))
        else:
            f = clips.shape[2] // size
            self.hi = _to_model(data.downsample(clips, f) if f > 1 else clips)
            self.lo = None
        if weights.is_video:
            T = min(tcfg.clip_frames, self.hi.shape[1])
            self.T = T - T % weights.config.time_factor

    def draw(self, rng, n):
        N, T0 = self.hi.shape[:2]
        if not self.w.is_video:
            idx = rng.integers(0, N, n)
            fr = rng.integers(0, T0, n)
            x0 = self.hi[idx, fr]
            low = None if self.lo is None else self.lo[idx, fr]
            return x0, self.labels[idx], None, low
        idx = rng.integers(0, N, n)
        st = rng.integers(0, T0 - self.T + 1, n)
        x0 = np.stack([self.hi[i, s:s + self.T] for i, s in zip(idx, st)])
        low = None if self.lo is None else np.stack([self.lo[i, s:s + self.T] for i, s in zip(idx, st)])
        cond = None
        if self.cfg.task != "base":
            cond = [make_pair(self.cfg.task, x0[b], rng) for b in range(n)]
        return x0, self.labels[idx], cond, low


def _with_low(predict, low):
    if low is None:
        return predict

    def wrapped(x, t, labels):
        up = upsample_nearest(low, 2) if low.ndim == 4 else np.stack([upsample_nearest(v, 2) for v in low])
        return predict(np.concatenate([x, up.astype(x.dtype)], axis=-1), t, labels)
    return wrapped


def _probe(weights, batches, tcfg, sched):
    rng = np.random.default_rng([tcfg.seed, 0x5EED])
    n = tcfg.probe_size if not weights.is_video else max(2, tcfg.probe_size // 4)
    x0, labels, cond, low = batches.draw(rng, n)
    t = np.round(np.linspace(0, sched.steps - 1, n)).astype(np.int64)
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    return x0, labels, cond, low, t, eps


def probe_loss(weights, probe, sched) -> float:
    x0, labels, cond, low, t, eps = probe
    P = stunet.bind(weights, np.float32)
    predict = _with_low(diffusion.make_predictor(weights, P), low)
    x_t = diffusion.q_sample(x0, t, eps, sched).astype(np.float32)
    if cond is not None:
        x_t = np.stack([diffusion.assemble_conditional_input(x_t[b], cond[b]) for b in range(len(x_t))])
    return float(nx.mse(predict(x_t, t, labels), Tensor(eps)).data)


LOG_FIELDS = ["step", "loss", "probe_loss"]


def fit(weights: stunet.Weights, clips, labels, tcfg: TrainConfig, ckpt_path, log_path, resume=None) -> dict:
    """Train ``weights`` in place and write a checkpoint; returns a summary.

    For video weights only the temporal map is updated; the spatial map is
    hashed before and after and any change aborts with FrozenWeightError.
    """
    sched = diffusion.make_schedule(tcfg.schedule, tcfg.schedule_steps)
    batches = _Batches(weights, clips, labels, tcfg)
    probe = _probe(weights, batches, tcfg, sched)
    names = weights.trainable_names()
    target = weights.temporal if weights.is_video else weights.spatial
    spatial_hash = stunet.tensor_map_hash(weights.spatial)

    rng = np.random.default_rng(tcfg.seed)
    opt = Adam(tcfg.lr)
    start, start_hash = 0, spatial_hash
    if resume is not None:
        optim, meta = resume
        start_hash = meta.get("spatial_hash", spatial_hash)
        rng.bit_generator.state = meta["rng_state"]
        start = int(meta["step"])
        opt = Adam(tcfg.lr, state=optim, step=start)
    if start >= tcfg.steps:
        raise ValueError(f"checkpoint is already at step {start} >= {tcfg.steps}")

    mode = "a" if resume is not None else "w"
    first = last = None
    with open(log_path, mode, newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS, lineterminator="\n")
        if resume is None:
            writer.writeheader()
        for step in range(start + 1, tcfg.steps + 1):
            x0, lab, cond, low = batches.draw(rng, tcfg.batch)
            P = stunet.bind(weights, np.float32, names)
            predict = _with_low(diffusion.make_predictor(weights, P), low)
            loss, t, _ = diffusion.training_loss(predict, x0, lab, sched, rng, cond)
            row = {"step": step, "loss": repr(float(loss.data)), "probe_loss": ""}
            if step == 1 or step == tcfg.steps or step % tcfg.probe_every == 0:
                pl = probe_loss(weights, probe, sched)
                row["probe_loss"] = repr(pl)
                if step == 1:
                    first = pl
                last = pl
            loss.backward()
            grads = {n: P[n].grad for n in names}
            for n, g in grads.items():
                if g is None:
                    grads[n] = np.zeros_like(target[n])
                elif not np.all(np.isfinite(g)):
                    raise nx.NonFiniteError(f"non-finite gradient for {n!r} at step {step} (t={t.tolist()})")
            opt.step(target, grads)
            writer.writerow(row)
            if weights.is_video and step % 50 == 0 and stunet.tensor_map_hash(weights.spatial) != spatial_hash:
                raise FrozenWeightError(f"spatial weights changed at step {step}")
    if weights.is_video and stunet.tensor_map_hash(weights.spatial) != spatial_hash:
        raise FrozenWeightError("spatial weights changed during video training")
    meta = {"step": tcfg.steps, "rng_state": rng.bit_generator.state, "train": asdict(tcfg),
            "spatial_hash": start_hash}
    io.save_checkpoint(ckpt_path, weights, opt.state(), meta)
    return {"first_probe": first, "last_probe": last, "steps": tcfg.steps}


def default_t2i_config(model="base") -> stunet.T2IConfig:
    base = stunet.T2IConfig()
    return stunet.ssr_image_config(base) if model == "ssr" else base


def prepare_video_weights(t2i_weights, tcfg: TrainConfig, config: stunet.STUNetConfig | None = None, seed=0):
    cfg = config or stunet.STUNetConfig(t2i=t2i_weights.t2i)
    w = stunet.inflate(t2i_weights, cfg, seed)
    if tcfg.task != "base":
        w = diffusion.expand_input_conv(w)
    return w

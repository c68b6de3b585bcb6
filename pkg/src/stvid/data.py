"""Class-labelled synthetic clips for the toy models.

Each class is a motion family with its own colour:

    0  sinusoid, horizontal, red
    1  sinusoid, vertical, green
    2  bounce, diagonal, blue
    3  linear, random heading, yellow

Every item draws its parameters from its own seed, derived from the dataset
seed and the item index, so any single clip can be regenerated alone.
"""
from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict

import numpy as np

from . import cascade_lab as cl
from . import io

CLASS_COLORS = np.array([[1.0, 0.25, 0.2], [0.2, 1.0, 0.3], [0.25, 0.4, 1.0], [1.0, 0.9, 0.2]])
NUM_CLASSES = len(CLASS_COLORS)
MANIFEST = "manifest.csv"
MANIFEST_FIELDS = ["index", "file", "label", "seed"] + [f for f in asdict(cl.MotionSpec())]


def item_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def draw_spec(label: int, rng, T: int, H: int) -> cl.MotionSpec:
    size = float(rng.uniform(5.0, 8.0))
    room = H / 2 - size / 2 - 2.0
    amp = float(rng.uniform(0.4, 1.0) * room)
    phase = float(rng.uniform(0, 2 * math.pi))
    if label == 0:
        return cl.MotionSpec("sinusoid", amp, float(rng.uniform(0.03, 0.12)), phase, size, 0.0)
    if label == 1:
        return cl.MotionSpec("sinusoid", amp, float(rng.uniform(0.03, 0.12)), phase, size, math.pi / 2)
    if label == 2:
        return cl.MotionSpec("bounce", amp * 0.7, float(rng.uniform(0.03, 0.1)), phase, size, math.pi / 4)
    heading = float(rng.uniform(0, 2 * math.pi))
    vmax = 2 * room / (T - 1)
    return cl.MotionSpec("linear", 0.0, 0.0, 0.0, size, heading, float(rng.uniform(0.3, 1.0) * vmax))


def render_item(label: int, seed: int, T: int, H: int, W: int):
    rng = np.random.default_rng(seed)
    spec = draw_spec(label, rng, T, H)
    video = cl.render_video(spec, T, H, W) * CLASS_COLORS[label]
    return video.astype(np.float32), spec


def generate(out_dir, count: int = 512, seed: int = 0, T: int = 16, H: int = 32, W: int = 32) -> list:
    """Write ``count`` STVF clips plus a manifest; returns the manifest rows."""
    if count < 1:
        raise ValueError("count must be >= 1")
    os.makedirs(os.path.join(out_dir, "clips"), exist_ok=True)
    rows = []
    for i in range(count):
        label = i % NUM_CLASSES
        s = item_seed(seed, i)
        video, spec = render_item(label, s, T, H, W)
        rel = os.path.join("clips", f"{i:05d}.stvf")
        io.write_vid(os.path.join(out_dir, rel), video)
        rows.append({"index": i, "file": rel, "label": label, "seed": s, **asdict(spec)})
    with open(os.path.join(out_dir, MANIFEST), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return rows


def load(data_dir):
    """All clips ``[N, T, H, W, 3]`` in [0, 1] and their labels."""
    path = os.path.join(data_dir, MANIFEST)
    if not os.path.exists(path):
        raise FileNotFoundError(f"no {MANIFEST} in {data_dir}")
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    clips = np.stack([io.read_vid(os.path.join(data_dir, r["file"])) for r in rows])
    labels = np.array([int(r["label"]) for r in rows], dtype=np.int64)
    return clips, labels


def downsample(video, factor: int = 2) -> np.ndarray:
    """Box-filter the two spatial axes (``[..., H, W, C]``) by ``factor``."""
    *lead, H, W, C = video.shape
    v = video.reshape(*lead, H // factor, factor, W // factor, factor, C)
    return v.mean(axis=(-4, -2)).astype(video.dtype)

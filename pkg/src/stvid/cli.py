"""``stvid`` command line.

Every subcommand accepts ``--config FILE.json`` whose keys are the long option
names (dashes or underscores); explicit flags override the file. ``--seed`` is
mandatory, on the command line or in the config.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict

import numpy as np

from . import applications, cascade_lab, data, diffusion, io, multidiffusion, stunet, train
from .numerics import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _floats(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _ints(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def _need_file(path, what):
    if path is None:
        raise ConfigError(f"{what} is required")
    if not os.path.exists(path):
        raise ConfigError(f"{what} {path!r} does not exist")
    return path


def _out_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"cannot create output directory {path!r}: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path!r} is not writable")
    return path


def _parent(path):
    _out_dir(os.path.dirname(os.path.abspath(path)))
    return path


def _to_unit(video):
    return np.clip((np.asarray(video) + 1.0) / 2.0, 0.0, 1.0).astype(np.float32)


def _to_model(video):
    return (np.asarray(video, dtype=np.float64) * 2.0 - 1.0)


def _write_clip(out_dir, stem, video_unit):
    io.write_vid(os.path.join(out_dir, f"{stem}.stvf"), video_unit)
    frame_dir = _out_dir(os.path.join(out_dir, f"{stem}_frames"))
    for f, frame in enumerate(video_unit):
        io.write_ppm(os.path.join(frame_dir, f"frame_{f:03d}.ppm"), frame)


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(a):
    _out_dir(a.out)
    rows = data.generate(a.out, a.count, a.seed, a.frames, a.size, a.size)
    print(f"wrote {len(rows)} clips to {a.out}")


def _train_config(a, **extra):
    try:
        return train.TrainConfig(steps=a.steps, batch=a.batch, lr=a.lr, seed=a.seed, probe_every=a.probe_every,
                                 model=a.model, **extra)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _json_map(value, what):
    if value is None:
        return {}
    if isinstance(value, str):
        try:
            value = json.loads(value)
        except ValueError as exc:
            raise ConfigError(f"{what} is not valid JSON: {exc}") from None
    if not isinstance(value, dict):
        raise ConfigError(f"{what} must be a JSON object")
    return value


def _load_ckpt(path, what):
    _need_file(path, what)
    try:
        return io.load_checkpoint(path)
    except io.FormatError as exc:
        raise ConfigError(str(exc)) from None


def cmd_train_t2i(a):
    clips, labels = data.load(_need_file(a.data, "--data"))
    tcfg = _train_config(a, style=a.style)
    resume = None
    if a.resume:
        weights, optim, meta = _load_ckpt(a.resume, "--resume")
        resume = (optim, meta)
    elif a.init:
        weights, _, _ = _load_ckpt(a.init, "--init")
    else:
        base = asdict(train.default_t2i_config(a.model))
        try:
            weights = stunet.build_t2i(stunet.T2IConfig(**{**base, **_json_map(a.arch, "--arch")}), a.seed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--arch: {exc}") from None
    if weights.is_video:
        raise ConfigError("train-t2i needs an image-model checkpoint")
    summary = train.fit(weights, clips, labels, tcfg, _parent(a.out), _parent(a.log), resume)
    print(json.dumps(summary))


def cmd_train_video(a):
    clips, labels = data.load(_need_file(a.data, "--data"))
    tcfg = _train_config(a, task=a.task, clip_frames=a.frames)
    resume = None
    if a.resume:
        weights, optim, meta = _load_ckpt(a.resume, "--resume")
        resume = (optim, meta)
        if not weights.is_video:
            raise ConfigError("--resume needs a video checkpoint")
    else:
        t2i, _, _ = _load_ckpt(a.t2i, "--t2i")
        if t2i.is_video:
            raise ConfigError("--t2i must be an image-model checkpoint")
        if a.model == "ssr" and t2i.t2i.in_channels != 2 * t2i.t2i.out_channels:
            raise ConfigError("--model ssr needs an image-SSR checkpoint (train-t2i --model ssr)")
        try:
            cfg = stunet.STUNetConfig(t2i=t2i.t2i, **_json_map(a.temporal, "--temporal"))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"--temporal: {exc}") from None
        weights = train.prepare_video_weights(t2i, tcfg, cfg, seed=a.seed)
    if a.frames % weights.config.time_factor:
        raise ConfigError(f"--frames {a.frames} must be divisible by {weights.config.time_factor}")
    summary = train.fit(weights, clips, labels, tcfg, _parent(a.out), _parent(a.log), resume)
    print(json.dumps(summary))


def _schedule_for(meta):
    t = meta.get("train", {})
    return diffusion.make_schedule(t.get("schedule", "linear"), t.get("schedule_steps", 1000))


def _cond_pair(a, weights, T, S):
    if a.task == "base":
        if weights.cond_channels:
            raise ConfigError("checkpoint expects conditioning; pass --task")
        return None
    if not weights.cond_channels:
        raise ConfigError(f"--task {a.task} needs a conditional checkpoint (train-video --task)")
    try:
        mask = io.read_mask(_need_file(a.mask, "--mask"), (S, S)) if a.task != "image2video" else None
        if a.task == "inpaint":
            video = io.read_vid(_need_file(a.cond_video, "--cond-video"))
            if video.shape != (T, S, S, 3):
                raise ConfigError(f"--cond-video is {video.shape}, expected {(T, S, S, 3)}")
            return applications.cond_inpaint(_to_model(video), np.repeat(mask[None], T, axis=0))
        image = io.read_ppm(_need_file(a.cond_image, "--cond-image")).astype(np.float64) / 255.0
    except io.FormatError as exc:
        raise ConfigError(str(exc)) from None
    if image.shape != (S, S, 3):
        raise ConfigError(f"--cond-image is {image.shape}, expected {(S, S, 3)}")
    if a.task == "image2video":
        return applications.cond_image_to_video(_to_model(image), T)
    return applications.cond_cinemagraph(_to_model(image), mask, T)


def _styled(weights, style_path, alpha):
    style, _, _ = _load_ckpt(style_path, "--style")
    try:
        pair = applications.StylePair(weights.spatial, style.spatial, alpha)
        return applications.install_spatial(weights, applications.interpolate_style(pair))
    except ValueError as exc:
        raise ConfigError(f"--style checkpoint incompatible: {exc}") from None


def _base_sample(a, weights, meta, alpha=None):
    if not weights.is_video:
        raise ConfigError("--ckpt must be a video checkpoint")
    if alpha is not None:
        weights = _styled(weights, a.style, alpha)
    S, T = weights.t2i.image_size, a.frames
    if T % weights.config.time_factor:
        raise ConfigError(f"--frames {T} must be divisible by {weights.config.time_factor}")
    if a.mode not in diffusion.MODES:
        raise ConfigError(f"unknown --mode {a.mode!r}")
    sched = _schedule_for(meta)
    if not 2 <= a.n_steps <= sched.steps:
        raise ConfigError(f"--n-steps must lie in [2, {sched.steps}]")
    if a.sdedit:
        try:
            src = io.read_vid(_need_file(a.sdedit, "--sdedit"))
        except io.FormatError as exc:
            raise ConfigError(str(exc)) from None
        if src.shape[1:] != (S, S, 3) or src.shape[0] % weights.config.time_factor:
            raise ConfigError(f"--sdedit clip {src.shape} does not fit the model ({S}x{S}, "
                              f"T divisible by {weights.config.time_factor})")
        if not 0 < a.strength <= 1:
            raise ConfigError("--strength must lie in (0, 1]")
        eps_fn = diffusion.model_eps_fn(weights, a.label, None, np.float32)
        return applications.sdedit_video(eps_fn, sched, _to_model(src), a.strength, a.seed, a.n_steps,
                                         a.label, a.mode, np.float32)
    cond = _cond_pair(a, weights, T, S)
    return diffusion.sample(weights, sched, a.mode, a.n_steps, cond, a.seed, (T, S, S, 3), a.label, np.float32)


def _ssr_stage(a, base):
    ssr, _, meta = _load_ckpt(a.ssr, "--ssr")
    if not ssr.is_video or ssr.t2i.in_channels != 2 * ssr.t2i.out_channels:
        raise ConfigError("--ssr must be a video SSR checkpoint")
    T, H, W, _ = base.shape
    if ssr.t2i.image_size != 2 * H or H != W:
        raise ConfigError(f"SSR model works at {ssr.t2i.image_size}px, base output is {H}x{W} (needs 2x)")
    window = min(a.window, T)
    if window % ssr.config.time_factor:
        raise ConfigError(f"--window {window} must be divisible by {ssr.config.time_factor}")
    try:
        plan = multidiffusion.plan_windows(T, window, a.stride)
    except ValueError as exc:
        raise ConfigError(f"incompatible SSR plan: {exc}") from None
    return multidiffusion.ssr_multidiffusion_sample(ssr, base, plan, _schedule_for(meta), a.n_steps, a.seed,
                                                    a.label, a.mode, 2, np.float32)


def _sample_into(a, out_dir, weights, meta, alpha=None):
    _out_dir(out_dir)
    base = _base_sample(a, weights, meta, alpha)
    if a.ssr:
        _write_clip(out_dir, "base", _to_unit(base))
        video = _ssr_stage(a, base)
    else:
        video = base
    _write_clip(out_dir, "sample", _to_unit(video))
    return video.shape


def cmd_sample(a):
    weights, _, meta = _load_ckpt(a.ckpt, "--ckpt")
    alphas = _floats(a.alpha) if a.style else []
    if a.style and len(alphas) != 1:
        raise ConfigError("sample takes one --alpha; use style-sweep for several")
    shape = _sample_into(a, a.out, weights, meta, alphas[0] if alphas else None)
    print(f"wrote sample {shape} to {a.out}")


def cmd_style_sweep(a):
    weights, _, meta = _load_ckpt(a.ckpt, "--ckpt")
    _need_file(a.style, "--style")
    alphas = _floats(a.alpha)
    if not alphas:
        raise ConfigError("--alpha needs at least one value")
    for alpha in alphas:
        sub = os.path.join(a.out, f"alpha_{alpha:.3f}")
        _sample_into(a, sub, weights, meta, alpha)
        print(f"alpha {alpha}: {sub}")


def _lab_frames(strides, windows, at_least):
    span = 1
    for s in strides:
        for w in windows:
            span = span * s * (w - 1) // math.gcd(span, s * (w - 1))
    return span * max(1, math.ceil((at_least - 1) / span)) + 1


def cmd_alias_lab(a):
    _out_dir(a.out)
    slice_dir = _out_dir(os.path.join(a.out, "slices"))
    freqs, strides, windows = _floats(a.freqs), _ints(a.strides), _ints(a.windows)
    if not freqs or not strides or not windows:
        raise ConfigError("--freqs, --strides and --windows need at least one value each")
    T = a.frames or _lab_frames(strides, windows, 48)
    S, row = a.size, a.size // 2
    rows = []
    for f in freqs:
        spec = cascade_lab.MotionSpec(amplitude=a.amplitude, frequency=f, phase=a.phase, size=a.object_size)
        gt = cascade_lab.render_video(spec, T, S, S, a.seed)
        io.write_pgm(os.path.join(slice_dir, f"gt_f{f:.3f}.pgm"), cascade_lab.xt_slice(gt, row))
        for s in strides:
            count = len(cascade_lab.alias_ambiguity(spec, s, S, S))
            for w in windows:
                cascade = cascade_lab.CascadeSpec(s, w)
                out = cascade_lab.simulate_cascade(gt, cascade, spec, a.seed)
                io.write_pgm(os.path.join(slice_dir, f"cascade_f{f:.3f}_s{s}_w{w}.pgm"),
                             cascade_lab.xt_slice(out, row))
                rows.append(cascade_lab.sweep_row(spec, cascade, cascade_lab.consistency_metric(out), count))
    cascade_lab.write_metric_csv(os.path.join(a.out, "metrics.csv"), rows)
    print(f"wrote {len(rows)} rows and {len(rows) + len(freqs)} slices to {a.out}")


# ---------------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--config", help="JSON file with option defaults")
    p.add_argument("--seed", type=int, default=None)


def _train_opts(p, batch):
    p.add_argument("--data", help="dataset directory from gen-data")
    p.add_argument("--out", default="model.ckpt")
    p.add_argument("--log", default="loss.csv")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--batch", type=int, default=batch)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--probe-every", type=int, default=100)
    p.add_argument("--model", choices=("base", "ssr"), default="base")
    p.add_argument("--resume", help="checkpoint to continue from")


def _sample_opts(p):
    p.add_argument("--ckpt", help="video checkpoint")
    p.add_argument("--out", default="sample")
    p.add_argument("--label", type=int, default=0)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--n-steps", type=int, default=50)
    p.add_argument("--mode", default="ddim", help="ddim or ddpm")
    p.add_argument("--task", choices=train.TASKS, default="base")
    p.add_argument("--cond-image", help="PPM first frame / still image")
    p.add_argument("--cond-video", help="STVF clip for inpainting")
    p.add_argument("--mask", help="PGM region mask, 255 = region to synthesise / animate")
    p.add_argument("--ssr", help="video SSR checkpoint for the MultiDiffusion stage")
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--stride", type=int, default=6)
    p.add_argument("--style", help="style-finetuned image checkpoint")
    p.add_argument("--alpha", default="0.75")
    p.add_argument("--sdedit", help="STVF clip to edit")
    p.add_argument("--strength", type=float, default=0.97)


def build_parser():
    parser = argparse.ArgumentParser(prog="stvid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic dataset")
    _common(p)
    p.add_argument("--out", default="data")
    p.add_argument("--count", type=int, default=512)
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--size", type=int, default=32)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-t2i", help="train (or style-finetune) the image model")
    _common(p)
    _train_opts(p, 16)
    p.add_argument("--style", choices=train.STYLES, default="none", help="train on a style-transformed copy")
    p.add_argument("--init", help="image checkpoint to fine-tune from")
    p.add_argument("--arch", help="JSON object overriding image-model fields (levels, base_channels, ...)")
    p.set_defaults(func=cmd_train_t2i)

    p = sub.add_parser("train-video", help="inflate an image model and train its temporal weights")
    _common(p)
    _train_opts(p, 2)
    p.add_argument("--t2i", help="image checkpoint to inflate")
    p.add_argument("--task", choices=train.TASKS, default="base")
    p.add_argument("--frames", type=int, default=16)
    p.add_argument("--temporal", help="JSON object of temporal fields (temporal_kernel, temporal_levels, ...)")
    p.set_defaults(func=cmd_train_video)

    p = sub.add_parser("sample", help="generate a clip")
    _common(p)
    _sample_opts(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("style-sweep", help="one sample per interpolation coefficient")
    _common(p)
    _sample_opts(p)
    p.set_defaults(func=cmd_style_sweep, alpha="0.5,0.75,1.0")

    p = sub.add_parser("alias-lab", help="temporal aliasing sweep over keyframe cascades")
    _common(p)
    p.add_argument("--out", default="alias_lab")
    p.add_argument("--freqs", default="0.05,0.1,0.2,0.3,0.4")
    p.add_argument("--strides", default="2,4")
    p.add_argument("--windows", default="2,3")
    p.add_argument("--frames", type=int, default=0, help="0 picks the smallest valid length >= 49")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--amplitude", type=float, default=8.0)
    p.add_argument("--phase", type=float, default=0.3)
    p.add_argument("--object-size", type=float, default=6.0)
    p.set_defaults(func=cmd_alias_lab)
    return parser


def _apply_config(parser, argv):
    args = parser.parse_args(argv)
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, ValueError) as exc:
            raise ConfigError(f"cannot read --config {args.config!r}: {exc}") from None
        if not isinstance(cfg, dict):
            raise ConfigError("--config must hold a JSON object")
        known = set(vars(args))
        sub = parser._subparsers._group_actions[0].choices[args.command]
        defaults = {}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if dest not in known or dest in ("func", "command", "config"):
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            defaults[dest] = value
        sub.set_defaults(**defaults)
        args = parser.parse_args(argv)
    if args.seed is None:
        raise ConfigError("--seed is required (flag or config)")
    return args


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        args.func(args)
    except SystemExit as exc:
        return int(exc.code) if isinstance(exc.code, int) else EXIT_CONFIG
    except (ConfigError, FileNotFoundError, io.FormatError) as exc:
        print(f"stvid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, diffusion.SamplingError, train.FrozenWeightError, FloatingPointError) as exc:
        print(f"stvid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"stvid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

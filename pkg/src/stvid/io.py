"""On-disk formats: checkpoints, STVF clips, PGM/PPM images.

Checkpoint layout::

    b"STCK" | u32 version | u64 header length | JSON header | payload

The header lists every tensor with its shape, dtype, byte offset into the
payload, frozen flag and map (``spatial``, ``temporal`` or ``optim``), plus an
echo of the model config and free-form ``meta``. The payload is little-endian
float32.

STVF layout::

    b"STVF" | u32 T | u32 H | u32 W | u32 C | float32 payload, frame-major
"""
from __future__ import annotations

import json
import struct

import numpy as np

from . import stunet

CKPT_MAGIC = b"STCK"
CKPT_VERSION = 1
VID_MAGIC = b"STVF"
F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, weights: stunet.Weights, optim: dict | None = None, meta: dict | None = None) -> None:
    """Write ``weights`` (plus optional optimizer tensors and metadata)."""
    flags = weights.frozen_flags()
    entries, chunks, offset = [], [], 0
    groups = [("spatial", weights.spatial), ("temporal", weights.temporal), ("optim", optim or {})]
    for group, tensors in groups:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype=F32)
            raw = arr.tobytes()
            entries.append({"name": name, "map": group, "shape": list(arr.shape), "dtype": "float32",
                            "offset": offset, "nbytes": len(raw), "frozen": bool(flags.get(name, False))})
            chunks.append(raw)
            offset += len(raw)
    header = {
        "version": CKPT_VERSION,
        "config": stunet.config_to_dict(weights.config),
        "cond_channels": weights.cond_channels,
        "tensors": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(blob)))
        fh.write(blob)
        for raw in chunks:
            fh.write(raw)


def _expected_shapes(config, cond_channels) -> dict:
    if isinstance(config, stunet.STUNetConfig):
        shapes = dict(stunet.t2i_param_shapes(config.t2i))
        shapes.update(stunet.temporal_param_shapes(config))
        base = config.t2i.base_channels
    else:
        shapes = dict(stunet.t2i_param_shapes(config))
        base = config.base_channels
    if cond_channels:
        shapes["in_conv.cond_weight"] = (base, cond_channels, 3, 3)
    return shapes


def load_checkpoint(path, expect_config=None):
    """Read a checkpoint; returns ``(weights, optim, meta)``.

    Raises :class:`FormatError` naming the offending tensor on any mismatch
    with the config echo (or with ``expect_config`` when given).
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", data[4:16])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, this build reads version {CKPT_VERSION}")
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except ValueError as exc:
        raise FormatError(f"{path}: corrupt header ({exc})") from None
    config = stunet.config_from_dict(header["config"])
    if expect_config is not None and config != expect_config:
        raise FormatError(f"{path}: model config differs from the requested one")
    payload = memoryview(data)[16 + hlen:]
    expected = _expected_shapes(config, header.get("cond_channels", 0))
    maps = {"spatial": {}, "temporal": {}, "optim": {}}
    spans = []
    for e in header["tensors"]:
        name, shape = e["name"], tuple(e["shape"])
        if e["dtype"] != "float32":
            raise FormatError(f"tensor {name!r}: unsupported dtype {e['dtype']}")
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if e["nbytes"] != n or e["offset"] < 0 or e["offset"] + n > len(payload):
            raise FormatError(f"tensor {name!r}: byte range [{e['offset']}, {e['offset'] + n}) "
                              f"outside payload of {len(payload)} bytes")
        spans.append((e["offset"], e["offset"] + n, name))
        if e["map"] != "optim":
            want = expected.get(name)
            if want is None:
                raise FormatError(f"tensor {name!r} is not part of the configured model")
            if tuple(want) != shape:
                raise FormatError(f"tensor {name!r}: shape {shape} in file, config expects {tuple(want)}")
        arr = np.frombuffer(payload[e["offset"]:e["offset"] + n], dtype=F32).reshape(shape)
        maps[e["map"]][name] = arr.astype(np.float32)
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise FormatError(f"tensors {n0!r} and {n1!r} overlap in the payload")
    missing = sorted(set(expected) - set(maps["spatial"]) - set(maps["temporal"]))
    if missing:
        raise FormatError(f"checkpoint lacks tensor {missing[0]!r}" + (f" (+{len(missing) - 1} more)" if len(missing) > 1 else ""))
    weights = stunet.Weights(config, maps["spatial"], maps["temporal"], header.get("cond_channels", 0))
    return weights, maps["optim"], header.get("meta", {})


# ---------------------------------------------------------------------------
# STVF clips


def write_vid(path, video) -> None:
    video = np.ascontiguousarray(video, dtype=F32)
    if video.ndim != 4:
        raise ValueError(f"expected [T, H, W, C], got shape {video.shape}")
    with open(path, "wb") as fh:
        fh.write(VID_MAGIC)
        fh.write(struct.pack("<4I", *video.shape))
        fh.write(video.tobytes())


def read_vid(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != VID_MAGIC:
        raise FormatError(f"{path}: not an STVF file (bad magic)")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    shape = struct.unpack("<4I", data[4:20])
    need = int(np.prod(shape, dtype=np.int64)) * 4
    if len(data) - 20 != need:
        raise FormatError(f"{path}: payload is {len(data) - 20} bytes, header {shape} needs {need}")
    return np.frombuffer(data, dtype=F32, offset=20).reshape(shape).copy()


# ---------------------------------------------------------------------------
# PGM / PPM


def to_u8(img) -> np.ndarray:
    """Map [0, 1] floats to bytes (clipped, rounded half to even)."""
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, img) -> None:
    img = to_u8(img)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D image, got shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def write_ppm(path, img) -> None:
    img = to_u8(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"PPM needs an H x W x 3 image, got shape {img.shape}")
    with open(path, "wb") as fh:
        fh.write(b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        fh.write(img.tobytes())


def _read_pnm(path, magic):
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} image, found {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    depth = 3 if magic == b"P6" else 1
    body = data[pos + 1:]
    if len(body) != w * h * depth:
        raise FormatError(f"{path}: {len(body)} pixel bytes, expected {w * h * depth}")
    arr = np.frombuffer(body, dtype=np.uint8).reshape((h, w, depth) if depth == 3 else (h, w))
    return arr.copy()


def read_pgm(path) -> np.ndarray:
    return _read_pnm(path, b"P5")


def read_ppm(path) -> np.ndarray:
    return _read_pnm(path, b"P6")


def read_mask(path, shape=None) -> np.ndarray:
    """Binary region mask ``[H, W, 1]`` from a 0/255 PGM."""
    img = read_pgm(path)
    bad = ~np.isin(img, (0, 255))
    if bad.any():
        raise FormatError(f"{path}: mask pixels must be 0 or 255 ({int(bad.sum())} are not)")
    if shape is not None and img.shape != tuple(shape):
        raise FormatError(f"{path}: mask is {img.shape}, frames are {tuple(shape)}")
    return (img == 255).astype(np.float64)[..., None]

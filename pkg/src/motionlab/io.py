"""Portable tensor files, checkpoint containers and clip export.

Tensor file layout (little-endian)::

    12-byte magic b"MOTIONLABTNS" | u32 version | u64 ndim | u64 dims[ndim] | f32 data (row-major)

Checkpoint layout::

    12-byte magic b"MOTIONLABCKP" | u32 version | u32 header_len | header (UTF-8 JSON)
    | u64 n_records | records...

with each record ``u32 name_len | name | u64 ndim | u64 dims[ndim] | f32 data``.
The JSON header carries ``kind`` ("model" or "adapters"), the network config,
and for adapter checkpoints the plan descriptor.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .adapters import InjectionPlan, LoraAdapter
from .errors import ConfigError
from .synthvid import VideoClip

TENSOR_MAGIC = b"MOTIONLABTNS"
CKPT_MAGIC = b"MOTIONLABCKP"
VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _pack_array(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f4"))
    return struct.pack("<Q", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape) + a.tobytes()


def _unpack_array(buf: memoryview, off: int) -> tuple[np.ndarray, int]:
    (ndim,) = struct.unpack_from("<Q", buf, off)
    off += 8
    dims = struct.unpack_from(f"<{ndim}Q", buf, off)
    off += 8 * ndim
    count = int(np.prod(dims)) if ndim else 1
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).copy()
    return arr, off + 4 * count


def encode_tensor(arr) -> bytes:
    return TENSOR_MAGIC + struct.pack("<I", VERSION) + _pack_array(arr)


def decode_tensor(data: bytes) -> np.ndarray:
    if data[:12] != TENSOR_MAGIC:
        raise ConfigError("not a tensor file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 12)
    if version != VERSION:
        raise ConfigError(f"unsupported tensor file version {version}")
    arr, _ = _unpack_array(memoryview(data), 16)
    return arr


def save_tensor(path, arr) -> None:
    if isinstance(arr, VideoClip):
        arr = arr.data
    if isinstance(arr, torch.Tensor):
        arr = arr.detach().cpu().numpy()
    atomic_write_bytes(path, encode_tensor(arr))


def load_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def load_clip(path) -> VideoClip:
    return VideoClip(load_tensor(path))


def encode_checkpoint(header: dict, records: dict[str, np.ndarray]) -> bytes:
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<II", VERSION, len(head)), head, struct.pack("<Q", len(records))]
    for name in sorted(records):
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw + _pack_array(records[name]))
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:12] != CKPT_MAGIC:
        raise ConfigError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 12)
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    off = 20
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    off += hlen
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    buf = memoryview(data)
    records = {}
    for _ in range(n):
        (nlen,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        records[name], off = _unpack_array(buf, off)
    return header, records


def save_model(path, model) -> None:
    header = {"kind": "model", "config": model.config.to_dict()}
    records = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    atomic_write_bytes(path, encode_checkpoint(header, records))


def load_model(path):
    from .net import UNet, UNetConfig

    header, records = decode_checkpoint(Path(path).read_bytes())
    if header.get("kind") != "model":
        raise ConfigError(f"{path} is not a model checkpoint")
    model = UNet(UNetConfig.from_dict(header["config"]))
    state = {k: torch.from_numpy(v) for k, v in records.items()}
    model.load_state_dict(state)
    model.eval()
    return model


def save_plan(path, plan: InjectionPlan, model_config=None) -> None:
    header = {"kind": "adapters", "plan": plan.describe()}
    if model_config is not None:
        header["config"] = model_config.to_dict()
    records = {}
    for (p, s), a in plan.entries.items():
        records[f"{p}/{s}/A"] = a.A.detach().cpu().numpy()
        records[f"{p}/{s}/B"] = a.B.detach().cpu().numpy()
    atomic_write_bytes(path, encode_checkpoint(header, records))


def load_plan(path) -> InjectionPlan:
    header, records = decode_checkpoint(Path(path).read_bytes())
    if header.get("kind") != "adapters":
        raise ConfigError(f"{path} is not an adapter checkpoint")
    desc = header["plan"]
    entries = {}
    for e in desc["entries"]:
        a = LoraAdapter(e["d_in"], e["d_out"], e["rank"], e["scale"])
        with torch.no_grad():
            a.A.copy_(torch.from_numpy(records[f"{e['path']}/{e['slot']}/A"]))
            a.B.copy_(torch.from_numpy(records[f"{e['path']}/{e['slot']}/B"]))
        a.requires_grad_(False)
        entries[(e["path"], e["slot"])] = a
    return InjectionPlan(desc["mode"], entries)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm_frames(clip: VideoClip, directory, stem: str = "frame") -> list[Path]:
    """One binary PPM (P6) per frame."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, frame in enumerate(clip.data):
        px = _to_uint8(frame)
        h, w = px.shape[:2]
        p = d / f"{stem}_{i:03d}.ppm"
        atomic_write_bytes(p, f"P6\n{w} {h}\n255\n".encode("ascii") + px.tobytes())
        paths.append(p)
    return paths


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None:
        raise ConfigError("not a binary PPM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=m.end()).reshape(h, w, 3)


def write_gif(clip: VideoClip, path, upscale: int = 8, duration_ms: int = 120) -> Path:
    from PIL import Image

    frames = [
        Image.fromarray(_to_uint8(f)).resize((f.shape[1] * upscale, f.shape[0] * upscale), Image.NEAREST)
        for f in clip.data
    ]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frames[0].save(path, save_all=True, append_images=frames[1:], duration=duration_ms, loop=0)
    return path

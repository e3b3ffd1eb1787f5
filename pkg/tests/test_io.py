import struct

import numpy as np
import pytest
import torch

from motionlab import io
from motionlab.adapters import PlanMode, make_plan
from motionlab.errors import ConfigError
from motionlab.net import UNet
from motionlab.synthvid import ClipSpec, render_clip

from conftest import tiny_config


def test_tensor_layout_by_hand():
    data = io.encode_tensor(np.array([[1.0, 2.0, 3.0]], dtype=np.float32))
    assert data[:12] == b"MOTIONLABTNS"
    assert struct.unpack("<I", data[12:16]) == (1,)
    assert struct.unpack("<Q", data[16:24]) == (2,)
    assert struct.unpack("<2Q", data[24:40]) == (1, 3)
    assert np.frombuffer(data[40:], "<f4").tolist() == [1.0, 2.0, 3.0]
    assert len(data) == 40 + 12


def test_tensor_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(2, 3, 4)).astype(np.float32)
    io.save_tensor(tmp_path / "a.tns", arr)
    assert np.array_equal(io.load_tensor(tmp_path / "a.tns"), arr)
    io.save_tensor(tmp_path / "s.tns", np.float32(2.5))
    assert io.load_tensor(tmp_path / "s.tns") == 2.5
    clip = render_clip(ClipSpec())
    io.save_tensor(tmp_path / "c.tns", clip)
    assert np.array_equal(io.load_clip(tmp_path / "c.tns").data, clip.data)
    io.save_tensor(tmp_path / "t.tns", torch.ones(2))
    assert io.load_tensor(tmp_path / "t.tns").tolist() == [1.0, 1.0]


def test_bad_magic_and_version():
    with pytest.raises(ConfigError):
        io.decode_tensor(b"NOTATENSOR!!" + bytes(20))
    bad = bytearray(io.encode_tensor(np.zeros(2)))
    bad[12] = 9
    with pytest.raises(ConfigError):
        io.decode_tensor(bytes(bad))
    with pytest.raises(ConfigError):
        io.decode_checkpoint(b"x" * 40)


def test_model_checkpoint_roundtrip(tmp_path):
    torch.manual_seed(0)
    m = UNet(tiny_config())
    io.save_model(tmp_path / "m.ckpt", m)
    again = io.load_model(tmp_path / "m.ckpt")
    assert again.config == m.config
    for (k, a), b in zip(m.state_dict().items(), again.state_dict().values()):
        assert torch.equal(a, b), k
    # bytes are a deterministic function of the weights
    io.save_model(tmp_path / "m2.ckpt", again)
    assert (tmp_path / "m.ckpt").read_bytes() == (tmp_path / "m2.ckpt").read_bytes()
    assert io.file_digest(tmp_path / "m.ckpt") == io.file_digest(tmp_path / "m2.ckpt")


def test_plan_checkpoint_roundtrip(tmp_path):
    cfg = tiny_config()
    plan = make_plan(PlanMode.FULL_TEMPORAL, 2, 0.5, cfg, seed=3)
    with torch.no_grad():
        for a in plan.entries.values():
            a.B.normal_()
    io.save_plan(tmp_path / "p.ckpt", plan, cfg)
    again = io.load_plan(tmp_path / "p.ckpt")
    assert again.mode is PlanMode.FULL_TEMPORAL and again.keys() == plan.keys()
    for k in plan.keys():
        assert torch.equal(plan.entries[k].B, again.entries[k].B)
        assert again.entries[k].scale == 0.5
    with pytest.raises(ConfigError):
        io.load_model(tmp_path / "p.ckpt")
    io.save_model(tmp_path / "m.ckpt", UNet(cfg))
    with pytest.raises(ConfigError):
        io.load_plan(tmp_path / "m.ckpt")


def test_atomic_write_leaves_no_temp(tmp_path):
    io.atomic_write_text(tmp_path / "d" / "x.txt", "hi")
    assert (tmp_path / "d" / "x.txt").read_text() == "hi"
    assert [p.name for p in (tmp_path / "d").iterdir()] == ["x.txt"]


def test_clip_exports(tmp_path):
    clip = render_clip(ClipSpec(frames=3))
    paths = io.write_ppm_frames(clip, tmp_path / "ppm")
    assert len(paths) == 3
    px = io.read_ppm(paths[1])
    assert px.shape == (16, 16, 3)
    assert np.abs(px / 255.0 - clip.data[1]).max() <= 0.5 / 255 + 1e-6
    gif = io.write_gif(clip, tmp_path / "c.gif")
    from PIL import Image

    im = Image.open(gif)
    assert im.n_frames == 3 and im.size == (128, 128)

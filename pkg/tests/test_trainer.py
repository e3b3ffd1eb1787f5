import numpy as np
import pytest
import torch

from motionlab import io
from motionlab.adapters import PlanMode, make_plan
from motionlab.errors import ConfigError, DependencyError, DivergenceError, PlanError
from motionlab.net import UNet, merged_state_dict
from motionlab.synthvid import ArtifactSpec, build_corpus, build_reference_set
from motionlab.trainer import (
    DataConfig,
    RunConfig,
    TrainConfig,
    fit_spatial_plan,
    make_data,
    pretrain_base,
    read_manifest,
    replay_manifest,
    run_customization,
    train_spatial_path,
    train_temporal_path,
    validation_loss,
)

from conftest import tiny_config

KW = dict(frames=4, height=8, width=8)


@pytest.fixture(scope="module")
def tiny_base():
    corpus = build_corpus(16, seed=0, exclude_motion="orbit", **KW)
    res = pretrain_base(corpus, TrainConfig(steps=80, T=20, seed=0, lr=2e-3), tiny_config())
    return res


@pytest.fixture(scope="module")
def refs():
    return build_reference_set("orbit", 2, ArtifactSpec(), seed=0, **KW)


def _median_drop(losses):
    n = max(1, len(losses) // 10)
    return np.median(losses[-n:]) < np.median(losses[:n])


def test_pretrain_loss_decreases(tiny_base):
    assert _median_drop(tiny_base.losses)
    assert np.isfinite(tiny_base.val_loss)


def test_unseen_motion_row_tied_to_null(tiny_base):
    m = tiny_base.model
    w = m.cond.motion.weight
    assert torch.equal(w[1], w[m.cond.NULL_MOTION])  # orbit is index 1 and never trained


def test_pretrain_is_deterministic():
    corpus = build_corpus(8, seed=0, **KW)
    cfg = TrainConfig(steps=5, T=20, seed=3, ah_mix=0.5, cosine_decay=True)
    a = pretrain_base(corpus, cfg, tiny_config())
    b = pretrain_base(corpus, cfg, tiny_config())
    assert a.losses == b.losses
    for (k, va), vb in zip(a.model.state_dict().items(), b.model.state_dict().values()):
        assert torch.equal(va, vb), k


def test_spatial_phase_trains_only_spatial_adapters(tiny_base, refs):
    base = tiny_base.model
    before = {k: v.clone() for k, v in base.state_dict().items()}
    res = train_spatial_path(base, refs, TrainConfig(steps=30, T=20, seed=1, lr=5e-3))
    assert _median_drop(res.losses)
    assert all(torch.equal(before[k], v) for k, v in base.state_dict().items())
    assert res.plan.mode is PlanMode.SPATIAL_PATH
    assert all(torch.any(a.B != 0) for a in res.plan.entries.values())
    assert not any(p.requires_grad for p in res.plan.parameters())


def test_tap_phase_changes_only_temporal_keys(tiny_base, refs):
    base = tiny_base.model
    sp = train_spatial_path(base, refs, TrainConfig(steps=5, T=20, seed=1))
    sp_plan = sp.plan
    sp_before = {k: (a.A.clone(), a.B.clone()) for k, a in sp_plan.entries.items()}
    res = train_temporal_path(base, sp_plan, refs, TrainConfig(steps=40, T=20, seed=2, plan="tap", lr=5e-3))
    assert _median_drop(res.losses)
    # spatial adapters were frozen
    for k, (A, B) in sp_before.items():
        assert torch.equal(sp_plan.entries[k].A, A) and torch.equal(sp_plan.entries[k].B, B)
    ref = merged_state_dict(base, None)
    got = merged_state_dict(base, res.plan)
    changed = {k for k in ref if not torch.equal(ref[k], got[k])}
    assert changed and all(k.endswith(".temporal.attn.W_K") for k in changed)


def test_temporal_ah_training_runs(tiny_base, refs):
    res = train_temporal_path(tiny_base.model, None, refs, TrainConfig(steps=5, T=20, seed=2, plan="k", ah_in_training=True))
    assert len(res.losses) == 5


def test_phase_errors(tiny_base, refs):
    base = tiny_base.model
    with pytest.raises(ConfigError):
        pretrain_base([], TrainConfig(steps=1, T=20), tiny_config())
    with pytest.raises(ConfigError):
        train_spatial_path(base, [], TrainConfig(steps=1, T=20))
    with pytest.raises(PlanError):
        fit_spatial_plan(base, make_plan(PlanMode.TAP, 2, 1.0, base.config), refs, TrainConfig(steps=1, T=20))
    with pytest.raises(PlanError):
        train_temporal_path(base, None, refs, TrainConfig(steps=1, T=20), plan=make_plan(PlanMode.SPATIAL_PATH, 2, 1.0, base.config))
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ConfigError):
        pretrain_base(refs, TrainConfig(steps=1, T=30), tiny_config())


def test_divergence_is_reported(tiny_base, refs):
    broken = UNet(tiny_base.model.config)
    broken.load_state_dict(tiny_base.model.state_dict())
    with torch.no_grad():
        broken.patch_in.weight.fill_(float("nan"))
    with pytest.raises(DivergenceError):
        train_spatial_path(broken, refs, TrainConfig(steps=2, T=20))


def test_sgd_option_and_validation_loss(tiny_base, refs):
    res = train_spatial_path(tiny_base.model, refs, TrainConfig(steps=3, T=20, optimizer="sgd"))
    assert len(res.losses) == 3
    v = validation_loss(tiny_base.model, refs, TrainConfig(T=20))
    assert v == validation_loss(tiny_base.model, refs, TrainConfig(T=20))


def test_checkpoint_snapshots(tiny_base, refs):
    res = train_spatial_path(tiny_base.model, refs, TrainConfig(steps=6, T=20, checkpoint_every=2))
    assert len(res.snapshots) == 3


def _tiny_run():
    m = tiny_config()
    return RunConfig(
        model=m,
        data=DataConfig(corpus_size=8, val_size=4, refs=2),
        base=TrainConfig(steps=4, T=20, seed=0),
        spatial=TrainConfig(steps=3, T=20, seed=1, plan="spatial"),
        temporal=TrainConfig(steps=3, T=20, seed=2, plan="tap"),
    )


def test_run_customization_and_replay(tmp_path):
    cfg = _tiny_run()
    cps = run_customization(cfg, tmp_path / "a")
    man = read_manifest(cps.manifest)
    assert man["manifest"]["config_hash"] == cfg.hash()
    assert set(cps.inference_bundle()) == {"base", "temporal"}
    again = replay_manifest(cps.manifest, tmp_path / "b")
    for name in ("base", "spatial", "temporal"):
        assert getattr(cps, name).read_bytes() == getattr(again, name).read_bytes()
    assert io.load_plan(cps.temporal).mode is PlanMode.TAP


def test_run_customization_missing_base(tmp_path):
    with pytest.raises(DependencyError):
        run_customization(_tiny_run(), tmp_path, base_checkpoint=tmp_path / "nope.ckpt")


def test_run_config_roundtrip():
    cfg = _tiny_run()
    again = RunConfig.from_dict(cfg.to_dict())
    assert again.hash() == cfg.hash()
    corpus, val, refs, art = make_data(cfg)
    assert len(corpus) == 8 and len(val) == 4 and len(refs) == 2 and art is not None

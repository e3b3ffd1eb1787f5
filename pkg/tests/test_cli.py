import csv
import subprocess
import sys

import pytest

from motionlab import io
from motionlab.cli import default_config, dump_config, load_config, main
from motionlab.experiments import EvalConfig
from motionlab.trainer import DataConfig, RunConfig, TrainConfig

from conftest import tiny_config

TINY = RunConfig(
    model=tiny_config(),
    data=DataConfig(corpus_size=12, val_size=4, refs=2),
    base=TrainConfig(steps=6, batch_size=4, T=20, seed=0),
    spatial=TrainConfig(steps=3, batch_size=2, T=20, seed=1, plan="spatial"),
    temporal=TrainConfig(steps=3, batch_size=2, T=20, seed=2, plan="tap"),
)
TINY_EVAL = EvalConfig(prompts=2, samples_per_prompt=4, seeds=(0,), probe_steps=2)


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    path.write_text(dump_config(TINY, TINY_EVAL))
    return path


def test_config_roundtrip(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text(dump_config(TINY, EvalConfig()))
    run, ev = load_config(p)
    assert run.to_dict() == TINY.to_dict() and run.base.T == 20
    p.write_text(dump_config(default_config(), EvalConfig()))
    run, ev = load_config(p)
    assert run.to_dict() == default_config().to_dict()
    assert ev == EvalConfig()


def test_config_errors(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[meta]\nschema = 99\n")
    assert main(["synth", "--config", str(p), "--out-dir", str(tmp_path)]) == 2
    assert "schema" in capsys.readouterr().err
    assert main(["synth", "--config", str(tmp_path / "missing.ini")]) == 2
    p.write_text("[meta]\nschema = 1\n[base]\nlr = -1.0\n")
    assert main(["pretrain", "--config", str(p), "--out-dir", str(tmp_path)]) == 2


def test_init_writes_loadable_config(tmp_path):
    assert main(["init", "--out-dir", str(tmp_path)]) == 0
    run, _ = load_config(tmp_path / "config.ini")
    assert run.base.steps == default_config().base.steps


def test_sample_without_checkpoints_is_a_dependency_error(tmp_path, tiny_ini, capsys):
    code = main(["sample", "--config", str(tiny_ini), "--checkpoints", str(tmp_path / "none"), "--out-dir", str(tmp_path)])
    assert code == 2
    assert "missing" in capsys.readouterr().err


def test_pipeline_end_to_end(tmp_path, tiny_ini):
    cfg = ["--config", str(tiny_ini)]
    assert main(["synth", *cfg, "--out-dir", str(tmp_path / "data")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "data" / "index.csv")))
    assert sum(r["split"] == "corpus" for r in rows) == 12
    assert all(r["artifact"] == "True" for r in rows if r["split"] == "refs")
    assert sum(r["motion"] == "orbit" for r in rows if r["split"] == "corpus") == 1  # 5% target share, at least one clip

    assert main(["pretrain", *cfg, "--out-dir", str(tmp_path / "base")]) == 0
    assert (tmp_path / "base" / "base.ckpt").exists()

    custom = tmp_path / "custom"
    args = ["customize", *cfg, "--base", str(tmp_path / "base" / "base.ckpt"), "--out-dir", str(custom)]
    assert main([*args, "--plan", "k"]) == 0
    plan = io.load_plan(custom / "temporal.ckpt")
    assert plan.keys() and all(slot == "K" for _, slot in plan.keys())

    out = tmp_path / "samples"
    assert main(["sample", *cfg, "--checkpoints", str(custom), "--skip-mode", "ah", "--beta", "1.2", "--tau", "5", "--ppm", "--out-dir", str(out)]) == 0
    assert (out / "sample_007.gif").exists() and (out / "sample_000_frames" / "frame_003.ppm").exists()
    metrics = list(csv.reader(open(out / "metrics.csv")))
    assert metrics[1][0] == "ah_beta=1.2_tau=5"

    assert main(["ablate", *cfg, "--suite", "pli", "--cache-dir", str(tmp_path / "cache"), "--out-dir", str(tmp_path / "abl")]) == 0
    assert (tmp_path / "abl" / "pli.svg").exists()
    ranked = list(csv.DictReader(open(tmp_path / "abl" / "pli_ranked.csv")))
    assert {r["rank"] for r in ranked} == {str(i) for i in range(1, len(ranked) + 1)}

    assert main(["probe", *cfg, "--cache-dir", str(tmp_path / "cache"), "--out-dir", str(tmp_path / "probe")]) == 0
    assert "classified as TAP" in (tmp_path / "probe" / "probe.txt").read_text()


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "motionlab", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "ablate" in res.stdout

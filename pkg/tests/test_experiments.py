import numpy as np
import pytest

from motionlab.errors import ConfigError
from motionlab.experiments import (
    EvalConfig,
    Variant,
    beta_variants,
    medians,
    pli_variants,
    prompt_grid,
    ranked_table,
    seeded,
    table1_variants,
    write_suite,
)
from motionlab.plots import line_chart_svg
from motionlab.synthvid import Motion, build_reference_set
from motionlab.trainer import TrainConfig


def test_prompt_grid_holds_out_reference_colours():
    refs = build_reference_set(Motion("orbit"), 3, None, 5)
    grid = prompt_grid(refs, 6, seed=0)
    used = {tuple(c.spec.appearance.fg_color) for c in refs}
    def key(a):
        return (a.shape, a.fg_bin, a.bg_bin)

    assert len({key(a) for a in grid}) == 6
    assert all(tuple(a.fg_color) not in used for a in grid)
    assert [key(a) for a in grid] == [key(a) for a in prompt_grid(refs, 6, seed=0)]
    with pytest.raises(ConfigError):
        prompt_grid(refs, 10_000, seed=0)


def test_variant_grids():
    names = [v.name for v in table1_variants()]
    assert names[0] == "base" and {"FullTemporal", "Q", "K", "V", "FF", "QK"} <= set(names)
    assert [v.tau for v in pli_variants(100)] == [0, 30, 100]
    modes = {(v.skip_mode, v.beta if v.skip_mode == "ah" else v.vanilla_scale) for v in beta_variants((1.0, 1.2))}
    assert modes == {("ah", 1.0), ("ah", 1.2), ("vanilla", 1.0), ("vanilla", 1.2)}
    assert Variant("x").key()["plan"] is None


def test_seeded_offsets_seed_only():
    c = TrainConfig(seed=2, steps=10)
    assert seeded(c, 3).seed == 3002 and seeded(c, 3).steps == 10
    assert EvalConfig.from_dict({"seeds": [4, 5]}).seeds == (4, 5)


def _rows():
    rows = []
    for seed in range(3):
        for v, base in (("a", 0.2), ("b", 0.6)):
            rows.append(dict(seed=seed, variant=v, config_hash=v * 4, motion_acc=base + 0.1 * seed,
                             app_align=0.5, app_leak=0.1 * seed, temporal_consist=0.9, tau=10 * seed))
    return rows


def test_medians_and_ranking(tmp_path):
    rows = _rows()
    assert medians(rows, "motion_acc") == pytest.approx({"a": 0.3, "b": 0.7})
    ranked = ranked_table(rows)
    assert [e["variant"] for e in ranked] == ["b", "a"] and ranked[0]["rank"] == 1
    assert ranked[0]["seeds"] == 3
    paths = write_suite("table1", rows, tmp_path)
    assert [p.suffix for p in paths] == [".csv", ".csv", ".svg"]
    assert "<polyline" in paths[2].read_text()


def test_line_chart_svg_is_well_formed():
    import xml.etree.ElementTree as ET

    svg = line_chart_svg({"a<b": ([0, 1, 2], [1.0, 1.0, 1.0]), "c": ([1], [np.float64(0.5)])}, title="t & u")
    root = ET.fromstring(svg)
    assert root.tag.endswith("svg")
    ns = "{http://www.w3.org/2000/svg}"
    assert len(root.findall(f"{ns}polyline")) == 2
    assert any(t.text == "a<b" for t in root.iter(f"{ns}text"))
    ET.fromstring(line_chart_svg({}))

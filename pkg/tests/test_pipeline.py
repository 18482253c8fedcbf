import json

import numpy as np
import pytest
import yaml

from surgsynth.dataset_io import ToyConfig, generate_toy_dataset, read_rgb, toy_class_map, write_label_map
from surgsynth.errors import DependencyError, ValidationError
from surgsynth.pipeline import cli
from surgsynth.pipeline.config import DEFAULTS, load_config, validate_config
from surgsynth.pipeline.figures import emit_figure_grid, figure_grid
from surgsynth.pipeline.manifest import STAGES, ExperimentManifest
from surgsynth.pipeline.seeds import derive_seed
from surgsynth.pipeline.stages import ARTIFACT_ROOT_ENV, run_pipeline, run_stage
from surgsynth.scene_composer import CompositeScene

TINY = {
    "experiment": {"id": "tiny", "seed": 3},
    "data": {"toy": {"n_samples": 130, "image_size": 32, "n_classes": 3, "test_fraction": 0.2}},
    "ssi": {"steps": 6, "lr": 1e-3, "ema_decay": 0.9, "masked_loss": True, "channel_mults": [1, 2]},
    "scene_model": {"steps": 6, "lr": 1e-3},
    "adapter": {"classes": [2], "steps": 3},
    "generate": {"n_scenes": 4, "n_steps": 3, "guidance": {"abdominal wall": 1.0, "liver": 1.0, "gall bladder": 1.0}},
    "refine": {"n_steps": 2},
    "quality": {"feature_steps": 5, "kid_subset": 4, "kid_subsets": 3},
    "seg": {"schemes": ["real_noaug", "syn_only"], "seeds": [0], "steps": 5, "finetune_steps": 2, "batch": 4},
    "report": {"grid_rows": 3},
}


def _write_cfg(path, cfg):
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("artifacts")
    cfg_path = _write_cfg(root / "tiny.yaml", TINY)
    manifest = run_pipeline(STAGES, cfg_path, artifact_root_dir=root)
    return root, cfg_path, manifest


# ---------------------------------------------------------------------------
# config


def test_defaults_validate_and_keep_full_scale_numbers():
    cfg = validate_config(None)
    assert cfg["ssi"]["steps"] == 1500 and cfg["ssi"]["lr"] == 1e-5
    assert cfg["adapter"]["conditioning_scale"] == 0.5
    assert cfg["generate"]["n_steps"] == 30 and cfg["refine"]["n_steps"] == 10
    assert cfg == validate_config(DEFAULTS)


@pytest.mark.parametrize(
    "raw, path",
    [
        ({"ssi": {"stpes": 3}}, "ssi.stpes"),
        ({"ssi": {"lr": "fast"}}, "ssi.lr"),
        ({"generate": {"mask_source": "dreamed"}}, "generate.mask_source"),
        ({"refine": {"strength": 1.5}}, "refine.strength"),
        ({"seg": {"schemes": ["real_noaug", "nope"]}}, r"seg.schemes\[1\]"),
        ({"generate": {"mask_source": "simulated"}}, "generate.simulated_masks"),
        ({"ssi": {"masked_loss": 1}}, "ssi.masked_loss"),
        ({"data": []}, "data"),
    ],
)
def test_config_errors_name_the_field(raw, path):
    with pytest.raises(ValidationError, match=path):
        validate_config(raw)


def test_load_config_resolves_relative_paths(tmp_path):
    p = _write_cfg(tmp_path / "c.yaml", {"generate": {"registry_dir": "models"}})
    assert load_config(p)["generate"]["registry_dir"] == str(tmp_path / "models")
    (tmp_path / "bad.yaml").write_text("ssi: [unclosed")
    with pytest.raises(ValidationError):
        load_config(tmp_path / "bad.yaml")
    (tmp_path / "c.json").write_text(json.dumps({"seg": {"steps": 7}}))
    assert load_config(tmp_path / "c.json")["seg"]["steps"] == 7


# ---------------------------------------------------------------------------
# seeds


def test_derive_seed_reproducible_and_collision_free():
    assert derive_seed(0, "compose", 5) == derive_seed(0, "compose", 5)
    assert derive_seed(0, "compose", 5) != derive_seed(1, "compose", 5)
    seen = set()
    for stage in STAGES:
        for i in range(100_000):
            seen.add(derive_seed(7, stage, i))
    assert len(seen) == 10 * 100_000
    assert all(0 <= s < 2**63 for s in list(seen)[:1000])


# ---------------------------------------------------------------------------
# figure grid


def _scenes(n, size=8):
    rng = np.random.default_rng(n)
    return [
        CompositeScene(rng.integers(0, 256, (size, size, 3), dtype=np.uint8), rng.integers(0, 4, (size, size)).astype(np.uint8), id=str(i))
        for i in range(n)
    ]


def test_figure_grid_geometry():
    cm = toy_class_map(3)
    scenes = _scenes(3)
    refs = [s.image[::-1].copy() for s in scenes]
    grid = figure_grid(scenes, cm, refs, _scenes(3))
    assert grid.shape == (3 * 8, 4 * 8, 3)
    np.testing.assert_array_equal(grid[8:16, 0:8], refs[1])
    np.testing.assert_array_equal(grid[8:16, 8:16], cm.palette()[scenes[1].label_map])
    np.testing.assert_array_equal(grid[16:24, 16:24], scenes[2].image)


def test_figure_grid_errors_and_determinism(tmp_path):
    cm = toy_class_map(3)
    with pytest.raises(ValidationError):
        figure_grid([], cm)
    with pytest.raises(ValidationError):
        figure_grid(_scenes(1, 8) + _scenes(1, 6), cm)
    a = emit_figure_grid(_scenes(2), tmp_path / "a.png", cm)
    b = emit_figure_grid(_scenes(2), tmp_path / "b.png", cm)
    assert a.read_bytes() == b.read_bytes()
    assert read_rgb(a).shape == (16, 16, 3)


# ---------------------------------------------------------------------------
# stages and manifest


def test_full_tiny_run_is_consistent(tiny_run):
    root, _, manifest = tiny_run
    assert manifest.verify() == []
    assert [r.stage for r in manifest.records] == list(STAGES)
    hashes = manifest.artifact_hashes()
    assert set(hashes) == set(STAGES)
    assert "timing.json" not in hashes["report"]
    assert "timing.json" in manifest.latest("report").outputs


def test_report_links_resolve(tiny_run):
    root, _, manifest = tiny_run
    report_dir = manifest.run_path(manifest.latest("report"))
    refs = json.loads((report_dir / "report.json").read_text())
    known = {p.resolve() for p in manifest.artifact_paths()}
    paths = [v for v in refs["artifacts"].values()]
    assert paths
    for rel in paths:
        target = (manifest.root / rel).resolve()
        assert target.exists() and target in known, rel
    assert (report_dir / "figure_grid.png").exists()


def test_rerun_appends_without_rewriting(tiny_run):
    root, cfg_path, manifest = tiny_run
    lines_before = manifest.path.read_text().splitlines()
    rec = run_stage("seg_eval", cfg_path, artifact_root_dir=root)
    lines_after = manifest.path.read_text().splitlines()
    assert lines_after[: len(lines_before)] == lines_before and len(lines_after) == len(lines_before) + 1
    fresh = ExperimentManifest(manifest.root)
    assert fresh.latest("seg_eval").run_dir == rec.run_dir != manifest.latest("seg_eval").run_dir
    assert fresh.verify() == []


def test_verify_detects_tampering(tiny_run, tmp_path):
    import shutil

    root, _, manifest = tiny_run
    copy = tmp_path / "copy"
    shutil.copytree(manifest.root, copy)
    m = ExperimentManifest(copy)
    target = m.run_path(m.latest("seg_eval")) / "table.csv"
    target.write_text(target.read_text() + "x\n")
    assert any("table.csv" in p for p in m.verify())


def test_compose_before_generate_is_a_dependency_error(tmp_path):
    cfg = dict(TINY, experiment={"id": "order", "seed": 0})
    run_stage("ingest", config=cfg, artifact_root_dir=tmp_path)
    with pytest.raises(DependencyError, match="generate_organs"):
        run_stage("compose", config=cfg, artifact_root_dir=tmp_path)
    m = ExperimentManifest(tmp_path / "order")
    assert [r.stage for r in m.records] == ["ingest"]
    assert not (tmp_path / "order" / "stages" / "compose").exists() or not any((tmp_path / "order" / "stages" / "compose").iterdir())


def test_simulated_masks_skip_stage_one(tiny_run, tmp_path):
    root, _, manifest = tiny_run
    registry = manifest.run_path(manifest.latest("train_ssi_all")) / "registry"
    masks = tmp_path / "sim"
    masks.mkdir()
    records, cm = generate_toy_dataset(ToyConfig(n_samples=6, image_size=32), seed=99)
    for r in records[:3]:
        write_label_map(masks / f"{r.id}.png", r.label_map, cm)
    cfg = json.loads(json.dumps(TINY))
    cfg["experiment"]["id"] = "ss"
    cfg["generate"].update(mask_source="simulated", simulated_masks=str(masks), registry_dir=str(registry), use_adapter=False)
    for stage in ("ingest", "generate_organs", "compose"):
        run_stage(stage, config=cfg, artifact_root_dir=tmp_path)
    m = ExperimentManifest(tmp_path / "ss")
    assert m.latest("train_ssi_all") is None and m.verify() == []
    scene_dir = m.run_path(m.latest("compose")) / "scenes"
    sidecars = [json.loads(p.read_text()) for p in sorted(scene_dir.glob("*.json")) if not p.name.startswith("manifest")]
    assert sidecars and all(s["background_source"] == "background_render" for s in sidecars)


# ---------------------------------------------------------------------------
# CLI


def test_cli_exit_codes(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(ARTIFACT_ROOT_ENV, str(tmp_path / "art"))
    good = _write_cfg(tmp_path / "good.yaml", dict(TINY, experiment={"id": "cli", "seed": 1}))
    bad = _write_cfg(tmp_path / "bad.yaml", {"ssi": {"stpes": 1}})
    assert cli.main(["ingest", "--config", str(bad)]) == 2
    assert "ssi.stpes" in capsys.readouterr().err
    assert cli.main(["ingest", "--config", str(tmp_path / "missing.yaml")]) == 4
    assert cli.main(["report", "--experiment", "nope"]) == 4
    assert cli.main(["ingest", "--config", str(good), "--seed", "1"]) == 0
    assert (tmp_path / "art" / "cli" / "manifest.jsonl").exists()
    assert cli.main(["compose", "--config", str(good)]) == 3
    assert "generate_organs" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        cli.main(["paint", "--config", str(good)])

"""Config parsing, override grammar, and the command line end to end."""

import json
import os

import numpy as np
import pytest

from nerfseg import cli
from nerfseg.config import (
    PipelineConfig,
    apply_overrides,
    config_from_dict,
    config_to_dict,
    load_config,
    parse_set_value,
    save_config,
)


def test_defaults_from_empty_dict():
    cfg = config_from_dict({})
    assert cfg.scene.fruit_count == 8
    assert cfg.cameras.n_train_views == 40
    assert cfg.render.near == 0.5
    # derived defaults
    assert cfg.cluster.voxel_leaf == pytest.approx(cfg.scene.fruit_radius / 4)
    assert cfg.background_color() == (0.5, 0.5, 0.5)


def test_error_collection_reports_everything_at_once():
    bad = {
        "nosuch": {},
        "scene": {"fruit_count": -3, "bogus_key": 1},
        "render": {"near": 5.0, "far": 1.0},
    }
    with pytest.raises(ValueError) as e:
        config_from_dict(bad)
    msg = str(e.value)
    assert "nosuch: unknown section" in msg
    assert "scene.bogus_key: unknown key" in msg
    assert "render" in msg and "near" in msg


def test_non_dict_sections_rejected():
    with pytest.raises(ValueError, match="must be an object"):
        config_from_dict({"scene": [1, 2]})
    with pytest.raises(ValueError, match="root must be an object"):
        config_from_dict([])


def test_cluster_leaf_follows_scene_radius():
    cfg = config_from_dict({"scene": {"fruit_radius": 0.2}})
    assert cfg.cluster.voxel_leaf == pytest.approx(0.05)
    # an explicit leaf wins over the derivation
    cfg = config_from_dict({"scene": {"fruit_radius": 0.2}, "cluster": {"voxel_leaf": 0.01}})
    assert cfg.cluster.voxel_leaf == 0.01


def test_background_color_follows_albedo():
    cfg = config_from_dict({"scene": {"background_albedo": 0.25}})
    assert cfg.background_color() == (0.25, 0.25, 0.25)
    cfg = config_from_dict({"render": {"background_color": [0.1, 0.2, 0.3]}})
    assert cfg.background_color() == (0.1, 0.2, 0.3)
    assert cfg.render_config(black_background=True).background_color == (0.0, 0.0, 0.0)


def test_parse_set_value_grammar():
    assert parse_set_value("500") == 500
    assert parse_set_value("0.25") == 0.25
    assert parse_set_value("true") is True
    assert parse_set_value("[1, 2]") == [1, 2]
    assert parse_set_value("hello") == "hello"  # bare string fallback


def test_apply_overrides():
    data = {}
    apply_overrides(data, ["train_stage1.steps=77", "scene.fruit_count=3"])
    assert data == {"train_stage1": {"steps": 77}, "scene": {"fruit_count": 3}}
    with pytest.raises(ValueError, match="section.key=value"):
        apply_overrides({}, ["oops"])
    with pytest.raises(ValueError, match="section.key"):
        apply_overrides({}, ["a.b.c=1"])


def test_with_seed_touches_every_stage():
    cfg = PipelineConfig().with_seed(777)
    assert cfg.scene.rng_seed == 777
    assert cfg.train_stage1.rng_seed == 777
    assert cfg.train_stage2.rng_seed == 777
    assert cfg.joint.rng_seed == 777
    assert cfg.eval.rng_seed == 777


def test_config_round_trip(tmp_path):
    cfg = config_from_dict({"scene": {"fruit_count": 5}, "field": {"trunk_width": 24}})
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    again = load_config(path)
    assert config_to_dict(again) == config_to_dict(cfg)
    assert again.scene.fruit_count == 5
    assert again.field.trunk_width == 24


def test_load_config_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{nope")
    with pytest.raises(ValueError, match="malformed config"):
        load_config(path)


def test_make_cameras_ring_split():
    cfg = config_from_dict({"cameras": {"n_train_views": 41}})
    train, held = cfg.make_cameras()
    assert len(train) == 41 and len(held) == 4
    heights = np.array([c.origin[2] for c in train])
    assert (np.abs(heights - 0.35) < 1e-9).sum() == 21  # first ring takes the extra
    assert (np.abs(heights - 1.0) < 1e-9).sum() == 20
    # held-out poses never coincide with a training pose
    tr = np.array([c.origin for c in train])
    he = np.array([c.origin for c in held])
    assert np.linalg.norm(tr[:, None] - he[None], axis=2).min() > 1e-6


# ---------------------------------------------------------------------------
# CLI end to end on a micro scene

MICRO = [
    "--set", "scene.fruit_count=2",
    "--set", "scene.fruit_radius=0.18",
    "--set", "cameras.n_train_views=6",
    "--set", "cameras.n_heldout_views=2",
    "--set", "cameras.width=16",
    "--set", "cameras.height=16",
    "--set", "cameras.focal=17.5",
    "--set", "render.samples_per_ray=32",
    "--set", "field.trunk_width=16",
    "--set", "train_stage1.steps=80",
    "--set", "train_stage1.rays_per_batch=256",
    "--set", "train_stage1.log_every=40",
    "--set", "train_stage2.steps=80",
    "--set", "train_stage2.rays_per_batch=256",
    "--set", "train_stage2.learning_rate=0.001",
    "--set", "train_stage2.log_every=40",
    "--set", "joint.steps=60",
    "--set", "joint.rays_per_batch=256",
    "--set", "joint.log_every=30",
    "--set", "extract.grid_resolution=40",
    "--set", "extract.density_threshold=3.0",
    "--set", "eval.density_rays_per_category=8",
    "--set", "eval.density_samples_per_ray=16",
]


def run_cli(out, command, *extra):
    rc = cli.main([command, "--out", str(out), *MICRO, *extra])
    assert rc == 0, f"{command} failed"


@pytest.fixture(scope="session")
def micro_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro")
    for command in ("synth", "train", "finetune", "joint", "sa3d",
                    "extract", "cluster", "eval", "density-diff"):
        run_cli(out, command)
    return out


def test_cli_chain_produces_all_artifacts(micro_run):
    expected = [
        "scene_gt.json", "resolved_config.json",
        "train_rgb/manifest.json", "train_mask/manifest.json",
        "train_multiclass/manifest.json", "heldout_rgb/manifest.json",
        "checkpoint_stage1.ckpt", "train_log_stage1.csv",
        "checkpoint_stage2.ckpt", "train_log_stage2.csv",
        "checkpoint_joint.ckpt", "train_log_joint.csv",
        "cloud_sa3d.ply", "cloud_invnerf.ply",
        "clusters.ply", "count_report.csv",
        "eval_report.csv", "density_delta.csv",
    ]
    for name in expected:
        assert (micro_run / name).exists(), name
    renders = os.listdir(micro_run / "renders")
    assert any(f.endswith(".ppm") for f in renders)
    report = (micro_run / "eval_report.csv").read_text()
    assert "stage1_rgb/heldout_rgb/view00,psnr," in report
    assert "stage2_mask/heldout_mask/view00,iou," in report
    assert "joint/heldout_mask/view00,iou," in report


def test_cli_resolved_config_records_overrides(micro_run):
    cfg = json.loads((micro_run / "resolved_config.json").read_text())
    assert cfg["scene"]["fruit_count"] == 2
    assert cfg["field"]["trunk_width"] == 16
    assert cfg["train_stage1"]["steps"] == 80


def test_cli_rerun_is_byte_identical(micro_run, tmp_path):
    other = tmp_path / "again"
    for command in ("synth", "train"):
        run_cli(other, command)
    a = (micro_run / "checkpoint_stage1.ckpt").read_bytes()
    b = (other / "checkpoint_stage1.ckpt").read_bytes()
    assert a == b
    # dataset bytes match too
    img = "train_rgb/frame_0000.ppm"
    assert (micro_run / img).read_bytes() == (other / img).read_bytes()


def test_cli_seed_changes_the_scene(micro_run, tmp_path):
    out = tmp_path / "seeded"
    run_cli(out, "synth", "--seed", "123")
    cfg = json.loads((out / "resolved_config.json").read_text())
    assert cfg["scene"]["rng_seed"] == 123
    assert cfg["train_stage1"]["rng_seed"] == 123
    a = json.loads((micro_run / "scene_gt.json").read_text())
    b = json.loads((out / "scene_gt.json").read_text())
    assert a["fruits"] != b["fruits"]


def test_cli_flags_parse_in_either_position(tmp_path):
    out = tmp_path / "flagpos"
    rc = cli.main(["--out", str(out), "synth", *MICRO])
    assert rc == 0
    assert (out / "scene_gt.json").exists()
    # --set accumulates across positions; later wins on key collision
    out2 = tmp_path / "flagpos2"
    rc = cli.main(["--set", "scene.fruit_count=5", "synth", "--out", str(out2),
                   "--set", "scene.fruit_count=3", "--set", "scene.fruit_radius=0.1"])
    assert rc == 0
    cfg = json.loads((out2 / "resolved_config.json").read_text())
    assert cfg["scene"]["fruit_count"] == 3
    assert cfg["scene"]["fruit_radius"] == 0.1


def test_cli_missing_checkpoint_is_exit_1(tmp_path, capsys):
    out = tmp_path / "empty"
    rc = cli.main(["extract", "--out", str(out), *MICRO])
    assert rc == 1
    err = capsys.readouterr().err
    assert "error:" in err and "checkpoint_stage2.ckpt" in err


def test_cli_no_subcommand_is_exit_2(capsys):
    assert cli.main([]) == 2
    assert "subcommand is required" in capsys.readouterr().err


def test_cli_bad_override_is_exit_1(tmp_path, capsys):
    rc = cli.main(["synth", "--out", str(tmp_path / "x"), "--set", "garbage"])
    assert rc == 1
    assert "section.key=value" in capsys.readouterr().err


def test_cli_unknown_config_key_is_exit_1(tmp_path, capsys):
    rc = cli.main(["synth", "--out", str(tmp_path / "x"), "--set", "scene.nope=1"])
    assert rc == 1
    assert "unknown key" in capsys.readouterr().err


def test_cli_cluster_accepts_explicit_cloud(micro_run, tmp_path, capsys):
    out = tmp_path / "clu"
    os.makedirs(out, exist_ok=True)
    rc = cli.main(["cluster", "--out", str(out), *MICRO,
                   "--cloud", str(micro_run / "cloud_sa3d.ply")])
    assert rc == 0
    assert (out / "count_report.csv").exists()
    assert "cluster: predicted" in capsys.readouterr().err


def test_cli_finetune_near_far_mismatch_is_exit_1(micro_run, tmp_path, capsys):
    # masks synthesized with a shifted far plane: the stage-1 checkpoint must be rejected
    out = tmp_path / "farshift"
    run_cli(out, "synth", "--set", "render.far=3.5")
    (out / "checkpoint_stage1.ckpt").write_bytes(
        (micro_run / "checkpoint_stage1.ckpt").read_bytes()
    )
    rc = cli.main(["finetune", "--out", str(out), *MICRO, "--set", "render.far=3.5"])
    assert rc == 1
    assert "near/far" in capsys.readouterr().err

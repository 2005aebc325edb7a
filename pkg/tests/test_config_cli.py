import json
from pathlib import Path

import numpy as np
import pytest
import torch

from glcnet.cli import main
from glcnet.config import ConfigError, RunConfig
from glcnet.network import build_model
from glcnet.pretrain import build_projection_heads

REPO_CONFIGS = Path(__file__).resolve().parents[1] / "configs"


class TestRunConfig:
    def test_defaults_are_full_scale(self):
        cfg = RunConfig.default()
        assert cfg.get("pretrain", "epochs") == 400
        assert cfg.get("pretrain", "batch_size") == 64
        assert cfg.get("pretrain", "learning_rate") == 0.01
        assert cfg.get("pretrain", "region_size") == 48
        assert cfg.get("pretrain", "regions_per_sample") == 4
        assert cfg.get("augment", "view_size") == 224
        assert cfg.get("finetune", "epochs") == 150
        assert cfg.get("finetune", "batch_size") == 16
        assert cfg.get("finetune", "initial_lr") == 0.001
        assert cfg.get("finetune", "lr_decay") == 0.98
        assert cfg.get("data", "label_fraction") == 0.01

    def test_shipped_configs_parse(self):
        paper = RunConfig.from_file(REPO_CONFIGS / "paper.cfg")
        desk = RunConfig.from_file(REPO_CONFIGS / "desk.cfg")
        assert paper.get("pretrain", "epochs") == 400
        assert desk.get("augment", "view_size") == 64
        assert desk.get("pretrain", "region_size") == 16

    def test_unknown_keys_rejected_exhaustively(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[pretrain]\nepochs = 3\nbogus = 1\n[nosuch]\nx = 2\n")
        with pytest.raises(ConfigError) as err:
            RunConfig.from_file(bad)
        message = str(err.value)
        assert "bogus" in message and "nosuch" in message  # all problems listed

    def test_overrides_win_over_file(self, tmp_path):
        cfg_file = tmp_path / "c.cfg"
        cfg_file.write_text("[pretrain]\nepochs = 7\n")
        cfg = RunConfig.from_file(cfg_file, {"pretrain.epochs": "9"})
        assert cfg.get("pretrain", "epochs") == 9

    def test_hash_stable_under_formatting(self, tmp_path):
        a = tmp_path / "a.cfg"
        b = tmp_path / "b.cfg"
        a.write_text("[pretrain]\nepochs = 7\nlam = 0.5\n")
        b.write_text("# comment\n[pretrain]\nlam   =   0.50\nepochs=7\n")
        assert RunConfig.from_file(a).config_hash == RunConfig.from_file(b).config_hash

    def test_hash_changes_with_values(self, tmp_path):
        a = tmp_path / "a.cfg"
        a.write_text("[pretrain]\nepochs = 7\n")
        base = RunConfig.from_file(a).config_hash
        changed = RunConfig.from_file(a, {"pretrain.epochs": "8"}).config_hash
        assert base != changed

    def test_snapshot_roundtrip_preserves_hash(self, tmp_path):
        cfg = RunConfig.from_file(REPO_CONFIGS / "desk.cfg", {"run.seed": "5"})
        snap = tmp_path / "snapshot.cfg"
        cfg.save_snapshot(snap)
        assert RunConfig.from_file(snap).config_hash == cfg.config_hash

    def test_data_root_env(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GLCNET_DATA_ROOT", str(tmp_path))
        cfg = RunConfig.default()
        assert cfg.tile_dir == tmp_path / "tiles"

    def test_simclr_equals_ablated_glcnet_config(self):
        simclr = RunConfig.from_file(
            REPO_CONFIGS / "desk.cfg", {"pretrain.nostyle": "true", "pretrain.nolocal": "true"}
        )
        ablated = RunConfig.from_file(
            REPO_CONFIGS / "desk.cfg", {"pretrain.nostyle": "true", "pretrain.nolocal": "true"}
        )
        assert simclr.config_hash == ablated.config_hash
        # and the initial parameters agree parameter-for-parameter
        m1 = build_model(simclr.network_config(), simclr.seed)
        m2 = build_model(ablated.network_config(), ablated.seed)
        for (ka, va), (kb, vb) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)
        h1 = build_projection_heads(64, 12, simclr.pretrain_config(), simclr.seed)
        h2 = build_projection_heads(64, 12, ablated.pretrain_config(), ablated.seed)
        for a, b in zip(h1, h2):
            for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
                assert ka == kb and torch.equal(va, vb)


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    scenes = root / "scenes"
    tiles = root / "tiles"
    assert main(["synth", "--output", str(scenes), "--scenes", "4", "--scene-size", "192",
                 "--classes", "4", "--seed", "3"]) == 0
    assert main(["tile", "--input", str(scenes), "--output", str(tiles), "--crop-size", "64",
                 "--label-fraction", "0.1", "--test-fraction", "0.25", "--seed", "3"]) == 0
    cfg = root / "run.cfg"
    cfg.write_text(
        f"""
[run]
out_dir = {root / 'run'}
seed = 3
[data]
tile_dir = {tiles}
crop_size = 64
channels = 3
num_classes = 4
label_fraction = 0.1
test_fraction = 0.25
[augment]
view_size = 64
[network]
encoder_widths = 8, 12, 24
decoder_widths = 12, 10, 8
[pretrain]
region_size = 16
regions_per_sample = 2
batch_size = 4
epochs = 1
learning_rate = 0.001
projection_dim = 8
[finetune]
epochs = 1
batch_size = 8
load_groups = encoder
"""
    )
    return root, cfg


class TestCliPipeline:
    def test_synth_outputs(self, cli_workspace):
        root, _ = cli_workspace
        scenes = list((root / "scenes").glob("synth*[0-9].png"))
        masks = list((root / "scenes").glob("*_mask.png"))
        assert len(scenes) == 4 and len(masks) == 4
        assert (root / "scenes" / "synth_summary.txt").exists()

    def test_tile_outputs(self, cli_workspace):
        root, _ = cli_workspace
        tiles = root / "tiles"
        for name in ("pretrain", "finetune", "test"):
            assert (tiles / f"{name}.manifest").exists()
        assert (tiles / "split_stats.txt").exists()
        # 4 scenes of 192px -> 9 tiles each; 1 scene held out
        stats = (tiles / "split_stats.txt").read_text()
        assert "pretrain: 27 tiles" in stats
        assert "test: 9 tiles" in stats

    def test_pretrain_finetune_evaluate_chain(self, cli_workspace):
        root, cfg = cli_workspace
        assert main(["pretrain", "--config", str(cfg)]) == 0
        run_dir = root / "run"
        assert (run_dir / "pretrain" / "checkpoint.glcp").exists()
        assert (run_dir / "pretrain" / "loss_log.csv").exists()
        assert (run_dir / "pretrain" / "config.cfg").exists()
        meta = json.loads((run_dir / "pretrain" / "run_meta.json").read_text())
        assert meta["config_hash"] == RunConfig.from_file(cfg).config_hash

        assert main(["finetune", "--config", str(cfg), "--load-groups", "encoder"]) == 0
        assert (run_dir / "finetune" / "model.glcp").exists()
        ft_meta = json.loads((run_dir / "finetune" / "run_meta.json").read_text())
        assert ft_meta["labeled_tiles"] == 2  # 10% of 27 -> 2

        assert main(["evaluate", "--config", str(cfg)]) == 0
        assert (run_dir / "eval" / "metrics.csv").exists()
        assert (run_dir / "eval" / "metrics.txt").exists()

    def test_plot_from_run_dir(self, cli_workspace):
        root, cfg = cli_workspace
        run_dir = root / "run"
        if not (run_dir / "pretrain" / "loss_log.csv").exists():
            main(["pretrain", "--config", str(cfg)])
        assert main(["plot", "--run-dir", str(run_dir)]) == 0
        assert (run_dir / "loss_curve.png").exists()
        if (run_dir / "eval" / "metrics.csv").exists():
            assert (run_dir / "f1_per_class.png").exists()

    def test_simclr_method_zeroes_local_loss(self, cli_workspace, tmp_path):
        root, cfg = cli_workspace
        out = tmp_path / "simclr_run"
        assert main([
            "pretrain", "--config", str(cfg), "--method", "simclr",
            "--set", f"run.out_dir={out}",
        ]) == 0
        lines = (out / "pretrain" / "loss_log.csv").read_text().splitlines()
        header = lines[1].split(",")
        local_col = header.index("l_local")
        for line in lines[2:]:
            assert float(line.split(",")[local_col]) == 0.0

    def test_label_fraction_flag_recorded(self, cli_workspace, tmp_path):
        root, cfg = cli_workspace
        out = tmp_path / "frac_run"
        assert main([
            "finetune", "--config", str(cfg), "--label-fraction", "0.2",
            "--set", f"run.out_dir={out}",
            "--checkpoint", str(root / "run" / "pretrain" / "checkpoint.glcp"),
        ]) == 0
        meta = json.loads((out / "finetune" / "run_meta.json").read_text())
        assert meta["label_fraction"] == 0.2
        assert meta["labeled_tiles"] == 5  # floor(0.2 * 27)

    def test_bad_config_exits_one(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[pretrain]\nbogus = 1\n")
        assert main(["pretrain", "--config", str(bad)]) == 1

    def test_lockfile_blocks_concurrent_runs(self, cli_workspace, tmp_path):
        root, cfg = cli_workspace
        out = tmp_path / "locked"
        (out / "pretrain").mkdir(parents=True)
        (out / "pretrain" / ".lock").write_text("1234")
        assert main(["pretrain", "--config", str(cfg), "--set", f"run.out_dir={out}"]) == 1

    def test_identical_runs_produce_identical_csvs(self, cli_workspace, tmp_path):
        root, cfg = cli_workspace
        out_a = tmp_path / "rep_a"
        out_b = tmp_path / "rep_b"
        for out in (out_a, out_b):
            assert main(["pretrain", "--config", str(cfg), "--set", f"run.out_dir={out}"]) == 0
        csv_a = (out_a / "pretrain" / "loss_log.csv").read_bytes()
        csv_b = (out_b / "pretrain" / "loss_log.csv").read_bytes()
        assert csv_a == csv_b

    def test_rerunning_from_snapshot_reproduces_run(self, cli_workspace, tmp_path):
        root, cfg = cli_workspace
        out_a = tmp_path / "orig"
        assert main(["pretrain", "--config", str(cfg), "--set", f"run.out_dir={out_a}"]) == 0
        snapshot = out_a / "pretrain" / "config.cfg"
        out_b = tmp_path / "from_snapshot"
        assert main(["pretrain", "--config", str(snapshot), "--set", f"run.out_dir={out_b}"]) == 0
        assert (out_a / "pretrain" / "loss_log.csv").read_bytes() == (
            out_b / "pretrain" / "loss_log.csv"
        ).read_bytes()

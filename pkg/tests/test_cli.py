import json

import numpy as np
import pytest

from proposal_ssl.cli import main


CONFIG_TEXT = """
# shared scene-generation + training settings
num_scenes = 4
ground_extent = 14.0
objects_per_scene = 6
points_per_object = 60
ground_points = 200
noise_sigma = 0.01

dataset_dir = {dataset_dir}
epochs = 2
warmup_epochs = 1
batch_frames = 2
max_lr = 0.005
checkpoint_every = 0
total_sample = 400
shared_sample = 120
num_proposals = 12
proposal_radius = 1.0
proposal_k = 4
backbone_widths = 8,8
neighborhood_k = 3
embed_dim = 8
cluster_count = 4
seed = 0
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Scenes generated and a tiny model pre-trained, shared by the tests."""
    root = tmp_path_factory.mktemp("cli")
    scenes = root / "scenes"
    cfg = root / "run.cfg"
    cfg.write_text(CONFIG_TEXT.format(dataset_dir=scenes))
    assert main(["gen-scenes", "--config", str(cfg), "--out", str(scenes)]) == 0
    train_out = root / "train"
    assert main(["pretrain", "--config", str(cfg), "--out", str(train_out)]) == 0
    return {"root": root, "cfg": cfg, "scenes": scenes, "train": train_out,
            "checkpoint": train_out / "checkpoint_final.bin"}


class TestGenScenes:
    def test_outputs_exist(self, workspace):
        bins = sorted(workspace["scenes"].glob("*.bin"))
        csvs = sorted(workspace["scenes"].glob("*_labels.csv"))
        assert len(bins) == 4 and len(csvs) == 4

    def test_idempotent(self, workspace, tmp_path):
        out2 = tmp_path / "again"
        assert main(["gen-scenes", "--config", str(workspace["cfg"]),
                     "--out", str(out2)]) == 0
        for p in sorted(workspace["scenes"].glob("*.bin")):
            assert (out2 / p.name).read_bytes() == p.read_bytes()

    def test_seed_flag_changes_scenes(self, workspace, tmp_path):
        out2 = tmp_path / "seeded"
        assert main(["gen-scenes", "--config", str(workspace["cfg"]),
                     "--out", str(out2), "--seed", "9"]) == 0
        a = (workspace["scenes"] / "scene_000.bin").read_bytes()
        assert (out2 / "scene_000.bin").read_bytes() != a


class TestPretrainCommand:
    def test_artifacts(self, workspace):
        assert workspace["checkpoint"].exists()
        lines = (workspace["train"] / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 4
        assert np.isfinite(json.loads(lines[-1])["loss_total"])

    def test_missing_dataset_dir_is_config_error(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("epochs = 2\nwarmup_epochs = 1\n")
        assert main(["pretrain", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "dataset_dir" in capsys.readouterr().err

    def test_nonexistent_dataset_dir(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dataset_dir = /nonexistent/frames\n"
                       "epochs = 2\nwarmup_epochs = 1\n")
        assert main(["pretrain", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2


class TestProbeCommand:
    def test_report_written(self, workspace, capsys):
        out = workspace["root"] / "probe"
        assert main(["probe", "--config", str(workspace["cfg"]),
                     "--out", str(out),
                     "--checkpoint", str(workspace["checkpoint"])]) == 0
        report = json.loads((out / "probe.json").read_text())
        for key in ("purity", "nmi", "linear_probe_accuracy",
                    "pos_cos", "neg_cos", "num_proposals", "checkpoint_step"):
            assert key in report
        assert 0.0 <= report["purity"] <= 1.0
        printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
        assert printed["num_proposals"] == report["num_proposals"]

    def test_bad_checkpoint(self, workspace, tmp_path, capsys):
        junk = tmp_path / "junk.bin"
        junk.write_bytes(b"NOTACKPT" + b"\x00" * 32)
        assert main(["probe", "--config", str(workspace["cfg"]),
                     "--out", str(tmp_path / "o"),
                     "--checkpoint", str(junk)]) == 2


class TestInspectProposals:
    def test_dump_structure(self, workspace):
        out = workspace["root"] / "inspect"
        assert main(["inspect-proposals", "--config", str(workspace["cfg"]),
                     "--out", str(out)]) == 0
        dump = json.loads((out / "proposals.json").read_text())
        assert dump["radius"] == 1.0
        assert len(dump["proposals"]) == 12
        for entry in dump["proposals"]:
            assert len(entry["members_view1"]) == 4
            assert len(entry["members_view2"]) == 4


class TestExportEmbeddings:
    def test_csv_shape(self, workspace):
        out = workspace["root"] / "embed"
        assert main(["export-embeddings", "--config", str(workspace["cfg"]),
                     "--out", str(out),
                     "--checkpoint", str(workspace["checkpoint"])]) == 0
        lines = (out / "embeddings.csv").read_text().splitlines()
        assert lines[0].split(",")[:2] == ["z0", "z1"]
        assert lines[0].split(",")[-1] == "label"
        assert len(lines) == 1 + 4 * 12
        row = lines[1].split(",")
        assert len(row) == 9  # 8 embedding dims + label
        z = np.array([float(v) for v in row[:-1]])
        assert abs(np.linalg.norm(z) - 1.0) < 1e-9


class TestErrorsAndMisc:
    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["gen-scenes", "--config", str(tmp_path / "none.cfg"),
                     "--out", str(tmp_path / "o")]) == 2
        assert "error:" in capsys.readouterr().err

    def test_malformed_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("this is not a pair\n")
        assert main(["gen-scenes", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert ":1:" in capsys.readouterr().err

    def test_unknown_command_exits_nonzero(self, capsys):
        assert main(["frobnicate"]) != 0

    def test_grad_check_passes(self, capsys):
        assert main(["grad-check"]) == 0
        assert "gradient error" in capsys.readouterr().out

import csv
import hashlib

import numpy as np
import pytest

from cnm.cli import EXIT_BAD_INPUT, EXIT_DIVERGED, EXIT_OK, build_parser, main
from cnm.evaluation import read_pgm16, read_ply
from cnm.scene import Sphere, SyntheticScene, format_scene, load_manifest
from cnm.trainer import TrainConfig, format_config, load_config, save_config

SMALL = TrainConfig(dims=(3, 16, 16, 1), epochs_per_frame=2, first_frame_epochs=3, batch_size=256,
                    pixel_stride=4, frame_stride=1, seed=1)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    scene = SyntheticScene([Sphere((0, 0, 0), 0.3)], bbox=[[-1, -1, -1], [1, 1, 1]])
    (root / "scene.txt").write_text(format_scene(scene))
    save_config(root / "config.txt", SMALL)
    assert main(["synth", "--scene", str(root / "scene.txt"), "--frames", "3", "--width", "32",
                 "--height", "24", "--out", str(root / "seq")]) == EXIT_OK
    assert main(["train", "--config", str(root / "config.txt"), "--data", str(root / "seq"),
                 "--out", str(root / "run")]) == EXIT_OK
    return root


def run_cmd(*argv):
    return main([str(a) for a in argv])


# ---- synth ---------------------------------------------------------------------

def test_synth_orbit_writes_frames(tmp_path, workspace):
    out = tmp_path / "s"
    assert run_cmd("synth", "--scene", workspace / "scene.txt", "--frames", 4, "--out", out) == EXIT_OK
    assert len(list((out / "depth").glob("*.png"))) == 4
    m = load_manifest(out)
    assert len(m) == 4
    assert all(np.count_nonzero(f.depth) > 0 for f in m.frames())


def test_synth_is_bit_identical(tmp_path, workspace):
    for d in ("a", "b"):
        assert run_cmd("synth", "--scene", workspace / "scene.txt", "--frames", 3, "--traj", "line",
                       "--out", tmp_path / d) == EXIT_OK
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for rel in files:
        assert digest(tmp_path / "a" / rel) == digest(tmp_path / "b" / rel)


def test_synth_zero_frames(tmp_path, workspace):
    assert run_cmd("synth", "--scene", workspace / "scene.txt", "--frames", 0, "--out", tmp_path / "e") == EXIT_OK
    assert len(load_manifest(tmp_path / "e")) == 0


def test_synth_bad_scene(tmp_path):
    (tmp_path / "bad.txt").write_text("cone center=0,0,0\n")
    assert run_cmd("synth", "--scene", tmp_path / "bad.txt", "--frames", 1, "--out", tmp_path / "o") == EXIT_BAD_INPUT
    assert run_cmd("synth", "--scene", tmp_path / "nope.txt", "--frames", 1, "--out", tmp_path / "o") == EXIT_BAD_INPUT


# ---- train / baseline --------------------------------------------------------------

def test_train_outputs(workspace):
    run = workspace / "run"
    assert sorted(p.name for p in run.glob("theta_*.cnm")) == ["theta_0000.cnm", "theta_0001.cnm", "theta_0002.cnm"]
    for name in ("losses.csv", "frames.csv", "timing.csv", "losses.png", "config.txt"):
        assert (run / name).exists()


def test_train_one_frame(tmp_path, workspace):
    seq = tmp_path / "one"
    run_cmd("synth", "--scene", workspace / "scene.txt", "--frames", 1, "--width", 32, "--height", 24, "--out", seq)
    assert run_cmd("train", "--config", workspace / "config.txt", "--data", seq, "--out", tmp_path / "r") == EXIT_OK
    assert len(list((tmp_path / "r").glob("theta_*.cnm"))) == 1


def test_train_is_reproducible(tmp_path, workspace):
    assert run_cmd("train", "--config", workspace / "config.txt", "--data", workspace / "seq",
                   "--out", tmp_path / "again") == EXIT_OK
    for p in sorted((workspace / "run").glob("theta_*.cnm")) + [workspace / "run" / "losses.csv"]:
        assert digest(p) == digest(tmp_path / "again" / p.name)


def test_baseline_retrain_sizes_increase(tmp_path, workspace):
    out = tmp_path / "rt"
    assert run_cmd("baseline", "--mode", "retrain", "--config", workspace / "config.txt",
                   "--data", workspace / "seq", "--out", out) == EXIT_OK
    with open(out / "frames.csv") as fh:
        sizes = [int(r["train_set_size"]) for r in csv.DictReader(fh)]
    assert len(sizes) == 3 and all(b > a for a, b in zip(sizes, sizes[1:]))


def test_baseline_rejects_unknown_mode(tmp_path, workspace):
    with pytest.raises(SystemExit):
        run_cmd("baseline", "--mode", "bogus", "--config", workspace / "config.txt",
                "--data", workspace / "seq", "--out", tmp_path / "x")


def test_missing_files_exit_2(tmp_path, workspace, capsys):
    assert run_cmd("train", "--config", tmp_path / "missing.txt", "--data", workspace / "seq",
                   "--out", tmp_path / "x") == EXIT_BAD_INPUT
    assert "missing.txt" in capsys.readouterr().err
    assert run_cmd("train", "--config", workspace / "config.txt", "--data", tmp_path / "nodata",
                   "--out", tmp_path / "x") == EXIT_BAD_INPUT
    assert "nodata" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, workspace):
    (tmp_path / "c.txt").write_text("bogus_key = 1\n")
    assert run_cmd("train", "--config", tmp_path / "c.txt", "--data", workspace / "seq",
                   "--out", tmp_path / "x") == EXIT_BAD_INPUT


def test_divergence_exit_3(tmp_path, workspace, capsys):
    save_config(tmp_path / "c.txt", SMALL.replace(learning_rate=float("inf")))
    assert run_cmd("train", "--config", tmp_path / "c.txt", "--data", workspace / "seq",
                   "--out", tmp_path / "x") == EXIT_DIVERGED
    assert "diverged" in capsys.readouterr().err


def test_thread_override(tmp_path, workspace, monkeypatch):
    monkeypatch.setenv("CNM_NUM_THREADS", "zero")
    assert run_cmd("heatmap", "--ckpts", workspace / "run", "--data", workspace / "seq",
                   "--out", tmp_path / "h.csv") == EXIT_BAD_INPUT
    monkeypatch.setenv("CNM_NUM_THREADS", "1")
    assert run_cmd("heatmap", "--ckpts", workspace / "run", "--data", workspace / "seq",
                   "--out", tmp_path / "h.csv") == EXIT_OK


# ---- evaluation commands -----------------------------------------------------------

def test_heatmap_is_t_by_t(tmp_path, workspace):
    out = tmp_path / "hm.csv"
    assert run_cmd("heatmap", "--ckpts", workspace / "run", "--data", workspace / "seq", "--out", out) == EXIT_OK
    with open(out) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["m", "n0", "n1", "n2"]
    assert len(rows) == 4 and all(len(r) == 4 for r in rows)
    assert all(float(v) >= 0 for r in rows[1:] for v in r[1:])
    for extra in ("hm_std.csv", "hm_normalized.csv", "hm.png"):
        assert (tmp_path / extra).exists()


def test_forget_curve(tmp_path, workspace):
    out = tmp_path / "f.csv"
    assert run_cmd("forget", "--ckpts", workspace / "run", "--data", workspace / "seq", "--out", out) == EXIT_OK
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["t"]) for r in rows] == [0, 1, 2]
    assert all(0 <= float(r["fraction"]) <= 1 for r in rows)
    assert (tmp_path / "f.png").exists()


def test_dims_mismatch_exit_2(tmp_path, workspace, capsys):
    save_config(tmp_path / "c.txt", SMALL.replace(dims=(3, 32, 1)))
    assert run_cmd("heatmap", "--ckpts", workspace / "run", "--data", workspace / "seq", "--config",
                   tmp_path / "c.txt", "--out", tmp_path / "h.csv") == EXIT_BAD_INPUT
    assert "dims" in capsys.readouterr().err


def test_missing_checkpoints_exit_2(tmp_path, workspace):
    (tmp_path / "empty").mkdir()
    save_config(tmp_path / "empty" / "config.txt", SMALL)
    assert run_cmd("mesh", "--ckpts", tmp_path / "empty", "--out", tmp_path / "m.ply") == EXIT_BAD_INPUT
    assert run_cmd("mesh", "--ckpts", tmp_path / "nowhere", "--out", tmp_path / "m.ply") == EXIT_BAD_INPUT


def test_mesh_writes_ply(tmp_path, workspace):
    out = tmp_path / "m.ply"
    assert run_cmd("mesh", "--ckpts", workspace / "run", "--data", workspace / "seq", "--res", 24,
                   "--out", out) == EXIT_OK
    mesh = read_ply(out)
    assert mesh.vertices.shape[1] == 3 and mesh.faces.shape[1] == 3


def test_mesh_mask_empty_observations(tmp_path, workspace, caplog):
    empty = tmp_path / "empty_seq"
    run_cmd("synth", "--scene", workspace / "scene.txt", "--frames", 0, "--out", empty)
    out = tmp_path / "m.ply"
    assert run_cmd("mesh", "--ckpts", workspace / "run", "--data", empty, "--mask", "--res", 24,
                   "--out", out) == EXIT_OK
    assert len(read_ply(out)) == 0
    assert "empty" in caplog.text


def test_mesh_mask_needs_data(tmp_path, workspace):
    assert run_cmd("mesh", "--ckpts", workspace / "run", "--mask", "--out", tmp_path / "m.ply") == EXIT_BAD_INPUT


def test_mesh_bad_checkpoint_index(tmp_path, workspace):
    assert run_cmd("mesh", "--ckpts", workspace / "run", "--t", 7, "--out", tmp_path / "m.ply") == EXIT_BAD_INPUT


def test_slice_outputs(tmp_path, workspace):
    out = tmp_path / "s.pgm"
    assert run_cmd("slice", "--ckpts", workspace / "run", "--data", workspace / "seq", "--axis", "y",
                   "--res", 20, "--out", out) == EXIT_OK
    img = read_pgm16(out)
    assert img.shape == (20, 20)
    raster = np.loadtxt(tmp_path / "s.csv", delimiter=",")
    assert raster.shape == (20, 20)
    assert (tmp_path / "s.png").exists()


def test_slice_offset_outside_box(tmp_path, workspace):
    assert run_cmd("slice", "--ckpts", workspace / "run", "--data", workspace / "seq", "--offset", 5.0,
                   "--out", tmp_path / "s.pgm") == EXIT_BAD_INPUT


# ---- parser -----------------------------------------------------------------------------

@pytest.mark.parametrize("command, flags", [
    ("synth", ["--scene", "--frames", "--traj", "--width", "--height", "--out"]),
    ("train", ["--config", "--data", "--out"]),
    ("baseline", ["--config", "--data", "--out", "--mode"]),
    ("heatmap", ["--ckpts", "--data", "--config", "--out"]),
    ("forget", ["--ckpts", "--data", "--config", "--out", "--threshold"]),
    ("mesh", ["--ckpts", "--data", "--config", "--out", "--res", "--mask", "--voxel-cells", "--t"]),
    ("slice", ["--ckpts", "--data", "--config", "--out", "--axis", "--offset", "--res", "--limit", "--t"]),
])
def test_help_lists_every_flag(command, flags, capsys):
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args([command, "--help"])
    assert exc.value.code == 0
    text = capsys.readouterr().out
    for flag in flags:
        assert flag in text


def test_unknown_flag_rejected():
    with pytest.raises(SystemExit) as exc:
        build_parser().parse_args(["train", "--config", "c", "--data", "d", "--out", "o", "--bogus"])
    assert exc.value.code != 0


def test_config_load_save_idempotent(tmp_path, workspace):
    cfg = load_config(workspace / "run" / "config.txt")
    save_config(tmp_path / "a.txt", cfg)
    save_config(tmp_path / "b.txt", load_config(tmp_path / "a.txt"))
    assert (tmp_path / "a.txt").read_text() == (tmp_path / "b.txt").read_text() == format_config(cfg)


def test_slice_without_data_uses_stored_domain(tmp_path, workspace):
    out = tmp_path / "s.pgm"
    assert run_cmd("slice", "--ckpts", workspace / "run", "--res", 16, "--out", out) == EXIT_OK
    assert read_pgm16(out).shape == (16, 16)

import os
import subprocess
import sys

import numpy as np
import pytest

from skelfuse.cli import Config, dispatch, format_config, load_config
from skelfuse.data import load_checkpoint
from skelfuse.errors import FileError, UsageError

PIPELINE_CFG = """\
data_dir={root}/data
out_dir={root}/out
samples_per_class=6
P=24
S=32
epochs=2
batch=8
decay_epochs=1
alpha=1.0
gcn_channels=8,8
gcn_strides=1,2
gamma=3
rgb_stem=8
rgb_stages=8:1,16:1
rgb_stage_strides=2,2
seed=42
"""


def run_cli(args, env_extra=None):
    env = dict(os.environ)
    env.update(env_extra or {})
    return subprocess.run([sys.executable, "-m", "skelfuse.cli", *args],
                          capture_output=True, text=True, env=env)


# ------------------------------------------------------------ config file


def test_empty_config_gives_paper_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    cfg = load_config(path)
    assert cfg.K_roi == 5 and cfg.L == 5
    assert cfg.P == 96 and cfg.S == 225
    assert cfg.epochs == 65 and cfg.batch == 64
    assert cfg.lr0 == 0.1 and cfg.decay_epochs == (45, 55)
    assert cfg.alpha == 0.001


def test_ntu_preset_geometry(tmp_path):
    path = tmp_path / "ntu.cfg"
    path.write_text("K_roi=5\nL=5\nP=96\n")
    cfg = load_config(path)
    assert cfg.K_roi * cfg.P == 480
    assert cfg.L * cfg.P == 480


def test_unknown_key_rejected_with_line(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("bogus=1\n")
    with pytest.raises(UsageError) as exc:
        load_config(path)
    assert "unknown key 'bogus' (line 1)" in str(exc.value)


def test_bad_value_rejected(tmp_path):
    path = tmp_path / "bad2.cfg"
    path.write_text("epochs=banana\n")
    with pytest.raises(UsageError) as exc:
        load_config(path)
    assert "line 1" in str(exc.value)


def test_missing_config_is_data_error(tmp_path):
    with pytest.raises(FileError):
        load_config(tmp_path / "nope.cfg")


def test_config_roundtrips_through_format(tmp_path):
    cfg = Config(P=24, S=64, rgb_stages=((8, 1), (16, 2)), decay_epochs=(3, 5),
                 flip_augment=True)
    path = tmp_path / "echo.cfg"
    path.write_text(format_config(cfg) + "\n")
    assert load_config(path) == cfg


def test_comments_and_blank_lines_ok(tmp_path):
    path = tmp_path / "c.cfg"
    path.write_text("# a comment\n\nP=48  # trailing comment\n")
    assert load_config(path).P == 48


# ------------------------------------------------------------ dispatch


def test_dispatch_unknown_command_exit_1():
    assert dispatch(["frobnicate"]) == 1


def test_dispatch_missing_config_exit_2():
    assert dispatch(["evaluate", "--config", "/nonexistent/x.cfg"]) == 2


def test_dispatch_unknown_key_exit_1(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("nope=1\n")
    assert dispatch(["evaluate", "--config", str(path)]) == 1


def test_dispatch_missing_dataset_exit_2(tmp_path):
    path = tmp_path / "ok.cfg"
    path.write_text(f"data_dir={tmp_path}/absent\nout_dir={tmp_path}/out\n")
    assert dispatch(["train-skeleton", "--config", str(path)]) == 2


# ------------------------------------------------------------ full pipeline


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    cfg_path = root / "desk.cfg"
    cfg_path.write_text(PIPELINE_CFG.format(root=root))
    for args in (["gen-synthetic"], ["train-skeleton"], ["build-stroi"],
                 ["extract-weights"], ["train-rgb", "--mode", "fixed"],
                 ["ensemble"]):
        proc = run_cli([*args, "--config", str(cfg_path)])
        assert proc.returncode == 0, f"{args}: {proc.stderr}"
    return root, cfg_path


def test_pipeline_produces_artifacts(pipeline):
    root, _ = pipeline
    out = root / "out"
    for name in ("skeleton.ckpt", "stroi.ckpt", "weights.ckpt",
                 "rgb_fixed.ckpt", "metrics.txt", "report.txt", "ensemble.ckpt"):
        assert (out / name).is_file(), name


def test_pipeline_report_has_seven_rows(pipeline):
    root, _ = pipeline
    lines = (root / "out" / "report.txt").read_text().strip().splitlines()
    assert len(lines) == 8  # header + 7 ablation rows


def test_pipeline_echoes_resolved_config(pipeline):
    root, _ = pipeline
    echoed = (root / "out" / "resolved-train-skeleton.cfg").read_text()
    assert "skelfuse" in echoed.splitlines()[0]
    assert "seed=42" in echoed
    assert "P=24" in echoed


def test_pipeline_metrics_lines_structured(pipeline):
    root, _ = pipeline
    lines = (root / "out" / "metrics.txt").read_text().strip().splitlines()
    assert lines, "metrics file empty"
    for line in lines:
        keys = [item.split("=")[0] for item in line.split()]
        assert keys == ["epoch", "stage", "lr", "loss", "train_acc", "val_acc"]


def test_pipeline_ensemble_scores_loadable(pipeline):
    root, _ = pipeline
    bundle = load_checkpoint(root / "out" / "ensemble.ckpt")
    assert "scores_fixed" in bundle and "labels" in bundle
    scores = bundle["scores_fixed"]
    assert np.abs(scores.sum(axis=1) - 1.0).max() < 1e-5
    assert np.array_equal(bundle["predicted_fixed"], scores.argmax(axis=1))


def test_echoed_config_reloads_identically(pipeline):
    root, cfg_path = pipeline
    original = load_config(cfg_path)
    echoed = load_config(root / "out" / "resolved-train-skeleton.cfg")
    assert echoed == original


def test_env_override_out_dir(tmp_path):
    cfg_path = tmp_path / "g.cfg"
    cfg_path.write_text("samples_per_class=2\nseq_len=8\n"
                        f"data_dir={tmp_path}/d\nout_dir={tmp_path}/ignored\n")
    proc = run_cli(["gen-synthetic", "--config", str(cfg_path)],
                   env_extra={"SKELFUSE_OUT": str(tmp_path / "envout")})
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "envout" / "resolved-gen-synthetic.cfg").is_file()

import os
import struct

import numpy as np
import pytest

from partview.cli import main
from partview.imageio import read_pgm, read_ppm


def write_cfg(path, **kv):
    base = {
        "views": 4, "image_size": 32, "feature_channels": 16, "k_parts": 3,
        "hidden_dim": 16, "head_dim": 32, "lr": 0.002, "seed": 5,
        "rounds": 1, "epochs_per_phase": 1, "shapes_per_subcategory": 3,
    }
    base.update(kv)
    with open(path, "w") as fh:
        for k, v in base.items():
            fh.write(f"{k} = {v}\n")
    return str(path)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data + render + gsp-gt + train, shared by the command tests."""
    base = tmp_path_factory.mktemp("cliws")
    cfg = write_cfg(base / "run.cfg", dataset_root=base / "data", out_dir=base / "out")
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["render", "--config", cfg]) == 0
    assert main(["gsp-gt", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 0
    ckpt = str(base / "out" / "checkpoints" / "round_1.fgpv")
    assert os.path.exists(ckpt)
    return base, cfg, ckpt


def tree_bytes(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_gen_data_deterministic(tmp_path):
    cfg1 = write_cfg(tmp_path / "a.cfg", dataset_root=tmp_path / "d1", out_dir=tmp_path / "o1")
    cfg2 = write_cfg(tmp_path / "b.cfg", dataset_root=tmp_path / "d2", out_dir=tmp_path / "o2")
    assert main(["gen-data", "--config", cfg1]) == 0
    assert main(["gen-data", "--config", cfg2]) == 0
    t1, t2 = tree_bytes(tmp_path / "d1"), tree_bytes(tmp_path / "d2")
    assert list(t1) == list(t2)
    for k in t1:
        assert t1[k] == t2[k], k


def test_invalid_family_exits_one(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", family="zeppelin",
                    dataset_root=tmp_path / "d", out_dir=tmp_path / "o")
    assert main(["gen-data", "--config", cfg]) == 1
    assert "family" in capsys.readouterr().err


def test_corrupt_off_named_in_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", dataset_root=tmp_path / "d", out_dir=tmp_path / "o")
    assert main(["gen-data", "--config", cfg]) == 0
    victim = os.path.join(tmp_path, "d", "chair_highback", "chair_highback_000.off")
    with open(victim, "w") as fh:
        fh.write("not an off file\n")
    assert main(["render", "--config", cfg]) == 2
    assert "chair_highback_000.off" in capsys.readouterr().err


def test_train_without_gt_is_actionable(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", dataset_root=tmp_path / "d", out_dir=tmp_path / "o")
    assert main(["gen-data", "--config", cfg]) == 0
    assert main(["train", "--config", cfg]) == 2
    assert "gsp-gt" in capsys.readouterr().err


def test_render_rerun_is_noop(pipeline, capsys):
    base, cfg, _ = pipeline
    assert main(["render", "--config", cfg]) == 0
    out = capsys.readouterr().out
    assert "rendered 0 shapes" in out
    views_dir = base / "out" / "views" / "chair_lowback" / "chair_lowback_000"
    ppms = sorted(os.listdir(views_dir))
    assert ppms.count("cache_key.txt") == 1
    assert len([p for p in ppms if p.endswith(".ppm")]) == 4
    img = read_ppm(str(views_dir / "view_00.ppm"))
    assert img.shape == (32, 32, 3)


def test_eval_writes_reports(pipeline, capsys):
    base, cfg, ckpt = pipeline
    assert main(["eval", "--config", cfg, "--checkpoint", ckpt]) == 0
    assert os.path.exists(base / "out" / "eval" / "confusion.csv")
    preds = open(base / "out" / "eval" / "predictions.csv").read().splitlines()
    assert preds[0] == "shape_id,true_label,pred_label,p_1,p_2,p_3"
    assert len(preds) == 4  # header + 3 test shapes


def test_eval_architecture_mismatch(pipeline, tmp_path, capsys):
    base, _, ckpt = pipeline
    other = write_cfg(tmp_path / "other.cfg", feature_channels=32,
                      dataset_root=base / "data", out_dir=base / "out")
    assert main(["eval", "--config", other, "--checkpoint", ckpt]) == 2
    assert "feature_channels" in capsys.readouterr().err


def test_eval_wrong_version_checkpoint(pipeline, tmp_path, capsys):
    base, cfg, _ = pipeline
    bogus = tmp_path / "bogus.fgpv"
    bogus.write_bytes(b"FGPV" + struct.pack("<I", 99) + b"\x00" * 32)
    assert main(["eval", "--config", cfg, "--checkpoint", str(bogus)]) == 2
    assert "version" in capsys.readouterr().err


def test_ablate_writes_table(pipeline, capsys):
    base, cfg, ckpt = pipeline
    assert main(["ablate", "--config", cfg, "--checkpoint", ckpt,
                 "--modes", "na,nr"]) == 0
    rows = open(base / "out" / "ablation.csv").read().splitlines()
    assert rows[0] == "mode,class_acc,instance_acc"
    assert [r.split(",")[0] for r in rows[1:]] == ["na", "nr"]


def test_export_attn_outputs(pipeline, capsys):
    base, cfg, ckpt = pipeline
    assert main(["export-attn", "--checkpoint", ckpt,
                 "--shape", "chair_lowback/chair_lowback_000"]) == 0
    viz = base / "out" / "viz" / "chair_lowback_chair_lowback_000"
    q = read_pgm(str(viz / "view_00_part_attention.pgm"))
    assert q.shape == (3, 3)  # k_parts = 3 in this config
    theta = read_pgm(str(viz / "view_attention.pgm"))
    assert theta.shape == (4, 4)  # views = 4
    boxed = read_ppm(str(viz / "view_00_boxes.ppm"))
    assert boxed.shape == (32, 32, 3)


def test_export_attn_unknown_shape(pipeline, capsys):
    _, _, ckpt = pipeline
    assert main(["export-attn", "--checkpoint", ckpt, "--shape", "nope/nope"]) == 2


def test_report_renders_figures(pipeline):
    base, _, _ = pipeline
    assert main(["report", "--run-dir", str(base / "out")]) == 0
    report = base / "out" / "report"
    for name in ("losses.png", "total_loss.png", "confusion.png", "ablation.png"):
        assert os.path.exists(report / name)
        assert open(report / name, "rb").read(8).startswith(b"\x89PNG")


def test_report_empty_dir_is_data_error(tmp_path, capsys):
    assert main(["report", "--run-dir", str(tmp_path)]) == 2


def test_grad_check_fresh_init_passes(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", dataset_root=tmp_path / "d", out_dir=tmp_path / "o")
    assert main(["grad-check", "--config", cfg]) == 0
    assert "all gradient checks passed" in capsys.readouterr().out


def test_usage_error_exit_code(capsys):
    assert main(["no-such-command"]) == 1

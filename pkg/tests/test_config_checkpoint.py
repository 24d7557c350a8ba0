import numpy as np
import pytest

from partview.checkpoint import (
    load_checkpoint,
    rng_from_json,
    rng_state_to_json,
    save_checkpoint,
)
from partview.config import Config, load_config, parse_config, serialize_config, validate
from partview.errors import CheckpointError, ConfigError


def test_defaults_follow_reference_setting():
    c = Config()
    assert c.views == 12
    assert c.s_d == 0.7
    assert c.lambda_ == 1.0 and c.psi == 1.0
    assert c.anchor_scales == [1, 2, 4, 8, 16, 32]
    assert c.anchor_ratios == ["1:1", "1:2", "2:1"]
    assert c.lr == 1e-5
    assert c.batch == 1


def test_round_trip_identity():
    c = validate(Config())
    c2 = parse_config(serialize_config(c))
    assert c2 == c
    # and through arbitrary edits
    c.seed = 991
    c.lr = 0.00325
    c.anchor_scales = [1.5, 3.0]
    c.attention_mode = "ova"
    c.smooth_l1 = True
    c3 = parse_config(serialize_config(c))
    assert c3 == c


def test_comments_and_whitespace(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# a comment\nviews = 6   # trailing\n\nseed=3\n")
    c = load_config(str(p))
    assert c.views == 6 and c.seed == 3


def test_unknown_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("not_a_key = 5\n")


def test_duplicate_key_rejected():
    with pytest.raises(ConfigError):
        parse_config("views = 3\nviews = 4\n")


def test_bad_values_rejected():
    for text in ("views = zero", "s_d = 1.5", "lr = -1", "batch = 2",
                 "attention_mode = wild", "image_size = 60",
                 "anchor_ratios = 1:0", "family = rocket"):
        with pytest.raises(ConfigError):
            parse_config(text + "\n")


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    tensors = {
        "det.conv1.w": rng.normal(size=(4, 3, 3, 3)),
        "att.cls.b": rng.normal(size=(1, 3)),
        "adam.m.det.conv1.w": rng.normal(size=(4, 3, 3, 3)),
    }
    meta = {"completed_rounds": 2, "rng_state": rng_state_to_json(rng)}
    cfg_text = serialize_config(Config())
    path = str(tmp_path / "x.fgpv")
    save_checkpoint(path, tensors, cfg_text, meta)
    cfg_back, meta_back, tensors_back = load_checkpoint(path)
    assert cfg_back == cfg_text
    assert meta_back["completed_rounds"] == 2
    for name, arr in tensors.items():
        expected = arr.astype(np.float32).astype(np.float64)
        assert np.array_equal(tensors_back[name], expected)


def test_checkpoint_single_precision_is_idempotent(tmp_path):
    rng = np.random.default_rng(6)
    t = {"w": rng.normal(size=(8, 8))}
    p1 = str(tmp_path / "a.fgpv")
    save_checkpoint(p1, t, "", {})
    _, _, back1 = load_checkpoint(p1)
    p2 = str(tmp_path / "b.fgpv")
    save_checkpoint(p2, back1, "", {})
    _, _, back2 = load_checkpoint(p2)
    assert np.array_equal(back1["w"], back2["w"])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "bad.fgpv"
    p.write_bytes(b"NOPE" + b"\x00" * 64)
    with pytest.raises(CheckpointError):
        load_checkpoint(str(p))


def test_checkpoint_version_mismatch(tmp_path):
    import struct
    p = tmp_path / "v9.fgpv"
    p.write_bytes(b"FGPV" + struct.pack("<I", 9) + b"\x00" * 16)
    with pytest.raises(CheckpointError) as ei:
        load_checkpoint(str(p))
    assert "version" in str(ei.value)


def test_checkpoint_truncation(tmp_path):
    rng = np.random.default_rng(7)
    p = str(tmp_path / "t.fgpv")
    save_checkpoint(p, {"w": rng.normal(size=(16,))}, "", {})
    blob = open(p, "rb").read()
    open(p, "wb").write(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(p)


def test_rng_state_round_trip():
    rng = np.random.default_rng(123)
    rng.normal(size=100)  # advance
    state = rng_state_to_json(rng)
    clone = rng_from_json(state)
    assert np.array_equal(rng.normal(size=50), clone.normal(size=50))

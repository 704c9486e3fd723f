import struct
from collections import OrderedDict

import numpy as np
import pytest

from changeseg.checkpoint import CheckpointError, MAGIC, decode, encode, load_checkpoint, save_checkpoint
from changeseg.config import Config, ConfigFileError, describe_keys


def test_defaults_validate_and_round_trip():
    cfg = Config().validate()
    back = Config.from_text(cfg.to_text())
    assert back.to_text() == cfg.to_text() and back.hash() == cfg.hash()


def test_unknown_key_rejected():
    with pytest.raises(ConfigFileError, match="bogus"):
        Config.from_text("bogus=1\n")


def test_bad_value_and_line():
    with pytest.raises(ConfigFileError):
        Config.from_text("epochs=many\n")
    with pytest.raises(ConfigFileError, match="line 2"):
        Config.from_text("# comment\nepochs\n")


def test_set_parses_types():
    cfg = Config()
    cfg.set("lora_r", "8")
    cfg.set("hflip", "false")
    cfg.set("stage_channels", "8,16,32,64")
    cfg.set("base_lr", "1e-3")
    assert cfg.get("lora_r") == 8 and cfg.get("hflip") is False
    assert cfg.get("stage_channels") == (8, 16, 32, 64) and cfg.get("base_lr") == 1e-3


def test_hash_tracks_content():
    a, b = Config(), Config()
    assert a.hash() == b.hash()
    b.set("seed", "1")
    assert a.hash() != b.hash()


def test_invalid_values():
    cfg = Config()
    cfg.train.t_mult = 0.5
    with pytest.raises(ConfigFileError):
        cfg.validate()


def test_describe_lists_every_key():
    text = describe_keys()
    for key in Config.keys():
        assert key in text


def test_file_round_trip(tmp_path):
    cfg = Config()
    cfg.set("epochs", "7")
    cfg.save(tmp_path / "c.txt")
    assert Config.load(tmp_path / "c.txt").get("epochs") == 7


# --- checkpoint ---------------------------------------------------------

def test_byte_layout():
    t = OrderedDict([("a", np.array([1.5], np.float32)), ("opt.step", np.array(3.0))])
    buf = encode(t, 0x0102030405060708)
    want = (MAGIC + struct.pack("<I", 2)
            + struct.pack("<H", 1) + b"a" + struct.pack("<BB", 0, 1) + struct.pack("<I", 1)
            + np.array([1.5], "<f4").tobytes()
            + struct.pack("<H", 8) + b"opt.step" + struct.pack("<BB", 1, 0) + np.array(3.0, "<f8").tobytes()
            + struct.pack("<Q", 0x0102030405060708))
    assert buf == want


def test_round_trip(tmp_path, rng):
    model = OrderedDict([("w", rng.normal((2, 3, 1, 1)).astype(np.float32)), ("b", rng.normal((3,)))])
    opt = OrderedDict([("step", np.array(4.0)), ("m.w", rng.normal((2, 3, 1, 1)))])
    save_checkpoint(tmp_path / "x.ckpt", model, opt, 42)
    m2, o2, h = load_checkpoint(tmp_path / "x.ckpt")
    assert h == 42 and list(m2) == ["w", "b"] and list(o2) == ["step", "m.w"]
    for k in model:
        assert m2[k].dtype == model[k].dtype and m2[k].tobytes() == model[k].tobytes()
    assert o2["m.w"].tobytes() == opt["m.w"].tobytes()


def test_bad_magic():
    with pytest.raises(CheckpointError, match="magic"):
        decode(b"NOPE1" + b"\0" * 12)


def test_truncated_and_trailing():
    buf = encode(OrderedDict([("w", np.ones(4, np.float32))]), 1)
    for cut in (6, 12, len(buf) - 1):
        with pytest.raises(CheckpointError, match="truncated"):
            decode(buf[:cut])
    with pytest.raises(CheckpointError, match="trailing"):
        decode(buf + b"\0")


def test_unsupported_dtype():
    with pytest.raises(CheckpointError):
        encode(OrderedDict([("i", np.arange(3))]), 0)

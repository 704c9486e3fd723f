import numpy as np
import pytest
from PIL import Image

from changeseg.checkpoint import load_checkpoint, save_checkpoint
from changeseg.cli import EXIT_OK, EXIT_USAGE, main, params_table, parse_synth_spec, UsageError
from changeseg.config import Config
from changeseg.data import DatasetManifest, compare_map

from conftest import tiny_config


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    data, out = base / "data", base / "run"
    assert main(["synth", "--spec", "count=4,size=32,k=3,val=2", "--seed", "4", "--out", str(data)]) == EXIT_OK
    tiny_config(epochs=2).save(base / "tiny.txt")
    assert main(["train", "--config", str(base / "tiny.txt"), "--data", str(data), "--out", str(out),
                 "--seed", "3"]) == EXIT_OK
    return base, data, out


def test_missing_data_dir(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--data", str(missing), "--out", str(tmp_path / "o")]) == EXIT_USAGE
    assert str(missing) in capsys.readouterr().err


def test_missing_required_flag():
    with pytest.raises(SystemExit) as info:
        main(["train", "--data", "x"])
    assert info.value.code == 2


def test_train_outputs(trained):
    _, _, out = trained
    for name in ("history.csv", "config.txt", "best.ckpt", "report.txt"):
        assert (out / name).is_file()
    assert (out / "history.csv").read_text().count("\n") == 3
    _, opt, h = load_checkpoint(out / "best.ckpt")
    assert h == Config.load(out / "config.txt").hash() and "epoch" in opt


def test_eval_and_predict(trained, capsys):
    _, data, out = trained
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data)]) == EXIT_OK
    assert "mIoU_changed=" in capsys.readouterr().out
    pred = out / "pred"
    assert main(["predict", "--checkpoint", str(out / "best.ckpt"), "--data", str(data), "--out", str(pred),
                 "--compare"]) == EXIT_OK
    files = sorted(p.name for p in pred.iterdir())
    assert len(files) == 8 and "train_0000_compare.png" in files
    pal = {tuple(c) for c in DatasetManifest.load(data).palette}
    img = np.asarray(Image.open(pred / "train_0000.png"))
    assert {tuple(c) for c in img.reshape(-1, 3)} <= pal


def test_eval_empty_split(trained, capsys):
    _, data, out = trained
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(data), "--split", "test"]) == EXIT_USAGE
    assert "empty dataset" in capsys.readouterr().err


def test_eval_class_mismatch(trained, tmp_path, capsys):
    _, _, out = trained
    other = tmp_path / "k5"
    assert main(["synth", "--spec", "count=1,size=32,k=5", "--out", str(other)]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--data", str(other),
                 "--split", "train"]) == EXIT_USAGE
    assert "mismatch" in capsys.readouterr().err


def test_config_hash_mismatch(trained, tmp_path, capsys):
    _, data, out = trained
    cfg = Config.load(out / "config.txt")
    cfg.set("seed", "99")
    cfg.save(tmp_path / "other.txt")
    assert main(["eval", "--checkpoint", str(out / "best.ckpt"), "--config", str(tmp_path / "other.txt"),
                 "--data", str(data)]) == EXIT_USAGE
    assert "hash" in capsys.readouterr().err


def test_seed_reproducible(trained, tmp_path):
    base, data, out = trained
    again = tmp_path / "again"
    assert main(["train", "--config", str(base / "tiny.txt"), "--data", str(data), "--out", str(again),
                 "--seed", "3"]) == EXIT_OK
    assert (again / "history.csv").read_bytes() == (out / "history.csv").read_bytes()
    assert (again / "best.ckpt").read_bytes() == (out / "best.ckpt").read_bytes()


def test_env_seed(trained, tmp_path, monkeypatch):
    base, data, out = trained
    monkeypatch.setenv("MCDS_SEED", "3")
    env = tmp_path / "env"
    assert main(["train", "--config", str(base / "tiny.txt"), "--data", str(data), "--out", str(env)]) == EXIT_OK
    assert (env / "history.csv").read_bytes() == (out / "history.csv").read_bytes()
    monkeypatch.setenv("MCDS_SEED", "x")
    assert main(["train", "--config", str(base / "tiny.txt"), "--data", str(data),
                 "--out", str(tmp_path / "bad")]) == EXIT_USAGE


def test_all_background_compare_has_no_false_positives(trained, tmp_path):
    _, data, out = trained
    state, opt, _ = load_checkpoint(out / "best.ckpt")
    state["decoder.classifier.weight"][:] = 0.0
    state["decoder.classifier.bias"][:] = [50.0, 0.0, 0.0, 0.0]
    run = tmp_path / "zero"
    run.mkdir()
    (run / "config.txt").write_bytes((out / "config.txt").read_bytes())
    save_checkpoint(run / "best.ckpt", state, opt, Config.load(out / "config.txt").hash())
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), "--data", str(data), "--out", str(run / "p"),
                 "--compare"]) == EXIT_OK
    for f in (run / "p").glob("*_compare.png"):
        colours = {tuple(c) for c in np.asarray(Image.open(f)).reshape(-1, 3)}
        assert colours <= {(0, 0, 0), (0, 255, 0)}
    for f in (run / "p").glob("train_000?.png"):
        assert not np.asarray(Image.open(f)).any()


def test_perfect_compare_is_black_and_white(rng):
    gt = rng.integers(0, 4, size=(16, 16))
    colours = {tuple(c) for c in compare_map(gt, gt).reshape(-1, 3)}
    assert colours <= {(0, 0, 0), (255, 255, 255)}


def test_convert(tmp_path):
    a = np.array([[1, 2], [3, 4]], np.uint8)
    b = np.array([[1, 5], [0, 2]], np.uint8)
    Image.fromarray(a, "L").save(tmp_path / "a.png")
    Image.fromarray(b, "L").save(tmp_path / "b.png")
    assert main(["convert", "--t1", str(tmp_path / "a.png"), "--t2", str(tmp_path / "b.png"),
                 "--out", str(tmp_path / "o.png")]) == EXIT_OK
    assert np.asarray(Image.open(tmp_path / "o.png")).tolist() == [[0, 5], [0, 2]]
    assert main(["convert", "--t1", str(tmp_path / "a.png"), "--t2", str(tmp_path / "a.png"),
                 "--out", str(tmp_path / "same.png")]) == EXIT_OK
    assert not np.asarray(Image.open(tmp_path / "same.png")).any()
    assert main(["convert", "--t1", str(tmp_path / "a.png"), "--t2", str(tmp_path / "none.png"),
                 "--out", str(tmp_path / "x.png")]) == EXIT_USAGE


def test_synth_spec_parsing():
    assert parse_synth_spec("count=2, k=4") == {"count": 2, "size": 64, "k": 4, "seed": 0, "val": 0}
    for bad in ("colour=3", "count", "count=two"):
        with pytest.raises(UsageError):
            parse_synth_spec(bad)


def test_params_lora_doubling(capsys):
    table = params_table(Config())
    rows = {int(line.split()[0]): int(line.split()[2]) for line in table.splitlines()
            if line.strip() and line.split()[0].isdigit()}
    assert sorted(rows) == [4, 8, 16, 24, 32]
    assert rows[16] == 2 * rows[8] and rows[8] == 2 * rows[4]
    assert main(["params"]) == EXIT_OK
    assert "trainable parameters" in capsys.readouterr().out


def test_verify_oracles(capsys):
    assert main(["verify", "--suite", "oracles"]) == EXIT_OK
    assert "checks passed" in capsys.readouterr().out


def test_help_lists_config_keys(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    assert "lora_r" in text and "base_lr" in text

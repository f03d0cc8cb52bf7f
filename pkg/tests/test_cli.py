import numpy as np
import pytest

from rams.cli import main
from rams.config import RunConfig, load_config
from rams.metrics import read_records
from rams.scene_io import Band, load_image_16bit
from rams.synthetic import write_dataset


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("data")
    write_dataset(root, Band.RED, n_train=3, n_val=2, seed=7)
    return root


@pytest.fixture(scope="module")
def cache(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("cache")
    assert main(["preprocess", str(dataset), "--band", "RED", "--out", str(out), "--n-p", "2",
                 "--patches", "4", "--patch-size", "16"]) == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(cache, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--cache", str(cache), "--out", str(out), "--F", "8", "--N", "1",
                 "--epochs", "1", "--batch-size", "8", "--patch-size", "16"]) == 0
    return out / "best.ckpt"


def test_validate_ok(dataset, capsys):
    assert main(["validate", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "RED/train: 3 scenes OK" in out and "RED/val: 2 scenes OK" in out


def test_validate_empty_dir(tmp_path):
    assert main(["validate", str(tmp_path)]) == 3


def test_validate_missing_manifest(tmp_path):
    write_dataset(tmp_path, Band.NIR, 1, 0)
    (tmp_path / "NIR" / "train.txt").unlink()
    assert main(["validate", str(tmp_path)]) == 3


def test_validate_malformed(tmp_path, capsys):
    write_dataset(tmp_path, Band.RED, 2, 0)
    (tmp_path / "RED" / "train" / "imgset0001" / "QM003.png").unlink()
    assert main(["validate", str(tmp_path)]) == 2
    assert "MALFORMED RED/train/imgset0001" in capsys.readouterr().out


def test_dataset_root_from_environment(dataset, monkeypatch):
    monkeypatch.setenv("RAMS_DATA_ROOT", str(dataset))
    assert main(["validate"]) == 0


def test_preprocess_is_byte_identical(dataset, cache, tmp_path):
    again = tmp_path / "again"
    assert main(["preprocess", str(dataset), "--band", "RED", "--out", str(again), "--n-p", "2",
                 "--patches", "4", "--patch-size", "16"]) == 0
    a = sorted(p.relative_to(cache) for p in cache.rglob("*") if p.is_file())
    b = sorted(p.relative_to(again) for p in again.rglob("*") if p.is_file())
    assert a == b
    for rel in a:
        if rel.name == "run_config.txt":
            continue  # records the output path
        assert (cache / rel).read_bytes() == (again / rel).read_bytes(), rel
    assert len(list((cache / "train").glob("*.npz"))) == 6


def test_preprocess_rejects_everything_with_high_cmin(dataset, tmp_path, caplog):
    assert main(["preprocess", str(dataset), "--band", "RED", "--out", str(tmp_path / "c"),
                 "--c-min", "1.01", "--n-p", "1"]) == 0
    assert "zero scenes accepted" in caplog.text
    assert not list((tmp_path / "c" / "train").glob("*.npz"))


def test_run_config_echo_reproduces(cache):
    cfg = load_config(cache / "run_config.txt")
    assert cfg.n_p == 2 and cfg.patches_per_image == 4 and cfg.band == "RED"
    assert cfg == RunConfig().update(**{k: getattr(cfg, k) for k in ("n_p", "patches_per_image", "lr_patch_size",
                                                                     "root", "cache", "out", "band")})


def test_train_outputs(checkpoint):
    run = checkpoint.parent
    assert (run / "epoch_001.ckpt").exists()
    assert (run / "train_log.tsv").read_text().count("\n") == 2
    assert (run / "run_config.txt").exists()


def test_infer_ensemble_one_matches_plain(dataset, checkpoint, tmp_path):
    scene = dataset / "RED" / "val" / "imgset10000"
    assert main(["infer", "--checkpoint", str(checkpoint), "--scene", str(scene), "--out", str(tmp_path / "a.png")]) == 0
    assert main(["infer", "--checkpoint", str(checkpoint), "--scene", str(scene), "--ensemble", "1",
                 "--out", str(tmp_path / "b.png")]) == 0
    a = load_image_16bit(tmp_path / "a.png").pixels
    b = load_image_16bit(tmp_path / "b.png").pixels
    assert a.shape == (384, 384)
    np.testing.assert_array_equal(a, b)


def test_evaluate_fresh_checkpoint_and_report(dataset, checkpoint, tmp_path, capsys):
    out = tmp_path / "eval"
    assert main(["evaluate", "--checkpoint", str(checkpoint), "--root", str(dataset), "--methods",
                 "bicubic,rams,rams+2", "--curve", "1,2", "--out", str(out)]) == 0
    summary = (out / "summary.tsv").read_text().splitlines()
    assert summary[0].split("\t")[:3] == ["band", "method", "cpsnr"]
    assert len(summary) == 4
    recs = read_records(out / "per_scene.tsv")
    assert len(recs) == 6
    assert (out / "scatter_bicubic_vs_rams_RED.png").exists()
    assert (out / "ensemble_curve.tsv").exists() and (out / "ensemble_curve.png").exists()
    rerendered = tmp_path / "again"
    assert main(["report", "--records", str(out / "per_scene.tsv"), "--out", str(rerendered)]) == 0
    assert (rerendered / "summary.tsv").read_text() == (out / "summary.tsv").read_text()


def test_describe_default(capsys):
    assert main(["describe"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].split()[-1] == "928743"

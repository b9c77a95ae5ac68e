import json
import subprocess
import sys

import pytest

from ncdseg.cli import main
from ncdseg.plotting import read_plot_data

SMALL = {"hidden_dims": [16, 16], "feature_dim": 8, "heads": 2, "neighbors": 8,
         "epochs": 1, "batch-size": 2, "lr-max": 0.5}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-synth", "--dataset", str(root / "ds"), "--n-train", "4", "--n-val", "2", "--seed", "3"]) == 0
    (root / "small.json").write_text(json.dumps(SMALL))
    return root


@pytest.fixture(scope="module")
def checkpoint(data):
    out = data / "model.ckpt"
    assert main(["train", "--train", str(data / "ds" / "train"), "--config", str(data / "small.json"),
                 "--out", str(out)]) == 0
    return out


def test_gen_synth_single_scene_is_deterministic(tmp_path):
    a, b = tmp_path / "a.ncdpc", tmp_path / "b.ncdpc"
    assert main(["gen-synth", "--seed", "7", "--out", str(a)]) == 0
    assert main(["gen-synth", "--seed", "7", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert a.with_suffix(".ncdaux").exists()
    assert (tmp_path / "a.ncdpc.manifest.json").exists()


def test_gen_synth_dataset_layout(data):
    ds = data / "ds"
    assert len(list((ds / "train").glob("*.ncdpc"))) == 4
    assert (ds / "val" / "task.split").exists()
    assert json.loads((ds / "train_config.json").read_text())["batch_size"] == 2
    assert (ds / "bank.ncdbank").exists()


def test_train_writes_checkpoint_and_manifest(checkpoint):
    m = json.loads((checkpoint.parent / "model.ckpt.manifest.json").read_text())
    assert m["command"] == "train" and m["seeds"] == {"seed": 0}
    assert m["config"]["hidden_dims"] == [16, 16] and m["config"]["n_heads"] == 2
    assert any(k.endswith(".ncdpc") for k in m["inputs"])
    assert "timestamp" not in json.dumps(m)


def test_train_twice_is_bitwise_identical(data, checkpoint):
    again = data / "again.ckpt"
    assert main(["train", "--train", str(data / "ds" / "train"), "--config", str(data / "small.json"),
                 "--out", str(again)]) == 0
    assert again.read_bytes() == checkpoint.read_bytes()


def test_flag_beats_config_file(data, tmp_path):
    out = tmp_path / "m.ckpt"
    assert main(["train", "--train", str(data / "ds" / "train"), "--config", str(data / "small.json"),
                 "--heads", "1", "--out", str(out)]) == 0
    m = json.loads((tmp_path / "m.ckpt.manifest.json").read_text())
    assert m["config"]["n_heads"] == 1 and m["config"]["feature_dim"] == 8


def test_eval_prints_report_and_plot_data(data, checkpoint, capsys):
    tsv = data / "iou.tsv"
    assert main(["eval", "--checkpoint", str(checkpoint), "--val", str(data / "ds" / "val"),
                 "--plot-data", str(tsv)]) == 0
    out = capsys.readouterr().out
    assert "mIoU_novel" in out and "mIoU_base" in out and "mapping" in out
    rows = read_plot_data(tsv)
    assert len(rows) == 7
    png = tsv.with_suffix(".png")
    assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (data / "iou.tsv.manifest.json").exists()


def test_pseudo_label_rows_sum_to_one(data, checkpoint):
    out = data / "q.tsv"
    clouds = sorted(str(p) for p in (data / "ds" / "train").glob("*.ncdpc"))[:2]
    assert main(["pseudo-label", "--checkpoint", str(checkpoint), "--clouds", *clouds, "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0].split("\t")[:2] == ["cloud", "point"]
    for ln in lines[1:]:
        q = [float(v) for v in ln.split("\t")[2:]]
        assert len(q) == 3 and abs(sum(q) - 1) < 1e-6
    assert main(["pseudo-label", "--checkpoint", str(checkpoint), "--clouds", *clouds,
                 "--head", "9", "--out", str(out)]) == 2


def test_zeroshot(data, capsys):
    assert main(["zeroshot", "--bank", str(data / "ds" / "bank.ncdbank"),
                 "--val", str(data / "ds" / "val"), "--out", str(data / "zs.tsv")]) == 0
    out = capsys.readouterr().out
    assert "mIoU_all" in out
    assert (data / "zs.tsv").read_text().startswith("cloud\tpoint\tclass\tscore")


def test_baseline_eums(data, capsys):
    out = data / "eums.ckpt"
    assert main(["baseline-eums", "--train", str(data / "ds" / "train"), "--val", str(data / "ds" / "val"),
                 "--config", str(data / "small.json"), "--pretrain-epochs", "1", "--finetune-epochs", "1",
                 "--out", str(out)]) == 0
    assert "mIoU_novel" in capsys.readouterr().out
    m = json.loads((data / "eums.ckpt.manifest.json").read_text())
    assert m["config"]["eums"]["pretrain_epochs"] == 1


def test_missing_data_is_runtime_error(tmp_path, capsys):
    missing = tmp_path / "nowhere"
    assert main(["train", "--train", str(missing), "--split", "poss-4_0", "--out", str(tmp_path / "x")]) == 1
    assert str(missing) in capsys.readouterr().err


def test_usage_errors(tmp_path, capsys):
    assert main(["train", "--bogus"]) == 2
    assert main(["gen-synth"]) == 2
    assert main(["gen-synth", "--out", str(tmp_path / "a"), "--scenario", "nope"]) == 2
    assert main(["gen-synth", "--out", str(tmp_path / "a"), "--threads", "0"]) == 2
    assert main([]) == 2


def test_split_mismatch_is_runtime_error(data, tmp_path):
    assert main(["train", "--train", str(data / "ds" / "train"), "--split", "poss-4_0",
                 "--out", str(tmp_path / "x")]) == 1


def test_help_lists_config_keys(capsys):
    assert main(["train", "--help"]) == 0
    text = capsys.readouterr().out
    for flag in ("--aug.rot-z", "--sk.eps-start", "--queue.capacity", "--loss.gamma", "--select.p"):
        assert flag in text


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "ncdseg", "--version"], capture_output=True, text=True)
    assert r.returncode == 0 and "ncdseg" in r.stdout

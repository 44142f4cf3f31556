import csv
import hashlib
import json

import numpy as np
import pytest

from protovit import tensor as T
from protovit.cli import main
from protovit.vit import PRESETS, ViTModel

MICRO_FAST = ["--preset", "micro", "--ways", "2", "--shots", "1", "--queries", "1"]


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode() + p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen-data", "--classes", "5", "--per-class", "20", "--size", "16", "--seed", "1", "--out", str(root)]) == 0
    return root


@pytest.fixture(scope="module")
def run_dir(data_root):
    out = data_root.parent / "run"
    code = main(["train", *MICRO_FAST, "--episodes", "3", "--eval-freq", "2", "--val-episodes", "2",
                 "--data", str(data_root), "--out", str(out)])
    assert code == 0
    return out


def test_gen_data_counts_and_manifest(tmp_path, capsys):
    out = tmp_path / "d"
    assert main(["gen-data", "--classes", "5", "--per-class", "40", "--size", "32", "--seed", "1", "--out", str(out)]) == 0
    assert capsys.readouterr().out.strip() == str(out / "train" / "manifest.txt")
    assert len(list(out.rglob("*.ppm"))) == 200
    assert len((out / "train" / "manifest.txt").read_text().splitlines()) == 200


def test_gen_data_is_deterministic(tmp_path):
    for name in "ab":
        main(["gen-data", "--classes", "3", "--per-class", "4", "--size", "8", "--seed", "2", "--out", str(tmp_path / name)])
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_gen_data_rejects_one_class(tmp_path, capsys):
    assert main(["gen-data", "--classes", "1", "--out", str(tmp_path)]) == 2
    assert "classes" in capsys.readouterr().err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_train_writes_run_directory(run_dir):
    assert {p.name for p in run_dir.iterdir()} == {"checkpoint.pvt", "history.csv", "run.json"}
    meta = json.loads((run_dir / "run.json").read_text())
    assert meta["config"]["preset"] == "micro" and meta["config"]["episodes"] == 3
    assert meta["distance_mode"] == "squared" and meta["optimizer_mode"] == "decoupled"
    assert meta["seed"] == 42 and len(meta["dataset_manifest_hash"]) == 40
    rows = list(csv.DictReader(open(run_dir / "history.csv")))
    assert [r["episode"] for r in rows] == ["1", "2", "3"]
    assert rows[1]["val_acc"] != "" and rows[0]["val_acc"] == ""


def test_train_defaults_to_1000_episodes(data_root, tmp_path):
    out = tmp_path / "run"
    assert main(["train", *MICRO_FAST, "--data", str(data_root), "--out", str(out), "--val-episodes", "1"]) == 0
    assert len(list(csv.DictReader(open(out / "history.csv")))) == 1000


def test_zero_episodes_checkpoint_is_initialization(data_root, tmp_path):
    assert main(["train", *MICRO_FAST, "--episodes", "0", "--seed", "5", "--data", str(data_root),
                 "--out", str(tmp_path)]) == 0
    loaded = ViTModel.load(tmp_path / "checkpoint.pvt").state_dict()
    init = ViTModel(PRESETS["micro"], seed=5).state_dict()
    assert all(np.array_equal(loaded[k], init[k]) for k in init)


def test_train_seed_from_environment(data_root, tmp_path, monkeypatch):
    monkeypatch.setenv("PROTOVIT_SEED", "7")
    assert main(["train", *MICRO_FAST, "--episodes", "0", "--data", str(data_root), "--out", str(tmp_path)]) == 0
    assert json.loads((tmp_path / "run.json").read_text())["seed"] == 7


def test_train_config_errors_exit_2(data_root, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nepisodes = lots\n")
    assert main(["train", "--config", str(bad), "--data", str(data_root), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", *MICRO_FAST, "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "r")]) == 2
    assert main(["train", *MICRO_FAST, "--out", str(tmp_path / "r")]) == 2


def test_train_numeric_abort_exits_3(data_root, tmp_path, capsys):
    code = main(["train", *MICRO_FAST, "--episodes", "5", "--lr", "1e30", "--data", str(data_root),
                 "--out", str(tmp_path)])
    assert code == 3
    assert "NaN or Inf" in capsys.readouterr().err


def _eval(run_dir, data_root, out, *extra):
    return main(["eval", "--checkpoint", str(run_dir / "checkpoint.pvt"), "--data", str(data_root),
                 "--split", "train", "--out", str(out), *extra])


def test_eval_default_episode_count(run_dir, data_root, tmp_path, capsys):
    assert _eval(run_dir, data_root, tmp_path, "--ways", "2", "--shots", "1", "--queries", "1") == 0
    report = json.loads((tmp_path / "report.json").read_text())
    assert len(report["per_episode_acc"]) == 100 and report["episodes_completed"] == 100
    text = (tmp_path / "report.txt").read_text()
    assert text.startswith("Average Accuracy: ") and "\n95% CI: ±" in text
    assert capsys.readouterr().out.startswith("Average Accuracy: ")


def test_eval_is_deterministic(run_dir, data_root, tmp_path):
    for name in "ab":
        assert _eval(run_dir, data_root, tmp_path / name, "--episodes", "4") == 0
    assert (tmp_path / "a" / "report.json").read_bytes() == (tmp_path / "b" / "report.json").read_bytes()


def test_eval_repeats_write_reports_and_aggregate(run_dir, data_root, tmp_path):
    assert _eval(run_dir, data_root, tmp_path, "--episodes", "3", "--repeats", "5") == 0
    names = {p.name for p in tmp_path.iterdir()}
    assert names == {f"report_{i}.json" for i in range(1, 6)} | {"aggregate.json", "report.txt"}
    agg = json.loads((tmp_path / "aggregate.json").read_text())
    assert agg["repeats"] == 5 and agg["pooled_episodes"] == 15
    seeds = [json.loads((tmp_path / f"report_{i}.json").read_text())["config"]["seed"] for i in range(1, 6)]
    assert seeds == [42, 43, 44, 45, 46]


def test_eval_from_run_json_reproduces_report(run_dir, data_root, tmp_path):
    assert _eval(run_dir, data_root, tmp_path / "flags", "--episodes", "4", "--ways", "2", "--shots", "1",
                 "--queries", "1") == 0
    assert _eval(run_dir, data_root, tmp_path / "json", "--episodes", "4", "--config", str(run_dir / "run.json")) == 0
    assert (tmp_path / "flags" / "report.json").read_bytes() == (tmp_path / "json" / "report.json").read_bytes()


def test_eval_missing_checkpoint_exits_2(data_root, tmp_path, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.pvt"), "--data", str(data_root)]) == 2
    assert "checkpoint not found" in capsys.readouterr().err


def test_eval_corrupt_checkpoint_exits_2(data_root, tmp_path):
    bad = tmp_path / "bad.pvt"
    bad.write_bytes(b"PVT1\x05")
    assert main(["eval", "--checkpoint", str(bad), "--data", str(data_root), "--split", "train"]) == 2


def test_eval_with_no_feasible_episode_exits_1(run_dir, data_root, tmp_path):
    assert _eval(run_dir, data_root, tmp_path, "--episodes", "2", "--ways", "6") == 1


def test_gradcheck_filter(capsys):
    assert main(["gradcheck", "--ops", "softmax,layernorm"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0].split() == ["op", "max", "rel", "err", "status"]
    assert [ln.split()[0] for ln in lines[1:]] == ["softmax", "layernorm"]


def test_gradcheck_unknown_op_exits_2(capsys):
    assert main(["gradcheck", "--ops", "nonsense"]) == 2


def test_gradcheck_catches_corrupted_backward_rule(monkeypatch, capsys):
    monkeypatch.setattr(T, "_gelu_grad", lambda x: 1.1 * (0.5 * (1.0 + np.tanh(x))))
    assert main(["gradcheck", "--ops", "gelu,softmax"]) == 1
    captured = capsys.readouterr()
    assert "gradcheck failed: gelu" in captured.err
    assert "softmax" not in captured.err


def test_export_embeddings(run_dir, data_root, tmp_path):
    out = tmp_path / "emb.csv"
    assert main(["export-embeddings", "--checkpoint", str(run_dir / "checkpoint.pvt"), "--data", str(data_root),
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out)))
    assert len(rows) == 101 and {len(r) for r in rows} == {66}


def test_export_bad_path_exits_1(run_dir, data_root, tmp_path):
    assert main(["export-embeddings", "--checkpoint", str(run_dir / "checkpoint.pvt"), "--data", str(data_root),
                 "--out", str(tmp_path / "no" / "dir" / "e.csv")]) == 1

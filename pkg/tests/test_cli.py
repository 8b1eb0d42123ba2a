import json

import numpy as np
import pytest

from cecrf.cli import build_parser, main
from cecrf.data import load_dataset
from cecrf.evaluation import predict
from cecrf.model import load_model
from cecrf.training import TrainConfig, initial_params, standardize_features


@pytest.fixture
def data(tmp_path, capsys):
    path = tmp_path / "d.jsonl"
    assert main(["generate", "--m", "10", "--s", "4", "--num-sequences", "40",
                 "--length-max", "8", "--delta-between", "4", "--out", str(path)]) == 0
    capsys.readouterr()
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    return code, capsys.readouterr()


def test_config_line_printed(capsys, data, tmp_path):
    code, out = run(capsys, "train", "--data", data, "--model-out", tmp_path / "m.bin",
                    "--epochs", "1", "--embed-dim", "3")
    assert code == 0
    cfg = json.loads(out.out.splitlines()[0].removeprefix("config "))
    assert cfg["lr"] == TrainConfig().lr and cfg["embed_dim"] == 3
    assert (tmp_path / "m.bin.history.tsv").exists()


def test_generate_from_config_file(capsys, tmp_path):
    cfg = tmp_path / "g.json"
    cfg.write_text(json.dumps({"m": 6, "group_size": 3, "s": 2, "num_sequences": 5}))
    code, _ = run(capsys, "generate", "--config", cfg, "--seed", "4", "--out", tmp_path / "g.jsonl")
    assert code == 0
    d = load_dataset(tmp_path / "g.jsonl")
    assert (d.m, d.s, len(d)) == (6, 2, 5)
    cfg.write_text(json.dumps({"bogus": 1}))
    assert run(capsys, "generate", "--config", cfg, "--out", tmp_path / "x")[0] == 1


def test_gradcheck(capsys):
    code, out = run(capsys, "gradcheck", "--objective", "memm_bn", "--seed", "1")
    assert code == 0 and "max_relative_error" in out.out


def test_lr_zero_matches_initialization(capsys, data, tmp_path):
    model = tmp_path / "m.bin"
    pred = tmp_path / "p.txt"
    assert run(capsys, "train", "--data", data, "--model-out", model, "--lr", "0",
               "--epochs", "1", "--embed-dim", "3", "--no-bn")[0] == 0
    assert run(capsys, "infer", "--model", model, "--data", data, "--out", pred)[0] == 0
    raw = load_dataset(data)
    cfg = TrainConfig(objective="memm", embed_dim=3, lr=0.0, epochs=1)
    init = initial_params(cfg, standardize_features(raw)[1])
    expected = [" ".join(map(str, labels)) for labels, _ in predict(init, raw)]
    assert pred.read_text().splitlines() == expected


def test_marginal_mode_has_confidence_column(capsys, data, tmp_path):
    model = tmp_path / "m.bin"
    run(capsys, "train", "--data", data, "--model-out", model, "--epochs", "1",
        "--embed-dim", "3")
    run(capsys, "infer", "--model", model, "--data", data, "--mode", "marginal",
        "--out", tmp_path / "p.txt")
    first = (tmp_path / "p.txt").read_text().splitlines()[0]
    labels, conf = first.split("\t")
    assert len(labels.split()) == len(conf.split())
    assert all(0.0 < float(c) <= 1.0 for c in conf.split())


def test_eval_perfect_fit(capsys, tmp_path):
    path = tmp_path / "clean.jsonl"
    run(capsys, "generate", "--m", "10", "--s", "8", "--noise-sigma", "0", "--delta-within", "3",
        "--num-sequences", "30", "--out", path)
    model = tmp_path / "u.bin"
    assert run(capsys, "train", "--data", path, "--model-out", model, "--baseline", "unary",
               "--epochs", "30")[0] == 0
    code, out = run(capsys, "eval", "--model", model, "--data", path, "--precision-target", "91")
    assert code == 0
    assert "recall: 100.0000" in out.out and "error_rate: 0.0000" in out.out


@pytest.mark.parametrize("baseline", ["stats", "mixture"])
def test_train_context_baselines(capsys, data, tmp_path, baseline):
    model = tmp_path / "b.bin"
    code, out = run(capsys, "train", "--data", data, "--model-out", model, "--baseline",
                    baseline, "--k", "2", "--epochs", "3", "--weight-grid", "0,1")
    assert code == 0 and "chosen weight" in out.out
    assert run(capsys, "eval", "--model", model, "--data", data)[0] == 0


def test_analyze(capsys, data, tmp_path):
    model = tmp_path / "m.bin"
    run(capsys, "train", "--data", data, "--model-out", model, "--epochs", "1",
        "--embed-dim", "3")
    code, out = run(capsys, "analyze", "--model", model, "--class", "2", "--top-k", "4")
    rows = [line.split("\t") for line in out.out.splitlines()[1:]]
    assert code == 0 and len(rows) == 4 and all(r[1] != "2" for r in rows)
    code, _ = run(capsys, "analyze", "--model", model, "--export", tmp_path / "e.txt")
    assert code == 0 and len((tmp_path / "e.txt").read_text().splitlines()) == 10
    assert run(capsys, "analyze", "--model", model)[0] == 1


def test_usage_and_module_errors(capsys, data, tmp_path):
    assert run(capsys, "bogus")[0] == 2
    assert run(capsys, "train", "--data", data)[0] == 2
    assert run(capsys, "train", "--data", data, "--model-out", "x", "--wat", "1")[0] == 2
    assert run(capsys, "infer", "--model", tmp_path / "none", "--data", data,
               "--out", tmp_path / "o")[0] == 1
    code, out = run(capsys, "train", "--data", data, "--model-out", tmp_path / "m",
                    "--embed-dim", "50")
    assert code == 1 and out.err.startswith("error:")


def test_help_lists_train_defaults():
    help_text = build_parser()._subparsers._group_actions[0].choices["train"].format_help()
    defaults = TrainConfig()
    for flag, value in (("--lr", defaults.lr), ("--l2", defaults.l2),
                        ("--batch-size", defaults.batch_size), ("--epochs", defaults.epochs),
                        ("--embed-dim", defaults.embed_dim), ("--seed", defaults.seed)):
        assert flag in help_text and f"(default: {value})" in help_text


def test_threads_give_identical_outputs(capsys, data, tmp_path):
    outputs = []
    for threads in (1, 3):
        model = tmp_path / f"m{threads}.bin"
        run(capsys, "train", "--data", data, "--model-out", model, "--objective", "global",
            "--epochs", "2", "--embed-dim", "3", "--threads", threads)
        run(capsys, "infer", "--model", model, "--data", data, "--mode", "marginal",
            "--out", tmp_path / f"p{threads}.txt", "--threads", threads)
        _, out = run(capsys, "eval", "--model", model, "--data", data, "--threads", threads)
        report = out.out.split("\n", 1)[1]
        outputs.append((model.read_bytes(), (tmp_path / f"p{threads}.txt").read_bytes(), report))
    assert outputs[0] == outputs[1]
    assert isinstance(load_model(tmp_path / "m1.bin").R, np.ndarray)

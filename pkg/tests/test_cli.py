import numpy as np
import pytest
import yaml

from basis_transformer.cli import main
from basis_transformer.smr import SmrConfig, bits_from_string, smr_decode

TINY = {
    "model": {"dim": 8, "n_blocks": 1, "n_heads": 2, "n_basis": 2, "ratio": 1, "n_ctx_layers": 1, "mlp_ratio": 2},
    "smr": {"h": 8, "l": 4},
    "text": {"vocab_buckets": 16, "embed_dim": 4},
    "train": {"learning_rate": 1e-3, "weight_decay": 0.0, "n_strides": 2, "stride_size": 3, "batch_size": 8},
    "datasets": [{"name": "sum", "generator": "sum_table", "n_rows": 60},
                 {"name": "small", "generator": "two_scale_small", "n_rows": 60}],
    "seeds": [0],
}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


def test_encode_examples(capsys):
    assert main(["encode", "--h", "3", "--l", "2", "0", "2.5"]) == 0
    assert capsys.readouterr().out.split() == ["000000", "001010"]
    assert main(["encode", "--h", "3", "--l", "2", "--decode", "001010"]) == 0
    assert capsys.readouterr().out.strip() == "2.5"


def test_encode_round_trip_via_file(tmp_path, capsys):
    values = tmp_path / "v.txt"
    values.write_text("1.5 -1000.25\n3e2")
    main(["encode", "--file", str(values)])
    lines = capsys.readouterr().out.split()
    decoded = [smr_decode(bits_from_string(s), SmrConfig(29, 14)) for s in lines]
    assert decoded == [1.5, -1000.25, 300.0]


def test_encode_errors(capsys):
    assert main(["encode", "abc"]) == 3
    assert main(["encode", "--h", "0", "1"]) == 2
    assert main(["encode", "--decode", "01x"]) == 3


def test_train_eval_predict(tmp_path, config, capsys):
    out = tmp_path / "out"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    ckpt = out / "seed_0" / "best.ckpt"
    for name in ("report.txt", "scores.json", "config.json", "seed_0/metrics.jsonl", "seed_0/test_scores.json"):
        assert (out / name).exists(), name
    assert len((out / "seed_0" / "metrics.jsonl").read_text().splitlines()) == 4
    capsys.readouterr()

    assert main(["eval", "--config", str(config), "--checkpoint", str(ckpt)]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--config", str(config), "--checkpoint", str(ckpt)]) == 0
    assert capsys.readouterr().out == first
    assert "Median" in first

    inp = tmp_path / "in.csv"
    inp.write_text("x1,x2,y\n1,2,5\n3.5,,11\n")
    pred = tmp_path / "pred.csv"
    assert main(["predict", "--checkpoint", str(ckpt), "--input", str(inp), "--target", "y", "--output", str(pred)]) == 0
    lines = pred.read_text().splitlines()
    assert lines[0] == "row,prediction" and len(lines) == 3
    assert all(np.isfinite(float(line.split(",")[1])) for line in lines[1:])


def test_deterministic_runs_are_byte_identical(tmp_path, config):
    logs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--config", str(config), "--out", str(out), "--deterministic", "--precision", "64"]) == 0
        logs.append((out / "seed_0" / "metrics.jsonl").read_bytes())
        logs.append((out / "seed_0" / "best.ckpt").read_bytes())
    assert logs[0] == logs[2] and logs[1] == logs[3]


def test_exit_codes(tmp_path, config):
    bad = tmp_path / "bad.yaml"
    bad.write_text("train: {gamma: 0.9}\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert main(["train", "--config", str(tmp_path / "missing.yaml")]) == 2
    assert main(["eval", "--config", str(config), "--checkpoint", str(tmp_path / "none.ckpt")]) == 3
    broken = tmp_path / "data.yaml"
    broken.write_text("datasets: [{name: x, path: nowhere.csv}]\n")
    assert main(["train", "--config", str(broken)]) == 3
    with pytest.raises(SystemExit) as err:
        main(["ablate", "nonsense"])
    assert err.value.code == 2


def test_numeric_failure_exit_code(tmp_path, config, monkeypatch):
    import basis_transformer.train as tr

    monkeypatch.setattr(tr, "batch_loss", lambda *a, **k: (tr.Tensor(np.array(np.nan)), None))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "o")]) == 4


def test_ablate_loss_quick(tmp_path, capsys):
    cfg = dict(TINY, model={**TINY["model"], "head": "smr"}, smr={"h": 20, "l": 4})
    path = tmp_path / "abl.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["ablate", "loss", "--config", str(path), "--out", str(tmp_path / "abl")]) == 0
    for name in ("summary.csv", "runs.csv", "curves.csv"):
        assert (tmp_path / "abl" / name).exists()
    out = capsys.readouterr().out
    assert "loss_mode=bce_smr" in out and "loss_mode=mse_scalar" in out

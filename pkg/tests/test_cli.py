import csv
import json
import re

import pytest

from treereg.cli import main
from treereg.training import SWEEP_COLUMNS, DataSpec, ExperimentConfig, ModelSpec
from treereg.surrogate import SurrogateConfig


def small_config(tmp_path):
    cfg = ExperimentConfig(data=DataSpec(task="signal-noise", n=20, T=10, seed=2), model=ModelSpec(state_dim=3),
                           epochs=2, batch_size=5, warm_start_epochs=1,
                           surrogate=SurrogateConfig(epochs=10, retrain_every=1, window_E=1, J=5))
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_dict()))
    return path


def test_gen_data(tmp_path, capsys):
    assert main(["gen-data", "--task", "parabola", "--n", "500", "--seed", "7", "--out", str(tmp_path / "d")]) == 0
    path = tmp_path / "d" / "parabola.csv"
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["seq_id", "t", "x_x1", "x_x2", "y_above", "split"] and len(rows) == 501
    assert (tmp_path / "d" / "resolved_config.json").exists()


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_runtime_failure_exits_1(tmp_path, capsys):
    assert main(["export-dot", "--tree", str(tmp_path / "missing.json"), "--out", str(tmp_path / "t.dot")]) == 1
    assert "error" in capsys.readouterr().err


def test_train_eval_extract_export(tmp_path, capsys):
    cfg = small_config(tmp_path)
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--kind", "tree", "--lam", "1", "--out", str(run)]) == 0
    assert json.loads((run / "resolved_config.json").read_text())["regularizer"]["kind"] == "tree"
    assert main(["eval", "--checkpoint", str(run / "model"), "--out", str(tmp_path / "ev")]) == 0
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert set(metrics) >= {"auc", "path_length", "path_length_sum", "num_params"}
    assert main(["extract-tree", "--checkpoint", str(run / "model"), "--out", str(tmp_path / "px")]) == 0
    tree_json = tmp_path / "px" / "tree.json"
    assert tree_json.exists() and (tmp_path / "px" / "resolved_config.json").exists()
    dot = tmp_path / "t.dot"
    assert main(["export-dot", "--tree", str(tree_json), "--out", str(dot)]) == 0
    text = dot.read_text()
    assert text.startswith("digraph Tree {") and text.rstrip().endswith("}")
    for line in text.splitlines()[2:-1]:
        assert re.fullmatch(r'\d+ \[label=".*"\];|\d+ -> \d+ \[label="(True|False)"\];', line)


def test_sweep(tmp_path, capsys):
    cfg = small_config(tmp_path)
    out = tmp_path / "sw"
    assert main(["sweep", "--config", str(cfg), "--kinds", "l1", "l2", "--lambdas", "0.1", "1",
                 "--out", str(out)]) == 0
    rows = list(csv.DictReader((out / "tradeoff.csv").open()))
    assert list(rows[0]) == SWEEP_COLUMNS and len(rows) == 4
    assert (out / "resolved_config.json").exists()

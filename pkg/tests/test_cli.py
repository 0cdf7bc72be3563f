import json

import pytest

from wsprune.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def err_line(err):
    return json.loads(err.strip().splitlines()[-1])


DATA = ["--classes", "3", "--samples-per-class", "12", "--frames", "8", "--noise", "0.3"]


def test_train_ws_prune_knee(tmp_path, capsys):
    ck = tmp_path / "m"
    code, out, _ = run(capsys, "train", "--arch", "vgg", "--depth", "7", "--base", "4", "--epochs", "1",
                       "--lambda", "1e-3", "--lr", "0.01", "--out", str(ck), *DATA)
    assert code == 0
    trained = json.loads(out)
    assert trained["lambda"] == 1e-3 and "ws" in trained

    code, out, _ = run(capsys, "ws", "--ckpt", str(ck) + ".json")
    assert code == 0 and json.loads(out)["ws"] == pytest.approx(trained["ws"])

    curve = tmp_path / "curve.csv"
    code, out, _ = run(capsys, "prune", "--ckpt", str(ck), "--step", "0.2", "--finetune-epochs", "0",
                       "--out", str(curve), "--save-pruned", str(tmp_path / "knee"), *DATA)
    assert code == 0 and curve.exists()
    assert (tmp_path / "knee.json").exists()

    code, out, _ = run(capsys, "knee", "--curve", str(curve))
    assert code == 0 and 0 <= json.loads(out)["pk"] <= 1


def test_mobilenet_train(tmp_path, capsys):
    code, out, _ = run(capsys, "train", "--arch", "mobilenet", "--width", "0.25", "--base", "4", "--epochs", "1",
                       "--out", str(tmp_path / "mb"), *DATA)
    assert code == 0


def test_sweep_and_analyze(tmp_path, capsys):
    config = {"arch": {"family": "vgg", "depth": 7, "num_classes": 3, "input_shape": [1, 40, 8],
                       "base_channels": 4},
              "lambda_grid": [0.0, 1e-2], "training": {"epochs": 1, "learning_rate": 0.01},
              "prune_step": 0.3, "finetune_epochs": 0, "truncate_on_drop": False,
              "dataset": {"num_classes": 3, "samples_per_class": 12, "frames": 8}}
    path = tmp_path / "sweep.json"
    path.write_text(json.dumps(config))
    code, out, _ = run(capsys, "sweep", "--config", str(path))
    assert code == 0
    result = json.loads(out)
    code, out, _ = run(capsys, "analyze", "--results-dir", result["out"])
    assert code == 0 and json.loads(out)["n"] == 2


@pytest.mark.parametrize("argv,code", [
    (["ws", "--ckpt", "/nonexistent/x.json"], "file_not_found"),
    (["knee", "--curve", "/nonexistent.csv"], "file_not_found"),
    (["analyze", "--results-dir", "/nonexistent"], "missing_results"),
    (["train", "--arch", "vgg", "--width", "0.5", "--out", "x"], "usage"),
])
def test_errors_are_machine_readable(capsys, argv, code):
    rc, _, err = run(capsys, *argv)
    assert rc == 1 and err_line(err)["error"] == code


def test_bad_config(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"lambda_grid": [0.1, 0.0]}))
    rc, _, err = run(capsys, "sweep", "--config", str(path))
    assert rc == 1 and err_line(err)["error"] == "config_error"


def test_truncated_checkpoint(tmp_path, capsys):
    run(capsys, "train", "--arch", "vgg", "--depth", "7", "--base", "4", "--epochs", "1",
        "--out", str(tmp_path / "m"), *DATA)
    blob = tmp_path / "m.bin"
    blob.write_bytes(blob.read_bytes()[:-3])
    rc, _, err = run(capsys, "ws", "--ckpt", str(tmp_path / "m"))
    assert rc == 1 and err_line(err)["error"] == "checkpoint_truncated"


def test_usage_error(capsys):
    rc, _, err = run(capsys, "prune")
    assert rc == 2 and err_line(err)["error"] == "usage"


def test_untrained_network_has_no_skewness(tmp_path, capsys):
    rc, _, err = run(capsys, "train", "--arch", "vgg", "--depth", "7", "--base", "4", "--epochs", "0",
                     "--out", str(tmp_path / "m"), *DATA)
    assert rc == 1 and err_line(err)["error"] == "degenerate_distribution"

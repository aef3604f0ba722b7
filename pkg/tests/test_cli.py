import csv
import json
import subprocess
import sys

import pytest

from dpfp.cli import EXIT_BUDGET, EXIT_CALIBRATION, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK, main

SMALL = ["--epochs", "1", "--batch-size", "16", "--micro-batches", "4", "--learning-rate", "1e-3",
         "--hidden-dim", "8", "--rep-dim", "4"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--num-records", "300", "--input-dim", "6", "--seed", "3", "--out-dir", str(out)]) == 0
    return out


def rows(path):
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def summary(path):
    return dict(line.rstrip("\n").split("=", 1) for line in open(path, encoding="utf-8"))


def test_calibrate_output(capsys):
    args = ["calibrate", "--epsilon", "1.73", "--delta", str(1 / (2 * 67349)), "--steps", "6314",
            "--micro-batches", "32", "--sample-rate", str(32 / (32 * 67349))]
    assert main(args) == EXIT_OK
    out = capsys.readouterr().out.strip()
    assert out.startswith("dpfp calibration: sigma=0.346138397574 ")
    assert "epsilon=1.73 " in out


def test_account_inverts_calibrate(capsys):
    main(["calibrate", "--epsilon", "2", "--delta", "1e-5", "--steps", "500", "--micro-batches", "8",
          "--sample-rate", "0.001"])
    sigma = capsys.readouterr().out.split("sigma=")[1].split()[0]
    assert main(["account", "--sigma", sigma, "--delta", "1e-5", "--steps", "500", "--micro-batches", "8",
                 "--sample-rate", "0.001"]) == EXIT_OK
    eps = float(capsys.readouterr().out.split("epsilon=")[1].split()[0])
    assert eps == pytest.approx(2.0, rel=1e-9)


def test_calibration_failure_exit_code(capsys):
    code = main(["calibrate", "--epsilon", "10000", "--delta", "1e-5", "--steps", "10", "--sample-rate", "0.1"])
    assert code == EXIT_CALIBRATION
    assert "calibration failed" in capsys.readouterr().err


def test_gen_data_deterministic(tmp_path, data):
    main(["gen-data", "--num-records", "300", "--input-dim", "6", "--seed", "3", "--out-dir", str(tmp_path)])
    for name in ("train.csv", "dev.csv"):
        assert (tmp_path / name).read_bytes() == (data / name).read_bytes()


def test_gen_data_invalid(tmp_path):
    assert main(["gen-data", "--num-records", "5", "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_train_outputs_and_echo_reproduces(tmp_path, data):
    first = tmp_path / "first"
    args = ["train", "--train", str(data / "train.csv"), "--dev", str(data / "dev.csv"), "--out-dir", str(first)]
    assert main(args + SMALL) == EXIT_OK
    assert rows(first / "metrics.csv")[0].keys() == {"step", "micro_index", "loss", "batch_size", "cum_mu"}
    assert list(rows(first / "metrics.csv")[0]) == ["step", "micro_index", "loss", "batch_size", "cum_mu"]
    s = summary(first / "summary.txt")
    assert s["status"] == "ok" and s["config.micro_batches"] == "4"
    echo = json.loads((first / "config.json").read_text())
    assert echo["learning_rate"] == 1e-3 and echo["delta"] is None

    second = tmp_path / "second"
    assert main(["train", "--config", str(first / "config.json"), "--out-dir", str(second)]) == EXIT_OK
    for name in ("metrics.csv", "epochs.csv"):
        assert (first / name).read_bytes() == (second / name).read_bytes()
    s2 = summary(second / "summary.txt")
    assert {k: v for k, v in s.items() if k != "config.out_dir"} == {
        k: v for k, v in s2.items() if k != "config.out_dir"
    }


def test_flags_override_file(tmp_path, data):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": str(data / "train.csv"), "epochs": 5, "micro_batches": 2}))
    out = tmp_path / "o"
    assert main(["train", "--config", str(cfg), "--epochs", "0.5", "--out-dir", str(out), "--hidden-dim", "4"]) == 0
    echo = json.loads((out / "config.json").read_text())
    assert echo["epochs"] == 0.5 and echo["micro_batches"] == 2


@pytest.mark.parametrize(
    "content", ['{"train": "x.csv", "colour": 1}', "[1, 2]", "{not json", '{"micro_batches": 0}']
)
def test_bad_config_exit_code(tmp_path, data, content, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(content)
    code = main(["train", "--config", str(cfg), "--train", str(data / "train.csv"), "--out-dir", str(tmp_path)])
    assert code == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_training_set(tmp_path):
    assert main(["train", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
    assert main(["train", "--train", str(tmp_path / "nope.csv"), "--out-dir", str(tmp_path)]) == EXIT_CONFIG


def test_budget_exhausted_exit_code(tmp_path, data, capsys):
    out = tmp_path / "run"
    code = main(["train", "--train", str(data / "train.csv"), "--out-dir", str(out), "--extra-steps", "1"] + SMALL)
    assert code == EXIT_BUDGET
    s = summary(out / "summary.txt")
    assert s["status"] == "budget_exhausted"
    assert s["steps_taken"] == s["steps"]
    assert "budget exhausted" in capsys.readouterr().err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tmp_path, data):
    args = ["train", "--train", str(data / "train.csv"), "--out-dir", str(tmp_path), "--mode", "nonprivate",
            "--optimizer", "sgd", "--learning-rate", "1.7e308"]
    assert main(args) == EXIT_NUMERIC


def test_compare(tmp_path, data, capsys):
    out = tmp_path / "cmp"
    args = ["compare", "--train", str(data / "train.csv"), "--dev", str(data / "dev.csv"), "--out-dir", str(out)]
    assert main(args + SMALL) == EXIT_OK
    table = rows(out / "compare.csv")
    assert [r["mode"] for r in table] == ["dpfp", "dpsgd", "nonprivate"]
    for r in table:
        assert 0 <= float(r["reported_accuracy"]) <= 1
        assert (out / r["mode"] / "summary.txt").exists()
    assert float(table[0]["epsilon"]) == pytest.approx(3.0, rel=1e-6)
    assert float(table[1]["epsilon"]) == pytest.approx(3.0, rel=1e-6)


def test_sweep_reports_failures_per_point(tmp_path, data):
    out = tmp_path / "sw"
    base = ["sweep", "--train", str(data / "train.csv"), "--dev", str(data / "dev.csv"), "--out-dir", str(out)]
    # B=1e6 exceeds M*D, so that point cannot be scheduled
    assert main(base + SMALL + ["--axis", "B", "--values", "8,1e6", "--seeds", "2"]) == EXIT_OK
    table = rows(out / "sweep.csv")
    assert [(r["value"], r["seed"]) for r in table] == [("8.0", "0"), ("8.0", "1"), ("1000000.0", "0"),
                                                        ("1000000.0", "1")]
    assert [r["status"] for r in table[:2]] == ["ok", "ok"]
    assert all(r["status"].startswith("error") for r in table[2:])
    assert table[0]["final_accuracy"] != table[1]["final_accuracy"] or table[0]["sigma"] == table[1]["sigma"]


def test_sweep_parallel_matches_serial(tmp_path, data):
    base = ["sweep", "--train", str(data / "train.csv"), "--axis", "M", "--values", "1,4", "--seeds", "2"] + SMALL
    main(base + ["--out-dir", str(tmp_path / "a")])
    main(base + ["--out-dir", str(tmp_path / "b"), "--workers", "2"])
    assert (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "dpfp", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "metrics.csv   step,micro_index,loss,batch_size,cum_mu" in proc.stdout

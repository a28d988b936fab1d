import csv
import hashlib
import json
import subprocess
import sys

import pytest

from vwap_forge.cli import main

SMALL = {
    "features": {"lookback": 12, "horizon": 4, "rolling_window": 24},
    "model": {"hidden": 4, "mlp_hidden": 4, "tkan": {"n_sublayers": 1, "kan_in": 3, "kan_out": 3}},
    "train": {"batch_size": 64, "max_epochs": 2, "seeds": [1]},
}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "small.json").write_text(json.dumps(SMALL))
    assert main(["synth", "--bars", "1200", "--seed", "5", "--asset", "SYN", "--out", str(d)]) == 0
    return d


@pytest.fixture(scope="module")
def trained(work):
    out = work / "train"
    rc = main(["train", "--config", str(work / "small.json"), "--data", str(work / "syn.csv"),
               "--model", "naive", "--model", "dynamic-lstm", "--loss", "absolute", "--out", str(out)])
    assert rc == 0
    return out


def md5(path):
    return hashlib.md5(path.read_bytes()).hexdigest()


def test_synth_is_deterministic(work, tmp_path):
    assert main(["synth", "--bars", "1200", "--seed", "5", "--asset", "SYN", "--out", str(tmp_path)]) == 0
    assert md5(tmp_path / "syn.csv") == md5(work / "syn.csv")


def test_split_writes_partitions(work, tmp_path, capsys):
    assert main(["split", "--data", str(work / "syn.csv"), "--out", str(tmp_path)]) == 0
    bounds = json.loads((tmp_path / "boundaries.json").read_text())
    assert bounds["train"]["stop_index"] == 768 and bounds["test"]["stop_index"] == 1200
    assert "train 768, validation 192, test 240" in capsys.readouterr().out


def test_train_artifacts(trained):
    d = trained / "runs" / "SYN" / "dynamic-lstm" / "absolute" / "seed_1"
    for name in ("checkpoint.json", "history.csv", "result.json", "slippage.csv", "allocation_stats.csv"):
        assert (d / name).exists()
    res = json.loads((d / "result.json").read_text())
    assert res["error"] is None and res["epochs"] == 2
    assert json.loads((trained / "config.json").read_text())["features"]["lookback"] == 12
    rows = list(csv.reader(open(trained / "report.csv")))
    assert rows[1][0] == "Naive" and rows[2][0] == "DynamicVWAP with LSTM"


def test_report_regenerates_identically(trained, capsys):
    before = (trained / "report.txt").read_text()
    csv_before = (trained / "report.csv").read_text()
    assert main(["report", "--out", str(trained)]) == 0
    assert capsys.readouterr().out == before
    assert (trained / "report.txt").read_text() == before
    assert (trained / "report.csv").read_text() == csv_before


def test_evaluate_is_reproducible(work, trained, tmp_path):
    ckpt = trained / "runs" / "SYN" / "dynamic-lstm" / "absolute" / "seed_1" / "checkpoint.json"
    for sub in ("a", "b"):
        assert main(["evaluate", "--config", str(work / "small.json"), "--model", str(ckpt),
                     "--data", str(work / "syn.csv"), "--out", str(tmp_path / sub)]) == 0
    a = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert a == json.loads((tmp_path / "b" / "metrics.json").read_text())
    stored = json.loads((ckpt.parent / "result.json").read_text())["metrics"]
    assert a["abs_vwap_loss"] == stored["abs_vwap_loss"]
    assert a["r2_volume"] == stored["r2_volume"]


def test_evaluate_naive(work, tmp_path):
    assert main(["evaluate", "--config", str(work / "small.json"), "--model", "naive",
                 "--data", str(work / "syn.csv"), "--out", str(tmp_path)]) == 0
    m = json.loads((tmp_path / "metrics.json").read_text())
    assert abs(m["r2_volume"]) <= 1e-10


def test_stream_equals_batch(work, trained, tmp_path, capsys):
    ckpt = trained / "runs" / "SYN" / "dynamic-lstm" / "absolute" / "seed_1" / "checkpoint.json"
    base = ["execute", "--config", str(work / "small.json"), "--model", str(ckpt)]
    assert main(base + ["--data", str(work / "syn.csv")]) == 0
    batch = capsys.readouterr().out
    assert main(base + ["--stream", str(work / "syn.csv")]) == 0
    stream = capsys.readouterr().out
    assert batch == stream
    lines = batch.splitlines()
    assert lines[0] == "horizon_start_ms,step_index,fraction"
    first = [float(x.split(",")[2]) for x in lines[1:5]]
    assert abs(sum(first) - 1) <= 1e-12
    # --out writes the same rows to a file
    assert main(base + ["--data", str(work / "syn.csv"), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "execution.csv").read_text() == batch


def test_stream_from_stdin(work, trained):
    ckpt = trained / "runs" / "SYN" / "dynamic-lstm" / "absolute" / "seed_1" / "checkpoint.json"
    args = [sys.executable, "-m", "vwap_forge", "execute", "--config", str(work / "small.json"),
            "--model", str(ckpt)]
    batch = subprocess.run(args + ["--data", str(work / "syn.csv")], capture_output=True, text=True, check=True)
    with open(work / "syn.csv") as fh:
        streamed = subprocess.run(args + ["--stream", "-"], stdin=fh, capture_output=True, text=True, check=True)
    assert streamed.stdout == batch.stdout


def test_usage_errors_exit_1(capsys):
    assert main(["train"]) == 1
    assert "usage:" in capsys.readouterr().err
    assert main(["bogus"]) == 1
    assert main(["train", "--data", "x.csv", "--jobs", "0"]) == 1


def test_runtime_errors_exit_2(tmp_path, capsys):
    assert main(["evaluate", "--model", "naive", "--data", str(tmp_path / "missing.csv"), "--out", str(tmp_path)]) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert set(err) == {"error", "message"}
    bad = tmp_path / "bad.json"
    bad.write_text('{"train": {"epochs": 1}}')
    assert main(["synth", "--bars", "1200", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "unknown key" in json.loads(capsys.readouterr().err)["message"]


def test_report_without_runs_exits_2(tmp_path, capsys):
    assert main(["report", "--out", str(tmp_path)]) == 2
    assert json.loads(capsys.readouterr().err)["error"] == "TrainingError"


def test_fetch_uses_endpoint_env(tmp_path, monkeypatch, capsys):
    # nothing listens on port 9; the error message must name the overridden host
    monkeypatch.setenv("VWAP_FORGE_ENDPOINT", "http://127.0.0.1:9/api/v3/klines")
    monkeypatch.setattr("vwap_forge.market_data.time.sleep", lambda s: None)
    rc = main(["fetch", "--symbol", "BTCUSDT", "--start", "2021-01-01", "--end", "2021-01-02", "--out", str(tmp_path)])
    assert rc == 2
    assert "127.0.0.1:9" in capsys.readouterr().err

import hashlib
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from nilmbench import cli
from nilmbench import dataio as dio
from nilmbench import pipeline as pl

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def sha(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest(path):
    return json.loads(Path(path).read_text())


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """Run every subcommand once on the tiny configs."""
    d = tmp_path_factory.mktemp("chain")
    inputs = [CONFIGS / n for n in ("sim_tiny.ini", "train_tiny.ini", "library.ini", "split.json")]
    before = {p: sha(p) for p in inputs}
    t0 = time.perf_counter()
    steps = [
        ["simulate", "--config", str(CONFIGS / "sim_tiny.ini"), "--out", str(d / "data.csv")],
        ["validate", "--in", str(d / "data.csv"), "--report-dir", str(d / "validate")],
        ["split", "--in", str(d / "data.csv"), "--spec", str(CONFIGS / "split.json"), "--out-dir", str(d / "split")],
        ["train", "--train", str(d / "split/train.csv"), "--val", str(d / "split/val.csv"),
         "--config", str(CONFIGS / "train_tiny.ini"), "--out", str(d / "model.bin")],
        ["eval", "--model", str(d / "model.bin"), "--test", str(d / "split/test.csv"),
         "--report-dir", str(d / "eval")],
        ["baseline", "--test", str(d / "split/test.csv"), "--lib", str(CONFIGS / "library.ini"),
         "--report-dir", str(d / "baseline")],
        ["compare", "--before", str(d / "baseline/report.json"), "--after", str(d / "eval/report.json"),
         "--out-dir", str(d / "drift")],
        ["serve", "--model", str(d / "model.bin"), "--source", str(d / "split/test.csv"),
         "--store", str(d / "live.jsonl"), "--port", "0"],
        ["eval", "--store", str(d / "live.jsonl"), "--test", str(d / "split/test.csv"),
         "--report-dir", str(d / "live_eval")],
        ["compare", "--before", str(d / "eval/report.json"), "--after", str(d / "live_eval/report.json"),
         "--out-dir", str(d / "live_drift")],
    ]
    codes = [cli.main(argv) for argv in steps]
    return {"dir": d, "codes": codes, "elapsed": time.perf_counter() - t0, "inputs": before}


def test_chain_succeeds_quickly(chain):
    assert chain["codes"] == [0] * 10
    assert chain["elapsed"] < 600


def test_simulated_data_validates_clean(chain):
    d = chain["dir"]
    rep = json.loads((d / "validate/clean_report.json").read_text())
    assert rep["clean"]["spurious_total"] == 0 and rep["read"]["rows_rejected"] == 0
    man = manifest(d / "validate/manifest.json")
    assert man["subcommand"] == "validate" and man["error"] is None


def test_split_outputs(chain):
    d = chain["dir"]
    parts = [dio.read_csv(d / f"split/{n}.csv") for n in ("train", "val", "test")]
    assert parts[0].timestamp[-1] < parts[1].timestamp[0] < parts[2].timestamp[0]
    assert sum(len(p) for p in parts) == len(dio.read_csv(d / "data.csv"))
    assert "Training" in (d / "split/split_report.txt").read_text()


def test_eval_artifacts(chain):
    d = chain["dir"] / "eval"
    for name in ("report.txt", "report.csv", "report.json", "breakdown_active_count.csv",
                 "breakdown_state.csv", "breakdown.json", "active_count_mae.svg", "state_mae.svg", "manifest.json"):
        assert (d / name).is_file(), name
    rep = json.loads((d / "report.json").read_text())
    assert rep["appliances"] == ["M1", "M2", "M3", "B1"]
    assert (d / "active_count_mae.svg").read_text().lstrip().startswith("<?xml")


def test_manifest_records_inputs_and_outputs(chain):
    d = chain["dir"]
    man = manifest(d / "model.bin.manifest.json")
    assert man["subcommand"] == "train" and man["seed"] is not None
    assert man["outputs"]["model"] == str(d / "model.bin")
    assert man["inputs"]["train"].endswith("train.csv")
    assert man["wall_time_s"] > 0 and man["tool_version"]


def test_drift_outputs(chain):
    d = chain["dir"] / "drift"
    assert (d / "drift.csv").read_text().startswith("metric")
    assert (d / "drift.svg").is_file()


def test_live_versus_offline_drift(chain):
    d = chain["dir"] / "live_drift"
    rows = (d / "drift.csv").read_text().splitlines()[1:]
    assert {r.split(",")[1] for r in rows} == {"M1", "M2", "M3", "B1", "Avg"}
    assert "MAE" in (d / "drift.txt").read_text()


def test_live_store_joins_test_split(chain):
    d = chain["dir"]
    recs = pl.read_records(d / "live.jsonl")
    test = dio.read_csv(d / "split/test.csv")
    assert len(recs) == len(test) - 63
    assert manifest(d / "live_eval/manifest.json")["outputs"]["join"]["coverage"] == 1.0


def test_inputs_not_mutated(chain):
    for path, digest in chain["inputs"].items():
        assert sha(path) == digest


def test_simulate_is_reproducible(tmp_path):
    for name in ("a.csv", "b.csv"):
        assert cli.main(["simulate", "--config", str(CONFIGS / "sim_tiny.ini"), "--out", str(tmp_path / name)]) == 0
    assert sha(tmp_path / "a.csv") == sha(tmp_path / "b.csv")
    cli.main(["simulate", "--config", str(CONFIGS / "sim_tiny.ini"), "--out", str(tmp_path / "c.csv"), "--seed", "2"])
    assert sha(tmp_path / "a.csv") != sha(tmp_path / "c.csv")


def test_training_is_reproducible(chain, tmp_path):
    d = chain["dir"]
    for name in ("a.bin", "b.bin"):
        code = cli.main(["train", "--train", str(d / "split/train.csv"), "--val", str(d / "split/val.csv"),
                         "--config", str(CONFIGS / "train_tiny.ini"), "--out", str(tmp_path / name), "--epochs", "1"])
        assert code == 0
    assert sha(tmp_path / "a.bin") == sha(tmp_path / "b.bin")


def test_missing_input_fails_with_manifest(tmp_path):
    out = tmp_path / "x.csv"
    code = cli.main(["simulate", "--config", str(tmp_path / "nope.ini"), "--out", str(out)])
    assert code == 1
    man = manifest(tmp_path / "x.csv.manifest.json")
    assert "nope.ini" in man["error"]


def test_eval_needs_model_or_store(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "nilmbench.cli", "eval", "--test", "t.csv", "--report-dir", "r"],
                          capture_output=True, text=True, cwd=tmp_path)
    assert proc.returncode == 2
    assert "--model" in proc.stderr


def test_eval_rejects_channel_mismatch(chain, tmp_path):
    d = chain["dir"]
    ds = dio.read_csv(d / "split/test.csv")
    two = dio.Dataset(ds.timestamp, ds.main, ds.lines[:, :2], ds.spurious)
    dio.write_csv(two, tmp_path / "two.csv")
    code = cli.main(["eval", "--model", str(d / "model.bin"), "--test", str(tmp_path / "two.csv"),
                     "--report-dir", str(tmp_path / "r")])
    assert code == 1
    assert "appliance" in manifest(tmp_path / "r/manifest.json")["error"]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "nilmbench" in capsys.readouterr().out


def test_prepare_fills_spurious_rows():
    ts = np.arange(6) * 5.0
    p = np.array([10.0, 10.0, -3.0, 10.0, 10.0, 10.0])
    main = np.stack([np.full(6, 220.0), p / 220, p], axis=1)
    ds = dio.Dataset(ts, main, np.zeros((6, 1, 3)), np.zeros(6, bool))
    out, rep = cli.prepare(ds, 5.0, None)
    assert rep.spurious_total == 1
    assert out.main_p.tolist() == [10.0] * 6

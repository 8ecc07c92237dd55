"""Acceptance criteria, one test each.

Every test records a one-line PASS/FAIL verdict in ``RESULTS``; conftest
prints them at the end of the run.
"""

import json
import math
import os
import signal
import subprocess
import sys
import time
from contextlib import contextmanager

import numpy as np
import pytest
from conftest import tiny_config
from gradcheck import group_errors, random_batch
from test_metrics import LOADS, REF_OFFLINE, REF_LIVE

from nilmbench import baseline as bl
from nilmbench import cli
from nilmbench import dataio as dio
from nilmbench import metrics as mt
from nilmbench import model as mdl
from nilmbench import pipeline as pl
from nilmbench import sim

RESULTS = {}


@contextmanager
def criterion(n, title, limit_s):
    """Time the block, enforce the runtime limit and record the verdict."""
    info = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        elapsed = time.perf_counter() - t0
        RESULTS[n] = f"[ACCEPT {n:2d}] FAIL  {title} ({elapsed:.1f} s): {type(exc).__name__}: {exc}".splitlines()[0]
        raise
    elapsed = time.perf_counter() - t0
    ok = elapsed < limit_s
    detail = info.get("detail", "")
    RESULTS[n] = f"[ACCEPT {n:2d}] {'PASS' if ok else 'FAIL'}  {title} ({elapsed:.1f} s < {limit_s} s) {detail}".rstrip()
    assert ok, f"runtime {elapsed:.1f} s exceeds {limit_s} s"


# 1 ---------------------------------------------------------------- metrics


def _ref_all(y, yh, m, thr):
    """Single-pass loop oracle: MAE, SAE (abs, rel), F1, NDE."""
    n = len(y)
    abs_sum = sq_err = sq_true = 0.0
    tp = fp = fn = 0
    for a, b in zip(y, yh):
        d = a - b
        abs_sum += abs(d)
        sq_err += d * d
        sq_true += a * a
        on_a, on_b = a > thr, b > thr
        tp += on_a and on_b
        fp += on_b and not on_a
        fn += on_a and not on_b
    s = n // m
    blocks = [(math.fsum(y[t * m:(t + 1) * m]), math.fsum(yh[t * m:(t + 1) * m])) for t in range(s)]
    err = [abs(a - b) for a, b in blocks]
    total = sum(a for a, _ in blocks)
    f1 = 0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn)
    return (abs_sum / n, sum(e / m for e in err) / s, sum(err) / total if total > 0 else math.nan,
            f1, math.sqrt(sq_err) / math.sqrt(sq_true))


def _close(a, b, tol=1e-12):
    return (math.isnan(a) and math.isnan(b)) or abs(a - b) <= tol * max(1.0, abs(b))


def test_c01_metric_oracles():
    with criterion(1, "metric oracle equivalence, 1000 x 4 x 1000", 10) as info:
        rng = np.random.default_rng(2024)
        worst = 0.0
        for _ in range(1000):
            y = np.where(rng.random((4, 1000)) < 0.5, rng.uniform(0, 60, (4, 1000)), 0.0)
            yh = np.clip(y + rng.normal(0, 6, (4, 1000)), 0, None)
            for a in range(4):
                yl, yhl = y[a].tolist(), yh[a].tolist()
                ref = _ref_all(yl, yhl, 100, 5.0)
                s = mt.sae(y[a], yh[a], 100)
                got = (mt.mae(y[a], yh[a]), s.absolute, s.relative, mt.f1(y[a], yh[a], 5.0)[0], mt.nde(y[a], yh[a]))
                for g, r in zip(got, ref):
                    assert _close(g, r), (g, r)
                    worst = max(worst, abs(g - r) / max(1.0, abs(r)))
            # identities
            assert mt.mae(y[0], y[0]) == 0.0 and mt.sae(y[0], y[0], 100).absolute == 0.0
            assert mt.nde(y[0], y[0]) == 0.0
            assert mt.nde(y[0], np.zeros(1000)) == 1.0
        info["detail"] = f"max scaled diff {worst:.1e}"


# 2 ---------------------------------------------------------- report fixture


def test_c02_report_fixture():
    with criterion(2, "reference averages and drift directions", 1) as info:
        before = mt.MetricReport.from_table(LOADS, **REF_OFFLINE)
        avg = before.averages
        assert [mt.fmt(avg[k]) for k in ("mae", "sae_pct", "f1", "nde")] == ["9.38", "8.65", "0.73", "0.75"]
        assert "9.38" in before.to_text()
        drift = mt.compare_reports(before, mt.MetricReport.from_table(LOADS, **REF_LIVE))
        assert drift.delta("mae") > 0 and drift.delta("sae_pct") > 0
        assert drift.delta("f1") > 0 and drift.delta("nde") < 0
        info["detail"] = "MAE 9.38 SAE 8.65 F1 0.73 NDE 0.75"


# 3 ---------------------------------------------------------- gradient check


def test_c03_gradient_check():
    with criterion(3, "analytic vs finite-difference gradients", 60) as info:
        c = tiny_config(n_layers=2)
        rng = np.random.default_rng(7)
        params = mdl.init_model(c, [20.0, 220.0, 0.1], [15.0, 0.5, 0.08], [50.0, 7.5])
        errors = group_errors(params, random_batch(c, rng))
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-3, (worst, errors[worst])
        info["detail"] = f"{len(errors)} groups, max rel err {errors[worst]:.1e} ({worst})"


# 4 ------------------------------------------------------------ learnability


def test_c04_learnability():
    with criterion(4, "learn 50 W / 7.5 W in 200 epochs", 300) as info:
        chans = (sim.LoadModel.motor(50.0), sim.LoadModel.resistive(7.5))
        conf = sim.SimConfig(seed=4, horizon=10000, sample_interval_jitter_sigma=0, voltage_noise_sigma=0,
                             current_noise_sigma=0, channels=chans, channel_names=("M1", "B1"))
        ds = sim.simulate(conf, sim.generate_schedule(4, 2, conf.horizon, 300))
        assert len(ds) == 2000
        c = mdl.TrainConfig(seq_len=64, n_appliances=2, hidden_size=16, n_heads=2, epochs=200,
                            learning_rate=0.05, batch_size=4, dropout=0.0,
                            augmentation=mdl.AugmentationConfig(enabled=False))
        params, _ = mdl.train(ds, ds, c)
        pred, _ = mdl.predict_tiles(params, ds.features())
        y = ds.line_p.T
        maes = [mt.mae(y[a], pred[a]) for a in range(2)]
        f1s = [mt.f1(y[a], pred[a])[0] for a in range(2)]
        info["detail"] = f"MAE {maes[0]:.2f}/{maes[1]:.2f} W, F1 {f1s[0]:.3f}/{f1s[1]:.3f}"
        assert max(maes) < 2.0 and min(f1s) > 0.95


# 5 -------------------------------------------------- identical-load trend


def test_c05_identical_load_trend():
    with criterion(5, "identical-motor concurrency and OFF/ON trend", 1800) as info:
        conf = sim.SimConfig(seed=11, horizon=24000 * 5.0)
        ds = dio.align_to_grid(sim.simulate(conf, sim.generate_schedule(11, 4, conf.horizon, 600)), 5.0)
        assert len(ds) >= 20000
        parts = dio.split_by_time(ds, dio.boundaries_for_fractions(ds.timestamp, (0.7, 0.1, 0.2)))
        c = mdl.TrainConfig(seq_len=64, n_appliances=4, hidden_size=16, n_heads=2, epochs=40,
                            learning_rate=0.05, batch_size=4, dropout=0.0,
                            augmentation=mdl.AugmentationConfig(enabled=False))
        params, _ = mdl.train(parts.train, parts.val, c)
        pred, _ = mdl.predict_tiles(params, parts.test.features())
        y = parts.test.line_p.T
        by_k = mt.breakdown_by_active_count(y, pred, 5.0, 720, list(ds.meta.channel_names))
        by_state = mt.breakdown_by_state(y, pred, 5.0, 720, list(ds.meta.channel_names))
        multi = [k for k in by_k if k >= 2]
        lines = []
        for a, name in enumerate(("M1", "M2", "M3")):
            k1 = by_k[1].report.get("mae", name)
            # pooled MAE over all samples with two or more loads ON
            n = np.array([by_k[k].n_samples for k in multi])
            kk = float(np.dot(n, [by_k[k].report.get("mae", name) for k in multi]) / n.sum())
            on, off = by_state[name]["on"].mae, by_state[name]["off"].mae
            lines.append(f"{name} k1 {k1:.1f} k>=2 {kk:.1f} on {on:.1f} off {off:.1f}")
            assert kk > k1, lines[-1]
            assert off < on, lines[-1]
        info["detail"] = "; ".join(lines)


# 6 ---------------------------------------------------------- conservation


def test_c06_simulator_conservation():
    with criterion(6, "simulator conservation over 100k samples", 30) as info:
        horizon = 520_000.0
        sched = sim.generate_schedule(6, 4, horizon, 600)
        quiet = sim.SimConfig(seed=6, horizon=horizon, voltage_noise_sigma=0, current_noise_sigma=0,
                              channels=sim.testbed_channels(0.0, 0.0))
        ds = sim.simulate(quiet, sched)
        assert len(ds) >= 100_000
        np.testing.assert_array_equal(ds.main_p, ds.line_p.sum(axis=1))
        noisy = sim.SimConfig(seed=6, horizon=horizon, spurious_rate=0.01)
        res = sim.simulate_detailed(noisy, sched)
        d = res.dataset
        ok = ~d.spurious
        resid = (d.main_p - d.line_p.sum(axis=1))[ok]
        frac = float(np.mean(np.abs(resid) <= 3 * sim.residual_sigma(res, noisy)[ok]))
        assert frac >= 0.99
        info["detail"] = f"{len(ds)} samples, {100 * frac:.2f}% within 3 sigma"


# 7 ------------------------------------------------------ baseline exactness


def test_c07_baseline_exactness():
    with criterion(7, "combinatorial baseline exact at steady state", 30) as info:
        chans = (sim.LoadModel.resistive(10.0), sim.LoadModel.motor(25.0), sim.LoadModel.resistive(60.0))
        conf = sim.SimConfig(seed=8, horizon=100_000, voltage_noise_sigma=0, current_noise_sigma=0, channels=chans)
        res = sim.simulate_detailed(conf, sim.generate_schedule(8, 3, conf.horizon, 300))
        states = bl.match_states(res.dataset.main_p, bl.SignatureLibrary((10.0, 25.0, 60.0)))
        steady = sim.steady_state_mask(res, conf)
        np.testing.assert_array_equal(states[steady], res.on[steady])

        conf2 = sim.SimConfig(seed=9, horizon=100_000, voltage_noise_sigma=0, current_noise_sigma=0,
                              channels=sim.testbed_channels(0.0, 0.0))
        res2 = sim.simulate_detailed(conf2, sim.generate_schedule(9, 4, conf2.horizon, 300))
        states2 = bl.match_states(res2.dataset.main_p, bl.SignatureLibrary((50.0, 50.0, 50.0, 7.5)))
        steady2 = sim.steady_state_mask(res2, conf2)
        np.testing.assert_array_equal(states2[steady2, :3].sum(axis=1), res2.on[steady2, :3].sum(axis=1))
        np.testing.assert_array_equal(states2[steady2, 3], res2.on[steady2, 3])
        info["detail"] = f"steady coverage {steady.mean():.1%} / {steady2.mean():.1%}"


# 8 --------------------------------------------------- offline/online match


def test_c08_replay_equivalence(tmp_path):
    with criterion(8, "serve replay equals batch inference at full scale", 600) as info:
        c = mdl.TrainConfig()  # full-scale defaults
        conf = sim.SimConfig(seed=12, horizon=(c.seq_len + 100) * 5.0)
        ds = sim.simulate(conf, sim.generate_schedule(12, 4, conf.horizon, 120))
        mean, std, scale = mdl.fit_normalization(ds.features(), ds.line_p.T, ds.meta.rated_powers)
        params = mdl.init_model(c, mean, std, scale)
        mdl.save_model(params, tmp_path / "m.bin")
        dio.write_csv(ds, tmp_path / "test.csv")
        store = tmp_path / "live.jsonl"
        code = cli.main(["serve", "--model", str(tmp_path / "m.bin"), "--source", str(tmp_path / "test.csv"),
                         "--store", str(store), "--port", "0"])
        assert code == 0
        summary = json.loads((tmp_path / "live.jsonl.manifest.json").read_text())["outputs"]["summary"]

        truth, _ = cli.prepare(dio.read_csv(tmp_path / "test.csv"), c.grid_interval)
        expected, _ = mdl.predict_last_step(params, truth.features())
        recs = pl.read_records(store)
        n = len(truth)
        assert len(recs) == n - (c.seq_len - 1)
        got = np.array([r.power_w for r in recs]).T
        assert got.tobytes() == expected.tobytes()
        assert summary["latency_p99_ms"] < 500
        info["detail"] = f"{len(recs)} records, p50 {summary['latency_p50_ms']:.0f} ms, p99 {summary['latency_p99_ms']:.0f} ms"


# 9 ----------------------------------------------------------- split fidelity


def test_c09_split_fidelity():
    with criterion(9, "180,631-sample split 81.0/7.6/11.4", 30) as info:
        n = 180_631
        rng = np.random.default_rng(9)
        ts = 1_700_000_000.0 + np.cumsum(np.clip(rng.normal(5.0, 0.5, n), 0.5, None))
        main = np.zeros((n, 3))
        ds = dio.Dataset(ts, main, np.zeros((n, 1, 3)), np.zeros(n, bool))
        spec = dio.boundaries_for_fractions(ds.timestamp, (146_300, 13_768, 20_563))
        report = dio.split_by_time(ds, spec).report
        pct = report.percentages()
        for name, want in (("train", 81.0), ("val", 7.6), ("test", 11.4)):
            assert abs(pct[name] - want) <= 0.1, (name, pct[name])
        info["detail"] = " / ".join(f"{pct[k]:.2f}%" for k in ("train", "val", "test"))


# 10 ------------------------------------------------------ persistence


WRITER = """
import sys
from nilmbench import pipeline as pl
store = pl.PredictionStore(pl.StoreConfig(sys.argv[1], fsync=sys.argv[2]), 4)
t = max(store.last_timestamp, 0.0)
while True:
    t += 5.0
    store.append(pl.PredictionRecord(t, (50.0, 0.0, 49.9, 7.5), (True, False, True, True), "d" * 64, 1.0))
    if store.count == 1 or store.count % 200 == 0:
        print(store.count, flush=True)
"""


def test_c10_persistence(tmp_path):
    with criterion(10, "model, CSV and store round trips", 120) as info:
        params = mdl.init_model(mdl.TrainConfig(), [20.0, 220.0, 0.1], [15.0, 0.5, 0.08], [50.0, 50.0, 50.0, 7.5])
        mdl.save_model(params, tmp_path / "m.bin")
        back = mdl.load_model(tmp_path / "m.bin")
        assert all(back.weights[k].tobytes() == params.weights[k].tobytes() for k in params.weights)
        assert back.digest() == params.digest()

        ds = sim.simulate(sim.SimConfig(seed=10, horizon=20000, spurious_rate=0.01),
                          sim.generate_schedule(10, 4, 20000, 300))
        dio.write_csv(ds, tmp_path / "d.csv")
        rt = dio.read_csv(tmp_path / "d.csv")
        for a, b in ((rt.main, ds.main), (rt.lines, ds.lines), (rt.timestamp, ds.timestamp)):
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=0)

        path = tmp_path / "store.jsonl"
        rng = np.random.default_rng(10)
        env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
        torn = 0
        for trial in range(10):
            proc = subprocess.Popen([sys.executable, "-c", WRITER, str(path), ("per_record", "interval")[trial % 2]],
                                    stdout=subprocess.PIPE, text=True, env=env)
            proc.stdout.readline()
            time.sleep(float(rng.uniform(0.02, 0.3)))
            os.kill(proc.pid, signal.SIGKILL)
            proc.wait()
            proc.stdout.close()
            raw = path.read_bytes()
            if raw and not raw.endswith(b"\n"):
                torn += 1
            for line in raw.decode().splitlines():
                try:
                    pl.PredictionRecord.from_json(json.loads(line))
                except ValueError:
                    torn += 1
        recs = pl.read_records(path)
        assert torn == 0
        ts = np.array([r.timestamp for r in recs])
        assert np.all(np.diff(ts) > 0)
        info["detail"] = f"10 kills, {len(recs)} records, 0 torn"


@pytest.fixture(scope="module", autouse=True)
def _print_results():
    yield
    for n in sorted(RESULTS):
        print(RESULTS[n])

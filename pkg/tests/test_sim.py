import itertools

import numpy as np
import pytest

from nilmbench import config as cfg
from nilmbench import sim


def test_series_bulbs_quarter_rating_each():
    assert sim.series_bulb_power(15.0) == pytest.approx(7.5)
    assert sim.series_bulb_power(15.0, n_bulbs=1) == pytest.approx(15.0)


def test_inrush_decays_to_rated():
    m = sim.LoadModel.motor(50.0, 3.0, 2.0)
    assert sim.instantaneous_power(m, 0.0) == pytest.approx(150.0)
    p = sim.instantaneous_power(m, np.array([0.5, 1.0, 5.0, 60.0]))
    assert np.all(np.diff(p) < 0)
    assert p[-1] == pytest.approx(50.0)
    assert sim.instantaneous_power(sim.LoadModel.resistive(7.5), 0.0) == 7.5


@pytest.mark.parametrize("kw", [
    dict(kind="resistive", rated_power=0.0),
    dict(kind="resistive", rated_power=5.0, inrush_multiplier=2.0),
    dict(kind="induction_motor", rated_power=5.0, inrush_multiplier=0.5),
    dict(kind="induction_motor", rated_power=5.0, power_factor=1.5),
    dict(kind="resistive", rated_power=5.0, steady_noise_sigma=-1.0),
])
def test_load_model_validation(kw):
    with pytest.raises(ValueError):
        sim.LoadModel(**kw)


def test_schedule_rejects_overlap_and_out_of_range():
    with pytest.raises(ValueError):
        sim.Schedule((((0, 10), (5, 20)),), 100)
    with pytest.raises(ValueError):
        sim.Schedule((((90, 110),),), 100)


def test_schedule_state():
    s = sim.schedule_from_intervals([[(10, 20)], []], 100)
    on, since = s.state([5, 10, 15, 20])
    assert on[:, 0].tolist() == [False, True, True, False]
    assert since[2, 0] == 5.0
    assert not on[:, 1].any()


def test_generated_schedule_visits_every_combination():
    s = sim.generate_schedule(5, 4, 20000, 300)
    combos = s.combinations(1.0)
    assert combos == set(itertools.product([False, True], repeat=4))


def test_generated_schedule_needs_enough_horizon():
    with pytest.raises(ValueError, match="too short"):
        sim.generate_schedule(0, 4, 1000, 300)


def test_simulation_is_deterministic():
    conf = sim.SimConfig(seed=9, horizon=3000)
    sched = sim.generate_schedule(9, 4, 3000, 100)
    a, b = sim.simulate(conf, sched), sim.simulate(conf, sched)
    np.testing.assert_array_equal(a.main, b.main)
    np.testing.assert_array_equal(a.timestamp, b.timestamp)
    c = sim.simulate(sim.SimConfig(seed=10, horizon=3000), sched)
    assert not np.array_equal(a.main, c.main)


def test_zero_noise_conservation_is_exact():
    conf = sim.SimConfig(seed=2, horizon=20000, voltage_noise_sigma=0, current_noise_sigma=0,
                         channels=sim.testbed_channels(0.0, 0.0))
    ds = sim.simulate(conf, sim.generate_schedule(2, 4, 20000, 300))
    np.testing.assert_array_equal(ds.main_p, ds.line_p.sum(axis=1))


def test_noisy_residual_within_three_sigma():
    conf = sim.SimConfig(seed=4, horizon=50000)
    res = sim.simulate_detailed(conf, sim.generate_schedule(4, 4, 50000, 600))
    ds = res.dataset
    resid = ds.main_p - ds.line_p.sum(axis=1)
    sigma = sim.residual_sigma(res, conf)
    assert np.mean(np.abs(resid) <= 3 * sigma) >= 0.99


def test_sample_gaps_jitter():
    conf = sim.SimConfig(seed=1, horizon=50000, sample_interval_jitter_sigma=0.5)
    ds = sim.simulate(conf, sim.generate_schedule(1, 4, 50000, 600))
    gaps = np.diff(ds.timestamp)
    assert gaps.mean() == pytest.approx(5.0, abs=0.02)
    assert gaps.std() == pytest.approx(0.5, abs=0.05)
    assert np.all(gaps > 0)


def test_spurious_rows_flagged():
    conf = sim.SimConfig(seed=1, horizon=20000, spurious_rate=0.05)
    res = sim.simulate_detailed(conf, sim.generate_schedule(1, 4, 20000, 600))
    ds = res.dataset
    assert 0.03 < ds.spurious.mean() < 0.07
    cap = 2 * conf.max_plausible_current()
    assert np.all(ds.main_i[ds.spurious] <= cap)
    np.testing.assert_array_equal(ds.spurious, res.spurious)


def test_metadata_from_config():
    conf = sim.SimConfig(seed=5, horizon=2000)
    ds = sim.simulate(conf, sim.generate_schedule(5, 4, 2000, 100))
    assert ds.meta.channel_names == ("M1", "M2", "M3", "M4")
    assert ds.meta.rated_powers == (50.0, 50.0, 50.0, 7.5)
    assert ds.meta.config_digest == conf.digest()


def test_sim_config_validation():
    with pytest.raises(ValueError):
        sim.SimConfig(sample_interval_jitter_sigma=3.0)
    with pytest.raises(ValueError):
        sim.SimConfig(spurious_rate=1.0)
    with pytest.raises(ValueError):
        sim.SimConfig(channel_names=("a",))


def test_load_config_explicit_schedule(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text(
        "[sim]\nseed = 3\nhorizon = 100\nsample_interval_jitter_sigma = 0\n"
        "[channel A]\nkind = resistive\nrated_power = 10\n"
        "[channel B]\nrated_power = 40  # motor by default\n"
        "[schedule]\nA = 0-50\nB = 20-30, 60-90\n"
    )
    conf, sched = sim.load_sim_config(p)
    assert conf.channel_names == ("A", "B")
    assert conf.channels[1].kind is sim.LoadKind.INDUCTION_MOTOR
    assert sched.channels == (((0.0, 50.0),), ((20.0, 30.0), (60.0, 90.0)))


def test_load_config_errors(tmp_path):
    p = tmp_path / "bad.ini"
    p.write_text("[sim]\nhorizon = 100\nsample_interval_mean = -1\n")
    with pytest.raises(cfg.ConfigError):
        sim.load_sim_config(p)
    p.write_text("[sim]\nhorizon = abc\n")
    with pytest.raises(cfg.ConfigError):
        sim.load_sim_config(p)


def test_settle_time():
    m = sim.LoadModel.motor(50.0, 3.0, 2.0)
    t = m.settle_time(0.01)
    assert sim.instantaneous_power(m, t) == pytest.approx(50.5)
    assert sim.LoadModel.resistive(7.5).settle_time() == 0.0


def test_schedule_oracles():
    assert sim.generate_schedule(1, 4, 54000, 600).combinations(1.0) == set(itertools.product([False, True], repeat=4))
    assert sim.generate_schedule(3, 1, 1200, 300).combinations(1.0) == {(False,), (True,)}
    assert sim.generate_schedule(7, 2, 5000, 300) == sim.generate_schedule(7, 2, 5000, 300)


def test_load_power_oracles():
    m = sim.LoadModel.motor(50.0)
    assert abs(sim.instantaneous_power(m, 600.0) - 50.0) <= 1e-6
    b = sim.LoadModel.resistive(sim.series_bulb_power(15.0))
    # two 15 W bulbs in series: R = V^2 / 15 each, P = V^2 / (2R)
    assert sim.instantaneous_power(b, 123.0) == pytest.approx(220.0 ** 2 / (2 * 220.0 ** 2 / 15.0))


def test_single_motor_zero_noise():
    conf = sim.SimConfig(seed=0, horizon=300, voltage_noise_sigma=0, current_noise_sigma=0,
                         channels=(sim.LoadModel.motor(50.0),))
    ds = sim.simulate(conf, sim.schedule_from_intervals([[(0, 300)]], 300))
    t = ds.timestamp - ds.timestamp[0]
    settled = t >= conf.channels[0].settle_time()
    assert np.all(np.abs(ds.main_p[settled] - 50.0) <= 0.5)
    # the inrush tail is below float resolution after ~25 s
    late = t > 30
    assert np.all(ds.main_p[late] == 50.0) and np.all(ds.line_p[late, 0] == 50.0)


def test_testbed_config_row_count():
    from pathlib import Path
    conf, sched = sim.load_sim_config(Path(__file__).resolve().parents[1] / "configs" / "sim_testbed.ini")
    ds = sim.simulate(conf, sched)
    assert abs(len(ds) - conf.horizon / 5.0) / (conf.horizon / 5.0) < 0.01

import sys

import numpy as np
import pytest

from nilmbench import dataio as dio
from nilmbench import model as mdl
from nilmbench import sim


def tiny_config(**kw):
    base = dict(hidden_size=8, n_heads=2, seq_len=16, n_appliances=2, n_layers=1, dropout=0.0,
                augmentation=mdl.AugmentationConfig(enabled=False))
    base.update(kw)
    return mdl.TrainConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def clean_two_load():
    """Noise-free, grid-exact 50 W motor + 7.5 W bulb, about 1000 samples."""
    chans = (sim.LoadModel.motor(50.0), sim.LoadModel.resistive(7.5))
    conf = sim.SimConfig(seed=3, horizon=5000, sample_interval_jitter_sigma=0, voltage_noise_sigma=0,
                         current_noise_sigma=0, channels=chans, channel_names=("M1", "B1"))
    return sim.simulate(conf, sim.generate_schedule(3, 2, conf.horizon, 200))


@pytest.fixture(scope="session")
def tiny_model(clean_two_load):
    feats = clean_two_load.features()
    mean, std, scale = mdl.fit_normalization(feats, clean_two_load.line_p.T, (50.0, 7.5))
    return mdl.init_model(tiny_config(), mean, std, scale)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])

"""Synthetic testbed: identical induction motors plus a series-bulb line.

Generates per-line and main-line voltage/current/power readings at
jittered ~5 s intervals, with sensor noise and occasional spurious
main-line current readings.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field
from enum import Enum

import numpy as np

from . import config as cfg
from .dataio import Dataset, DatasetMeta


class LoadKind(str, Enum):
    INDUCTION_MOTOR = "induction_motor"
    RESISTIVE = "resistive"


@dataclass(frozen=True)
class LoadModel:
    kind: LoadKind
    rated_power: float
    inrush_multiplier: float = 1.0
    inrush_duration: float = 0.0
    steady_noise_sigma: float = 0.0
    power_factor: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "kind", LoadKind(self.kind))
        if self.rated_power <= 0:
            raise ValueError("rated_power must be > 0")
        if self.steady_noise_sigma < 0:
            raise ValueError("steady_noise_sigma must be >= 0")
        if not 0 < self.power_factor <= 1:
            raise ValueError("power_factor must lie in (0, 1]")
        if self.kind is LoadKind.RESISTIVE:
            if self.inrush_multiplier != 1 or self.inrush_duration != 0:
                raise ValueError("resistive loads have no inrush")
        elif self.inrush_multiplier < 1 or self.inrush_duration < 0:
            raise ValueError("inrush_multiplier must be >= 1 and inrush_duration >= 0")

    def settle_time(self, tolerance=0.01) -> float:
        """Seconds after switch-on until the draw is within ``tolerance`` of rated."""
        excess = self.inrush_multiplier - 1.0
        if self.inrush_duration == 0 or excess <= tolerance:
            return 0.0
        return self.inrush_duration / 3.0 * math.log(excess / tolerance)

    @classmethod
    def motor(cls, rated_power=50.0, inrush_multiplier=3.0, inrush_duration=2.0,
              steady_noise_sigma=0.0, power_factor=0.8):
        return cls(LoadKind.INDUCTION_MOTOR, rated_power, inrush_multiplier, inrush_duration,
                   steady_noise_sigma, power_factor)

    @classmethod
    def resistive(cls, rated_power=7.5, steady_noise_sigma=0.0):
        return cls(LoadKind.RESISTIVE, rated_power, 1.0, 0.0, steady_noise_sigma, 1.0)


def series_bulb_power(bulb_rating, n_bulbs=2, voltage=220.0, rated_voltage=220.0):
    """Power of ``n_bulbs`` identical resistive bulbs wired in series."""
    r = rated_voltage ** 2 / bulb_rating
    return voltage ** 2 / (n_bulbs * r)


def instantaneous_power(load: LoadModel, t_since_on):
    """Noise-free draw ``t_since_on`` seconds after switch-on.

    Motors start at ``rated * inrush_multiplier`` and relax exponentially to
    ``rated`` with time constant ``inrush_duration / 3``.
    """
    t = np.asarray(t_since_on, dtype=np.float64)
    if np.any(t < 0):
        raise ValueError("t_since_on must be >= 0")
    if load.kind is LoadKind.RESISTIVE or load.inrush_duration == 0 or load.inrush_multiplier == 1:
        out = np.full(t.shape, float(load.rated_power))
    else:
        tau = load.inrush_duration / 3.0
        out = load.rated_power * (1.0 + (load.inrush_multiplier - 1.0) * np.exp(-t / tau))
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class Schedule:
    """Per-channel ordered ``(on_time, off_time)`` intervals within ``[0, horizon]``."""

    channels: tuple
    horizon: float

    def __post_init__(self):
        chans = tuple(tuple((float(a), float(b)) for a, b in ch) for ch in self.channels)
        for c, ivs in enumerate(chans):
            prev_end = -math.inf
            for a, b in ivs:
                if not (0 <= a < b <= self.horizon):
                    raise ValueError(f"channel {c}: interval ({a}, {b}) outside [0, {self.horizon}]")
                if a <= prev_end:
                    raise ValueError(f"channel {c}: intervals overlap or are not increasing")
                prev_end = b
        object.__setattr__(self, "channels", chans)

    @property
    def n_channels(self):
        return len(self.channels)

    def state(self, t):
        """ON mask ``(len(t), n_channels)`` and seconds since the last switch-on."""
        t = np.asarray(t, dtype=np.float64)
        on = np.zeros((t.size, self.n_channels), bool)
        since = np.zeros((t.size, self.n_channels))
        for c, ivs in enumerate(self.channels):
            if not ivs:
                continue
            starts = np.array([a for a, _ in ivs])
            ends = np.array([b for _, b in ivs])
            k = np.searchsorted(starts, t, side="right") - 1
            valid = k >= 0
            kk = np.where(valid, k, 0)
            on[:, c] = valid & (t < ends[kk])
            since[:, c] = np.where(on[:, c], t - starts[kk], 0.0)
        return on, since

    def combinations(self, resolution=1.0):
        """Set of joint ON/OFF tuples visited, probed every ``resolution`` seconds."""
        on, _ = self.state(np.arange(0.0, self.horizon, resolution))
        return {tuple(row) for row in on.tolist()}


def generate_schedule(seed, n_channels, horizon, mean_dwell, sample_interval_mean=5.0,
                      on_probability=0.4) -> Schedule:
    """Random joint ON/OFF schedule that visits every combination at least once.

    A shuffled tour through all ``2**n_channels`` joint states is placed at a
    random offset; the rest of the horizon is filled with joint states where
    each channel is ON with ``on_probability``. Dwell times are exponential
    with mean ``mean_dwell``, clamped to ``[2 * sample_interval_mean, horizon / 4]``.
    """
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    n_combos = 2 ** n_channels
    lo, hi = 2.0 * sample_interval_mean, horizon / 4.0
    if horizon < n_combos * mean_dwell or horizon < n_combos * lo:
        raise ValueError(
            f"horizon {horizon} s is too short to visit all {n_combos} combinations "
            f"with mean dwell {mean_dwell} s (need >= {n_combos * max(mean_dwell, lo)} s)"
        )
    rng = np.random.default_rng(seed)
    combos = np.array(list(itertools.product([False, True], repeat=n_channels)))

    def dwell():
        return float(np.clip(rng.exponential(mean_dwell), lo, hi))

    def random_state(prev):
        while True:
            s = rng.random(n_channels) < on_probability
            if prev is None or not np.array_equal(s, prev):
                return s

    tour = combos[rng.permutation(n_combos)]
    tour_dwells = np.array([dwell() for _ in range(n_combos)])
    if tour_dwells.sum() > horizon:
        tour_dwells[:] = horizon / n_combos
    tour_start = rng.uniform(0.0, horizon - tour_dwells.sum())

    segments = []  # (start, end, state)
    t, prev = 0.0, None
    while t < tour_start:
        s = random_state(prev)
        # keep the seam a real transition; with one channel there is no other choice
        if n_channels > 1 and np.array_equal(s, tour[0]):
            continue
        end = min(t + dwell(), tour_start)
        segments.append((t, end, s))
        t, prev = end, s
    t = tour_start
    for s, d in zip(tour, tour_dwells):
        segments.append((t, t + d, s))
        t += d
    prev = tour[-1]
    while t < horizon:
        s = random_state(prev)
        end = min(t + dwell(), horizon)
        segments.append((t, end, s))
        t, prev = end, s

    channels = []
    for c in range(n_channels):
        ivs = []
        for a, b, s in segments:
            if not s[c]:
                continue
            if ivs and ivs[-1][1] == a:
                ivs[-1] = (ivs[-1][0], b)
            else:
                ivs.append((a, b))
        channels.append(ivs)
    return Schedule(tuple(channels), float(horizon))


def schedule_from_intervals(channels, horizon) -> Schedule:
    return Schedule(tuple(tuple(ch) for ch in channels), float(horizon))


# ----------------------------------------------------------------- simulate


def testbed_channels(motor_noise=0.8, bulb_noise=0.1):
    """Three identical 50 W motors on L1-L3 and the series-bulb line on L4."""
    motors = [LoadModel.motor(steady_noise_sigma=motor_noise) for _ in range(3)]
    return tuple(motors) + (LoadModel.resistive(series_bulb_power(15.0), steady_noise_sigma=bulb_noise),)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    horizon: float = 3600.0
    sample_interval_mean: float = 5.0
    sample_interval_jitter_sigma: float = 0.5
    mains_voltage_nominal: float = 220.0
    voltage_noise_sigma: float = 0.5
    current_noise_sigma: float = 0.003
    spurious_rate: float = 0.0
    channels: tuple = field(default_factory=testbed_channels)
    channel_names: tuple = ()
    start_time: float = 1_700_000_000.0

    def __post_init__(self):
        if self.sample_interval_mean <= 0:
            raise ValueError("sample_interval_mean must be > 0")
        if not 0 <= self.sample_interval_jitter_sigma < self.sample_interval_mean / 3:
            raise ValueError("jitter sigma must be in [0, sample_interval_mean / 3)")
        if not 0 <= self.spurious_rate < 1:
            raise ValueError("spurious_rate must be in [0, 1)")
        if self.voltage_noise_sigma < 0 or self.current_noise_sigma < 0:
            raise ValueError("noise sigmas must be >= 0")
        if not self.channels:
            raise ValueError("at least one channel is required")
        object.__setattr__(self, "channels", tuple(self.channels))
        names = tuple(self.channel_names) or default_channel_names(self.channels)
        if len(names) != len(self.channels):
            raise ValueError("channel_names length differs from channels")
        object.__setattr__(self, "channel_names", names)

    def digest(self):
        return cfg.digest(asdict(self))

    def max_plausible_current(self):
        v = self.mains_voltage_nominal
        return sum(ch.rated_power * ch.inrush_multiplier / (v * ch.power_factor) for ch in self.channels)


def default_channel_names(channels):
    return tuple(f"M{k + 1}" for k in range(len(channels)))


@dataclass(frozen=True)
class SimResult:
    dataset: Dataset
    on: np.ndarray            # true ON mask (n, L)
    line_power: np.ndarray    # per-line power before measurement noise (n, L)
    t_since_on: np.ndarray    # (n, L)
    spurious: np.ndarray      # injected spurious rows


def sample_offsets(config: SimConfig, rng) -> np.ndarray:
    mean, sigma = config.sample_interval_mean, config.sample_interval_jitter_sigma
    n_max = int(config.horizon / mean * 1.2) + 16
    gaps = mean + sigma * rng.standard_normal(n_max)
    gaps = np.maximum(gaps, mean / 10.0)
    t = np.concatenate([[0.0], np.cumsum(gaps)])
    return t[t < config.horizon]


def simulate_detailed(config: SimConfig, schedule: Schedule) -> SimResult:
    if schedule.n_channels != len(config.channels):
        raise ValueError(
            f"schedule has {schedule.n_channels} channels, config has {len(config.channels)}"
        )
    ss = np.random.SeedSequence(config.seed)
    r_time, r_load, r_meas, r_spur = (np.random.default_rng(s) for s in ss.spawn(4))

    t = sample_offsets(config, r_time)
    n, L = t.size, len(config.channels)
    on, since = schedule.state(t)

    v_nom = config.mains_voltage_nominal
    pf = np.array([ch.power_factor for ch in config.channels])
    p_true = np.zeros((n, L))
    for c, ch in enumerate(config.channels):
        m = on[:, c]
        if not m.any():
            continue
        p = instantaneous_power(ch, since[m, c])
        if ch.steady_noise_sigma > 0:
            p = p + ch.steady_noise_sigma * r_load.standard_normal(p.shape)
        p_true[m, c] = np.maximum(p, 0.0)
    i_true = p_true / (v_nom * pf)
    main_p_true = p_true.sum(axis=1)
    main_i_true = i_true.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        main_pf = np.where(main_i_true > 0, main_p_true / (v_nom * main_i_true), 1.0)

    sv, si = config.voltage_noise_sigma, config.current_noise_sigma
    v_rep = v_nom + sv * r_meas.standard_normal((n, L + 1))
    i_noise = si * r_meas.standard_normal((n, L + 1))
    i_all_true = np.concatenate([main_i_true[:, None], i_true], axis=1)
    p_all_true = np.concatenate([main_p_true[:, None], p_true], axis=1)
    pf_all = np.concatenate([main_pf[:, None], np.broadcast_to(pf, (n, L))], axis=1)
    i_rep = np.maximum(i_all_true + i_noise, 0.0)

    spur = r_spur.random(n) < config.spurious_rate
    if spur.any():
        i_rep[spur, 0] = r_spur.uniform(0.0, 2.0 * config.max_plausible_current(), int(spur.sum()))

    # P_true * (V'/V) * (I'/I) == V' * I' * pf, written so zero noise is exact
    with np.errstate(invalid="ignore", divide="ignore"):
        scaled = p_all_true * (v_rep / v_nom) * (i_rep / i_all_true)
    p_rep = np.where(i_all_true > 0, scaled, v_rep * i_rep * pf_all)
    p_rep[spur, 0] = v_rep[spur, 0] * i_rep[spur, 0] * pf_all[spur, 0]

    main = np.stack([v_rep[:, 0], i_rep[:, 0], p_rep[:, 0]], axis=1)
    lines = np.stack([v_rep[:, 1:], i_rep[:, 1:], p_rep[:, 1:]], axis=2)
    meta = DatasetMeta(
        channel_names=config.channel_names,
        rated_powers=tuple(float(ch.rated_power) for ch in config.channels),
        seed=int(config.seed),
        config_digest=config.digest(),
    )
    ds = Dataset(config.start_time + t, main, lines, spur, meta)
    return SimResult(ds, on, p_true, since, spur)


def simulate(config: SimConfig, schedule: Schedule) -> Dataset:
    return simulate_detailed(config, schedule).dataset


def steady_state_mask(result: SimResult, config: SimConfig, min_run=2, tolerance=0.01) -> np.ndarray:
    """Samples outside transients.

    A sample is steady when the joint ON/OFF state has held for ``min_run``
    consecutive samples (counting this one) and every load was within
    ``tolerance`` of its rated draw at each of those samples.
    """
    on = result.on
    n = on.shape[0]
    if n == 0:
        return np.zeros(0, bool)
    settle = np.array([ch.settle_time(tolerance) for ch in config.channels])
    settled = ~(on & (result.t_since_on < settle[None, :])).any(axis=1)
    change = np.r_[True, (on[1:] != on[:-1]).any(axis=1)]
    starts = np.flatnonzero(change)
    run_start = starts[np.cumsum(change) - 1]
    held = np.arange(n) - run_start + 1
    # samples since the last unsettled one
    idx = np.where(settled, -1, np.arange(n))
    last_bad = np.maximum.accumulate(idx)
    return (held >= min_run) & (np.arange(n) - last_bad >= min_run)


def residual_sigma(result: SimResult, config: SimConfig) -> np.ndarray:
    """Std. dev. of ``main_p - sum(line_p)`` implied by the measurement noise."""
    v = config.mains_voltage_nominal
    sv, si = config.voltage_noise_sigma, config.current_noise_sigma
    pf = np.array([ch.power_factor for ch in config.channels])
    main_p = result.line_power.sum(axis=1)
    main_i = (result.line_power / (v * pf)).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        main_pf = np.where(main_i > 0, main_p / (v * main_i), 1.0)
    var = (main_p * sv / v) ** 2 + (v * main_pf * si) ** 2
    var = var + ((result.line_power * sv / v) ** 2 + (v * pf * si) ** 2).sum(axis=1)
    return np.sqrt(var)


# -------------------------------------------------------------- config file


def _load_model(section):
    kind = LoadKind(section.get("kind", "induction_motor"))
    rated = cfg.get_float(section, "rated_power")
    noise = cfg.get_float(section, "steady_noise_sigma", 0.0)
    if kind is LoadKind.RESISTIVE:
        return LoadModel.resistive(rated, noise)
    return LoadModel.motor(
        rated,
        cfg.get_float(section, "inrush_multiplier", 3.0),
        cfg.get_float(section, "inrush_duration", 2.0),
        noise,
        cfg.get_float(section, "power_factor", 0.8),
    )


def _parse_intervals(text):
    ivs = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        a, b = part.split("-")
        ivs.append((float(a), float(b)))
    return ivs


def load_sim_config(path, seed: int | None = None) -> tuple[SimConfig, Schedule]:
    """Read ``[sim]``, ``[channel NAME]`` and ``[schedule]`` sections.

    ``[schedule]`` either lists intervals per channel name
    (``M1 = 0-600, 1200-1800``) or gives ``seed``, ``mean_dwell`` and
    optionally ``on_probability`` for :func:`generate_schedule`.
    ``seed`` overrides both the noise seed and a generated schedule's seed.
    """
    parser = cfg.read_config(path)
    sim = parser["sim"] if parser.has_section("sim") else None
    chans = cfg.channel_sections(parser)
    if chans:
        names = tuple(n for n, _ in chans)
        channels = tuple(_load_model(s) for _, s in chans)
    else:
        channels = testbed_channels()
        names = default_channel_names(channels)
    try:
        config = SimConfig(
            seed=cfg.get_int(sim, "seed", 0) if seed is None else seed,
            horizon=cfg.get_float(sim, "horizon", 3600.0),
            sample_interval_mean=cfg.get_float(sim, "sample_interval_mean", 5.0),
            sample_interval_jitter_sigma=cfg.get_float(sim, "sample_interval_jitter_sigma", 0.5),
            mains_voltage_nominal=cfg.get_float(sim, "mains_voltage_nominal", 220.0),
            voltage_noise_sigma=cfg.get_float(sim, "voltage_noise_sigma", 0.5),
            current_noise_sigma=cfg.get_float(sim, "current_noise_sigma", 0.003),
            spurious_rate=cfg.get_float(sim, "spurious_rate", 0.0),
            channels=channels,
            channel_names=names,
            start_time=cfg.get_float(sim, "start_time", 1_700_000_000.0),
        )
    except ValueError as exc:
        raise cfg.ConfigError(str(exc)) from exc
    sched = parser["schedule"] if parser.has_section("schedule") else None
    explicit = sched is not None and any(n in sched for n in names)
    try:
        if explicit:
            schedule = schedule_from_intervals(
                [_parse_intervals(sched.get(n, "")) for n in names], config.horizon
            )
        else:
            schedule = generate_schedule(
                cfg.get_int(sched, "seed", config.seed) if seed is None else seed,
                len(channels),
                config.horizon,
                cfg.get_float(sched, "mean_dwell", 600.0),
                config.sample_interval_mean,
                cfg.get_float(sched, "on_probability", 0.4),
            )
    except ValueError as exc:
        raise cfg.ConfigError(f"schedule: {exc}") from exc
    return config, schedule

"""Event-based combinatorial disaggregation baseline.

Each sample is matched against every joint ON/OFF combination of a
steady-state signature library; the closest total wins. Identical loads
are resolved deterministically (fewest ON, then lowest channel indices).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import config as cfg

MAX_CHANNELS = 12
DEFAULT_EDGE_THRESHOLD = 5.0
PERSISTENCE = 2


class CombinatorialLimitError(ValueError):
    pass


@dataclass(frozen=True)
class SignatureLibrary:
    steady_power: tuple
    names: tuple = ()
    edge_threshold: float = DEFAULT_EDGE_THRESHOLD

    def __post_init__(self):
        powers = tuple(float(p) for p in self.steady_power)
        if not powers:
            raise ValueError("library needs at least one channel")
        if any(p <= 0 for p in powers):
            raise ValueError("steady_power must be > 0 for every channel")
        if self.edge_threshold <= 0:
            raise ValueError("edge_threshold must be > 0")
        names = tuple(self.names) or tuple(f"M{k + 1}" for k in range(len(powers)))
        if len(names) != len(powers):
            raise ValueError("names and steady_power differ in length")
        object.__setattr__(self, "steady_power", powers)
        object.__setattr__(self, "names", names)

    @property
    def n_channels(self):
        return len(self.steady_power)


@dataclass(frozen=True)
class EdgeEvent:
    sample_index: int
    delta_power: float


def load_library(path) -> SignatureLibrary:
    """Library from ``[channel NAME]`` sections (``steady_power`` or
    ``rated_power``) and an optional ``[library] edge_threshold``."""
    parser = cfg.read_config(path)
    chans = cfg.channel_sections(parser)
    if not chans:
        raise cfg.ConfigError(f"{path}: no [channel ...] sections")
    powers = []
    for name, sec in chans:
        key = "steady_power" if "steady_power" in sec else "rated_power"
        powers.append(cfg.get_float(sec, key))
    lib = parser["library"] if parser.has_section("library") else None
    return SignatureLibrary(
        tuple(powers), tuple(n for n, _ in chans),
        cfg.get_float(lib, "edge_threshold", DEFAULT_EDGE_THRESHOLD),
    )


def detect_edges(main_power, threshold) -> list[EdgeEvent]:
    """Switching events on the main power series.

    Raw edges are indices where ``|p[t] - p[t-1]| >= threshold``. Edges no
    more than two samples apart are merged when they share a sign, or when
    a falling edge trails a rising one (motor inrush decaying). A merged
    event's delta is measured across the cluster plus a two-sample settling
    window (cut short by the next unrelated edge); events that net out
    below the threshold are dropped.
    """
    p = np.asarray(main_power, dtype=np.float64)
    if p.size < 2:
        raise ValueError("need at least two samples")
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    d = np.diff(p)
    raw = [int(i) + 1 for i in np.flatnonzero(np.abs(d) >= threshold)]
    clusters = []
    for idx in raw:
        step = p[idx] - p[idx - 1]
        if clusters:
            cl = clusters[-1]
            gap_ok = idx - cl["last"] <= PERSISTENCE
            same_sign = np.sign(step) == np.sign(cl["first_step"])
            inrush_tail = cl["first_step"] > 0 and step < 0 and abs(step) < cl["first_step"]
            if gap_ok and (same_sign or inrush_tail):
                cl["last"] = idx
                continue
        clusters.append({"start": idx, "last": idx, "first_step": step})
    events = []
    last = p.size - 1
    for j, cl in enumerate(clusters):
        settle = min(cl["last"] + PERSISTENCE, last)
        if j + 1 < len(clusters):
            settle = min(settle, clusters[j + 1]["start"] - 1)
        delta = float(p[settle] - p[cl["start"] - 1])
        if abs(delta) >= threshold:
            events.append(EdgeEvent(cl["start"], delta))
    return events


def combination_table(n_channels):
    """All joint states ordered by (number ON, ON indices) for tie-breaking."""
    if n_channels > MAX_CHANNELS:
        raise CombinatorialLimitError(
            f"{n_channels} channels exceed the exhaustive-search limit of {MAX_CHANNELS}"
        )
    rows = []
    for k in range(n_channels + 1):
        for on in itertools.combinations(range(n_channels), k):
            row = np.zeros(n_channels, bool)
            row[list(on)] = True
            rows.append(row)
    return np.array(rows)


def raw_states(main_power, lib: SignatureLibrary) -> np.ndarray:
    """Per-sample best combination without temporal smoothing, ``(n, L)`` bool."""
    table = combination_table(lib.n_channels)
    sums = table.astype(np.float64) @ np.asarray(lib.steady_power)
    p = np.asarray(main_power, dtype=np.float64)
    resid = np.abs(p[:, None] - sums[None, :])
    # argmin returns the first minimum, i.e. the tie-break order of ``table``
    return table[np.argmin(resid, axis=1)]


def smooth_states(raw: np.ndarray) -> np.ndarray:
    """Accept a state change only if the new state persists two samples."""
    out = raw.copy()
    if len(raw) == 0:
        return out
    current = raw[0]
    for t in range(len(raw)):
        if not np.array_equal(raw[t], current):
            if t + 1 < len(raw) and np.array_equal(raw[t + 1], raw[t]):
                current = raw[t]
        out[t] = current
    return out


def match_states(main_power, lib: SignatureLibrary) -> np.ndarray:
    """Smoothed per-sample state vectors, ``(n, L)`` bool."""
    return smooth_states(raw_states(main_power, lib))


def reconstruct(states, lib: SignatureLibrary) -> np.ndarray:
    """Per-channel power ``(L, n)``: steady power when ON, else zero."""
    s = np.asarray(states, bool).reshape(-1, lib.n_channels)
    return (s * np.asarray(lib.steady_power)[None, :]).T.copy()


def disaggregate(main_power, lib: SignatureLibrary) -> np.ndarray:
    return reconstruct(match_states(main_power, lib), lib)

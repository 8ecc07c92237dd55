"""Dataset schema, CSV persistence, cleaning, grid alignment and time splits.

A :class:`Dataset` is stored column-wise in read-only numpy arrays:

* ``timestamp`` ``(n,)`` epoch seconds, strictly increasing
* ``main`` ``(n, 3)`` main-line voltage, current, power
* ``lines`` ``(n, L, 3)`` per-line voltage, current, power
* ``spurious`` ``(n,)`` bool
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

log = logging.getLogger(__name__)

V, I, P = 0, 1, 2
MAIN_COLUMNS = ("main_v", "main_i", "main_p")


class DataIOError(OSError):
    pass


class SchemaError(ValueError):
    pass


class ValidationError(ValueError):
    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row


class CleanError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    timestamp: float
    main_v: float
    main_i: float
    main_p: float
    line_v: tuple
    line_i: tuple
    line_p: tuple
    spurious_flag: bool = False


@dataclass(frozen=True)
class DatasetMeta:
    channel_names: tuple = ()
    rated_powers: tuple = ()
    seed: int | None = None
    config_digest: str | None = None

    @classmethod
    def default(cls, n_channels):
        return cls(
            channel_names=tuple(f"L{k + 1}" for k in range(n_channels)),
            rated_powers=tuple(float("nan") for _ in range(n_channels)),
        )


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    timestamp: np.ndarray
    main: np.ndarray
    lines: np.ndarray
    spurious: np.ndarray
    meta: DatasetMeta = field(default_factory=DatasetMeta)

    def __post_init__(self):
        ts = _frozen(self.timestamp, np.float64).reshape(-1)
        n = ts.shape[0]
        main = _frozen(self.main, np.float64).reshape(n, 3)
        lines = _frozen(self.lines, np.float64)
        if lines.ndim != 3 or lines.shape[0] != n or lines.shape[2] != 3:
            raise ValidationError(f"lines must have shape (n, L, 3), got {lines.shape}")
        spurious = _frozen(self.spurious, bool).reshape(n)
        meta = self.meta
        if not meta.channel_names:
            meta = DatasetMeta.default(lines.shape[1])
        if len(meta.channel_names) != lines.shape[1]:
            raise ValidationError(
                f"metadata names {len(meta.channel_names)} channels but samples carry {lines.shape[1]}"
            )
        if n > 1:
            bad = np.flatnonzero(np.diff(ts) <= 0)
            if bad.size:
                row = int(bad[0]) + 1
                raise ValidationError(f"timestamps not strictly increasing at row {row}", row=row)
        object.__setattr__(self, "timestamp", ts)
        object.__setattr__(self, "main", main)
        object.__setattr__(self, "lines", lines)
        object.__setattr__(self, "spurious", spurious)
        object.__setattr__(self, "meta", meta)

    def __len__(self):
        return self.timestamp.shape[0]

    @property
    def n_channels(self):
        return self.lines.shape[1]

    @property
    def main_v(self):
        return self.main[:, V]

    @property
    def main_i(self):
        return self.main[:, I]

    @property
    def main_p(self):
        return self.main[:, P]

    @property
    def line_p(self):
        return self.lines[:, :, P]

    def features(self):
        """Model inputs, ``(n, 3)`` ordered power, voltage, current."""
        return np.stack([self.main[:, P], self.main[:, V], self.main[:, I]], axis=1)

    def sample(self, i) -> Sample:
        return Sample(
            timestamp=float(self.timestamp[i]),
            main_v=float(self.main[i, V]),
            main_i=float(self.main[i, I]),
            main_p=float(self.main[i, P]),
            line_v=tuple(self.lines[i, :, V].tolist()),
            line_i=tuple(self.lines[i, :, I].tolist()),
            line_p=tuple(self.lines[i, :, P].tolist()),
            spurious_flag=bool(self.spurious[i]),
        )

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    def take(self, index) -> "Dataset":
        return Dataset(
            self.timestamp[index], self.main[index], self.lines[index], self.spurious[index], self.meta
        )

    def allclose(self, other, rtol=1e-6) -> bool:
        return (
            len(self) == len(other)
            and self.n_channels == other.n_channels
            and np.allclose(self.timestamp, other.timestamp, rtol=rtol, atol=0)
            and np.allclose(self.main, other.main, rtol=rtol, atol=1e-12)
            and np.allclose(self.lines, other.lines, rtol=rtol, atol=1e-12)
            and bool(np.array_equal(self.spurious, other.spurious))
        )

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], meta: DatasetMeta | None = None) -> "Dataset":
        if not samples:
            n_ch = len(meta.channel_names) if meta else 4
            return cls.empty(n_ch, meta)
        ts = [s.timestamp for s in samples]
        main = [[s.main_v, s.main_i, s.main_p] for s in samples]
        lines = [list(zip(s.line_v, s.line_i, s.line_p)) for s in samples]
        return cls(ts, main, lines, [s.spurious_flag for s in samples], meta or DatasetMeta())

    @classmethod
    def empty(cls, n_channels=4, meta=None):
        return cls(
            np.zeros(0), np.zeros((0, 3)), np.zeros((0, n_channels, 3)), np.zeros(0, bool),
            meta or DatasetMeta.default(n_channels),
        )


# --------------------------------------------------------------------------- CSV


def csv_columns(n_channels=4):
    cols = ["timestamp", *MAIN_COLUMNS]
    for k in range(1, n_channels + 1):
        cols += [f"l{k}_v", f"l{k}_i", f"l{k}_p"]
    cols.append("spurious")
    return cols


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta.json")


def write_csv(dataset: Dataset, path, with_meta=True) -> int:
    """Write ``dataset`` as CSV; returns the number of data rows.

    Floats are written with their shortest round-trip representation, so
    reading back gives the exact same values.
    """
    path = Path(path)
    n, L = len(dataset), dataset.n_channels
    block = np.concatenate(
        [dataset.timestamp[:, None], dataset.main, dataset.lines.reshape(n, 3 * L)], axis=1
    )
    try:
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(csv_columns(L))
            for row, flag in zip(block.tolist(), dataset.spurious.tolist()):
                writer.writerow([repr(x) for x in row] + [int(flag)])
        if with_meta:
            meta = asdict(dataset.meta)
            meta["sample_count"] = n
            meta_path(path).write_text(json.dumps(meta, indent=2))
    except OSError as exc:
        raise DataIOError(f"cannot write dataset to {path}: {exc}") from exc
    return n


@dataclass
class ReadReport:
    rows_read: int = 0
    rows_rejected: int = 0
    rejected_lines: list = field(default_factory=list)
    extra_columns: list = field(default_factory=list)


def _line_count(header):
    k = 0
    while any(f"l{k + 1}_{q}" in header for q in "vip"):
        k += 1
    return k


def read_csv_with_report(path) -> tuple[Dataset, ReadReport]:
    path = Path(path)
    report = ReadReport()
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise DataIOError(f"cannot read dataset {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: empty file, missing header") from None
        L = _line_count(header)
        required = csv_columns(max(L, 1))[:-1]
        for col in required:
            if col not in header:
                raise SchemaError(f"{path}: missing mandatory column '{col}'")
        known = set(csv_columns(L))
        report.extra_columns = [h for h in header if h not in known]
        if report.extra_columns:
            log.warning("%s: ignoring %d unknown column(s): %s", path, len(report.extra_columns),
                        ", ".join(report.extra_columns))
        pos = [header.index(c) for c in required]
        spur_pos = header.index("spurious") if "spurious" in header else None
        values, flags = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            report.rows_read += 1
            try:
                vals = [float(row[j]) for j in pos]
                flag = bool(int(float(row[spur_pos]))) if spur_pos is not None else False
            except (ValueError, IndexError):
                report.rows_rejected += 1
                report.rejected_lines.append(lineno)
                continue
            values.append(vals)
            flags.append(flag)
    if report.rows_rejected:
        log.warning("%s: rejected %d unparseable row(s)", path, report.rows_rejected)
    block = np.array(values, dtype=np.float64).reshape(-1, len(required))
    n = block.shape[0]
    meta = DatasetMeta.default(L)
    mp = meta_path(path)
    if mp.exists():
        try:
            raw = json.loads(mp.read_text())
            if len(raw.get("channel_names", ())) == L:
                meta = DatasetMeta(
                    channel_names=tuple(raw["channel_names"]),
                    rated_powers=tuple(float(x) for x in raw.get("rated_powers", [math.nan] * L)),
                    seed=raw.get("seed"),
                    config_digest=raw.get("config_digest"),
                )
        except (ValueError, KeyError, TypeError):
            log.warning("%s: ignoring malformed metadata sidecar", mp)
    ds = Dataset(block[:, 0], block[:, 1:4], block[:, 4:].reshape(n, L, 3), np.array(flags, bool), meta)
    return ds, report


def read_csv(path) -> Dataset:
    return read_csv_with_report(path)[0]


# ------------------------------------------------------------------ cleaning


@dataclass
class CleanReport:
    rows_in: int
    rows_out: int
    flagged: int
    negative: int
    non_finite: int
    over_max_power: int
    spurious_total: int
    action: str

    @property
    def spurious_fraction(self):
        return self.spurious_total / self.rows_in if self.rows_in else 0.0

    def to_text(self):
        return "\n".join([
            f"rows in            {self.rows_in}",
            f"rows out           {self.rows_out}",
            f"pre-flagged        {self.flagged}",
            f"negative values    {self.negative}",
            f"non-finite values  {self.non_finite}",
            f"main_p > max       {self.over_max_power}",
            f"spurious total     {self.spurious_total} ({100 * self.spurious_fraction:.3f}%)",
            f"action             {self.action}",
        ])

    def to_json(self):
        d = asdict(self)
        d["spurious_fraction"] = self.spurious_fraction
        return d


def spurious_mask(dataset: Dataset, max_power: float):
    """Per-rule boolean masks used by :func:`clean`."""
    values = np.concatenate([dataset.main, dataset.lines.reshape(len(dataset), -1)], axis=1)
    finite = np.isfinite(values).all(axis=1)
    with np.errstate(invalid="ignore"):
        negative = (values < 0).any(axis=1)
        over = dataset.main[:, P] > max_power
    return {
        "flagged": dataset.spurious.copy(),
        "negative": negative,
        "non_finite": ~finite,
        "over_max_power": over,
    }


def clean(dataset: Dataset, max_power: float, interpolate: bool = True) -> tuple[Dataset, CleanReport]:
    """Mark implausible rows as spurious, then interpolate or drop them.

    Rules: already flagged, any negative or non-finite magnitude, main
    power above ``max_power``. Interpolation is linear in time between the
    nearest good neighbours; repaired rows keep ``spurious=True``.
    """
    if max_power <= 0:
        raise ValueError("max_power must be > 0")
    masks = spurious_mask(dataset, max_power)
    bad = masks["flagged"] | masks["negative"] | masks["non_finite"] | masks["over_max_power"]
    n = len(dataset)
    n_bad = int(bad.sum())
    if n and n_bad > 0.5 * n:
        raise CleanError(f"{n_bad} of {n} rows are spurious (> 50%); dataset unusable")
    if n_bad == 0:
        out = dataset
    elif interpolate:
        good = ~bad
        ts = dataset.timestamp
        main = dataset.main.copy()
        lines = dataset.lines.reshape(n, -1).copy()
        for block in (main, lines):
            for j in range(block.shape[1]):
                block[bad, j] = np.interp(ts[bad], ts[good], block[good, j])
        out = Dataset(ts, main, lines.reshape(dataset.lines.shape), bad | dataset.spurious, dataset.meta)
    else:
        out = dataset.take(~bad)
    report = CleanReport(
        rows_in=n,
        rows_out=len(out),
        flagged=int(masks["flagged"].sum()),
        negative=int(masks["negative"].sum()),
        non_finite=int(masks["non_finite"].sum()),
        over_max_power=int(masks["over_max_power"].sum()),
        spurious_total=n_bad,
        action="none" if n_bad == 0 else ("interpolated" if interpolate else "dropped"),
    )
    return out, report


# ------------------------------------------------------------ grid alignment

GRID_EPS = 1e-6


def grid_size(first, last, grid_interval):
    return int(math.floor((last - first) / grid_interval + 1e-9)) + 1


def grid_time(first, k, grid_interval):
    return first + k * grid_interval


def align_to_grid(dataset: Dataset, grid_interval: float) -> Dataset:
    """Zero-order-hold resample onto ``first + k * grid_interval``."""
    if grid_interval <= 0:
        raise ValueError("grid_interval must be > 0")
    if len(dataset) == 0:
        raise ValueError("cannot align an empty dataset")
    ts = dataset.timestamp
    n_out = grid_size(ts[0], ts[-1], grid_interval)
    grid = grid_time(ts[0], np.arange(n_out), grid_interval)
    idx = np.searchsorted(ts, grid + GRID_EPS * grid_interval, side="right") - 1
    idx = np.clip(idx, 0, len(ts) - 1)
    return Dataset(grid, dataset.main[idx], dataset.lines[idx], dataset.spurious[idx], dataset.meta)


def is_uniform(dataset: Dataset, grid_interval: float) -> bool:
    if len(dataset) < 2:
        return True
    gaps = np.diff(dataset.timestamp)
    return bool(np.all(np.abs(gaps - grid_interval) <= GRID_EPS * grid_interval + 1e-6))


# ------------------------------------------------------------------- splits

SPLIT_NAMES = ("train", "val", "test")


@dataclass(frozen=True)
class SplitSpec:
    """Half-open ``[start, end)`` timestamp ranges for each split."""

    train: tuple = ()
    val: tuple = ()
    test: tuple = ()

    def __post_init__(self):
        for name in SPLIT_NAMES:
            ivs = tuple((float(a), float(b)) for a, b in getattr(self, name))
            for a, b in ivs:
                if not a < b:
                    raise SplitError(f"{name} interval [{a}, {b}) is empty or reversed")
            object.__setattr__(self, name, ivs)
        allv = sorted((a, b, name) for name in SPLIT_NAMES for a, b in getattr(self, name))
        for (a0, b0, n0), (a1, b1, n1) in zip(allv, allv[1:]):
            if a1 < b0:
                raise SplitError(f"interval [{a0}, {b0}) of {n0} overlaps [{a1}, {b1}) of {n1}")

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: [tuple(iv) for iv in obj.get(k, [])] for k in SPLIT_NAMES})

    def to_json(self):
        return {k: [list(iv) for iv in getattr(self, k)] for k in SPLIT_NAMES}


@dataclass
class SplitReport:
    total: int
    counts: dict
    dropped: int

    def percentages(self):
        return {k: 100.0 * v / self.total if self.total else 0.0 for k, v in self.counts.items()}

    def durations_hours(self, spec: SplitSpec):
        return {k: sum(b - a for a, b in getattr(spec, k)) / 3600.0 for k in SPLIT_NAMES}

    def to_text(self, spec: SplitSpec | None = None):
        pct = self.percentages()
        hours = self.durations_hours(spec) if spec else None
        rows = [f"{'Set':<12}{'Samples (%)':>22}" + (f"{'Duration':>14}" if hours else "")]
        labels = {"train": "Training", "val": "Validation", "test": "Testing"}
        for k in SPLIT_NAMES:
            line = f"{labels[k]:<12}{f'{self.counts[k]:,} ({pct[k]:.1f}%)':>22}"
            if hours:
                line += f"{hours[k]:>11.1f} h"
            rows.append(line)
        rows.append(f"{'Dropped':<12}{self.dropped:>22,}")
        return "\n".join(rows)

    def to_json(self):
        return {"total": self.total, "counts": self.counts, "dropped": self.dropped,
                "percentages": self.percentages()}


class Split(NamedTuple):
    train: Dataset
    val: Dataset
    test: Dataset
    report: SplitReport


def _membership(ts, intervals):
    mask = np.zeros(ts.shape, bool)
    for a, b in intervals:
        mask |= (ts >= a) & (ts < b)
    return mask


def split_by_time(dataset: Dataset, spec: SplitSpec) -> Split:
    ts = dataset.timestamp
    parts, counts = {}, {}
    assigned = np.zeros(ts.shape, bool)
    for name in SPLIT_NAMES:
        mask = _membership(ts, getattr(spec, name))
        if not mask.any():
            raise SplitError(f"split '{name}' is empty")
        parts[name] = dataset.take(mask)
        counts[name] = int(mask.sum())
        assigned |= mask
    report = SplitReport(total=len(dataset), counts=counts, dropped=int((~assigned).sum()))
    return Split(parts["train"], parts["val"], parts["test"], report)


def boundaries_for_fractions(timestamps, fractions) -> SplitSpec:
    """Contiguous train/val/test ranges whose sample counts best match ``fractions``.

    Cuts fall halfway between neighbouring samples.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    n = ts.size
    if n < 3:
        raise SplitError("need at least 3 samples to split")
    frac = np.asarray(fractions, dtype=np.float64)
    if frac.shape != (3,) or np.any(frac <= 0):
        raise SplitError("fractions must be three positive numbers")
    frac = frac / frac.sum()
    cuts = np.rint(np.cumsum(frac)[:2] * n).astype(int)
    cuts = np.clip(cuts, 1, n - 1)
    if cuts[1] <= cuts[0]:
        cuts[1] = min(cuts[0] + 1, n - 1)
    edges = [ts[0]] + [0.5 * (ts[c - 1] + ts[c]) for c in cuts] + [np.nextafter(ts[-1], np.inf)]
    return SplitSpec(train=[(edges[0], edges[1])], val=[(edges[1], edges[2])], test=[(edges[2], edges[3])])

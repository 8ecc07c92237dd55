"""Disaggregation metrics: MAE, SAE, F1 and NDE, plus per-appliance reports.

All series are in watts. ``actual`` and ``predicted`` in the report
functions are ``(n_appliances, H)`` arrays.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

ON_THRESHOLD = 5.0
DEFAULT_SUBHORIZON = 720  # one hour at 5 s
LOW_CONFIDENCE_SAMPLES = 50

METRICS = ("mae", "sae", "sae_pct", "f1", "nde")
METRIC_LABELS = {"mae": "MAE", "sae": "SAE (W)", "sae_pct": "SAE (%)", "f1": "F1", "nde": "NDE"}


class MetricError(ValueError):
    pass


def _pair(actual, predicted):
    y = np.asarray(actual, dtype=np.float64).ravel()
    yh = np.asarray(predicted, dtype=np.float64).ravel()
    if y.shape != yh.shape:
        raise MetricError(f"length mismatch: actual {y.size} vs predicted {yh.size}")
    if y.size == 0:
        raise MetricError("series must have at least one sample")
    return y, yh


def mae(actual, predicted) -> float:
    y, yh = _pair(actual, predicted)
    return float(np.mean(np.abs(y - yh)))


@dataclass(frozen=True)
class SubHorizonSpec:
    m: int = DEFAULT_SUBHORIZON

    def __post_init__(self):
        if self.m < 1:
            raise MetricError("sub-horizon length must be >= 1")

    def count(self, h):
        return h // self.m

    def remainder(self, h):
        return h - self.count(h) * self.m


@dataclass(frozen=True)
class SAEResult:
    absolute: float
    relative: float
    n_subhorizons: int
    remainder: int

    @property
    def relative_defined(self):
        return not math.isnan(self.relative)

    @property
    def percent(self):
        return 100.0 * self.relative


def sae(actual, predicted, spec: SubHorizonSpec | int = DEFAULT_SUBHORIZON) -> SAEResult:
    """Sub-horizon energy error.

    ``absolute`` is the mean over sub-horizons of ``|sum(y) - sum(yhat)| / M``;
    ``relative`` is ``sum |Y_tau - Yhat_tau| / sum Y_tau`` (NaN when the
    actual energy is zero). Trailing samples beyond ``S * M`` are ignored.
    """
    if not isinstance(spec, SubHorizonSpec):
        spec = SubHorizonSpec(int(spec))
    y, yh = _pair(actual, predicted)
    m, s = spec.m, spec.count(y.size)
    if s < 1:
        raise MetricError(f"series length {y.size} shorter than sub-horizon {m}")
    Y = y[: s * m].reshape(s, m).sum(axis=1)
    Yh = yh[: s * m].reshape(s, m).sum(axis=1)
    err = np.abs(Y - Yh)
    absolute = float(np.mean(err / m))
    denom = Y.sum()
    relative = float(err.sum() / denom) if denom > 0 else math.nan
    return SAEResult(absolute, relative, s, spec.remainder(y.size))


@dataclass(frozen=True)
class ConfusionCounts:
    true_positive: int
    false_positive: int
    false_negative: int
    true_negative: int

    @property
    def total(self):
        return self.true_positive + self.false_positive + self.false_negative + self.true_negative

    @property
    def precision(self):
        d = self.true_positive + self.false_positive
        return self.true_positive / d if d else 0.0

    @property
    def recall(self):
        d = self.true_positive + self.false_negative
        return self.true_positive / d if d else 0.0

    @property
    def accuracy(self):
        return (self.true_positive + self.true_negative) / self.total if self.total else math.nan

    @classmethod
    def from_states(cls, actual_on, predicted_on):
        a = np.asarray(actual_on, bool)
        p = np.asarray(predicted_on, bool)
        return cls(
            int(np.sum(a & p)), int(np.sum(~a & p)), int(np.sum(a & ~p)), int(np.sum(~a & ~p))
        )


def f1_from_counts(counts: ConfusionCounts) -> float:
    p, r = counts.precision, counts.recall
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def f1(actual, predicted, on_threshold=ON_THRESHOLD) -> tuple[float, ConfusionCounts]:
    y, yh = _pair(actual, predicted)
    counts = ConfusionCounts.from_states(y > on_threshold, yh > on_threshold)
    return f1_from_counts(counts), counts


def nde(actual, predicted) -> float:
    """Normalized disaggregation error; NaN when the actual series is all zero."""
    y, yh = _pair(actual, predicted)
    denom = np.sum(y * y)
    if denom <= 0:
        return math.nan
    return float(np.sqrt(np.sum((y - yh) ** 2)) / np.sqrt(denom))


# ------------------------------------------------------------------ reports


def fmt(x, places=2):
    """Round half-up on the decimal representation, as printed tables do.

    The value is first snapped to 12 significant digits so that binary
    noise (0.7449999999999999 from averaging) does not decide the rounding.
    """
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "n/a"
    q = Decimal(1).scaleb(-places)
    return str(Decimal(f"{float(x):.12g}").quantize(q, rounding=ROUND_HALF_UP))


@dataclass
class MetricReport:
    appliances: list
    values: dict                      # metric -> list, one entry per appliance
    undefined: list = field(default_factory=list)
    subhorizon: int | None = None
    on_threshold: float | None = None
    n_samples: int | None = None

    def __post_init__(self):
        for m in METRICS:
            vals = [float(v) for v in self.values.get(m, [math.nan] * len(self.appliances))]
            if len(vals) != len(self.appliances):
                raise MetricError(f"metric {m}: {len(vals)} values for {len(self.appliances)} appliances")
            self.values[m] = vals

    @property
    def averages(self):
        return {m: float(np.mean(self.values[m])) for m in METRICS}

    def get(self, metric, appliance):
        return self.values[metric][self.appliances.index(appliance)]

    @classmethod
    def from_table(cls, appliances, mae=None, sae_pct=None, f1=None, nde=None, sae=None):
        """Report built from reported numbers (no raw series)."""
        nan = [math.nan] * len(appliances)
        return cls(list(appliances), {
            "mae": list(mae or nan), "sae": list(sae or nan), "sae_pct": list(sae_pct or nan),
            "f1": list(f1 or nan), "nde": list(nde or nan),
        })

    def to_text(self, metrics=METRICS, places=2):
        cols = list(self.appliances) + ["Avg"]
        width = max(8, *(len(c) + 2 for c in cols))
        lines = ["Metric".ljust(10) + "".join(c.rjust(width) for c in cols)]
        avg = self.averages
        for m in metrics:
            cells = [fmt(v, places) for v in self.values[m]] + [fmt(avg[m], places)]
            lines.append(METRIC_LABELS[m].ljust(10) + "".join(c.rjust(width) for c in cells))
        return "\n".join(lines)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", *self.appliances, "avg"])
        avg = self.averages
        for m in METRICS:
            w.writerow([m, *[repr(v) for v in self.values[m]], repr(avg[m])])
        return buf.getvalue()

    def to_json(self):
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v

        return {
            "appliances": list(self.appliances),
            "values": {m: [clean(v) for v in self.values[m]] for m in METRICS},
            "averages": {m: clean(v) for m, v in self.averages.items()},
            "undefined": list(self.undefined),
            "subhorizon": self.subhorizon,
            "on_threshold": self.on_threshold,
            "n_samples": self.n_samples,
        }

    @classmethod
    def from_json(cls, obj):
        vals = {m: [math.nan if v is None else v for v in obj["values"][m]] for m in METRICS}
        return cls(
            list(obj["appliances"]), vals, list(obj.get("undefined", [])),
            obj.get("subhorizon"), obj.get("on_threshold"), obj.get("n_samples"),
        )

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=2)
        return path

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def _as_matrix(series):
    a = np.asarray(series, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    return a


def report(actual, predicted, spec: SubHorizonSpec | int = DEFAULT_SUBHORIZON,
           on_threshold=ON_THRESHOLD, names=None) -> MetricReport:
    y, yh = _as_matrix(actual), _as_matrix(predicted)
    if y.shape != yh.shape:
        raise MetricError(f"shape mismatch: actual {y.shape} vs predicted {yh.shape}")
    if not isinstance(spec, SubHorizonSpec):
        spec = SubHorizonSpec(int(spec))
    names = list(names) if names is not None else [f"M{k + 1}" for k in range(y.shape[0])]
    if len(names) != y.shape[0]:
        raise MetricError("names do not match appliance count")
    values = {m: [] for m in METRICS}
    undefined = []
    for k, name in enumerate(names):
        values["mae"].append(mae(y[k], yh[k]))
        s = sae(y[k], yh[k], spec)
        values["sae"].append(s.absolute)
        values["sae_pct"].append(s.percent)
        if not s.relative_defined:
            undefined.append(f"{name}:sae_pct")
        values["f1"].append(f1(y[k], yh[k], on_threshold)[0])
        n = nde(y[k], yh[k])
        values["nde"].append(n)
        if math.isnan(n):
            undefined.append(f"{name}:nde")
    return MetricReport(names, values, undefined, spec.m, on_threshold, y.shape[1])


# ---------------------------------------------------------------- breakdowns


@dataclass
class Bucket:
    key: object
    n_samples: int
    report: MetricReport

    @property
    def low_confidence(self):
        return self.n_samples < LOW_CONFIDENCE_SAMPLES


def breakdown_by_active_count(actual, predicted, on_threshold=ON_THRESHOLD,
                              spec: SubHorizonSpec | int = DEFAULT_SUBHORIZON,
                              names=None, count_channels=None) -> dict:
    """Metrics per number of simultaneously-ON appliances (true states).

    ``count_channels`` restricts which appliances are counted; all
    appliances are still scored. Sub-horizons are shortened to the bucket
    size when a bucket is smaller than ``spec.m``. Empty buckets are omitted.
    """
    y, yh = _as_matrix(actual), _as_matrix(predicted)
    m = spec.m if isinstance(spec, SubHorizonSpec) else int(spec)
    idx = list(range(y.shape[0])) if count_channels is None else list(count_channels)
    k_on = (y[idx] > on_threshold).sum(axis=0)
    out = {}
    for k in np.unique(k_on):
        sel = k_on == k
        n = int(sel.sum())
        out[int(k)] = Bucket(int(k), n, report(y[:, sel], yh[:, sel], min(m, n), on_threshold, names))
    return out


@dataclass
class StateBucket:
    n_samples: int
    mae: float
    sae: float
    sae_pct: float
    nde: float
    accuracy: float

    @property
    def low_confidence(self):
        return self.n_samples < LOW_CONFIDENCE_SAMPLES


def breakdown_by_state(actual, predicted, on_threshold=ON_THRESHOLD,
                       spec: SubHorizonSpec | int = DEFAULT_SUBHORIZON, names=None) -> dict:
    """Per appliance, error metrics split by that appliance's true ON/OFF state.

    F1 is undefined inside a single-state bucket, so state accuracy is
    reported instead.
    """
    y, yh = _as_matrix(actual), _as_matrix(predicted)
    m = spec.m if isinstance(spec, SubHorizonSpec) else int(spec)
    names = list(names) if names is not None else [f"M{k + 1}" for k in range(y.shape[0])]
    out = {}
    for k, name in enumerate(names):
        on = y[k] > on_threshold
        buckets = {}
        for label, sel in (("on", on), ("off", ~on)):
            n = int(sel.sum())
            if n == 0:
                continue
            a, p = y[k, sel], yh[k, sel]
            s = sae(a, p, min(m, n))
            counts = ConfusionCounts.from_states(a > on_threshold, p > on_threshold)
            buckets[label] = StateBucket(n, mae(a, p), s.absolute, s.percent, nde(a, p), counts.accuracy)
        out[name] = buckets
    return out


def active_count_table(breakdown, metric="mae"):
    """Rows ``k, n, per-appliance metric..., avg`` for a count breakdown."""
    rows = []
    for k, b in sorted(breakdown.items()):
        vals = b.report.values[metric]
        rows.append([k, b.n_samples, *vals, b.report.averages[metric], b.low_confidence])
    return rows


def breakdown_to_json(count_breakdown=None, state_breakdown=None):
    def nn(v):
        return None if isinstance(v, float) and math.isnan(v) else v

    out = {}
    if count_breakdown is not None:
        out["by_active_count"] = {
            str(k): {"n_samples": b.n_samples, "low_confidence": b.low_confidence, "report": b.report.to_json()}
            for k, b in sorted(count_breakdown.items())
        }
    if state_breakdown is not None:
        out["by_state"] = {
            name: {lab: {kk: nn(vv) for kk, vv in vars(sb).items()} | {"low_confidence": sb.low_confidence}
                   for lab, sb in buckets.items()}
            for name, buckets in state_breakdown.items()
        }
    return out


# ------------------------------------------------------------------ drift


@dataclass
class DriftTable:
    appliances: list
    rows: list  # (metric, appliance, before, after, delta, pct_change)

    def delta(self, metric, appliance="Avg"):
        for m, a, _, _, d, _ in self.rows:
            if m == metric and a == appliance:
                return d
        raise KeyError((metric, appliance))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "appliance", "before", "after", "delta", "pct_change"])
        for r in self.rows:
            w.writerow([r[0], r[1], *[repr(x) for x in r[2:]]])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{'metric':<10}{'appliance':>10}{'before':>10}{'after':>10}{'delta':>10}{'change %':>10}"]
        for m, a, b, af, d, pct in self.rows:
            lines.append(f"{METRIC_LABELS[m]:<10}{a:>10}{fmt(b):>10}{fmt(af):>10}{fmt(d):>10}{fmt(pct, 1):>10}")
        return "\n".join(lines)


def compare_reports(before: MetricReport, after: MetricReport) -> DriftTable:
    if list(before.appliances) != list(after.appliances):
        raise MetricError(
            f"appliance sets differ: {before.appliances} vs {after.appliances}"
        )
    rows = []
    ab, aa = before.averages, after.averages
    for m in METRICS:
        pairs = list(zip(before.appliances, before.values[m], after.values[m]))
        if len(before.appliances) > 1:
            pairs.append(("Avg", ab[m], aa[m]))
        for name, b, a in pairs:
            d = a - b
            pct = 100.0 * d / abs(b) if b not in (0.0,) and not math.isnan(b) else math.nan
            rows.append((m, name, b, a, d, pct))
    return DriftTable(list(before.appliances), rows)

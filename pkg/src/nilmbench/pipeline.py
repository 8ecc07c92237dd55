"""Real-time disaggregation loop with an append-only store and HTTP endpoints.

One ingest worker reads samples from a source, drops implausible ones,
aligns them onto the model's time grid, keeps the last ``seq_len`` rows in
a :class:`WindowBuffer` and, once full, emits a :class:`PredictionRecord`
for the newest step. Records go to a JSONL (or CSV) file; an HTTP server
thread serves an immutable snapshot of the latest state plus the store.

JSONL record schema, one object per line::

    {"timestamp": 1700000000.0,        # grid time, epoch seconds
     "power_w": [49.8, 0.1, ...],      # per-appliance predicted power
     "on": [true, false, ...],         # per-appliance ON flag (prob >= 0.5)
     "model_digest": "3f2a...",        # ModelParams.digest()
     "latency_ms": 212.4}              # ingest -> prediction
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
import threading
import time
import urllib.error
import urllib.request
from collections import deque
from dataclasses import asdict, dataclass, field
from http import HTTPStatus
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from urllib.parse import parse_qs, urlparse

import numpy as np

from . import config as cfg
from . import metrics as mt
from .dataio import GRID_EPS, Dataset, Sample, grid_size, grid_time, read_csv
from .model import ModelParams, forward

log = logging.getLogger(__name__)

HISTORY_LIMIT = 10_000
BACKOFF_CAP = 60.0
ENV_PORT = "NILMBENCH_PORT"
ENV_STORE = "NILMBENCH_STORE"


class SourceUnavailable(RuntimeError):
    pass


class StoreError(RuntimeError):
    pass


class JoinError(ValueError):
    pass


# ------------------------------------------------------------------ configs


@dataclass(frozen=True)
class SourceConfig:
    mode: str = "replay"             # replay | http_poll
    path: str | None = None
    url: str | None = None
    pace: str = "max_speed"          # realtime | fixed | max_speed
    interval: float = 5.0            # seconds between samples for pace=fixed
    poll_interval: float = 5.0
    timeout: float = 5.0

    def __post_init__(self):
        if self.mode == "replay":
            if not self.path or not os.access(self.path, os.R_OK):
                raise ValueError(f"replay source needs a readable file, got {self.path!r}")
        elif self.mode == "http_poll":
            if not self.url:
                raise ValueError("http_poll source needs a url")
            if self.poll_interval <= 0:
                raise ValueError("poll_interval must be > 0")
        else:
            raise ValueError(f"unknown source mode {self.mode!r}")
        if self.pace not in ("realtime", "fixed", "max_speed"):
            raise ValueError(f"unknown pace {self.pace!r}")
        if self.pace == "fixed" and self.interval <= 0:
            raise ValueError("fixed pace needs interval > 0")


@dataclass(frozen=True)
class StoreConfig:
    path: str
    format: str = "jsonl"            # jsonl | csv
    fsync: str = "per_record"        # per_record | interval
    fsync_interval: float = 1.0

    def __post_init__(self):
        if self.format not in ("jsonl", "csv"):
            raise ValueError(f"unknown store format {self.format!r}")
        if self.fsync not in ("per_record", "interval"):
            raise ValueError(f"unknown fsync policy {self.fsync!r}")


def load_serve_config(path):
    """``[source]``, ``[store]`` and ``[serve]`` (port, max_power) sections."""
    parser = cfg.read_config(path)
    src = dict(parser["source"]) if parser.has_section("source") else {}
    for key in ("interval", "poll_interval", "timeout"):
        if key in src:
            src[key] = float(src[key])
    st = dict(parser["store"]) if parser.has_section("store") else {}
    if "fsync_interval" in st:
        st["fsync_interval"] = float(st["fsync_interval"])
    serve = parser["serve"] if parser.has_section("serve") else None
    extra = {"port": cfg.get_int(serve, "port", 8000), "max_power": cfg.get_float(serve, "max_power", 0.0)}
    try:
        source = SourceConfig(**src) if src else None
        store = StoreConfig(**st) if st else None
    except (TypeError, ValueError) as exc:
        raise cfg.ConfigError(str(exc)) from exc
    return source, store, extra


def apply_env_overrides(store: StoreConfig | None, port: int):
    if os.environ.get(ENV_STORE):
        base = store or StoreConfig(os.environ[ENV_STORE])
        store = StoreConfig(os.environ[ENV_STORE], base.format, base.fsync, base.fsync_interval)
    if os.environ.get(ENV_PORT):
        port = int(os.environ[ENV_PORT])
    return store, port


# ------------------------------------------------------------------ records


@dataclass(frozen=True)
class PredictionRecord:
    timestamp: float
    power_w: tuple
    on: tuple
    model_digest: str
    latency_ms: float

    def __post_init__(self):
        if any(p < 0 for p in self.power_w):
            raise ValueError("predicted powers must be >= 0")
        if len(self.power_w) != len(self.on):
            raise ValueError("power and ON flag counts differ")

    def to_json(self):
        return {
            "timestamp": self.timestamp,
            "power_w": list(self.power_w),
            "on": list(self.on),
            "model_digest": self.model_digest,
            "latency_ms": self.latency_ms,
        }

    @classmethod
    def from_json(cls, obj):
        return cls(float(obj["timestamp"]), tuple(float(x) for x in obj["power_w"]),
                   tuple(bool(x) for x in obj["on"]), str(obj["model_digest"]), float(obj["latency_ms"]))


def csv_header(n):
    return (["timestamp"] + [f"p{k + 1}" for k in range(n)] + [f"on{k + 1}" for k in range(n)]
            + ["model_digest", "latency_ms"])


def _record_line(rec: PredictionRecord, fmt: str) -> str:
    if fmt == "jsonl":
        return json.dumps(rec.to_json(), separators=(",", ":")) + "\n"
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(
        [repr(rec.timestamp), *map(repr, rec.power_w), *(int(b) for b in rec.on),
         rec.model_digest, repr(rec.latency_ms)]
    )
    return buf.getvalue()


def _parse_line(line: str, fmt: str, header=None):
    if fmt == "jsonl":
        return PredictionRecord.from_json(json.loads(line))
    row = next(csv.reader([line]))
    n = (len(row) - 3) // 2
    if len(row) != 2 * n + 3:
        raise ValueError("wrong column count")
    return PredictionRecord(float(row[0]), tuple(float(x) for x in row[1:1 + n]),
                            tuple(bool(int(x)) for x in row[1 + n:1 + 2 * n]), row[-2], float(row[-1]))


def _repair_tail(path: Path):
    """Drop a trailing partial line left by a crash. Returns bytes removed."""
    size = path.stat().st_size
    if size == 0:
        return 0
    with path.open("rb+") as fh:
        fh.seek(-1, os.SEEK_END)
        if fh.read(1) == b"\n":
            return 0
        chunk, pos = 65536, size
        while pos > 0:
            start = max(0, pos - chunk)
            fh.seek(start)
            data = fh.read(pos - start)
            nl = data.rfind(b"\n")
            if nl >= 0:
                keep = start + nl + 1
                fh.truncate(keep)
                return size - keep
            pos = start
        fh.truncate(0)
        return size


class PredictionStore:
    """Append-only, timestamp-ordered record file; single writer."""

    def __init__(self, config: StoreConfig, n_appliances: int):
        self.config = config
        self.path = Path(config.path)
        self.n_appliances = n_appliances
        self.last_timestamp = -math.inf
        self.count = 0
        self.unsynced = 0
        self.last_write = None
        self._last_sync = time.monotonic()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if self.path.exists():
                removed = _repair_tail(self.path)
                if removed:
                    log.warning("%s: dropped %d bytes of a torn trailing record", self.path, removed)
                for rec in read_records(self.path, config.format):
                    self.last_timestamp = rec.timestamp
                    self.count += 1
            self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
            if config.format == "csv" and os.fstat(self._fd).st_size == 0:
                self._write(",".join(csv_header(n_appliances)) + "\n")
                os.fsync(self._fd)
        except OSError as exc:
            raise StoreError(f"cannot open store {self.path}: {exc}") from exc

    def _write(self, text: str):
        data = text.encode()
        while data:
            n = os.write(self._fd, data)
            data = data[n:]

    def append(self, rec: PredictionRecord):
        if rec.timestamp <= self.last_timestamp:
            raise StoreError(f"record timestamp {rec.timestamp} not after {self.last_timestamp}")
        if len(rec.power_w) != self.n_appliances:
            raise StoreError(f"record has {len(rec.power_w)} appliances, store expects {self.n_appliances}")
        try:
            # one write() per complete line keeps records whole if the process is killed
            self._write(_record_line(rec, self.config.format))
            self.unsynced += 1
            now = time.monotonic()
            if self.config.fsync == "per_record" or now - self._last_sync >= self.config.fsync_interval:
                os.fsync(self._fd)
                self.unsynced = 0
                self._last_sync = now
        except OSError as exc:
            raise StoreError(f"write to {self.path} failed: {exc}") from exc
        self.last_timestamp = rec.timestamp
        self.last_write = time.time()
        self.count += 1

    def close(self):
        if self._fd is not None:
            try:
                os.fsync(self._fd)
            finally:
                os.close(self._fd)
                self._fd = None
                self.unsynced = 0

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path, fmt=None, start=None, end=None, limit=None):
    """Parse complete records from a store file, oldest first.

    An unparseable final line (torn write) is skipped; an unparseable line
    elsewhere raises ``StoreError``.
    """
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "jsonl")
    if not path.exists():
        return []
    with path.open() as fh:
        lines = fh.read().split("\n")
    if fmt == "csv" and lines and lines[0].startswith("timestamp"):
        lines = lines[1:]
    torn = lines[-1]
    lines = lines[:-1]  # text after the final newline is incomplete or empty
    if torn:
        log.warning("%s: ignoring incomplete trailing record", path)
    out = []
    for i, line in enumerate(lines):
        if not line:
            continue
        try:
            rec = _parse_line(line, fmt)
        except (ValueError, KeyError, TypeError, StopIteration) as exc:
            raise StoreError(f"{path}: corrupt record on line {i + 1}: {exc}") from exc
        if start is not None and rec.timestamp < start:
            continue
        if end is not None and rec.timestamp > end:
            continue
        out.append(rec)
        if limit is not None and len(out) >= limit:
            break
    return out


# ------------------------------------------------------------------ buffers


class WindowBuffer:
    """FIFO ring of the most recent ``seq_len`` feature rows."""

    def __init__(self, seq_len: int, width: int = 3):
        self.seq_len = seq_len
        self._rows = deque(maxlen=seq_len)
        self.width = width

    @property
    def fill(self):
        return len(self._rows)

    @property
    def full(self):
        return len(self._rows) == self.seq_len

    def push(self, row):
        self._rows.append(np.asarray(row, dtype=np.float64).reshape(self.width))
        return self.window() if self.full else None

    def window(self):
        if not self.full:
            raise ValueError("window not full yet")
        return np.stack(self._rows)


class GridAligner:
    """Streaming zero-order hold matching :func:`nilmbench.dataio.align_to_grid`."""

    def __init__(self, interval: float):
        self.interval = interval
        self.first = None
        self.next_k = 0
        self.prev = None

    def push(self, sample: Sample):
        ts = sample.timestamp
        if self.first is None:
            self.first = ts
        elif ts <= self.prev.timestamp:
            raise ValueError(f"sample timestamp {ts} not after {self.prev.timestamp}")
        last_k = grid_size(self.first, ts, self.interval) - 1
        out = []
        while self.next_k <= last_k:
            g = grid_time(self.first, self.next_k, self.interval)
            src = sample if ts <= g + GRID_EPS * self.interval else self.prev
            out.append((g, src))
            self.next_k += 1
        self.prev = sample
        return out


def is_spurious(sample: Sample, max_power: float | None) -> bool:
    # only the aggregate feeds the model; per-line values are optional truth
    vals = [sample.main_v, sample.main_i, sample.main_p]
    if sample.spurious_flag:
        return True
    if any(not math.isfinite(v) or v < 0 for v in vals):
        return True
    return bool(max_power) and sample.main_p > max_power


# ------------------------------------------------------------------- sources


def replay_source(config: SourceConfig, stop: threading.Event):
    ds = read_csv(config.path)
    prev_ts = None
    for s in ds.samples():
        if stop.is_set():
            return
        if config.pace == "realtime" and prev_ts is not None:
            stop.wait(max(0.0, s.timestamp - prev_ts))
        elif config.pace == "fixed" and prev_ts is not None:
            stop.wait(config.interval)
        prev_ts = s.timestamp
        yield s


def sample_from_json(obj, n_channels=None) -> Sample:
    """Sample from a dict keyed by the dataset CSV column names.

    Per-line columns are optional; missing ones are NaN (no ground truth).
    """
    if n_channels is None:
        n_channels = 0
        while f"l{n_channels + 1}_p" in obj:
            n_channels += 1

    def g(key):
        v = obj.get(key)
        return math.nan if v is None else float(v)

    return Sample(
        float(obj["timestamp"]), float(obj["main_v"]), float(obj["main_i"]), float(obj["main_p"]),
        tuple(g(f"l{k + 1}_v") for k in range(n_channels)),
        tuple(g(f"l{k + 1}_i") for k in range(n_channels)),
        tuple(g(f"l{k + 1}_p") for k in range(n_channels)),
        bool(obj.get("spurious", False)),
    )


def fetch_samples(url, timeout):
    try:
        with urllib.request.urlopen(url, timeout=timeout) as resp:
            if resp.status == 204:
                return []
            body = json.loads(resp.read().decode())
    except (urllib.error.URLError, OSError, ValueError) as exc:
        raise SourceUnavailable(f"{url}: {exc}") from exc
    items = body if isinstance(body, list) else [body]
    try:
        return [sample_from_json(o) for o in items]
    except (KeyError, TypeError, ValueError) as exc:
        raise SourceUnavailable(f"{url}: malformed sample: {exc}") from exc


# ------------------------------------------------------------------ session


@dataclass(frozen=True)
class Snapshot:
    latest: dict | None
    metrics: dict | None
    health: dict


@dataclass
class SessionSummary:
    ingested: int = 0
    warmup: int = 0
    predicted: int = 0
    dropped_spurious: int = 0
    aligned: int = 0
    latency_p50_ms: float = math.nan
    latency_p99_ms: float = math.nan
    source_state: str = "idle"
    error: str | None = None

    def to_json(self):
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


class RunningMetrics:
    """Per-appliance MAE and F1 accumulated over records with ground truth."""

    def __init__(self, n, on_threshold):
        self.on_threshold = on_threshold
        self.abs_err = np.zeros(n)
        self.count = 0
        self.tp = np.zeros(n, int)
        self.fp = np.zeros(n, int)
        self.fn = np.zeros(n, int)
        self.tn = np.zeros(n, int)
        self.pred_sum = np.zeros(n)
        self.n_pred = 0

    def update(self, pred, truth):
        pred = np.asarray(pred)
        self.pred_sum += pred
        self.n_pred += 1
        if truth is None:
            return
        truth = np.asarray(truth)
        self.abs_err += np.abs(truth - pred)
        self.count += 1
        a, p = truth > self.on_threshold, pred > self.on_threshold
        self.tp += a & p
        self.fp += ~a & p
        self.fn += a & ~p
        self.tn += ~a & ~p

    def snapshot(self, names):
        out = {"records": self.n_pred, "records_with_truth": self.count,
               "mean_power_w": dict(zip(names, (self.pred_sum / max(self.n_pred, 1)).tolist()))}
        if self.count:
            f1s = []
            for k in range(len(names)):
                c = mt.ConfusionCounts(int(self.tp[k]), int(self.fp[k]), int(self.fn[k]), int(self.tn[k]))
                f1s.append(mt.f1_from_counts(c))
            out["mae"] = dict(zip(names, (self.abs_err / self.count).tolist()))
            out["f1"] = dict(zip(names, f1s))
        return out


class Session:
    """Ingest worker plus HTTP server. ``start()`` then ``wait()`` or ``stop()``."""

    def __init__(self, source: SourceConfig, model: ModelParams, store: StoreConfig,
                 port: int | None = 0, host="127.0.0.1", max_power=None, names=None,
                 linger=False, grid_interval=None, source_iter=None):
        self.source = source
        self.model = model
        self.store_config = store
        self.host, self.requested_port = host, port
        self.max_power = max_power
        self.linger = linger
        c = model.config
        self.names = list(names) if names else [f"M{k + 1}" for k in range(c.n_appliances)]
        self.grid_interval = grid_interval or c.grid_interval
        self.digest = model.digest()
        self.summary = SessionSummary()
        self.stop_event = threading.Event()
        self.done = threading.Event()
        self.running = RunningMetrics(c.n_appliances, c.on_threshold)
        self.snapshot = Snapshot(None, None, self._health())
        self._latencies = []
        self._source_iter = source_iter
        self.server = None
        self.port = None
        self._worker = None

    # -- lifecycle
    def start(self):
        self.store = PredictionStore(self.store_config, self.model.config.n_appliances)
        if self.requested_port is not None:
            self.server = ThreadingHTTPServer((self.host, self.requested_port), _make_handler(self))
            self.server.daemon_threads = True
            self.port = self.server.server_address[1]
            threading.Thread(target=self.server.serve_forever, name="http", daemon=True).start()
        self._worker = threading.Thread(target=self._run_worker, name="ingest", daemon=True)
        self._worker.start()
        return self

    def stop(self):
        self.stop_event.set()

    def wait(self, timeout=None):
        self.done.wait(timeout)
        return self.summary

    def close(self):
        self.stop()
        if self._worker is not None:
            self._worker.join()
        if self.server is not None:
            self.server.shutdown()
            self.server.server_close()

    # -- worker
    def _samples(self):
        if self._source_iter is not None:
            yield from self._source_iter
            return
        if self.source.mode == "replay":
            yield from replay_source(self.source, self.stop_event)
            return
        failures, last_ts = 0, -math.inf
        while not self.stop_event.is_set():
            try:
                batch = fetch_samples(self.source.url, self.source.timeout)
            except SourceUnavailable as exc:
                failures += 1
                delay = min(BACKOFF_CAP, 2.0 ** (failures - 1))
                self._set_source_state("degraded", str(exc))
                log.warning("source unavailable (%s); retrying in %.0f s", exc, delay)
                self.stop_event.wait(delay)
                continue
            failures = 0
            self._set_source_state("ok")
            for s in batch:
                if s.timestamp > last_ts:
                    last_ts = s.timestamp
                    yield s
            self.stop_event.wait(self.source.poll_interval)

    def _set_source_state(self, state, detail=None):
        self.summary.source_state = state
        self._source_detail = detail
        self.snapshot = Snapshot(self.snapshot.latest, self.snapshot.metrics, self._health())

    def _run_worker(self):
        aligner = GridAligner(self.grid_interval)
        buf = WindowBuffer(self.model.config.seq_len)
        self._set_source_state("ok" if self.source is None or self.source.mode == "replay" else "connecting")
        try:
            for sample in self._samples():
                if self.stop_event.is_set():
                    break
                t0 = time.perf_counter()
                self.summary.ingested += 1
                predicted = self.summary.predicted
                if is_spurious(sample, self.max_power):
                    self.summary.dropped_spurious += 1
                else:
                    for g, src in aligner.push(sample):
                        self.summary.aligned += 1
                        self._process(g, src, buf, t0)
                if self.summary.predicted == predicted:
                    self._refresh_health()
            if self.source is not None and self.source.mode == "replay":
                self._set_source_state("exhausted")
            if self.linger:
                self.stop_event.wait()
        except Exception as exc:  # surface the failure, stop ingesting
            log.exception("ingest worker failed")
            self.summary.error = str(exc)
            self._set_source_state("failed", str(exc))
        finally:
            self.store.close()
            self._finish_summary()
            self.done.set()

    def _process(self, grid_ts, sample: Sample, buf: WindowBuffer, t0):
        window = buf.push((sample.main_p, sample.main_v, sample.main_i))
        if window is None:
            self.summary.warmup += 1
            return
        power, prob = forward(self.model, window)
        pw, pr = power[:, -1], prob[:, -1]
        rec = PredictionRecord(
            float(grid_ts), tuple(pw.tolist()), tuple(bool(x) for x in (pr >= 0.5)),
            self.digest, (time.perf_counter() - t0) * 1e3,
        )
        self.store.append(rec)
        self._latencies.append((time.perf_counter() - t0) * 1e3)
        self.summary.predicted += 1
        truth = None
        if len(sample.line_p) == len(pw) and all(math.isfinite(x) for x in sample.line_p):
            truth = sample.line_p
        self.running.update(pw, truth)
        self.snapshot = Snapshot(rec.to_json(), self.running.snapshot(self.names), self._health())

    def _refresh_health(self):
        self.snapshot = Snapshot(self.snapshot.latest, self.snapshot.metrics, self._health())

    def _finish_summary(self):
        if self._latencies:
            lat = np.asarray(self._latencies)
            self.summary.latency_p50_ms = float(np.percentile(lat, 50))
            self.summary.latency_p99_ms = float(np.percentile(lat, 99))
        self.snapshot = Snapshot(self.snapshot.latest, self.snapshot.metrics, self._health())

    def _health(self):
        s = self.summary
        state = s.source_state
        status = "ok" if state in ("ok", "exhausted", "idle") and s.error is None else "degraded"
        store = getattr(self, "store", None)
        return {
            "status": status,
            "source": {"state": state, "detail": getattr(self, "_source_detail", None)},
            "samples_ingested": s.ingested,
            "records": s.predicted,
            "store_lag": {
                "unsynced_records": store.unsynced if store else 0,
                "last_write_at": store.last_write if store else None,
            },
        }

    @property
    def latencies_ms(self):
        return list(self._latencies)


def run(source: SourceConfig, model: ModelParams, store: StoreConfig, server_port=0, **kwargs) -> SessionSummary:
    """Run a session until the source is exhausted (replay) or ``stop()``."""
    session = Session(source, model, store, server_port, **kwargs).start()
    try:
        session.wait()
    finally:
        session.close()
    return session.summary


# --------------------------------------------------------------------- http


def _make_handler(session: Session):
    class Handler(BaseHTTPRequestHandler):
        def log_message(self, fmt, *args):
            log.debug("http: " + fmt, *args)

        def _json(self, obj, status=HTTPStatus.OK):
            body = json.dumps(obj).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def _empty(self):
            self.send_response(HTTPStatus.NO_CONTENT)
            self.end_headers()

        def _error(self, msg):
            self._json({"error": msg}, HTTPStatus.BAD_REQUEST)

        def do_GET(self):
            url = urlparse(self.path)
            snap = session.snapshot
            if url.path == "/latest":
                return self._json(snap.latest) if snap.latest else self._empty()
            if url.path == "/metrics":
                return self._json(snap.metrics) if snap.metrics else self._empty()
            if url.path == "/health":
                health = dict(snap.health)
                lag = dict(health["store_lag"])
                last = lag["last_write_at"]
                lag["seconds_since_write"] = None if last is None else max(0.0, time.time() - last)
                health["store_lag"] = lag
                return self._json(health)
            if url.path == "/history":
                return self._history(url.query)
            self._json({"error": f"unknown path {url.path}"}, HTTPStatus.NOT_FOUND)

        def _history(self, query):
            try:
                q = parse_qs(query, strict_parsing=bool(query))
            except ValueError:
                return self._error("malformed query string")
            unknown = set(q) - {"from", "to", "limit"}
            if unknown:
                return self._error(f"unknown parameter(s): {', '.join(sorted(unknown))}")
            try:
                start = float(q["from"][0]) if "from" in q else None
                end = float(q["to"][0]) if "to" in q else None
                limit = int(q["limit"][0]) if "limit" in q else HISTORY_LIMIT
            except ValueError:
                return self._error("from/to must be numbers and limit an integer")
            if start is not None and end is not None and start > end:
                return self._error("'from' must not exceed 'to'")
            if not 1 <= limit <= HISTORY_LIMIT:
                return self._error(f"limit must be in [1, {HISTORY_LIMIT}]")
            recs = read_records(session.store_config.path, session.store_config.format, start, end, limit)
            if not recs and session.summary.predicted == 0:
                return self._empty()
            self._json([r.to_json() for r in recs])

    return Handler


# --------------------------------------------------------------- evaluation


@dataclass
class JoinReport:
    records: int
    matched: int
    unmatched: int

    @property
    def coverage(self):
        return self.matched / self.records if self.records else 0.0


def evaluate_live(records, truth: Dataset, spec=mt.DEFAULT_SUBHORIZON, on_threshold=mt.ON_THRESHOLD,
                  names=None):
    """Join stored predictions to ground truth on exact timestamps and score them."""
    records = list(records)
    index = {float(t): i for i, t in enumerate(truth.timestamp.tolist())}
    rows, preds = [], []
    for r in records:
        i = index.get(float(r.timestamp))
        if i is not None:
            rows.append(i)
            preds.append(r.power_w)
    join = JoinReport(len(records), len(rows), len(records) - len(rows))
    if join.coverage < 0.5:
        raise JoinError(
            f"only {join.matched} of {join.records} records match ground-truth timestamps "
            f"({100 * join.coverage:.1f}%); clocks may be misaligned"
        )
    actual = truth.line_p[rows].T
    predicted = np.asarray(preds).T
    m = spec.m if isinstance(spec, mt.SubHorizonSpec) else int(spec)
    names = names or list(truth.meta.channel_names)
    return mt.report(actual, predicted, min(m, len(rows)), on_threshold, names), join

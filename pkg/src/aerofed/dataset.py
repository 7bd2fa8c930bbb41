"""Sensor-trace ingestion and dataset construction.

Handles the whitespace-separated Berkeley-lab-style trace (date, time,
epoch, mote id, temperature, humidity, light, voltage), the mote-to-device
mapping, chronological train/validation/test splitting with z-score
normalization, anomaly injection, per-UAV sensing buffers, and a synthetic
fallback generator with comparable feature magnitudes.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from datetime import datetime, timezone

import numpy as np

N_FEATURES = 4

_CACHE_MAGIC = b"AFDC"
_CACHE_VERSION = 1

# rough centers of the real trace's four features, used by the synthesizer
SYNTH_CENTERS = np.array([20.0, 40.0, 100.0, 2.7])
SYNTH_DRIFT_AMPLITUDE = np.array([3.0, 6.0, 25.0, 0.05])
SYNTH_NOISE_STD = np.array([0.6, 1.2, 6.0, 0.01])


@dataclass(frozen=True)
class SensorRecord:
    timestamp: float  # seconds since epoch
    mote_id: int
    features: np.ndarray  # (4,) temperature, humidity, light, voltage


@dataclass(frozen=True)
class ParseResult:
    records: list[SensorRecord]
    skipped: int


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Normalizer":
        std = rows.std(axis=0)
        return cls(rows.mean(axis=0), np.where(std > 0, std, 1.0))

    def normalize(self, rows: np.ndarray) -> np.ndarray:
        return (rows - self.mean) / self.std

    def denormalize(self, rows: np.ndarray) -> np.ndarray:
        return rows * self.std + self.mean


@dataclass
class SplitDatasets:
    """Disjoint normalized splits; stats always come from the train rows."""

    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    test_labels: np.ndarray  # True marks an injected (abnormal) test row
    normalizer: Normalizer


def parse_trace(lines) -> ParseResult:
    """Parse trace lines into records, skipping malformed or incomplete ones.

    Accepts any iterable of text lines; see ``read_trace`` for file input.
    """
    records = []
    skipped = 0
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if len(parts) != 8:
            skipped += 1
            continue
        try:
            ts = datetime.strptime(parts[0] + " " + parts[1], "%Y-%m-%d %H:%M:%S.%f")
            mote = int(parts[3])
            feats = np.array([float(v) for v in parts[4:8]])
        except ValueError:
            skipped += 1
            continue
        if mote < 1 or not np.all(np.isfinite(feats)):
            skipped += 1
            continue
        records.append(SensorRecord(ts.replace(tzinfo=timezone.utc).timestamp(), mote, feats))
    return ParseResult(records, skipped)


def read_trace(path) -> ParseResult:
    """Parse a trace file; gzip-compressed input is accepted."""
    opener = gzip.open if str(path).endswith(".gz") else open
    try:
        with opener(path, "rt") as fh:
            return parse_trace(fh)
    except OSError as exc:
        raise OSError(f"cannot read trace {path}: {exc}") from exc


def assign_motes_to_devices(records: list[SensorRecord], n_devices: int,
                            rng: np.random.Generator) -> list[list[SensorRecord]]:
    """Partition motes over devices: seeded shuffle then round-robin.

    With more devices than motes, motes are reused cyclically.  Each
    device's stream stays time-ordered.
    """
    motes = sorted({r.mote_id for r in records})
    if not motes:
        return [[] for _ in range(n_devices)]
    order = list(rng.permutation(len(motes)))
    by_mote: dict[int, list[SensorRecord]] = {m: [] for m in motes}
    for r in records:
        by_mote[r.mote_id].append(r)
    streams: list[list[SensorRecord]] = [[] for _ in range(n_devices)]
    for slot_idx in range(max(n_devices, len(motes))):
        device = slot_idx % n_devices
        mote = motes[order[slot_idx % len(motes)]]
        streams[device].extend(by_mote[mote])
    for s in streams:
        s.sort(key=lambda r: r.timestamp)
    return streams


class DeviceStream:
    """Sequential reader over one device's records, wrapping at the end."""

    def __init__(self, rows: np.ndarray):
        self.rows = np.asarray(rows, dtype=np.float64)
        self.cursor = 0

    def __len__(self) -> int:
        return self.rows.shape[0]

    def next(self) -> np.ndarray:
        if self.rows.shape[0] == 0:
            raise ValueError("device stream is empty")
        row = self.rows[self.cursor]
        self.cursor = (self.cursor + 1) % self.rows.shape[0]
        return row


class RingBuffer:
    """Fixed-capacity sample buffer keeping the newest rows."""

    def __init__(self, capacity: int, n_features: int = N_FEATURES):
        self.capacity = capacity
        self._data = np.zeros((capacity, n_features))
        self._size = 0
        self._head = 0

    def __len__(self) -> int:
        return self._size

    def append(self, row: np.ndarray) -> None:
        self._data[self._head] = row
        self._head = (self._head + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def view(self) -> np.ndarray:
        if self._size < self.capacity:
            return self._data[: self._size]
        return np.roll(self._data, -self._head, axis=0)


def build_uav_buffer(buffer: RingBuffer, streams: list[DeviceStream],
                     covered_devices: list[int]) -> None:
    """Append the next unread record of every covered device to a UAV buffer."""
    for k in covered_devices:
        if len(streams[k]) > 0:
            buffer.append(streams[k].next())


def split(rows: np.ndarray, ratios: tuple[float, float, float] = (0.7, 0.15, 0.15)) -> SplitDatasets:
    """Chronological split into train/validation/test plus z-score normalization.

    Rows must already be in time order; normalization statistics come from
    the train part only.
    """
    rows = np.asarray(rows, dtype=np.float64)
    if rows.shape[0] < 10:
        raise ValueError("need at least 10 records to split")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    n = rows.shape[0]
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    train, val, test = rows[:n_train], rows[n_train : n_train + n_val], rows[n_train + n_val :]
    norm = Normalizer.fit(train)
    return SplitDatasets(
        train=norm.normalize(train),
        validation=norm.normalize(val),
        test=norm.normalize(test),
        test_labels=np.zeros(test.shape[0], dtype=bool),
        normalizer=norm,
    )


def inject_anomalies(rows: np.ndarray, fraction: float, magnitude_multiplier: float,
                     rng: np.random.Generator,
                     feature_std: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Perturb an exact round(fraction * n) subset of rows with Gaussian noise.

    Noise std per feature is magnitude_multiplier times the training std
    (1.0 in normalized space unless feature_std is given).  Returns the
    modified copy and boolean abnormal labels.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rows = np.array(rows, dtype=np.float64)
    n = rows.shape[0]
    std = np.ones(rows.shape[1]) if feature_std is None else np.asarray(feature_std)
    count = int(round(fraction * n))
    chosen = rng.permutation(n)[:count]
    labels = np.zeros(n, dtype=bool)
    labels[chosen] = True
    rows[chosen] += rng.normal(size=(count, rows.shape[1])) * (magnitude_multiplier * std)
    return rows, labels


def synthesize(n_records: int, n_devices: int, rng: np.random.Generator) -> list[SensorRecord]:
    """Generate a plausible trace: sinusoidal drift plus measurement noise.

    One oscillator per device drives all four features (as the day/night
    cycle does in the real trace), with a small per-feature phase lag, so
    the features stay strongly correlated.  Periods are short enough that
    any chronological split window sees full drift cycles.
    """
    records = []
    base_phase = rng.uniform(0, 2 * math.pi, size=n_devices)
    lags = rng.uniform(-0.4, 0.4, size=(n_devices, N_FEATURES))
    periods = rng.uniform(50.0, 150.0, size=n_devices)
    for i in range(n_records):
        device = i % n_devices
        step = i // n_devices
        phase = 2 * math.pi * step / periods[device] + base_phase[device]
        drift = SYNTH_DRIFT_AMPLITUDE * np.sin(phase + lags[device])
        feats = SYNTH_CENTERS + drift + rng.normal(size=N_FEATURES) * SYNTH_NOISE_STD
        records.append(SensorRecord(float(i * 31), device + 1, feats))
    return records


def records_to_rows(records: list[SensorRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, N_FEATURES))
    return np.stack([r.features for r in records])


def write_record_cache(path, records: list[SensorRecord]) -> None:
    """Binary cache of parsed records so re-runs skip text parsing.

    Layout: 16-byte header (magic, version, record count), then per record
    six little-endian float64 values (timestamp, mote id, four features).
    """
    table = np.zeros((len(records), 2 + N_FEATURES), dtype="<f8")
    for i, r in enumerate(records):
        table[i, 0] = r.timestamp
        table[i, 1] = r.mote_id
        table[i, 2:] = r.features
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<IQ", _CACHE_VERSION, len(records)))
        fh.write(table.tobytes())


def read_record_cache(path) -> list[SensorRecord]:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16 or header[:4] != _CACHE_MAGIC:
            raise ValueError(f"{path}: not a record cache")
        version, count = struct.unpack("<IQ", header[4:])
        if version != _CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {version}")
        data = np.frombuffer(fh.read(count * (2 + N_FEATURES) * 8), dtype="<f8")
    if data.size != count * (2 + N_FEATURES):
        raise ValueError(f"{path}: truncated cache")
    table = data.reshape(count, 2 + N_FEATURES)
    return [SensorRecord(float(row[0]), int(row[1]), row[2:].astype(np.float64))
            for row in table]


def format_record(record: SensorRecord) -> str:
    """Serialize a record back to the trace line layout."""
    ts = datetime.fromtimestamp(record.timestamp, tz=timezone.utc)
    date = ts.strftime("%Y-%m-%d %H:%M:%S.%f")
    feats = " ".join(repr(float(v)) for v in record.features)
    return f"{date} {int(record.timestamp)} {record.mote_id} {feats}"

"""Speed-matrix ingestion, imputation, scaling, windowing and synthetic data.

CSV layout::

    timestamp,<sensor id 1>,...,<sensor id N>
    2016-01-01T00:00:00,52.1,,47.9
    2016-01-01T00:15:00,...

Rows are 15 minutes apart; an empty field is a missing reading.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, GeometryError
from .tasks import TaskSpec

CADENCE = np.timedelta64(15, "m")
SLOTS_PER_DAY = 96


def parse_timestamp(text: str) -> np.datetime64:
    try:
        ts = datetime.fromisoformat(text.strip())
    except ValueError:
        raise ValueError(f"not an ISO-8601 timestamp: {text!r}") from None
    if ts.tzinfo is not None:
        ts = ts.astimezone(timezone.utc).replace(tzinfo=None)
    return np.datetime64(ts, "s")


def format_timestamp(ts: np.datetime64) -> str:
    return str(np.datetime64(ts, "s"))


@dataclass
class SpeedMatrix:
    """T x N speeds in km/h; NaN marks a missing reading."""

    values: np.ndarray
    timestamps: np.ndarray
    sensor_ids: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[s]")
        self.sensor_ids = [str(s) for s in self.sensor_ids]
        if self.values.ndim != 2:
            raise DataError(f"speed matrix must be 2-D, got shape {self.values.shape}")
        t, n = self.values.shape
        if len(self.timestamps) != t or len(self.sensor_ids) != n:
            raise DataError(
                f"matrix shape {self.values.shape} disagrees with {len(self.timestamps)} "
                f"timestamps / {len(self.sensor_ids)} sensor ids"
            )
        if t > 1:
            steps = np.diff(self.timestamps)
            bad = np.flatnonzero(steps != CADENCE)
            if bad.size:
                i = int(bad[0]) + 1
                raise DataError(f"timestamp {format_timestamp(self.timestamps[i])} breaks the 15-minute cadence")
        present = self.values[~np.isnan(self.values)]
        if present.size and present.min() < 0:
            raise DataError("speeds must be non-negative")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def mask(self) -> np.ndarray:
        """True where the reading is missing."""
        return np.isnan(self.values)

    @property
    def slot_index(self) -> np.ndarray:
        """Time-of-day slot 0..95 of each row."""
        minutes = (self.timestamps - self.timestamps.astype("datetime64[D]")).astype("timedelta64[m]")
        return (minutes.astype(np.int64) // 15).astype(np.int64)

    @property
    def days(self) -> np.ndarray:
        return self.timestamps.astype("datetime64[D]")

    def rows(self, index) -> "SpeedMatrix":
        return SpeedMatrix(self.values[index], self.timestamps[index], list(self.sensor_ids))

    def select_sensors(self, count: int) -> "SpeedMatrix":
        """Keep the first ``count`` sensors."""
        if count > self.values.shape[1]:
            raise GeometryError(f"task needs {count} sensors but the data has {self.values.shape[1]}")
        return SpeedMatrix(self.values[:, :count], self.timestamps, self.sensor_ids[:count])


def load_csv(path) -> SpeedMatrix:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file", line=1) from None
        if not header or header[0].strip().lower() != "timestamp":
            raise DataError("header must start with 'timestamp'", line=1)
        sensor_ids = [h.strip() for h in header[1:]]
        if not sensor_ids:
            raise DataError("header names no sensors", line=1)
        if len(set(sensor_ids)) != len(sensor_ids):
            raise DataError("duplicate sensor ids in header", line=1)
        width = len(sensor_ids) + 1
        stamps, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"expected {width} fields, found {len(row)}", line=lineno)
            try:
                ts = parse_timestamp(row[0])
            except ValueError as exc:
                raise DataError(str(exc), line=lineno) from None
            if stamps:
                if ts <= stamps[-1]:
                    raise DataError(f"timestamp {row[0]} is not after the previous row", line=lineno)
                if ts - stamps[-1] != CADENCE:
                    raise DataError(f"timestamp {row[0]} leaves a gap in the 15-minute cadence", line=lineno)
            values = []
            for cell in row[1:]:
                cell = cell.strip()
                if not cell:
                    values.append(math.nan)
                    continue
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"not a number: {cell!r}", line=lineno) from None
                if not math.isfinite(v) or v < 0:
                    raise DataError(f"invalid speed {cell!r}", line=lineno)
                values.append(v)
            stamps.append(ts)
            rows.append(values)
    if not rows:
        raise DataError("file has no data rows", line=2)
    return SpeedMatrix(np.array(rows), np.array(stamps, dtype="datetime64[s]"), sensor_ids)


def save_csv(matrix: SpeedMatrix, path, decimals: int = 2) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["timestamp", *matrix.sensor_ids])
        for ts, row in zip(matrix.timestamps, matrix.values):
            writer.writerow(
                [format_timestamp(ts)] + ["" if math.isnan(v) else f"{v:.{decimals}f}" for v in row]
            )


# ---------------------------------------------------------------------------
# cleaning


def _as_list(matrices) -> list[SpeedMatrix]:
    return [matrices] if isinstance(matrices, SpeedMatrix) else list(matrices)


def impute(matrix: SpeedMatrix, reference=None) -> SpeedMatrix:
    """Fill each gap with the mean of the same sensor at the same time of day.

    Averages come from ``reference`` (one matrix or a list; defaults to
    ``matrix`` itself). A slot with no reference readings falls back to the
    sensor's overall reference mean. Present values are never touched.
    """
    refs = _as_list(matrix if reference is None else reference)
    missing = matrix.mask
    if not missing.any():
        return SpeedMatrix(matrix.values.copy(), matrix.timestamps, matrix.sensor_ids)
    n = matrix.values.shape[1]
    slot_sum = np.zeros((SLOTS_PER_DAY, n))
    slot_count = np.zeros((SLOTS_PER_DAY, n))
    for ref in refs:
        if ref.values.shape[1] != n:
            raise GeometryError("reference rows have a different sensor count")
        present = ~ref.mask
        np.add.at(slot_sum, ref.slot_index, np.where(present, ref.values, 0.0))
        np.add.at(slot_count, ref.slot_index, present)
    total = slot_count.sum(axis=0)
    empty = np.flatnonzero(total == 0)
    if empty.size:
        raise DataError(f"sensor {matrix.sensor_ids[empty[0]]!r} has no readings to impute from")
    sensor_mean = slot_sum.sum(axis=0) / total
    with np.errstate(invalid="ignore", divide="ignore"):
        slot_mean = np.where(slot_count > 0, slot_sum / np.maximum(slot_count, 1), sensor_mean)
    filled = matrix.values.copy()
    rows, cols = np.nonzero(missing)
    filled[rows, cols] = slot_mean[matrix.slot_index[rows], cols]
    return SpeedMatrix(filled, matrix.timestamps, matrix.sensor_ids)


def drop_sparse_days(matrix: SpeedMatrix, max_missing: float = 0.5) -> list[SpeedMatrix]:
    """Drop calendar days with more than ``max_missing`` of their cells missing.

    Returns the surviving rows as contiguous blocks so no window can span a
    dropped day.
    """
    days = matrix.days
    missing = matrix.mask.mean(axis=1)
    unique, inverse = np.unique(days, return_inverse=True)
    day_missing = np.bincount(inverse, weights=missing) / np.bincount(inverse)
    keep = day_missing[inverse] <= max_missing
    blocks = []
    edges = np.flatnonzero(np.diff(np.concatenate([[0], keep.astype(np.int8), [0]])))
    for start, stop in zip(edges[::2], edges[1::2]):
        blocks.append(matrix.rows(slice(start, stop)))
    return blocks


# ---------------------------------------------------------------------------
# scaling and splitting


@dataclass(frozen=True)
class ScalingStats:
    """Global min-max scaling to [0, 1]."""

    min: float
    max: float

    def __post_init__(self):
        if not (math.isfinite(self.min) and math.isfinite(self.max)):
            raise DataError("scaling statistics must be finite")
        if self.max <= self.min:
            raise DataError(f"degenerate scaling range: min={self.min}, max={self.max}")

    @classmethod
    def from_matrices(cls, matrices) -> "ScalingStats":
        present = np.concatenate([m.values[~m.mask] for m in _as_list(matrices)])
        if present.size == 0:
            raise DataError("no readings to compute scaling statistics from")
        return cls(float(present.min()), float(present.max()))

    @property
    def span(self) -> float:
        return self.max - self.min

    def scale(self, values):
        return (np.asarray(values, dtype=np.float64) - self.min) / self.span

    def unscale(self, values):
        return np.asarray(values, dtype=np.float64) * self.span + self.min

    def to_dict(self) -> dict:
        return {"min": self.min, "max": self.max}


def split_train_eval(matrix: SpeedMatrix, boundary) -> tuple[SpeedMatrix, SpeedMatrix]:
    """Rows before ``boundary`` train, rows at or after it evaluate."""
    if not isinstance(boundary, np.datetime64):
        boundary = parse_timestamp(str(boundary))
    ts = matrix.timestamps
    if boundary <= ts[0]:
        raise DataError(f"split boundary {boundary} leaves an empty training set")
    if boundary > ts[-1]:
        raise DataError(f"split boundary {boundary} leaves an empty evaluation set")
    cut = int(np.searchsorted(ts, boundary, side="left"))
    return matrix.rows(slice(0, cut)), matrix.rows(slice(cut, None))


def default_boundary(matrix: SpeedMatrix, train_fraction: float = 0.75) -> np.datetime64:
    """Midnight nearest to ``train_fraction`` of the rows (Jan-Sep of a year is ~0.75)."""
    ts = matrix.timestamps
    target = ts[0] + (ts[-1] - ts[0]) * train_fraction
    midnight = np.datetime64(target, "D").astype("datetime64[s]")
    if target - midnight >= np.timedelta64(12, "h"):
        midnight = midnight + np.timedelta64(1, "D")
    return min(max(midnight, ts[1]), ts[-1])


# ---------------------------------------------------------------------------
# windowing


@dataclass
class WindowedDataset:
    """Paired (M x N input, L*N label) samples in [0, 1] scale.

    ``label_speeds`` keeps the unscaled labels (km/h), ``last_input_speeds``
    the unscaled final input row and ``label_times`` the timestamp of each
    sample's first label row.
    """

    inputs: np.ndarray
    labels: np.ndarray
    stats: ScalingStats
    task: TaskSpec
    label_speeds: np.ndarray = field(default=None)
    label_times: np.ndarray = field(default=None)
    last_input_speeds: np.ndarray = field(default=None)

    def __len__(self) -> int:
        return len(self.inputs)

    def subset(self, index) -> "WindowedDataset":
        return WindowedDataset(
            self.inputs[index], self.labels[index], self.stats, self.task,
            self.label_speeds[index], self.label_times[index],
            None if self.last_input_speeds is None else self.last_input_speeds[index],
        )


def window_count(rows: int, task: TaskSpec) -> int:
    return max(rows - task.M - task.L + 1, 0)


def make_windows(matrices, task: TaskSpec, stats: ScalingStats) -> WindowedDataset:
    """Stride-1 sliding windows over each contiguous block.

    Sample k of a block uses rows ``k .. k+M-1`` as input and rows
    ``k+M .. k+M+L-1`` flattened row-major (step, segment) as label.
    """
    blocks = _as_list(matrices)
    inputs, labels, times, last_rows = [], [], [], []
    for block in blocks:
        t, n = block.values.shape
        if n != task.N:
            raise GeometryError(f"task expects N={task.N} sensors, data block has {n}")
        if block.mask.any():
            raise DataError("matrix has missing values; impute before windowing")
        if t < task.M + task.L:
            if len(blocks) == 1:
                raise DataError(f"{t} rows cannot hold one window of M+L={task.M + task.L} rows")
            continue
        count = window_count(t, task)
        view = sliding_window_view(block.values, task.M + task.L, axis=0)[:count]
        view = view.transpose(0, 2, 1)  # (count, M+L, N)
        inputs.append(view[:, : task.M, :])
        labels.append(view[:, task.M :, :].reshape(count, task.L * task.N))
        times.append(block.timestamps[task.M : task.M + count])
        last_rows.append(view[:, task.M - 1, :])
    if not inputs:
        raise DataError(f"no block holds a full window of M+L={task.M + task.L} rows")
    raw_inputs = np.concatenate(inputs)
    raw_labels = np.concatenate(labels)
    return WindowedDataset(
        inputs=stats.scale(raw_inputs),
        labels=stats.scale(raw_labels),
        stats=stats,
        task=task,
        label_speeds=raw_labels,
        label_times=np.concatenate(times),
        last_input_speeds=np.concatenate(last_rows),
    )


def build_datasets(matrix: SpeedMatrix, task: TaskSpec, boundary=None,
                   max_missing_day: float = 0.5, stats: ScalingStats | None = None):
    """Full preparation: sensor selection, split, sparse-day removal, imputation, scaling, windows.

    Imputation averages and scaling statistics use training rows only. If
    ``stats`` is given (e.g. from a checkpoint) it is used instead of being
    recomputed. Returns ``(train, eval)`` datasets.
    """
    matrix = matrix.select_sensors(task.N)
    if boundary is None:
        boundary = default_boundary(matrix)
    train, held_out = split_train_eval(matrix, boundary)
    train_blocks = drop_sparse_days(train, max_missing_day)
    eval_blocks = drop_sparse_days(held_out, max_missing_day)
    if not train_blocks:
        raise DataError("every training day exceeds the missing-data threshold")
    if not eval_blocks:
        raise DataError("every evaluation day exceeds the missing-data threshold")
    train_blocks = [impute(b, train_blocks) for b in train_blocks]
    eval_blocks = [impute(b, train_blocks) for b in eval_blocks]
    if stats is None:
        stats = ScalingStats.from_matrices(train_blocks)
    return make_windows(train_blocks, task, stats), make_windows(eval_blocks, task, stats)


# ---------------------------------------------------------------------------
# synthetic traffic


@dataclass(frozen=True)
class SyntheticProfile:
    """Shape of the generated daily speed curves.

    Each sensor gets a free-flow speed and two Gaussian rush-hour dips. A
    latent AR(1) factor shared by all sensors (with per-sensor loadings)
    and independent cell noise are both scaled by ``noise`` (km/h), so
    ``noise=0`` yields identical days.
    """

    start: str = "2016-01-01T00:00:00"
    free_flow: tuple[float, float] = (45.0, 75.0)
    am_peak_hour: float = 8.0
    pm_peak_hour: float = 17.5
    dip_depth: tuple[float, float] = (0.25, 0.55)
    dip_width_hours: tuple[float, float] = (0.75, 1.5)
    noise: float = 4.0
    latent_persistence: float = 0.97
    missing_rate: float = 0.0


def generate_synthetic(n_sensors: int, days: int, seed: int = 0,
                       profile: SyntheticProfile | None = None) -> SpeedMatrix:
    if n_sensors < 1 or days < 1:
        raise ValueError("n_sensors and days must be at least 1")
    profile = profile or SyntheticProfile()
    rng = np.random.default_rng(seed)
    hours = np.arange(SLOTS_PER_DAY) * 0.25

    free = rng.uniform(*profile.free_flow, size=n_sensors)
    curves = np.empty((SLOTS_PER_DAY, n_sensors))
    for j in range(n_sensors):
        dip = np.zeros(SLOTS_PER_DAY)
        for peak in (profile.am_peak_hour, profile.pm_peak_hour):
            centre = peak + rng.uniform(-0.5, 0.5)
            width = rng.uniform(*profile.dip_width_hours)
            depth = rng.uniform(*profile.dip_depth)
            dip += depth * np.exp(-0.5 * ((hours - centre) / width) ** 2)
        curves[:, j] = free[j] * (1.0 - np.minimum(dip, 0.9))

    steps = days * SLOTS_PER_DAY
    values = np.tile(curves, (days, 1))
    loadings = rng.uniform(0.5, 1.5, size=n_sensors)
    phi = profile.latent_persistence
    shocks = rng.standard_normal(steps) * math.sqrt(1.0 - phi * phi)
    latent = np.empty(steps)
    latent[0] = rng.standard_normal()
    for t in range(1, steps):
        latent[t] = phi * latent[t - 1] + shocks[t]
    cell = rng.standard_normal((steps, n_sensors))
    values = values + profile.noise * (latent[:, None] * loadings[None, :] + cell)
    values = np.maximum(values, 0.0)
    if profile.missing_rate > 0:
        values[rng.random((steps, n_sensors)) < profile.missing_rate] = np.nan

    start = parse_timestamp(profile.start)
    timestamps = start + np.arange(steps) * CADENCE
    sensor_ids = [f"s{j + 1:03d}" for j in range(n_sensors)]
    return SpeedMatrix(values, timestamps, sensor_ids)

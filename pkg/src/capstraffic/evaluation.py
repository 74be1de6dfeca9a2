"""Forecast error metrics, the persistence baseline and image-style dumps."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .data import WindowedDataset
from .errors import OutputError, ShapeError
from .models import to_speeds

# slack for rmse >= mae when every error has the same magnitude
_JENSEN_SLACK = 1e-12


@dataclass(frozen=True)
class MetricsReport:
    """MRE (fraction), MAE and RMSE (km/h) over ``sample_count`` values.

    Targets equal to zero are left out of the MRE average only and counted
    in ``excluded_zero_targets``.
    """

    mre: float
    mae: float
    rmse: float
    sample_count: int
    excluded_zero_targets: int = 0

    def __post_init__(self):
        if self.mae < 0 or self.mre < 0:
            raise ValueError("metrics must be non-negative")
        if self.rmse < self.mae * (1.0 - _JENSEN_SLACK):
            raise AssertionError(f"rmse {self.rmse} < mae {self.mae}")

    def to_dict(self) -> dict:
        return asdict(self)


def compute_metrics(pred, truth) -> MetricsReport:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth lengths differ", pred.shape, truth.shape)
    if pred.size == 0:
        raise ValueError("no values to evaluate")
    if np.any(truth < 0):
        raise ValueError("true speeds must be non-negative")
    abs_err = np.abs(truth - pred)
    nonzero = truth != 0
    excluded = int(pred.size - nonzero.sum())
    with np.errstate(over="ignore"):
        mre = float(np.mean(abs_err[nonzero] / truth[nonzero])) if nonzero.any() else 0.0
    # factor out the largest error so squaring cannot underflow or overflow
    peak = float(abs_err.max())
    rmse = peak * math.sqrt(float(np.mean((abs_err / peak) ** 2))) if peak > 0 else 0.0
    return MetricsReport(
        mre=mre,
        mae=float(np.mean(abs_err)),
        rmse=rmse,
        sample_count=int(pred.size),
        excluded_zero_targets=excluded,
    )


def persistence_predictions(dataset: WindowedDataset) -> tuple[np.ndarray, np.ndarray]:
    """Repeat the last observed row of each input window for every horizon step.

    Returns ``(pred, truth)`` in km/h, each shaped (samples, L*N).
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    last = dataset.last_input_speeds
    if last is None:
        last = dataset.stats.unscale(dataset.inputs[:, -1, :])
    pred = np.tile(last, (1, dataset.task.L))
    truth = dataset.label_speeds
    if truth is None:
        truth = dataset.stats.unscale(dataset.labels)
    return pred, truth


def persistence_baseline(dataset: WindowedDataset) -> MetricsReport:
    return compute_metrics(*persistence_predictions(dataset))


def evaluate_model(model, dataset: WindowedDataset, batch_size: int = 64):
    """Metrics of ``model`` on ``dataset`` after clamping and unscaling.

    Returns ``(report, pred, truth)`` with the arrays in km/h.
    """
    pred = to_speeds(model.predict_scaled(dataset.inputs, batch_size), dataset.stats)
    truth = dataset.label_speeds
    if truth is None:
        truth = dataset.stats.unscale(dataset.labels)
    return compute_metrics(pred, truth), pred, truth


# ---------------------------------------------------------------------------
# dumps


def write_pgm(path, pixels: np.ndarray) -> None:
    """Binary 8-bit portable graymap."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path} is not an 8-bit binary PGM")
    width, height = (int(v) for v in dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)


def to_gray(values: np.ndarray, lo: float, hi: float) -> np.ndarray:
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.rint(np.clip((values - lo) / (hi - lo), 0.0, 1.0) * 255).astype(np.uint8)


def save_matrix_csv(path, matrix: np.ndarray) -> None:
    np.savetxt(path, matrix, delimiter=",", fmt="%.17g")


def load_matrix_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def dump_comparison(truth, pred, prefix) -> dict[str, Path]:
    """Write ``<prefix>_{true,pred,err}.csv`` and matching ``.pgm`` images.

    Truth and prediction share one gray scale spanning their joint
    [min, max]; the absolute-error image maps 0 to black and the same span
    to white. Rows are time steps, columns are road segments.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.shape != pred.shape or truth.ndim != 2:
        raise ShapeError("comparison matrices must be 2-D and equal in shape", truth.shape, pred.shape)
    err = np.abs(truth - pred)
    lo = float(min(truth.min(), pred.min()))
    hi = float(max(truth.max(), pred.max()))
    prefix = Path(prefix)
    paths = {}
    try:
        prefix.parent.mkdir(parents=True, exist_ok=True)
        for tag, matrix, image in (
            ("true", truth, to_gray(truth, lo, hi)),
            ("pred", pred, to_gray(pred, lo, hi)),
            ("err", err, to_gray(err, 0.0, hi - lo)),
        ):
            csv_path = prefix.with_name(f"{prefix.name}_{tag}.csv")
            pgm_path = prefix.with_name(f"{prefix.name}_{tag}.pgm")
            save_matrix_csv(csv_path, matrix)
            write_pgm(pgm_path, image)
            paths[f"{tag}_csv"] = csv_path
            paths[f"{tag}_pgm"] = pgm_path
    except OSError as exc:
        raise OutputError(f"could not write comparison dump at {prefix}: {exc}") from exc
    return paths

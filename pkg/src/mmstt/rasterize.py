"""Scattered points to normalized multi-channel data cubes and training windows.

Per acquisition date the displacement field is linearly interpolated over the
Delaunay triangulation of the points onto a fine native grid, cells outside
the convex hull take the nearest point's value, and the result is reduced to
the working resolution by non-overlapping block means. Static priors get the
same treatment once; the per-pixel displacement series is then smoothed along
time and channels 0-3 are Z-scored with statistics from the training time
range only.
"""

from __future__ import annotations

import datetime as dt
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.spatial import Delaunay, QhullError, cKDTree

from .ingest import AcquisitionCalendar, MeasurementPoint
from .numerics import Tensor, load_tensor, save_tensor

CHANNEL_NAMES = ("displacement", "mean_velocity", "acceleration", "seasonality", "f_sin", "f_cos")
YEAR_DAYS = 365.25


class RasterizeError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    """Raster geometry: fine interpolation grid and coarse working grid."""

    bbox: tuple[float, float, float, float]  # xmin, ymin, xmax, ymax
    native_size: int = 256
    working_size: int = 64

    def __post_init__(self):
        xmin, ymin, xmax, ymax = self.bbox
        if not (xmax > xmin and ymax > ymin):
            raise RasterizeError(f"degenerate bounding box {self.bbox}")
        if self.native_size % self.working_size:
            raise RasterizeError(
                f"native size {self.native_size} not divisible by working size {self.working_size}"
            )

    @property
    def block(self) -> int:
        return self.native_size // self.working_size

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) coordinates of native cell centers; row 0 is the north edge."""
        xmin, ymin, xmax, ymax = self.bbox
        n = self.native_size
        xs = xmin + (np.arange(n) + 0.5) * (xmax - xmin) / n
        ys = ymax - (np.arange(n) + 0.5) * (ymax - ymin) / n
        return np.meshgrid(xs, ys)


@dataclass
class NormStats:
    """Per-channel Z-score statistics for cube channels 0-3."""

    mean: list[float]
    std: list[float]
    constant: list[bool]

    def normalize(self, x: np.ndarray, channel: int) -> np.ndarray:
        return (x - self.mean[channel]) / self.std[channel]

    def denormalize(self, x: np.ndarray, channel: int = 0) -> np.ndarray:
        return x * self.std[channel] + self.mean[channel]


@dataclass
class DataCube:
    """(T, 6, H, W) tensor with channels
    [displacement, mean_velocity, acceleration, seasonality, f_sin, f_cos]."""

    values: np.ndarray
    norm_stats: NormStats
    calendar: AcquisitionCalendar
    grid: GridSpec
    fit_range: tuple[int, int]  # [start, stop) time indices used for the stats

    @property
    def n_times(self) -> int:
        return self.values.shape[0]


@dataclass
class SampleWindow:
    """One supervised sample: `input` is cube[start : start+t_in] with all six
    channels, `target` the normalized displacement channel of the following
    t_out slices."""

    input: np.ndarray   # (T_in, 6, H, W)
    target: np.ndarray  # (T_out, 1, H, W)
    start_index: int


@dataclass(frozen=True)
class SplitPlan:
    """Chronological train/validation split over window start indices. Every
    training window ends strictly before the first validation window begins,
    so the plan also fixes the time range the Z-score statistics may see."""

    train_starts: tuple[int, ...]
    val_starts: tuple[int, ...]
    fit_stop: int


# ---------------------------------------------------------------------------
# Spatial operations
# ---------------------------------------------------------------------------


class GridInterpolator:
    """Reusable Delaunay-linear interpolator for one scatter of (x, y) sites.

    The triangulation, hull mask, and nearest-site indices are geometry-only
    and computed once; each call just evaluates a new value set.
    """

    def __init__(self, xy: np.ndarray, grid: GridSpec):
        xy = np.asarray(xy, dtype=np.float64)
        if xy.ndim != 2 or xy.shape[1] != 2 or xy.shape[0] < 3:
            raise RasterizeError(f"need >=3 (x, y) points, got array of shape {xy.shape}")
        self.grid = grid
        self._xy = xy
        try:
            self._tri = Delaunay(xy)
        except QhullError:
            raise RasterizeError("points are collinear; Delaunay triangulation undefined") from None
        gx, gy = grid.cell_centers()
        self._targets = np.column_stack([gx.ravel(), gy.ravel()])
        self._outside = self._tri.find_simplex(self._targets) < 0
        self._nearest = cKDTree(xy).query(self._targets)[1]

    def __call__(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if values.shape != (self._xy.shape[0],):
            raise RasterizeError(f"expected {self._xy.shape[0]} values, got shape {values.shape}")
        out = LinearNDInterpolator(self._tri, values)(self._targets)
        fill = self._outside | np.isnan(out)
        out[fill] = values[self._nearest[fill]]
        n = self.grid.native_size
        return out.reshape(n, n)


def interpolate_grid(xy: np.ndarray, values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Piecewise-linear interpolation of scattered values onto the native grid,
    nearest-neighbor outside the convex hull."""
    return GridInterpolator(xy, grid)(values)


def downsample(x: np.ndarray, factor: int = 4) -> np.ndarray:
    """Non-overlapping `factor` x `factor` block mean of a square raster."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise RasterizeError(f"downsample expects a square raster, got {x.shape}")
    n = x.shape[0]
    if n % factor:
        raise RasterizeError(f"extent {n} not divisible by block factor {factor}")
    m = n // factor
    # reduce each block as one contiguous row-major vector so the result is
    # bit-identical to block.mean() of the same cells
    blocks = x.reshape(m, factor, m, factor).swapaxes(1, 2).reshape(m, m, factor * factor)
    return blocks.mean(axis=-1)


def smooth_series(x: np.ndarray, window: int = 3) -> np.ndarray:
    """Centered moving average along axis 0 with the window shrinking at the
    edges (length-1 series pass through unchanged)."""
    if window != 3:
        raise RasterizeError("only the window-3 moving average is supported")
    x = np.asarray(x, dtype=np.float64)
    t = x.shape[0]
    if t == 1:
        return x.copy()
    out = np.empty_like(x)
    out[1:-1] = (x[:-2] + x[1:-1] + x[2:]) / 3.0
    out[0] = (x[0] + x[1]) / 2.0
    out[-1] = (x[-2] + x[-1]) / 2.0
    return out


def encode_day(d: float) -> tuple[float, float]:
    """Cyclical encoding of a day-of-year value."""
    if d < 0:
        raise RasterizeError(f"day of year must be >= 0, got {d}")
    angle = 2.0 * math.pi * d / YEAR_DAYS
    return math.sin(angle), math.cos(angle)


def zscore_fit_apply(cube: np.ndarray, fit_range: range) -> tuple[np.ndarray, NormStats]:
    """Standardize channels 0-3 in place-free fashion using statistics computed
    only over `fit_range` time indices. Constant channels are centered and
    flagged, with std recorded as 1."""
    if len(fit_range) == 0:
        raise RasterizeError("empty fit range")
    out = cube.copy()
    stats = NormStats(mean=[], std=[], constant=[])
    for c in range(4):
        region = cube[fit_range.start:fit_range.stop:fit_range.step, c]
        mean = float(region.mean())
        std = float(region.std())
        # tolerance absorbs interpolation round-off on truly constant fields
        constant = std <= 1e-12 * max(1.0, abs(mean))
        if constant:
            std = 1.0
        stats.mean.append(mean)
        stats.std.append(std)
        stats.constant.append(constant)
        out[:, c] = (cube[:, c] - mean) / std
    return out, stats


# ---------------------------------------------------------------------------
# Cube assembly
# ---------------------------------------------------------------------------


def bbox_of_points(points: list[MeasurementPoint]) -> tuple[float, float, float, float]:
    xs = [p.easting for p in points]
    ys = [p.northing for p in points]
    return min(xs), min(ys), max(xs), max(ys)


def build_cube(
    points: list[MeasurementPoint],
    calendar: AcquisitionCalendar,
    grid: GridSpec,
    fit_range: range | None = None,
    max_workers: int = 1,
) -> DataCube:
    """Rasterize points into the normalized 6-channel cube.

    fit_range defaults to the full time axis; pass the training range from a
    SplitPlan to keep validation data out of the statistics. Rasterization is
    independent per date, so `max_workers` > 1 parallelizes that stage.
    """
    if not points:
        raise RasterizeError("no measurement points")
    t = len(calendar)
    for p in points:
        if len(p.series) != t:
            raise RasterizeError(f"point {p.point_id}: series length != calendar length")
    if fit_range is None:
        fit_range = range(t)

    xy = np.array([[p.easting, p.northing] for p in points], dtype=np.float64)
    interp = GridInterpolator(xy, grid)
    block = grid.block
    h = w = grid.working_size

    series = np.array([p.series for p in points], dtype=np.float64)  # (n_points, T)

    def raster_at(time_index: int) -> np.ndarray:
        return downsample(interp(series[:, time_index]), block)

    cube = np.empty((t, 6, h, w), dtype=np.float64)
    if max_workers > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            for ti, frame in enumerate(pool.map(raster_at, range(t))):
                cube[ti, 0] = frame
    else:
        for ti in range(t):
            cube[ti, 0] = raster_at(ti)
    cube[:, 0] = smooth_series(cube[:, 0])

    for c, attr in ((1, "mean_velocity"), (2, "acceleration"), (3, "seasonality")):
        static = downsample(interp(np.array([getattr(p, attr) for p in points])), block)
        cube[:, c] = static[None, :, :]

    for ti, d in enumerate(calendar.days_of_year):
        f_sin, f_cos = encode_day(d)
        cube[ti, 4] = f_sin
        cube[ti, 5] = f_cos

    normalized, stats = zscore_fit_apply(cube, fit_range)
    return DataCube(
        values=normalized,
        norm_stats=stats,
        calendar=calendar,
        grid=grid,
        fit_range=(fit_range.start, fit_range.stop),
    )


# ---------------------------------------------------------------------------
# Windows and the chronological split
# ---------------------------------------------------------------------------


def make_windows(cube: DataCube, t_in: int = 10, t_out: int = 10, stride: int = 1) -> list[SampleWindow]:
    """Slice the cube into sliding input/target windows. Targets are the
    normalized displacement channel; evaluation denormalizes via norm_stats."""
    t = cube.n_times
    if t < t_in + t_out:
        raise RasterizeError(f"cube has {t} time steps; need at least {t_in + t_out}")
    windows = []
    for s in range(0, t - t_in - t_out + 1, stride):
        windows.append(
            SampleWindow(
                input=cube.values[s:s + t_in],
                target=cube.values[s + t_in:s + t_in + t_out, 0:1],
                start_index=s,
            )
        )
    return windows


def plan_split(n_times: int, t_in: int, t_out: int, val_fraction: float, stride: int = 1) -> SplitPlan:
    """Chronological split of window start indices with a no-leakage gap: a
    training window's last time index stays strictly below every validation
    window's start index."""
    if not 0.0 < val_fraction < 1.0:
        raise RasterizeError(f"val_fraction must be in (0, 1), got {val_fraction}")
    starts = list(range(0, n_times - t_in - t_out + 1, stride))
    if len(starts) < 2:
        raise RasterizeError(f"only {len(starts)} windows; cannot split")
    span = t_in + t_out
    n_val = max(1, round(val_fraction * len(starts)))
    val_starts = starts[-n_val:]
    train_starts = [s for s in starts if s + span - 1 < val_starts[0]]
    if not train_starts:
        raise RasterizeError("no training windows remain after the leakage gap; lower val_fraction")
    assert max(train_starts) + span - 1 < min(val_starts)
    return SplitPlan(
        train_starts=tuple(train_starts),
        val_starts=tuple(val_starts),
        fit_stop=max(train_starts) + span,
    )


def split_windows(windows: list[SampleWindow], plan: SplitPlan) -> tuple[list[SampleWindow], list[SampleWindow]]:
    by_start = {w.start_index: w for w in windows}
    return [by_start[s] for s in plan.train_starts], [by_start[s] for s in plan.val_starts]


# ---------------------------------------------------------------------------
# Persistence: shared binary tensor + JSON sidecar
# ---------------------------------------------------------------------------


def save_cube(path, cube: DataCube) -> None:
    """Write `<path>` (binary tensor) and `<path>.json` (semantic sidecar)."""
    save_tensor(path, Tensor(cube.values, dtype=np.float64))
    sidecar = {
        "channels": list(CHANNEL_NAMES),
        "norm_stats": {
            "mean": cube.norm_stats.mean,
            "std": cube.norm_stats.std,
            "constant": cube.norm_stats.constant,
        },
        "calendar": [d.isoformat() for d in cube.calendar.dates],
        "bbox": list(cube.grid.bbox),
        "native_size": cube.grid.native_size,
        "working_size": cube.grid.working_size,
        "fit_range": list(cube.fit_range),
    }
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cube(path) -> DataCube:
    values = load_tensor(path).data
    with open(f"{path}.json", encoding="utf-8") as fh:
        sidecar = json.load(fh)
    stats = NormStats(
        mean=sidecar["norm_stats"]["mean"],
        std=sidecar["norm_stats"]["std"],
        constant=sidecar["norm_stats"]["constant"],
    )
    calendar = AcquisitionCalendar(tuple(dt.date.fromisoformat(d) for d in sidecar["calendar"]))
    grid = GridSpec(
        bbox=tuple(sidecar["bbox"]),
        native_size=sidecar["native_size"],
        working_size=sidecar["working_size"],
    )
    return DataCube(
        values=values,
        norm_stats=stats,
        calendar=calendar,
        grid=grid,
        fit_range=tuple(sidecar["fit_range"]),
    )

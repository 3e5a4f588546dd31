"""Wafer measurement data model: ingestion, normalization, masking, statistics.

Measurement CSV format (UTF-8, decimal point, one row per metrology point):

    wafer_id,dm1,dm2,dp,x_mm,y_mm,rate_nm_min

Sensor trace CSV format:

    wafer_id,t_s,m1_sccm,m2_sccm,p_w

Grid CSV export: n rows by n columns, row 0 at minimum y, masked-out cells
written as an empty field.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ParseError, ValidationError

DEFAULT_RADIUS = 150.0  # mm, 300 mm wafer

MEASUREMENT_HEADER = ["wafer_id", "dm1", "dm2", "dp", "x_mm", "y_mm", "rate_nm_min"]
SENSOR_HEADER = ["wafer_id", "t_s", "m1_sccm", "m2_sccm", "p_w"]


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=a.dtype)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class MeasurementPoint:
    """One metrology location: wafer-centered coordinates (mm) and etch rate (nm/min)."""

    x: float
    y: float
    rate: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.rate)):
            raise ValidationError(f"non-finite measurement point ({self.x}, {self.y}, {self.rate})")
        if self.rate <= 0.0:
            raise ValidationError(f"etch rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class RecipeDelta:
    """Percent deviations from the process-of-record recipe; (0, 0, 0) marks the POR wafer."""

    dm1: float
    dm2: float
    dp: float

    def __post_init__(self):
        for name, v in (("dm1", self.dm1), ("dm2", self.dm2), ("dp", self.dp)):
            if not np.isfinite(v):
                raise ValidationError(f"recipe delta {name} must be finite, got {v}")

    @property
    def is_por(self) -> bool:
        return self.dm1 == 0.0 and self.dm2 == 0.0 and self.dp == 0.0


@dataclass(frozen=True)
class SensorVector:
    """Etch-step mean sensor values: gas flows m1, m2 (sccm) and RF power p (W)."""

    m1: float
    m2: float
    p: float

    def __post_init__(self):
        for name, v in (("m1", self.m1), ("m2", self.m2), ("p", self.p)):
            if not np.isfinite(v) or v <= 0.0:
                raise ValidationError(f"sensor component {name} must be finite and positive, got {v}")

    def as_array(self) -> np.ndarray:
        return np.array([self.m1, self.m2, self.p], dtype=float)


@dataclass(frozen=True)
class WaferMeasurement:
    """All metrology points of one wafer plus its recipe deltas."""

    wafer_id: str
    recipe: RecipeDelta
    points: tuple[MeasurementPoint, ...]

    def __post_init__(self):
        if len(self.points) < 3:
            raise ValidationError(
                f"wafer {self.wafer_id}: needs at least 3 points for an RBF fit, got {len(self.points)}"
            )
        coords = {(p.x, p.y) for p in self.points}
        if len(coords) != len(self.points):
            raise ValidationError(f"wafer {self.wafer_id}: duplicate measurement coordinates")

    @property
    def n_points(self) -> int:
        return len(self.points)

    def xy(self) -> np.ndarray:
        """Coordinates as an (N, 2) array, row order preserved."""
        return np.array([[p.x, p.y] for p in self.points], dtype=float)

    def rates(self) -> np.ndarray:
        return np.array([p.rate for p in self.points], dtype=float)


def cell_centers(n: int, radius: float) -> np.ndarray:
    """1-D cell-center coordinates: x_i = -R + 2R * (i + 0.5) / n for i in 0..n-1."""
    i = np.arange(n, dtype=float)
    return -radius + 2.0 * radius * (i + 0.5) / n


def circular_mask(n: int, radius: float) -> np.ndarray:
    """Boolean (n, n) mask, True where the cell-center coordinate satisfies x^2 + y^2 <= R^2.

    Index convention is [iy, ix] with row 0 at minimum y.
    """
    c = cell_centers(n, radius)
    xx, yy = np.meshgrid(c, c, indexing="xy")
    return _frozen(xx**2 + yy**2 <= radius**2)


@dataclass(frozen=True)
class WaferGrid:
    """An n-by-n scalar field over [-R, R]^2 with a circular validity mask.

    values[iy, ix] follows the grid CSV convention: row 0 at minimum y.
    Cells outside the wafer radius hold 0 so downstream convolution
    arithmetic stays finite.
    """

    n: int
    radius: float
    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        if self.values.shape != (self.n, self.n) or self.mask.shape != (self.n, self.n):
            raise ValidationError(
                f"grid arrays must be ({self.n}, {self.n}), got {self.values.shape} / {self.mask.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("grid values must be finite")
        expected = circular_mask(self.n, self.radius)
        if not np.array_equal(self.mask, expected):
            raise ValidationError("mask does not match the circular cell-center geometry")
        object.__setattr__(self, "values", _frozen(self.values))
        object.__setattr__(self, "mask", _frozen(self.mask))

    @classmethod
    def from_values(cls, values: np.ndarray, radius: float) -> "WaferGrid":
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        return cls(n=n, radius=radius, values=values, mask=circular_mask(n, radius))

    def masked_cell_centers(self) -> np.ndarray:
        """(k, 2) coordinates of masked-in cell centers, row-major order."""
        c = cell_centers(self.n, self.radius)
        xx, yy = np.meshgrid(c, c, indexing="xy")
        inside = self.mask
        return np.column_stack([xx[inside], yy[inside]])

    def masked_values(self) -> np.ndarray:
        return self.values[self.mask]


def apply_mask(grid: WaferGrid) -> WaferGrid:
    """Zero every cell outside the wafer radius; idempotent."""
    values = np.where(grid.mask, grid.values, 0.0)
    return replace(grid, values=values)


@dataclass(frozen=True)
class Dataset:
    """Wafers paired with their (optional) reduced sensor vectors plus dataset scalars.

    norm_scale is the maximum measured etch rate; por_mean the mean rate of the
    process-of-record wafer. Both may be inherited from a reference dataset (for
    test splits normalized against the training scale).
    """

    wafers: tuple[tuple[WaferMeasurement, SensorVector | None], ...]
    norm_scale: float
    por_mean: float

    def __post_init__(self):
        if not self.wafers:
            raise ValidationError("dataset contains no wafers")
        if self.norm_scale <= 0.0 or not np.isfinite(self.norm_scale):
            raise ValidationError(f"norm_scale must be positive and finite, got {self.norm_scale}")
        if self.por_mean <= 0.0 or not np.isfinite(self.por_mean):
            raise ValidationError(f"por_mean must be positive and finite, got {self.por_mean}")

    @classmethod
    def from_wafers(
        cls,
        wafers: Sequence[tuple[WaferMeasurement, SensorVector | None]],
        radius: float = DEFAULT_RADIUS,
        norm_scale: float | None = None,
        por_mean: float | None = None,
    ) -> "Dataset":
        """Assemble a dataset, computing norm_scale / por_mean from the data when not given."""
        for wm, _ in wafers:
            for pt in wm.points:
                if pt.x**2 + pt.y**2 > radius**2:
                    raise ValidationError(
                        f"wafer {wm.wafer_id}: point ({pt.x}, {pt.y}) lies outside radius {radius}"
                    )
        if norm_scale is None:
            norm_scale = max(p.rate for wm, _ in wafers for p in wm.points)
        if por_mean is None:
            por = [wm for wm, _ in wafers if wm.recipe.is_por]
            if not por:
                raise ValidationError("no process-of-record wafer (recipe deltas all zero) present")
            por_mean = float(np.mean(por[0].rates()))
        return cls(wafers=tuple(wafers), norm_scale=float(norm_scale), por_mean=float(por_mean))

    @property
    def n_wafers(self) -> int:
        return len(self.wafers)

    def wafer_ids(self) -> list[str]:
        return [wm.wafer_id for wm, _ in self.wafers]

    def get(self, wafer_id: str) -> tuple[WaferMeasurement, SensorVector | None]:
        for wm, sv in self.wafers:
            if wm.wafer_id == wafer_id:
                return wm, sv
        raise KeyError(wafer_id)


def load_measurements(
    path: str | Path,
    radius: float = DEFAULT_RADIUS,
    norm_scale: float | None = None,
    por_mean: float | None = None,
) -> Dataset:
    """Read a measurement CSV into a Dataset (sensor slots left unset).

    Pass norm_scale / por_mean from a reference dataset when loading a split
    that has no process-of-record wafer of its own.
    """
    path = Path(path)
    per_wafer: dict[str, dict] = {}
    order: list[str] = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        if [h.strip() for h in header] != MEASUREMENT_HEADER:
            raise ParseError(f"{path}: expected header {','.join(MEASUREMENT_HEADER)}", line=1)
        seen: set[tuple[str, float, float]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 7:
                raise ParseError(f"{path}: expected 7 fields, got {len(row)}", line=lineno)
            wid = row[0].strip()
            try:
                dm1, dm2, dp, x, y, rate = (float(v) for v in row[1:])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            key = (wid, x, y)
            if key in seen:
                raise ValidationError(f"{path} line {lineno}: duplicate point {key}")
            seen.add(key)
            rec = per_wafer.get(wid)
            if rec is None:
                per_wafer[wid] = rec = {"recipe": (dm1, dm2, dp), "points": []}
                order.append(wid)
            elif rec["recipe"] != (dm1, dm2, dp):
                raise ValidationError(
                    f"{path} line {lineno}: wafer {wid} has inconsistent recipe deltas"
                )
            rec["points"].append(MeasurementPoint(x=x, y=y, rate=rate))
    if not order:
        raise ParseError(f"{path}: no data rows", line=2)
    wafers = []
    for wid in order:
        rec = per_wafer[wid]
        wm = WaferMeasurement(
            wafer_id=wid, recipe=RecipeDelta(*rec["recipe"]), points=tuple(rec["points"])
        )
        wafers.append((wm, None))
    return Dataset.from_wafers(wafers, radius=radius, norm_scale=norm_scale, por_mean=por_mean)


def write_measurements(path: str | Path, dataset: Dataset) -> None:
    """Write the measurement CSV; floats use shortest round-trip formatting."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MEASUREMENT_HEADER)
        for wm, _ in dataset.wafers:
            r = wm.recipe
            for pt in wm.points:
                writer.writerow([wm.wafer_id, r.dm1, r.dm2, r.dp, pt.x, pt.y, pt.rate])


def load_sensor_traces(path: str | Path) -> dict[str, np.ndarray]:
    """Read a sensor trace CSV into per-wafer (T, 4) arrays of (t, m1, m2, p)."""
    path = Path(path)
    traces: dict[str, list[list[float]]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file", line=1) from None
        if [h.strip() for h in header] != SENSOR_HEADER:
            raise ParseError(f"{path}: expected header {','.join(SENSOR_HEADER)}", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise ParseError(f"{path}: expected 5 fields, got {len(row)}", line=lineno)
            try:
                sample = [float(v) for v in row[1:]]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
            traces.setdefault(row[0].strip(), []).append(sample)
    return {wid: np.array(rows, dtype=float) for wid, rows in traces.items()}


def write_sensor_traces(path: str | Path, traces: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SENSOR_HEADER)
        for wid, rows in traces.items():
            for t, m1, m2, p in rows:
                writer.writerow([wid, t, m1, m2, p])


def reduce_sensor_trace(samples: np.ndarray, window: tuple[float, float]) -> SensorVector:
    """Arithmetic mean of the (t, m1, m2, p) samples whose t lies in [t0, t1]."""
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2 or samples.shape[1] != 4:
        raise ValidationError(f"expected a (T, 4) sample array, got shape {samples.shape}")
    t0, t1 = window
    inside = (samples[:, 0] >= t0) & (samples[:, 0] <= t1)
    if not inside.any():
        raise ValidationError(f"no sensor samples inside window [{t0}, {t1}]")
    means = samples[inside, 1:].mean(axis=0)
    return SensorVector(m1=float(means[0]), m2=float(means[1]), p=float(means[2]))


def attach_sensors(dataset: Dataset, sensors: Mapping[str, SensorVector]) -> Dataset:
    """Pair each wafer with its reduced sensor vector; every wafer must be covered."""
    wafers = []
    for wm, _ in dataset.wafers:
        if wm.wafer_id not in sensors:
            raise ValidationError(f"no sensor vector for wafer {wm.wafer_id}")
        wafers.append((wm, sensors[wm.wafer_id]))
    return replace(dataset, wafers=tuple(wafers))


def normalize(dataset: Dataset) -> Dataset:
    """Divide every rate (and the dataset scalars) by norm_scale.

    With a self-computed norm_scale the maximum normalized rate is exactly 1.0;
    re-normalizing is then the identity.
    """
    scale = dataset.norm_scale
    if scale <= 0.0:
        raise ValidationError(f"norm_scale must be positive, got {scale}")
    wafers = []
    for wm, sv in dataset.wafers:
        points = tuple(
            MeasurementPoint(x=p.x, y=p.y, rate=p.rate / scale) for p in wm.points
        )
        wafers.append((replace(wm, points=points), sv))
    return Dataset(
        wafers=tuple(wafers), norm_scale=scale / scale, por_mean=dataset.por_mean / scale
    )


def wafer_mean(values_at_points: Sequence[float] | np.ndarray) -> float:
    """Mean over per-point values; the wafer statistic used for reporting."""
    values = np.asarray(values_at_points, dtype=float)
    if values.size == 0:
        raise ValidationError("wafer_mean of an empty value list")
    return float(values.mean())


def write_grid_csv(path: str | Path, grid: WaferGrid) -> None:
    """Export a grid as CSV: n rows (row 0 = minimum y), masked-out cells empty."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for iy in range(grid.n):
            row = [
                grid.values[iy, ix] if grid.mask[iy, ix] else ""
                for ix in range(grid.n)
            ]
            writer.writerow(row)


def read_grid_csv(path: str | Path, radius: float = DEFAULT_RADIUS) -> WaferGrid:
    """Read a grid CSV written by write_grid_csv; empty fields become 0."""
    path = Path(path)
    rows = []
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            try:
                rows.append([float(v) if v != "" else 0.0 for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", line=lineno) from None
    values = np.array(rows, dtype=float)
    if values.ndim != 2 or values.shape[0] != values.shape[1]:
        raise ParseError(f"{path}: grid CSV must be square, got {values.shape}")
    return WaferGrid.from_values(values, radius=radius)

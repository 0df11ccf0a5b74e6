"""Cycling-data model, file ingestion and cycle-life labelling.

On-disk layout (all plain CSV):

* manifest: ``cell_id,group_id,nominal_capacity_Ah,cycles_path,fade_path``
  with paths relative to the manifest's directory;
* cycle file: ``cycle_number,voltage_V,discharge_capacity_Ah``, one row per
  sample, grouped by cycle in ascending cycle order;
* fade file: ``cycle_number,discharge_capacity_Ah``.
"""

from __future__ import annotations

import csv
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ConfigError, CycleLifeLabelError, DataError, DatasetLoadError

MANIFEST_HEADER = ["cell_id", "group_id", "nominal_capacity_Ah", "cycles_path", "fade_path"]
CYCLES_HEADER = ["cycle_number", "voltage_V", "discharge_capacity_Ah"]
FADE_HEADER = ["cycle_number", "discharge_capacity_Ah"]

DEFAULT_THRESHOLD = 0.8


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CycleCurve:
    """Discharge capacity versus voltage for one cycle, ordered high to low voltage."""

    cycle_number: int
    voltage: np.ndarray
    discharge_capacity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "voltage", _frozen_array(self.voltage))
        object.__setattr__(self, "discharge_capacity", _frozen_array(self.discharge_capacity))


@dataclass(frozen=True)
class CellRecord:
    cell_id: str
    group_id: str
    nominal_capacity: float
    cycles: Mapping[int, CycleCurve]
    fade_cycles: np.ndarray
    fade_capacity: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "fade_cycles", _frozen_array(self.fade_cycles))
        object.__setattr__(self, "fade_capacity", _frozen_array(self.fade_capacity))
        object.__setattr__(self, "cycles", dict(sorted(self.cycles.items())))

    @property
    def fade_series(self) -> list[tuple[float, float]]:
        return list(zip(self.fade_cycles.tolist(), self.fade_capacity.tolist()))


@dataclass(frozen=True)
class CycleLifeLabel:
    cell_id: str
    cycle_life: float
    censored: bool


@dataclass(frozen=True)
class Dataset:
    """Immutable, cell_id-ordered collection of cells."""

    cells: tuple[CellRecord, ...] = field(default_factory=tuple)

    def __post_init__(self):
        cells = tuple(sorted(self.cells, key=lambda c: c.cell_id))
        counts = Counter(c.cell_id for c in cells)
        dupes = sorted(i for i, k in counts.items() if k > 1)
        if dupes:
            raise DataError(f"duplicate cell_id(s): {', '.join(dupes)}")
        object.__setattr__(self, "cells", cells)

    def __len__(self) -> int:
        return len(self.cells)

    def __iter__(self) -> Iterator[CellRecord]:
        return iter(self.cells)

    def __getitem__(self, cell_id: str) -> CellRecord:
        for cell in self.cells:
            if cell.cell_id == cell_id:
                return cell
        raise KeyError(cell_id)

    @property
    def cell_ids(self) -> list[str]:
        return [c.cell_id for c in self.cells]

    def groups(self) -> dict[str, str]:
        return {c.cell_id: c.group_id for c in self.cells}

    def subset(self, cell_ids: Iterable[str]) -> "Dataset":
        wanted = set(cell_ids)
        return Dataset(tuple(c for c in self.cells if c.cell_id in wanted))


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _curve_violations(curve: CycleCurve, key=None) -> list[str]:
    out = []
    tag = f"cycle {curve.cycle_number}"
    v, q = curve.voltage, curve.discharge_capacity
    if key is not None and key != curve.cycle_number:
        out.append(f"cycles[{key}]: key does not match cycle_number {curve.cycle_number}")
    if curve.cycle_number < 1:
        out.append(f"cycle_number: {tag} is not a positive integer")
    if v.shape != q.shape:
        out.append(f"voltage/discharge_capacity: {tag} lengths differ ({v.size} vs {q.size})")
        return out
    if v.size < 2:
        out.append(f"voltage: {tag} has fewer than 2 samples")
        return out
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
        out.append(f"voltage/discharge_capacity: {tag} contains non-finite values")
        return out
    if not np.all(np.diff(v) < 0):
        i = int(np.argmax(np.diff(v) >= 0))
        out.append(f"voltage: {tag} not strictly decreasing at sample {i + 1}")
    if not np.all(np.diff(q) >= 0):
        i = int(np.argmax(np.diff(q) < 0))
        out.append(f"discharge_capacity: {tag} decreases along discharge at sample {i + 1}")
    return out


def validate_cell(cell: CellRecord) -> list[str]:
    """Return one description per violated invariant; empty when the cell is well formed."""
    out = []
    if not cell.cell_id:
        out.append("cell_id: empty")
    if not (cell.nominal_capacity > 0):
        out.append(f"nominal_capacity: {cell.nominal_capacity} is not positive")
    for key, curve in cell.cycles.items():
        out.extend(f"{cell.cell_id}: {msg}" for msg in _curve_violations(curve, key))
    n, q = cell.fade_cycles, cell.fade_capacity
    if n.shape != q.shape:
        out.append(f"{cell.cell_id}: fade_series: cycle/capacity lengths differ")
    elif n.size:
        steps = np.diff(n)
        for i in np.flatnonzero(steps <= 0):
            out.append(
                f"{cell.cell_id}: fade_series: cycle {n[i + 1]:g} not strictly after cycle {n[i]:g}"
            )
        if not np.all(np.isfinite(q)):
            out.append(f"{cell.cell_id}: fade_series: non-finite capacity")
    return out


# ---------------------------------------------------------------------------
# Cycle-life labels
# ---------------------------------------------------------------------------

def compute_cycle_life(cell: CellRecord, threshold_fraction: float = DEFAULT_THRESHOLD) -> CycleLifeLabel:
    """First linear-interpolated crossing of ``threshold_fraction * nominal_capacity``.

    A cell that never reaches the threshold is censored at its last observed
    cycle.  A fade series that starts below the threshold raises, since that
    points at a wrong nominal capacity or mislabelled data.
    """
    if not 0 < threshold_fraction <= 1:
        raise ConfigError(f"threshold_fraction must lie in (0, 1], got {threshold_fraction}", field="threshold_fraction")
    if not cell.nominal_capacity > 0:
        raise CycleLifeLabelError(f"{cell.cell_id}: nominal capacity must be positive")
    n, q = cell.fade_cycles, cell.fade_capacity
    if n.size == 0:
        raise CycleLifeLabelError(f"{cell.cell_id}: empty fade series")
    level = threshold_fraction * cell.nominal_capacity
    if q[0] < level:
        raise CycleLifeLabelError(
            f"{cell.cell_id}: degraded at start (capacity {q[0]:g} Ah at cycle {n[0]:g} "
            f"is below threshold {level:g} Ah)"
        )
    hits = np.flatnonzero(q <= level)
    if hits.size == 0:
        return CycleLifeLabel(cell.cell_id, float(n[-1]), True)
    i = int(hits[0])
    if i == 0 or q[i] == level:
        return CycleLifeLabel(cell.cell_id, float(n[i]), False)
    frac = (q[i - 1] - level) / (q[i - 1] - q[i])
    life = n[i - 1] + frac * (n[i] - n[i - 1])
    return CycleLifeLabel(cell.cell_id, float(life), False)


def label_dataset(dataset: Dataset, threshold_fraction: float = DEFAULT_THRESHOLD) -> dict[str, CycleLifeLabel]:
    return {c.cell_id: compute_cycle_life(c, threshold_fraction) for c in dataset}


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def _fmt(x: float) -> str:
    # repr is the shortest string that round-trips the double exactly
    return repr(float(x))


def _read_rows(path: Path, header: list[str]):
    if not path.is_file():
        raise DatasetLoadError("file not found", path=path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            first = next(reader)
        except StopIteration:
            raise DatasetLoadError("empty file, expected header " + ",".join(header), path=path, line=1)
        if [h.strip() for h in first] != header:
            raise DatasetLoadError(
                f"bad header {','.join(first)!r}, expected {','.join(header)!r}", path=path, line=1
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DatasetLoadError(
                    f"expected {len(header)} fields, got {len(row)}", path=path, line=lineno
                )
            yield lineno, [c.strip() for c in row]


def _parse_float(text: str, path, lineno, name) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetLoadError(f"{name}: cannot parse {text!r} as a number", path=path, line=lineno)
    if not math.isfinite(value):
        raise DatasetLoadError(f"{name}: non-finite value {text!r}", path=path, line=lineno)
    return value


def _parse_cycle(text: str, path, lineno) -> int:
    value = _parse_float(text, path, lineno, "cycle_number")
    if value != int(value) or value < 1:
        raise DatasetLoadError(f"cycle_number: {text!r} is not a positive integer", path=path, line=lineno)
    return int(value)


def _read_cycles(path: Path) -> dict[int, CycleCurve]:
    samples: dict[int, list[tuple[float, float, int]]] = {}
    order: list[int] = []
    for lineno, (c, v, q) in _read_rows(path, CYCLES_HEADER):
        cyc = _parse_cycle(c, path, lineno)
        if order and cyc != order[-1]:
            if cyc < order[-1] or cyc in samples:
                raise DatasetLoadError(
                    f"cycle {cyc} out of order (rows must be grouped by ascending cycle)",
                    path=path, line=lineno,
                )
        if not order or cyc != order[-1]:
            order.append(cyc)
            samples[cyc] = []
        samples[cyc].append(
            (_parse_float(v, path, lineno, "voltage_V"),
             _parse_float(q, path, lineno, "discharge_capacity_Ah"),
             lineno)
        )
    curves = {}
    for cyc, rows in samples.items():
        # exact duplicate samples are dropped; anything else non-monotone is an error
        kept = [rows[0]]
        for row in rows[1:]:
            if row[:2] != kept[-1][:2]:
                kept.append(row)
        for prev, cur in zip(kept, kept[1:]):
            if not cur[0] < prev[0]:
                raise DatasetLoadError(
                    f"cycle {cyc}: voltage not strictly decreasing ({cur[0]!r} after {prev[0]!r})",
                    path=path, line=cur[2],
                )
            if cur[1] < prev[1]:
                raise DatasetLoadError(
                    f"cycle {cyc}: discharge capacity decreases ({cur[1]!r} after {prev[1]!r})",
                    path=path, line=cur[2],
                )
        if len(kept) < 2:
            raise DatasetLoadError(f"cycle {cyc}: fewer than 2 distinct samples", path=path, line=rows[0][2])
        curves[cyc] = CycleCurve(cyc, [r[0] for r in kept], [r[1] for r in kept])
    return curves


def _read_fade(path: Path) -> tuple[list[float], list[float]]:
    cycles, caps = [], []
    for lineno, (c, q) in _read_rows(path, FADE_HEADER):
        cyc = _parse_cycle(c, path, lineno)
        if cycles and cyc <= cycles[-1]:
            raise DatasetLoadError(
                f"fade cycle {cyc} not strictly after {int(cycles[-1])}", path=path, line=lineno
            )
        cycles.append(cyc)
        caps.append(_parse_float(q, path, lineno, "discharge_capacity_Ah"))
    if not cycles:
        raise DatasetLoadError("fade file has no data rows", path=path)
    return cycles, caps


def load_dataset(manifest_path) -> Dataset:
    """Read a manifest and every cell file it references."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    cells = []
    seen: dict[str, int] = {}
    for lineno, (cell_id, group_id, nominal, cycles_path, fade_path) in _read_rows(manifest_path, MANIFEST_HEADER):
        if not cell_id:
            raise DatasetLoadError("empty cell_id", path=manifest_path, line=lineno)
        if cell_id in seen:
            raise DatasetLoadError(
                f"duplicate cell_id {cell_id!r} (first seen on line {seen[cell_id]})",
                path=manifest_path, line=lineno,
            )
        seen[cell_id] = lineno
        cap = _parse_float(nominal, manifest_path, lineno, "nominal_capacity_Ah")
        if cap <= 0:
            raise DatasetLoadError(f"nominal_capacity_Ah must be positive, got {nominal}",
                                   path=manifest_path, line=lineno)
        curves = _read_cycles(base / cycles_path)
        fade_n, fade_q = _read_fade(base / fade_path)
        cells.append(CellRecord(cell_id, group_id, cap, curves, fade_n, fade_q))
    return Dataset(tuple(cells))


def write_dataset(dataset: Dataset, out_dir, cells_subdir: str = "cells") -> Path:
    """Write ``dataset`` in the on-disk schema; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / cells_subdir).mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    with open(manifest, "w", newline="") as mf:
        mw = csv.writer(mf, lineterminator="\n")
        mw.writerow(MANIFEST_HEADER)
        for cell in dataset:
            cyc_rel = f"{cells_subdir}/{cell.cell_id}_cycles.csv"
            fade_rel = f"{cells_subdir}/{cell.cell_id}_fade.csv"
            mw.writerow([cell.cell_id, cell.group_id, _fmt(cell.nominal_capacity), cyc_rel, fade_rel])
            with open(out_dir / cyc_rel, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(CYCLES_HEADER)
                for cyc, curve in cell.cycles.items():
                    for v, q in zip(curve.voltage, curve.discharge_capacity):
                        w.writerow([cyc, _fmt(v), _fmt(q)])
            with open(out_dir / fade_rel, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(FADE_HEADER)
                for n, q in zip(cell.fade_cycles, cell.fade_capacity):
                    w.writerow([int(n), _fmt(q)])
    return manifest


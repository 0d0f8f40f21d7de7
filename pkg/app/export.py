"""Writers for distance fields: CSV, legacy VTK point clouds, YAML summaries and .npz archives."""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
from pathlib import Path
from typing import Any, Iterable

import numpy as np
import yaml

from app.geometry import FloatArray
from app.solver import DistanceField

logger = logging.getLogger(__name__)

FORMAT_SUFFIX = {"csv": ".csv", "vtk": ".vtk", "summary": ".yaml"}


@dataclass(eq=False)
class FieldArchive:
    """On-surface samples of a finished run plus its report."""

    points: FloatArray
    phi: FloatArray
    report: dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_field(cls, result: DistanceField) -> FieldArchive:
        if result.surface_samples is None:
            raise ValueError("Distance field has no surface samples to export.")
        points, values = result.surface_samples
        report = result.report.to_dict() if result.report is not None else {}
        return cls(points=np.asarray(points), phi=np.asarray(values), report=report)


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_csv(archive: FieldArchive, path: str | Path) -> Path:
    path = _prepare(path)
    table = np.column_stack([archive.points, archive.phi])
    np.savetxt(path, table, fmt="%.17g", delimiter=",", header="x,y,z,phi", comments="")
    return path


def write_vtk(archive: FieldArchive, path: str | Path, title: str = "cphm geodesic distance") -> Path:
    """ASCII legacy VTK polydata: one vertex cell per point and a `phi` point scalar."""
    path = _prepare(path)
    n = len(archive.phi)
    with path.open("w", encoding="utf-8") as fh:
        fh.write("# vtk DataFile Version 3.0\n")
        fh.write(f"{title}\n")
        fh.write("ASCII\n")
        fh.write("DATASET POLYDATA\n")
        fh.write(f"POINTS {n} double\n")
        np.savetxt(fh, archive.points, fmt="%.17g")
        fh.write(f"VERTICES {n} {2 * n}\n")
        np.savetxt(fh, np.column_stack([np.ones(n, dtype=np.int64), np.arange(n)]), fmt="%d")
        fh.write(f"POINT_DATA {n}\n")
        fh.write("SCALARS phi double 1\n")
        fh.write("LOOKUP_TABLE default\n")
        np.savetxt(fh, archive.phi, fmt="%.17g")
    return path


def write_summary(report: dict[str, Any], path: str | Path) -> Path:
    path = _prepare(path)
    with path.open("w", encoding="utf-8") as fh:
        yaml.safe_dump(report, fh, sort_keys=False)
    return path


def save_field(archive: FieldArchive, path: str | Path) -> Path:
    path = _prepare(path)
    np.savez_compressed(
        path,
        points=archive.points,
        phi=archive.phi,
        report=np.array(yaml.safe_dump(archive.report, sort_keys=False)),
    )
    return path


def load_field(path: str | Path) -> FieldArchive:
    with np.load(Path(path), allow_pickle=False) as data:
        return FieldArchive(
            points=data["points"],
            phi=data["phi"],
            report=yaml.safe_load(str(data["report"])) or {},
        )


def export_outputs(archive: FieldArchive, prefix: str | Path, formats: Iterable[str]) -> list[Path]:
    written = []
    for fmt in formats:
        target = Path(f"{prefix}{FORMAT_SUFFIX[fmt]}")
        if fmt == "csv":
            written.append(write_csv(archive, target))
        elif fmt == "vtk":
            written.append(write_vtk(archive, target))
        else:
            written.append(write_summary(archive.report, target))
        logger.info("Wrote %s output to %s", fmt, target)
    return written

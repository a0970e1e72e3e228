"""Mapping of the public collection's metadata sheet onto feature-file fields.

The source sheet has one row per image with (at least) ``patientid``,
``filename`` and ``view`` columns; ``sex`` (M/F), ``age``, ``survival``
(Y/N), ``offset`` (days since symptom onset) and ``modality`` are used
when present. Only the requested view (posteroanterior by default) and
X-ray modality are kept. ``timepoint`` is the image's rank within its
patient's series, ordered by offset then filename, so it is always a
unique non-negative integer per patient.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

REQUIRED_COLUMNS = ("patientid", "filename", "view")


@dataclass(frozen=True)
class MetadataEntry:
    image_id: str
    patient_id: str
    timepoint: int
    sex: str
    age: float | None
    survival: str
    filename: str


def _map_sex(token: str) -> str:
    return {"M": "male", "F": "female"}.get(token.strip().upper(), "unknown")


def _map_survival(token: str) -> str:
    return {"Y": "survived", "N": "deceased"}.get(token.strip().upper(), "unknown")


def _map_age(token: str) -> float | None:
    token = token.strip()
    if not token:
        return None
    try:
        value = float(token)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def _map_offset(token: str) -> float:
    try:
        value = float(token.strip())
    except ValueError:
        return math.inf  # unknown offsets sort after known ones
    return value if math.isfinite(value) else math.inf


def read_metadata(path: str | Path, view: str = "PA") -> list[MetadataEntry]:
    """Parse the sheet, filter to the view, derive per-patient timepoints."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise ValueError(f"{path}: empty metadata sheet")
        missing = [c for c in REQUIRED_COLUMNS if c not in reader.fieldnames]
        if missing:
            raise ValueError(f"{path}: metadata sheet is missing columns {missing}")
        rows = list(reader)

    selected = []
    for row in rows:
        if row["view"].strip() != view:
            continue
        modality = row.get("modality", "X-ray").strip()
        if modality and modality != "X-ray":
            continue
        filename = row["filename"].strip()
        if not filename:
            raise ValueError(f"{path}: row with empty filename")
        selected.append(row)

    # rank images within each patient by (offset, filename)
    by_patient: dict[str, list[dict]] = {}
    for row in selected:
        by_patient.setdefault(row["patientid"].strip(), []).append(row)

    entries: list[MetadataEntry] = []
    seen_ids: set[str] = set()
    for patient_id, patient_rows in by_patient.items():
        patient_rows.sort(key=lambda r: (_map_offset(r.get("offset", "")), r["filename"]))
        for timepoint, row in enumerate(patient_rows):
            filename = row["filename"].strip()
            if filename in seen_ids:
                raise ValueError(f"{path}: duplicate filename {filename!r}")
            seen_ids.add(filename)
            entries.append(
                MetadataEntry(
                    image_id=filename,
                    patient_id=patient_id,
                    timepoint=timepoint,
                    sex=_map_sex(row.get("sex", "")),
                    age=_map_age(row.get("age", "")),
                    survival=_map_survival(row.get("survival", "")),
                    filename=filename,
                )
            )
    # stable overall order: by patient then timepoint
    entries.sort(key=lambda e: (e.patient_id, e.timepoint))
    return entries

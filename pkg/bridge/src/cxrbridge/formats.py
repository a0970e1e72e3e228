"""Wire formats shared with the severity toolkit.

The bridge talks to the analysis package only through files, so the
formats are implemented here against their documented layout: the
feature CSV (metadata + 18 ``out_<task>`` columns in canonical order,
optionally the ``feat_0000..feat_1023`` block) and the XGRD float32
raster.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

#: Canonical task order of the feature file columns. Must match the
#: severity toolkit's `cxrseverity.core_data.TASKS`.
TASKS: tuple[str, ...] = (
    "atelectasis",
    "consolidation",
    "infiltration",
    "pneumothorax",
    "edema",
    "emphysema",
    "fibrosis",
    "effusion",
    "pneumonia",
    "pleural_thickening",
    "cardiomegaly",
    "nodule",
    "mass",
    "hernia",
    "lung_lesion",
    "fracture",
    "lung_opacity",
    "enlarged_cardiomediastinum",
)

INTERMEDIATE_DIM = 1024

FEATURE_HEADER_BASE = ("image_id", "patient_id", "timepoint", "sex", "age", "survival")

XGRD_MAGIC = b"XGRD"
_XGRD_HEADER = struct.Struct("<4sIII")


def format_float(value: float) -> str:
    """Shortest decimal text that parses back to the exact float."""
    return repr(float(value))


def feature_header(include_intermediate: bool) -> str:
    columns = list(FEATURE_HEADER_BASE) + [f"out_{t}" for t in TASKS]
    if include_intermediate:
        columns += [f"feat_{i:04d}" for i in range(INTERMEDIATE_DIM)]
    return ",".join(columns)


def feature_line(
    image_id: str,
    patient_id: str,
    timepoint: int,
    sex: str,
    age: float | None,
    survival: str,
    outputs: np.ndarray,
    intermediate: np.ndarray | None,
) -> str:
    if outputs.shape != (len(TASKS),):
        raise ValueError(f"expected {len(TASKS)} outputs, got shape {outputs.shape}")
    fields = [
        image_id,
        patient_id,
        str(timepoint),
        "" if sex == "unknown" else sex,
        "" if age is None else format_float(age),
        "" if survival == "unknown" else survival,
    ]
    fields.extend(format_float(v) for v in outputs)
    if intermediate is not None:
        if intermediate.shape != (INTERMEDIATE_DIM,):
            raise ValueError(
                f"expected {INTERMEDIATE_DIM}-dim intermediate vector,"
                f" got shape {intermediate.shape}"
            )
        fields.extend(format_float(v) for v in intermediate)
    return ",".join(fields)


def raster_filename(image_id: str, task: str) -> str:
    return f"{image_id}__{task}.xgrd"


def write_xgrd(values: np.ndarray, path: str | Path) -> None:
    """Write a row-major float32 grid in the XGRD layout."""
    values = np.ascontiguousarray(values, dtype="<f4")
    if values.ndim != 2:
        raise ValueError(f"raster must be 2-D, got shape {values.shape}")
    if not np.all(np.isfinite(values)):
        raise ValueError("raster contains non-finite values")
    height, width = values.shape
    Path(path).write_bytes(
        _XGRD_HEADER.pack(XGRD_MAGIC, width, height, 0) + values.tobytes()
    )

"""Feature extraction and input-gradient export through the frozen network."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .formats import (
    TASKS,
    feature_header,
    feature_line,
    raster_filename,
    write_xgrd,
)
from .metadata import MetadataEntry
from .preprocess import PreprocessedImage

#: Outputs whose gradients are exported by default: the pneumonia-related
#: subset that the severity probes are built on.
DEFAULT_GRADIENT_TASKS = ("lung_opacity", "pneumonia", "infiltration", "consolidation")


@dataclass(frozen=True)
class FeatureRow:
    entry: MetadataEntry
    outputs: np.ndarray  # (18,) pre-sigmoid, canonical task order
    intermediate: np.ndarray  # (1024,) pooled trunk vector


def _to_batch(images: Sequence[PreprocessedImage]) -> torch.Tensor:
    stacked = np.stack([img.pixels for img in images]).astype(np.float32)
    return torch.from_numpy(stacked).unsqueeze(1)


def extract_rows(
    model: torch.nn.Module,
    entries: Sequence[MetadataEntry],
    images: Sequence[PreprocessedImage],
    batch_size: int = 8,
) -> list[FeatureRow]:
    """Run the frozen network over the images, in metadata order.

    Inference runs in eval mode with gradients off and a fixed batch
    order, so reruns on identical inputs and weights are bit-stable.
    """
    if len(entries) != len(images):
        raise ValueError(f"{len(entries)} metadata entries but {len(images)} images")
    model.eval()
    rows: list[FeatureRow] = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start : start + batch_size]
            batch = _to_batch(chunk)
            trunk = model.trunk_features(batch)
            outputs = model.task_outputs(trunk)
            if not torch.isfinite(outputs).all() or not torch.isfinite(trunk).all():
                raise ValueError(
                    f"non-finite network outputs for batch starting at {start}"
                )
            for i, entry in enumerate(entries[start : start + batch_size]):
                rows.append(
                    FeatureRow(
                        entry=entry,
                        outputs=outputs[i].numpy().astype(np.float64),
                        intermediate=trunk[i].numpy().astype(np.float64),
                    )
                )
    return rows


def write_feature_csv(
    rows: Sequence[FeatureRow], path: str | Path, include_intermediate: bool = True
) -> None:
    lines = [feature_header(include_intermediate)]
    for row in rows:
        entry = row.entry
        lines.append(
            feature_line(
                image_id=entry.image_id,
                patient_id=entry.patient_id,
                timepoint=entry.timepoint,
                sex=entry.sex,
                age=entry.age,
                survival=entry.survival,
                outputs=row.outputs,
                intermediate=row.intermediate if include_intermediate else None,
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def input_gradients(
    model: torch.nn.Module,
    image: PreprocessedImage,
    tasks: Sequence[str] = DEFAULT_GRADIENT_TASKS,
) -> dict[str, np.ndarray]:
    """d(pre-sigmoid output_k) / d(input pixel) for each requested task.

    Reverse-mode differentiation through the frozen network in eval
    mode; rasters come back unblurred, one 224x224 grid per task.
    """
    unknown = [t for t in tasks if t not in TASKS]
    if unknown:
        raise ValueError(f"unknown tasks: {unknown}")
    model.eval()
    x = torch.from_numpy(image.pixels[None, None].astype(np.float32))
    x.requires_grad_(True)
    outputs = model(x)
    grads: dict[str, np.ndarray] = {}
    for task in tasks:
        index = TASKS.index(task)
        (grad,) = torch.autograd.grad(
            outputs[0, index], x, retain_graph=True, create_graph=False
        )
        raster = grad[0, 0].numpy().astype(np.float32)
        if not np.all(np.isfinite(raster)):
            raise ValueError(f"non-finite gradient for task {task!r}")
        grads[task] = raster
    return grads


def export_gradients(
    model: torch.nn.Module,
    image: PreprocessedImage,
    image_id: str,
    out_dir: str | Path,
    tasks: Sequence[str] = DEFAULT_GRADIENT_TASKS,
) -> list[Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for task, raster in input_gradients(model, image, tasks).items():
        path = out_dir / raster_filename(image_id, task)
        write_xgrd(raster, path)
        written.append(path)
    return written

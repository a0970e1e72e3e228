"""Shared synthetic-cohort builders for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from cxrseverity.core_data import (
    TASKS,
    FeatureRow,
    FeatureTable,
    FeatureVector,
    GroundTruth,
    ImageRecord,
    LabelTable,
    RaterScore,
)


def make_feature_table(
    rng: np.random.Generator,
    n_patients: int = 20,
    max_images: int = 3,
    intermediate: bool = False,
    lung_opacity: np.ndarray | None = None,
) -> FeatureTable:
    """Random cohort; optionally pin the lung_opacity output per image."""
    rows = []
    image_index = 0
    for p in range(n_patients):
        patient_id = f"P{p:03d}"
        n_images = int(rng.integers(1, max_images + 1))
        sex = str(rng.choice(["male", "female", "unknown"]))
        age = float(rng.uniform(20, 90)) if rng.random() > 0.15 else None
        survival = str(rng.choice(["survived", "deceased", "unknown"]))
        for t in range(n_images):
            outputs = {task: float(v) for task, v in zip(TASKS, rng.normal(0, 2, len(TASKS)))}
            if lung_opacity is not None:
                outputs["lung_opacity"] = float(lung_opacity[image_index])
            inter = (
                tuple(float(v) for v in rng.normal(0, 1, 1024)) if intermediate else None
            )
            record = ImageRecord(
                image_id=f"img_{p:03d}_{t}",
                patient_id=patient_id,
                timepoint=t,
                sex=sex,
                age=age,
                survival=survival,
            )
            rows.append(FeatureRow(record, FeatureVector(outputs, inter)))
            image_index += 1
    return FeatureTable(rows)


def linear_extent_truth(
    table: FeatureTable,
    coef: float = 3.0,
    intercept: float = 1.0,
    noise_std: float = 0.0,
    rng: np.random.Generator | None = None,
) -> list[GroundTruth]:
    """extent = coef * lung_opacity + intercept (+ noise), clipped to range."""
    truth = []
    for row in table:
        value = coef * row.features.outputs["lung_opacity"] + intercept
        if noise_std > 0.0:
            assert rng is not None
            value += float(rng.normal(0, noise_std))
        truth.append(
            GroundTruth(
                image_id=row.record.image_id,
                extent=float(np.clip(value, 0.0, 8.0)),
                opacity=float(np.clip(value * 0.75, 0.0, 6.0)),
                n_raters=1,
            )
        )
    return truth


def make_labels(
    rng: np.random.Generator,
    image_ids: list[str],
    n_raters: int = 3,
    spread: int = 1,
) -> LabelTable:
    """Raters agree around a per-image level, wobbling by +-spread."""
    scores = []
    for image_id in image_ids:
        extent_base = int(rng.integers(0, 5))
        opacity_base = int(rng.integers(0, 4))
        for r in range(n_raters):
            er = int(np.clip(extent_base + rng.integers(-spread, spread + 1), 0, 4))
            el = int(np.clip(extent_base + rng.integers(-spread, spread + 1), 0, 4))
            opr = int(np.clip(opacity_base + rng.integers(-spread, spread + 1), 0, 3))
            opl = int(np.clip(opacity_base + rng.integers(-spread, spread + 1), 0, 3))
            scores.append(
                RaterScore(
                    image_id=image_id,
                    rater_id=f"R{r}",
                    extent_right=er,
                    extent_left=el,
                    opacity_right=opr,
                    opacity_left=opl,
                )
            )
    return LabelTable(scores)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)

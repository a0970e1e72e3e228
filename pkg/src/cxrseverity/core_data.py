"""Domain types, file formats, label aggregation, and cohort summaries.

The toolkit runs off two flat text files:

* a feature file with one row per image: metadata, the 18 pre-sigmoid
  task outputs of the frozen classifier, and optionally its 1024-dim
  pooled intermediate vector (``feat_0000`` .. ``feat_1023``, present or
  absent as a whole block);
* a label file with one row per (image, rater): per-lung ordinal
  severity scores.

Both are UTF-8 comma-separated text, LF line endings, ``.`` decimal
separator, no thousands separators. All parsing is strict: any schema
violation is rejected with the offending row number and column name.
"""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

#: Canonical task names in canonical column order. The pretrained
#: classifier exposes one pre-sigmoid output per task.
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

SEX_VALUES = ("male", "female", "unknown")
SURVIVAL_VALUES = ("survived", "deceased", "unknown")

#: Per-lung score bounds: extent 0-4 per lung, opacity 0-3 per lung.
EXTENT_LUNG_MAX = 4
OPACITY_LUNG_MAX = 3
#: Total (both lungs) score bounds.
EXTENT_MAX = 2 * EXTENT_LUNG_MAX
OPACITY_MAX = 2 * OPACITY_LUNG_MAX

FEATURE_BASE_COLUMNS = ("image_id", "patient_id", "timepoint", "sex", "age", "survival")
FEATURE_TASK_COLUMNS = tuple(f"out_{t}" for t in TASKS)
FEATURE_INTERMEDIATE_COLUMNS = tuple(f"feat_{i:04d}" for i in range(INTERMEDIATE_DIM))

LABEL_COLUMNS = (
    "image_id",
    "rater_id",
    "extent_right",
    "extent_left",
    "opacity_right",
    "opacity_left",
)

AGGREGATION_POLICIES = ("mean", "median")


class DataFormatError(ValueError):
    """An input file violates the documented schema.

    ``row`` is the 1-based line number (the header is row 1) and
    ``column`` the offending column name, when known.
    """

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None):
        prefix = ""
        if row is not None:
            prefix = f"row {row}"
        if column is not None:
            prefix += (", " if prefix else "") + f"column {column!r}"
        super().__init__(f"{prefix}: {message}" if prefix else message)
        self.row = row
        self.column = column


@dataclass(frozen=True)
class ImageRecord:
    """Per-image metadata. ``timepoint`` orders images within a patient."""

    image_id: str
    patient_id: str
    timepoint: int
    sex: str = "unknown"
    age: float | None = None
    survival: str = "unknown"

    def __post_init__(self) -> None:
        if not self.image_id:
            raise ValueError("image_id must be non-empty")
        if not self.patient_id:
            raise ValueError("patient_id must be non-empty")
        if self.timepoint < 0:
            raise ValueError(f"timepoint must be >= 0, got {self.timepoint}")
        if self.sex not in SEX_VALUES:
            raise ValueError(f"sex must be one of {SEX_VALUES}, got {self.sex!r}")
        if self.survival not in SURVIVAL_VALUES:
            raise ValueError(
                f"survival must be one of {SURVIVAL_VALUES}, got {self.survival!r}"
            )
        if self.age is not None and not math.isfinite(self.age):
            raise ValueError(f"age must be finite, got {self.age!r}")


@dataclass(frozen=True)
class FeatureVector:
    """The 18 pre-sigmoid task outputs plus the optional 1024-dim vector."""

    outputs: Mapping[str, float]
    intermediate: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if set(self.outputs) != set(TASKS):
            missing = sorted(set(TASKS) - set(self.outputs))
            extra = sorted(set(self.outputs) - set(TASKS))
            raise ValueError(
                f"outputs must cover exactly the {len(TASKS)} canonical tasks"
                f" (missing {missing}, unexpected {extra})"
            )
        for task, value in self.outputs.items():
            if not math.isfinite(value):
                raise ValueError(f"output {task!r} is not finite: {value!r}")
        if self.intermediate is not None:
            if len(self.intermediate) != INTERMEDIATE_DIM:
                raise ValueError(
                    f"intermediate vector must have length {INTERMEDIATE_DIM},"
                    f" got {len(self.intermediate)}"
                )
            if not all(math.isfinite(v) for v in self.intermediate):
                raise ValueError("intermediate vector contains non-finite values")


@dataclass(frozen=True)
class FeatureRow:
    record: ImageRecord
    features: FeatureVector


class FeatureTable:
    """Ordered collection of (ImageRecord, FeatureVector) rows.

    Enforces image_id uniqueness, (patient_id, timepoint) uniqueness,
    and that the intermediate block is present for all rows or none.
    """

    def __init__(self, rows: Sequence[FeatureRow]):
        self._rows = list(rows)
        seen_images: set[str] = set()
        seen_series: set[tuple[str, int]] = set()
        for row in self._rows:
            rec = row.record
            if rec.image_id in seen_images:
                raise ValueError(f"duplicate image_id {rec.image_id!r}")
            key = (rec.patient_id, rec.timepoint)
            if key in seen_series:
                raise ValueError(f"duplicate (patient_id, timepoint) {key!r}")
            seen_images.add(rec.image_id)
            seen_series.add(key)
        present = {row.features.intermediate is not None for row in self._rows}
        if len(present) > 1:
            raise ValueError("intermediate block must be present for all rows or none")
        self._by_id = {row.record.image_id: row for row in self._rows}

    def __len__(self) -> int:
        return len(self._rows)

    def __iter__(self) -> Iterator[FeatureRow]:
        return iter(self._rows)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureTable):
            return NotImplemented
        return self._rows == other._rows

    @property
    def rows(self) -> list[FeatureRow]:
        return list(self._rows)

    @property
    def has_intermediate(self) -> bool:
        return bool(self._rows) and self._rows[0].features.intermediate is not None

    def image_ids(self) -> list[str]:
        return [row.record.image_id for row in self._rows]

    def patient_ids(self) -> list[str]:
        """Distinct patient ids in first-appearance order."""
        seen: dict[str, None] = {}
        for row in self._rows:
            seen.setdefault(row.record.patient_id, None)
        return list(seen)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._by_id

    def get(self, image_id: str) -> FeatureRow:
        try:
            return self._by_id[image_id]
        except KeyError:
            raise KeyError(f"unknown image_id {image_id!r}") from None

    def records(self) -> list[ImageRecord]:
        return [row.record for row in self._rows]


@dataclass(frozen=True)
class RaterScore:
    """One rater's per-lung scores for one image."""

    image_id: str
    rater_id: str
    extent_right: int
    extent_left: int
    opacity_right: int
    opacity_left: int

    def __post_init__(self) -> None:
        for name, value, upper in (
            ("extent_right", self.extent_right, EXTENT_LUNG_MAX),
            ("extent_left", self.extent_left, EXTENT_LUNG_MAX),
            ("opacity_right", self.opacity_right, OPACITY_LUNG_MAX),
            ("opacity_left", self.opacity_left, OPACITY_LUNG_MAX),
        ):
            if not 0 <= value <= upper:
                raise ValueError(f"{name} must be in 0..{upper}, got {value}")

    @property
    def extent_total(self) -> int:
        return self.extent_right + self.extent_left

    @property
    def opacity_total(self) -> int:
        return self.opacity_right + self.opacity_left


class LabelTable:
    """All rater rows, at most one per (image_id, rater_id)."""

    def __init__(self, scores: Sequence[RaterScore]):
        self._scores = list(scores)
        seen: set[tuple[str, str]] = set()
        for s in self._scores:
            key = (s.image_id, s.rater_id)
            if key in seen:
                raise ValueError(f"duplicate (image_id, rater_id) {key!r}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self._scores)

    def __iter__(self) -> Iterator[RaterScore]:
        return iter(self._scores)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelTable):
            return NotImplemented
        return self._scores == other._scores

    @property
    def scores(self) -> list[RaterScore]:
        return list(self._scores)

    def image_ids(self) -> list[str]:
        """Distinct image ids in first-appearance order."""
        seen: dict[str, None] = {}
        for s in self._scores:
            seen.setdefault(s.image_id, None)
        return list(seen)

    def by_image(self) -> dict[str, list[RaterScore]]:
        out: dict[str, list[RaterScore]] = {}
        for s in self._scores:
            out.setdefault(s.image_id, []).append(s)
        return out


@dataclass(frozen=True)
class GroundTruth:
    """Consensus severity scores for one image."""

    image_id: str
    extent: float
    opacity: float
    n_raters: int

    def __post_init__(self) -> None:
        if not 0 <= self.extent <= EXTENT_MAX:
            raise ValueError(f"extent must be in [0, {EXTENT_MAX}], got {self.extent}")
        if not 0 <= self.opacity <= OPACITY_MAX:
            raise ValueError(f"opacity must be in [0, {OPACITY_MAX}], got {self.opacity}")
        if self.n_raters < 1:
            raise ValueError("n_raters must be >= 1")

    def value(self, target: str) -> float:
        if target == "extent":
            return self.extent
        if target == "opacity":
            return self.opacity
        raise ValueError(f"unknown target {target!r}")


@dataclass(frozen=True)
class CohortSummary:
    """Counts and age statistics over a feature table.

    Sex is counted per image; images with missing sex fall under
    ``sex_unknown``. Age statistics exclude missing ages and use the
    population (n) standard deviation convention.
    """

    n_images: int
    n_patients: int
    male: int
    female: int
    sex_unknown: int
    age_mean: float | None
    age_std: float | None
    age_mean_by_sex: dict[str, float] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# file parsing / writing


def _read_lines(path: str | Path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _split_row(line: str, n_columns: int, row: int) -> list[str]:
    fields = line.split(",")
    if len(fields) != n_columns:
        raise DataFormatError(
            f"expected {n_columns} fields, got {len(fields)}", row=row
        )
    return fields


def _parse_float(text: str, row: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataFormatError(f"not a number: {text!r}", row=row, column=column) from None
    if not math.isfinite(value):
        raise DataFormatError(f"non-finite value: {text!r}", row=row, column=column)
    return value


def _parse_int(text: str, row: int, column: str) -> int:
    try:
        return int(text)
    except ValueError:
        raise DataFormatError(f"not an integer: {text!r}", row=row, column=column) from None


def _parse_enum(text: str, allowed: tuple[str, ...], row: int, column: str) -> str:
    value = text if text else "unknown"
    if value not in allowed:
        raise DataFormatError(
            f"must be one of {allowed} or empty, got {text!r}", row=row, column=column
        )
    return value


def parse_features(path: str | Path) -> FeatureTable:
    """Parse a feature file into a validated :class:`FeatureTable`.

    The header must match the documented schema exactly: the six
    metadata columns, the 18 ``out_<task>`` columns in canonical order,
    then optionally the full ``feat_0000``..``feat_1023`` block.
    """
    lines = _read_lines(path)
    if not lines:
        raise DataFormatError("empty file: missing header", row=1)
    header = lines[0].split(",")
    base_and_tasks = FEATURE_BASE_COLUMNS + FEATURE_TASK_COLUMNS
    with_block = base_and_tasks + FEATURE_INTERMEDIATE_COLUMNS
    if tuple(header) == base_and_tasks:
        has_intermediate = False
    elif tuple(header) == with_block:
        has_intermediate = True
    else:
        column = _first_header_mismatch(header, base_and_tasks, with_block)
        raise DataFormatError(
            "header does not match the feature-file schema", row=1, column=column
        )

    rows: list[FeatureRow] = []
    seen_images: set[str] = set()
    seen_series: set[tuple[str, int]] = set()
    for i, line in enumerate(lines[1:], start=2):
        fields = _split_row(line, len(header), i)
        values = dict(zip(header, fields))

        image_id = values["image_id"]
        if not image_id:
            raise DataFormatError("image_id must be non-empty", row=i, column="image_id")
        if image_id in seen_images:
            raise DataFormatError(
                f"duplicate image_id {image_id!r}", row=i, column="image_id"
            )
        patient_id = values["patient_id"]
        if not patient_id:
            raise DataFormatError(
                "patient_id must be non-empty", row=i, column="patient_id"
            )
        timepoint = _parse_int(values["timepoint"], i, "timepoint")
        if timepoint < 0:
            raise DataFormatError(
                f"timepoint must be >= 0, got {timepoint}", row=i, column="timepoint"
            )
        if (patient_id, timepoint) in seen_series:
            raise DataFormatError(
                f"duplicate (patient_id, timepoint) ({patient_id!r}, {timepoint})",
                row=i,
                column="timepoint",
            )
        sex = _parse_enum(values["sex"], SEX_VALUES, i, "sex")
        age = None if values["age"] == "" else _parse_float(values["age"], i, "age")
        survival = _parse_enum(values["survival"], SURVIVAL_VALUES, i, "survival")

        outputs = {
            task: _parse_float(values[col], i, col)
            for task, col in zip(TASKS, FEATURE_TASK_COLUMNS)
        }
        intermediate = None
        if has_intermediate:
            intermediate = tuple(
                _parse_float(values[col], i, col)
                for col in FEATURE_INTERMEDIATE_COLUMNS
            )

        record = ImageRecord(
            image_id=image_id,
            patient_id=patient_id,
            timepoint=timepoint,
            sex=sex,
            age=age,
            survival=survival,
        )
        rows.append(FeatureRow(record, FeatureVector(outputs, intermediate)))
        seen_images.add(image_id)
        seen_series.add((patient_id, timepoint))

    return FeatureTable(rows)


def _first_header_mismatch(
    header: list[str],
    short_schema: tuple[str, ...],
    long_schema: tuple[str, ...],
) -> str | None:
    expected = long_schema if len(header) > len(short_schema) else short_schema
    for got, want in zip(header, expected):
        if got != want:
            return want
    if len(header) < len(expected):
        return expected[len(header)]
    if len(header) > len(expected):
        return header[len(expected)]
    return None


def format_float(value: float) -> str:
    """Render a float so that parsing the text recovers the exact value."""
    return repr(float(value))


def write_features(table: FeatureTable, path: str | Path) -> None:
    """Write ``table`` in the feature-file format (exact round-trip)."""
    lines = [",".join(FEATURE_BASE_COLUMNS + FEATURE_TASK_COLUMNS
                      + (FEATURE_INTERMEDIATE_COLUMNS if table.has_intermediate else ()))]
    for row in table:
        rec, feats = row.record, row.features
        fields = [
            rec.image_id,
            rec.patient_id,
            str(rec.timepoint),
            "" if rec.sex == "unknown" else rec.sex,
            "" if rec.age is None else format_float(rec.age),
            "" if rec.survival == "unknown" else rec.survival,
        ]
        fields.extend(format_float(feats.outputs[t]) for t in TASKS)
        if table.has_intermediate:
            assert feats.intermediate is not None
            fields.extend(format_float(v) for v in feats.intermediate)
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def parse_labels(path: str | Path) -> LabelTable:
    """Parse a label file into a validated :class:`LabelTable`."""
    lines = _read_lines(path)
    if not lines:
        raise DataFormatError("empty file: missing header", row=1)
    if tuple(lines[0].split(",")) != LABEL_COLUMNS:
        raise DataFormatError(
            f"header must be {','.join(LABEL_COLUMNS)!r}", row=1
        )
    scores: list[RaterScore] = []
    seen: set[tuple[str, str]] = set()
    for i, line in enumerate(lines[1:], start=2):
        fields = _split_row(line, len(LABEL_COLUMNS), i)
        image_id, rater_id = fields[0], fields[1]
        if not image_id:
            raise DataFormatError("image_id must be non-empty", row=i, column="image_id")
        if not rater_id:
            raise DataFormatError("rater_id must be non-empty", row=i, column="rater_id")
        if (image_id, rater_id) in seen:
            raise DataFormatError(
                f"duplicate (image_id, rater_id) ({image_id!r}, {rater_id!r})", row=i
            )
        parsed = {
            col: _parse_int(fields[j], i, col)
            for j, col in enumerate(LABEL_COLUMNS)
            if col not in ("image_id", "rater_id")
        }
        try:
            score = RaterScore(image_id=image_id, rater_id=rater_id, **parsed)
        except ValueError as exc:
            column = str(exc).split(" ", 1)[0]
            raise DataFormatError(str(exc), row=i, column=column) from None
        scores.append(score)
        seen.add((image_id, rater_id))
    return LabelTable(scores)


def write_labels(table: LabelTable, path: str | Path) -> None:
    lines = [",".join(LABEL_COLUMNS)]
    for s in table:
        lines.append(
            f"{s.image_id},{s.rater_id},{s.extent_right},{s.extent_left},"
            f"{s.opacity_right},{s.opacity_left}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# aggregation and summaries


def aggregate_labels(labels: LabelTable, policy: str = "mean") -> list[GroundTruth]:
    """Consolidate rater totals into one :class:`GroundTruth` per image.

    ``policy`` is ``"mean"`` (default) or ``"median"`` over the raters'
    total scores. Results follow the label table's first-appearance
    image order. A single-rater image passes its totals through
    unchanged under either policy.
    """
    if policy not in AGGREGATION_POLICIES:
        raise ValueError(f"policy must be one of {AGGREGATION_POLICIES}, got {policy!r}")
    if len(labels) == 0:
        raise ValueError("cannot aggregate an empty label table")
    reduce = statistics.fmean if policy == "mean" else statistics.median
    out: list[GroundTruth] = []
    for image_id, scores in _ordered_by_image(labels):
        extent = reduce([float(s.extent_total) for s in scores])
        opacity = reduce([float(s.opacity_total) for s in scores])
        out.append(
            GroundTruth(
                image_id=image_id,
                extent=float(extent),
                opacity=float(opacity),
                n_raters=len(scores),
            )
        )
    return out


def _ordered_by_image(labels: LabelTable) -> list[tuple[str, list[RaterScore]]]:
    grouped = labels.by_image()
    return [(image_id, grouped[image_id]) for image_id in labels.image_ids()]


def truth_by_id(truth: Sequence[GroundTruth]) -> dict[str, GroundTruth]:
    return {t.image_id: t for t in truth}


def cohort_summary(table: FeatureTable) -> CohortSummary:
    """Counts and age statistics for the cohort behind ``table``."""
    records = table.records()
    male = sum(1 for r in records if r.sex == "male")
    female = sum(1 for r in records if r.sex == "female")
    ages = [r.age for r in records if r.age is not None]
    by_sex: dict[str, float] = {}
    for sex in ("male", "female"):
        sex_ages = [r.age for r in records if r.sex == sex and r.age is not None]
        if sex_ages:
            by_sex[sex] = statistics.fmean(sex_ages)
    return CohortSummary(
        n_images=len(records),
        n_patients=len(table.patient_ids()),
        male=male,
        female=female,
        sex_unknown=len(records) - male - female,
        age_mean=statistics.fmean(ages) if ages else None,
        age_std=statistics.pstdev(ages) if ages else None,
        age_mean_by_sex=by_sex,
    )

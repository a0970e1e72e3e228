"""Repeated patient-grouped evaluation of the linear probes.

Protocol: images are split roughly 50/50 into train and test with all
images of a patient kept on one side, a probe is fit on the train side
and scored on the test side with four metrics (Pearson correlation, R
squared, MAE, MSE), and the whole thing is repeated over independently
seeded splits to obtain a mean and standard deviation per metric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core_data import FeatureTable, GroundTruth, ImageRecord, truth_by_id
from .regress import design_matrix, feature_set_width, fit_ols, predict


@dataclass(frozen=True)
class SplitPlan:
    """One patient-grouped train/test split.

    Image lists preserve the input record order; patients never span
    both sides.
    """

    seed: int
    repetition: int
    train_patients: frozenset[str]
    test_patients: frozenset[str]
    train_images: tuple[str, ...]
    test_images: tuple[str, ...]


def grouped_split(
    records: Sequence[ImageRecord],
    ratio: float,
    seed: int,
    repetition: int,
) -> SplitPlan:
    """Split ``records`` by patient, balancing image counts.

    Patients are shuffled by a generator seeded from ``(seed,
    repetition)`` and assigned greedily, in shuffled order, to the train
    side until the train image count first reaches ``ratio`` times the
    total; the remainder goes to test. Deterministic: the same (seed,
    repetition) pair always yields the same plan, independently of other
    repetitions.

    If the greedy pass would leave the test side empty (one patient
    holding more than a ``1 - ratio`` share of the images and shuffled
    last), that final patient is placed on the test side instead, so
    both sides are always populated.
    """
    if not 0 < ratio < 1:
        raise ValueError(f"ratio must be in (0, 1), got {ratio}")
    by_patient: dict[str, list[str]] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec.image_id)
    patients = sorted(by_patient)
    if len(patients) < 2:
        raise ValueError(f"need at least 2 distinct patients, got {len(patients)}")

    rng = np.random.default_rng((seed, repetition))
    order = [patients[i] for i in rng.permutation(len(patients))]

    total = sum(len(images) for images in by_patient.values())
    threshold = ratio * total
    train: set[str] = set()
    count = 0
    for i, patient in enumerate(order):
        if count >= threshold:
            break
        if i == len(order) - 1 and count > 0:
            break  # keep the test side non-empty
        train.add(patient)
        count += len(by_patient[patient])
    test = set(patients) - train

    train_images = tuple(r.image_id for r in records if r.patient_id in train)
    test_images = tuple(r.image_id for r in records if r.patient_id in test)
    return SplitPlan(
        seed=seed,
        repetition=repetition,
        train_patients=frozenset(train),
        test_patients=frozenset(test),
        train_images=train_images,
        test_images=test_images,
    )


# ---------------------------------------------------------------------------
# metrics


def pearson(a: Sequence[float], b: Sequence[float]) -> float:
    """Sample Pearson correlation; 0.0 when either input is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {a.shape}, {b.shape}")
    if a.shape[0] < 2:
        raise ValueError("need at least 2 points")
    # constancy checked exactly: the mean of n equal floats need not
    # round back to that float, which would leak noise past a
    # denominator-only guard
    if np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    da = a - a.mean()
    db = b - b.mean()
    denom = np.sqrt((da * da).sum() * (db * db).sum())
    if denom == 0.0:
        return 0.0
    return float((da * db).sum() / denom)


def r2(y: Sequence[float], yhat: Sequence[float]) -> float:
    """Coefficient of determination against the evaluation-set mean.

    Can be negative for predictors worse than that mean; undefined
    (raises) when the truth is constant.
    """
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1:
        raise ValueError(f"inputs must be equal-length vectors, got {y.shape}, {yhat.shape}")
    if y.shape[0] < 2:
        raise ValueError("need at least 2 points")
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0.0:
        raise ValueError("R^2 is undefined for constant truth")
    ss_res = float(((y - yhat) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def mae(y: Sequence[float], yhat: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1 or y.shape[0] == 0:
        raise ValueError("inputs must be equal-length non-empty vectors")
    return float(np.abs(y - yhat).mean())


def mse(y: Sequence[float], yhat: Sequence[float]) -> float:
    y = np.asarray(y, dtype=float)
    yhat = np.asarray(yhat, dtype=float)
    if y.shape != yhat.shape or y.ndim != 1 or y.shape[0] == 0:
        raise ValueError("inputs must be equal-length non-empty vectors")
    return float(((y - yhat) ** 2).mean())


# ---------------------------------------------------------------------------
# repeated evaluation


@dataclass(frozen=True)
class RepetitionRecord:
    """Metrics of one repetition, retained for audit export."""

    repetition: int
    n_train: int
    n_test: int
    pearson: float
    r2: float
    mae: float
    mse: float


@dataclass
class MetricsSummary:
    """Mean and sample (n-1) std of each metric over the repetitions.

    ``repetitions`` keeps the per-repetition records and ``scatter``
    keeps (image_id, truth, prediction) for the test side of repetition
    0, for plot exports. A summary with ``n_reps == 0`` marks a
    feature-set/task cell that was skipped (see ``note``).
    """

    task: str
    feature_set: str
    n_params: int
    n_reps: int
    pearson_mean: float = float("nan")
    pearson_std: float | None = None
    r2_mean: float = float("nan")
    r2_std: float | None = None
    mae_mean: float = float("nan")
    mae_std: float | None = None
    mse_mean: float = float("nan")
    mse_std: float | None = None
    note: str = ""
    repetitions: list[RepetitionRecord] = field(default_factory=list)
    scatter: dict[str, tuple[float, float]] = field(default_factory=dict)

    @classmethod
    def skipped(cls, task: str, feature_set: str, reason: str) -> "MetricsSummary":
        return cls(
            task=task,
            feature_set=feature_set,
            n_params=feature_set_width(feature_set) + 1,
            n_reps=0,
            note=reason,
        )


def _mean_std(values: list[float]) -> tuple[float, float | None]:
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    std = float(arr.std(ddof=1)) if arr.size >= 2 else None
    return mean, std


def run_repeated_eval(
    features: FeatureTable,
    truth: Sequence[GroundTruth],
    feature_set: str,
    target: str,
    n_reps: int = 50,
    ratio: float = 0.5,
    seed: int = 0,
) -> MetricsSummary:
    """Fit and score the probe over ``n_reps`` patient-grouped splits.

    Each repetition derives its own random stream from (seed,
    repetition), so repetitions are reproducible independently and
    order-free. All four metrics are computed on the held-out test side
    only.
    """
    if n_reps < 1:
        raise ValueError("n_reps must be >= 1")
    truth_map = truth_by_id(truth)
    labeled = [rec for rec in features.records() if rec.image_id in truth_map]
    missing = sorted(set(truth_map) - {rec.image_id for rec in labeled})
    if missing:
        raise ValueError(f"labeled images missing from the feature table: {missing[:5]}")
    if not labeled:
        raise ValueError("no labeled images to evaluate on")

    reps: list[RepetitionRecord] = []
    scatter: dict[str, tuple[float, float]] = {}
    for rep in range(n_reps):
        plan = grouped_split(labeled, ratio, seed, rep)
        train_ids = list(plan.train_images)
        test_ids = list(plan.test_images)
        x_train = design_matrix(features, feature_set, train_ids)
        x_test = design_matrix(features, feature_set, test_ids)
        y_train = np.array([truth_map[i].value(target) for i in train_ids])
        y_test = np.array([truth_map[i].value(target) for i in test_ids])
        model = fit_ols(x_train, y_train, feature_set=feature_set, target=target)
        y_pred = predict(model, x_test)
        reps.append(
            RepetitionRecord(
                repetition=rep,
                n_train=len(train_ids),
                n_test=len(test_ids),
                pearson=pearson(y_test, y_pred),
                r2=r2(y_test, y_pred),
                mae=mae(y_test, y_pred),
                mse=mse(y_test, y_pred),
            )
        )
        if rep == 0:
            scatter = {
                i: (float(t), float(p))
                for i, t, p in zip(test_ids, y_test, y_pred)
            }

    pearson_mean, pearson_std = _mean_std([r.pearson for r in reps])
    r2_mean, r2_std = _mean_std([r.r2 for r in reps])
    mae_mean, mae_std = _mean_std([r.mae for r in reps])
    mse_mean, mse_std = _mean_std([r.mse for r in reps])
    return MetricsSummary(
        task=target,
        feature_set=feature_set,
        n_params=feature_set_width(feature_set) + 1,
        n_reps=n_reps,
        pearson_mean=pearson_mean,
        pearson_std=pearson_std,
        r2_mean=r2_mean,
        r2_std=r2_std,
        mae_mean=mae_mean,
        mae_std=mae_std,
        mse_mean=mse_mean,
        mse_std=mse_std,
        repetitions=reps,
        scatter=scatter,
    )


# ---------------------------------------------------------------------------
# reporting


TABLE_COLUMNS = ("task", "features", "#params", "pearson", "r2", "mae", "mse")


def _cell(mean: float, std: float | None) -> str:
    if std is None:
        return f"{mean:.2f}"
    return f"{mean:.2f}±{std:.2f}"


def _summary_cells(s: MetricsSummary) -> list[str]:
    params = f"{s.n_params - 1}+1"
    if s.n_reps == 0:
        note = s.note or "skipped"
        return [s.task, s.feature_set, params, note, note, note, note]
    return [
        s.task,
        s.feature_set,
        params,
        _cell(s.pearson_mean, s.pearson_std),
        _cell(s.r2_mean, s.r2_std),
        _cell(s.mae_mean, s.mae_std),
        _cell(s.mse_mean, s.mse_std),
    ]


def emit_table(summaries: Sequence[MetricsSummary], format: str = "markdown") -> str:
    """Render summaries as a report table, one row per (task, feature set).

    Rows are ordered by task, then by parameter count ascending. Metric
    cells are "mean±std" with two decimals.
    """
    if not summaries:
        raise ValueError("no summaries to report")
    if format not in ("markdown", "csv"):
        raise ValueError(f"format must be 'markdown' or 'csv', got {format!r}")
    ordered = sorted(summaries, key=lambda s: (s.task, s.n_params))
    rows = [_summary_cells(s) for s in ordered]

    if format == "csv":
        lines = [",".join(TABLE_COLUMNS)]
        lines.extend(",".join(row) for row in rows)
        return "\n".join(lines) + "\n"

    widths = [
        max(len(TABLE_COLUMNS[j]), *(len(row[j]) for row in rows))
        for j in range(len(TABLE_COLUMNS))
    ]
    header = "| " + " | ".join(c.ljust(w) for c, w in zip(TABLE_COLUMNS, widths)) + " |"
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    body = [
        "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"
        for row in rows
    ]
    return "\n".join([header, rule, *body]) + "\n"


def export_scatter(
    truth: Mapping[str, float],
    predictions: Mapping[str, float],
    target: str,
) -> str:
    """Comma-separated (image_id, truth, prediction, abs_error) rows.

    One prediction per labeled test image; suitable for plotting truth
    against prediction with a unity line.
    """
    if not predictions:
        raise ValueError("no predictions to export")
    missing = sorted(set(predictions) - set(truth))
    if missing:
        raise ValueError(f"predictions for images without truth: {missing[:5]}")
    lines = [f"image_id,{target}_truth,{target}_prediction,abs_error"]
    for image_id in sorted(predictions):
        t = float(truth[image_id])
        p = float(predictions[image_id])
        lines.append(f"{image_id},{t!r},{p!r},{abs(t - p)!r}")
    return "\n".join(lines) + "\n"


def export_repetitions(summaries: Sequence[MetricsSummary]) -> str:
    """Per-repetition metric rows for audit, comma-separated."""
    lines = ["task,feature_set,repetition,n_train,n_test,pearson,r2,mae,mse"]
    for s in summaries:
        for r in s.repetitions:
            lines.append(
                f"{s.task},{s.feature_set},{r.repetition},{r.n_train},{r.n_test},"
                f"{r.pearson!r},{r.r2!r},{r.mae!r},{r.mse!r}"
            )
    return "\n".join(lines) + "\n"

"""Design matrices for the four feature sets and minimum-norm OLS probes.

The probes are plain least squares on raw (unstandardized) features with
a fitted intercept, no regularization. When the minimizer is not unique
(more columns than training rows, as with the 1024-dim intermediate
features), the minimum-Euclidean-norm weight vector is returned, with
the intercept excluded from the norm.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core_data import FeatureTable, TASKS

#: Feature-set name -> task columns, in design-matrix column order.
FEATURE_SET_COLUMNS: dict[str, tuple[str, ...]] = {
    "none": (),
    "opacity1": ("lung_opacity",),
    "pneumonia4": ("lung_opacity", "pneumonia", "infiltration", "consolidation"),
    "all18": TASKS,
}

FEATURE_SETS = ("none", "opacity1", "pneumonia4", "all18", "intermediate1024")

TARGETS = ("extent", "opacity")

#: Relative singular-value cutoff for the least-squares solve.
SVD_RCOND = 1e-10


def feature_set_width(feature_set: str) -> int:
    if feature_set == "intermediate1024":
        return 1024
    try:
        return len(FEATURE_SET_COLUMNS[feature_set])
    except KeyError:
        raise ValueError(f"unknown feature set {feature_set!r}") from None


def feature_set_columns(feature_set: str) -> tuple[str, ...]:
    """Design-matrix column names for the feature set, in order."""
    if feature_set == "intermediate1024":
        return tuple(f"feat_{i:04d}" for i in range(1024))
    try:
        return FEATURE_SET_COLUMNS[feature_set]
    except KeyError:
        raise ValueError(f"unknown feature set {feature_set!r}") from None


@dataclass
class RegressionModel:
    """A fitted linear probe: prediction = X @ weights + intercept."""

    feature_set: str | None
    target: str | None
    weights: np.ndarray
    intercept: float

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if self.feature_set is not None:
            width = feature_set_width(self.feature_set)
            if self.weights.shape[0] != width:
                raise ValueError(
                    f"feature set {self.feature_set!r} has width {width},"
                    f" got {self.weights.shape[0]} weights"
                )
        if self.target is not None and self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}, got {self.target!r}")

    @property
    def width(self) -> int:
        return int(self.weights.shape[0])

    @property
    def n_params(self) -> int:
        """Weights plus intercept (the "k+1" parameter count)."""
        return self.width + 1


def design_matrix(
    table: FeatureTable, feature_set: str, ids: list[str]
) -> np.ndarray:
    """Build the n x p design matrix for ``ids`` in the given order.

    Columns follow the feature set's canonical order. No intercept
    column is materialized; the intercept is handled by fit/predict.
    """
    if feature_set == "intermediate1024":
        if not table.has_intermediate:
            raise ValueError(
                "feature set 'intermediate1024' requires the intermediate"
                " feature block, which this table does not carry"
            )
        rows = []
        for image_id in ids:
            vec = table.get(image_id).features.intermediate
            assert vec is not None
            rows.append(vec)
        return np.asarray(rows, dtype=float).reshape(len(ids), 1024)

    columns = FEATURE_SET_COLUMNS.get(feature_set)
    if columns is None:
        raise ValueError(f"unknown feature set {feature_set!r}")
    out = np.empty((len(ids), len(columns)), dtype=float)
    for i, image_id in enumerate(ids):
        outputs = table.get(image_id).features.outputs
        for j, task in enumerate(columns):
            out[i, j] = outputs[task]
    return out


def fit_ols(
    X: np.ndarray,
    y: np.ndarray,
    feature_set: str | None = None,
    target: str | None = None,
) -> RegressionModel:
    """Fit mean-squared-error-minimizing weights and intercept.

    Centering both sides reduces the affine fit to a linear one: for any
    weight vector the optimal intercept is ``mean(y) - mean(X) @ w``, so
    the MSE minimizers in ``w`` are exactly the least-squares solutions
    of the centered system. The SVD-based solve (relative cutoff
    ``SVD_RCOND``) picks the minimum-norm one among them, which makes
    the fit deterministic also when p >= n.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    n, p = X.shape
    if n == 0:
        raise ValueError("cannot fit on zero rows")
    if y.shape[0] != n:
        raise ValueError(f"X has {n} rows but y has {y.shape[0]} entries")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
        raise ValueError("X and y must be finite")

    x_mean = X.mean(axis=0)
    y_mean = float(y.mean())
    if p == 0:
        return RegressionModel(feature_set, target, np.empty(0), y_mean)
    weights, *_ = np.linalg.lstsq(X - x_mean, y - y_mean, rcond=SVD_RCOND)
    intercept = y_mean - float(x_mean @ weights)
    return RegressionModel(feature_set, target, weights, intercept)


def predict(model: RegressionModel, X: np.ndarray) -> np.ndarray:
    """Apply the probe: X @ weights + intercept, without clipping.

    Predictions may fall outside the ordinal score range; they are
    reported as-is.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.width:
        raise ValueError(
            f"X must have shape (n, {model.width}), got {X.shape}"
        )
    return X @ model.weights + model.intercept


# ---------------------------------------------------------------------------
# model persistence: small key-value text document, exact decimal round-trip


def save_model(model: RegressionModel, path: str | Path) -> None:
    if model.feature_set is None or model.target is None:
        raise ValueError("cannot save a model without feature_set and target")
    lines = [
        f"feature_set: {model.feature_set}",
        f"target: {model.target}",
        f"intercept: {model.intercept:.17g}",
        "weights: " + " ".join(f"{w:.17g}" for w in model.weights),
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_model(path: str | Path) -> RegressionModel:
    fields: dict[str, str] = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(":")
        fields[key.strip()] = value.strip()
    missing = {"feature_set", "target", "intercept", "weights"} - set(fields)
    if missing:
        raise ValueError(f"model file is missing keys: {sorted(missing)}")
    weights = np.array(
        [float(w) for w in fields["weights"].split()] if fields["weights"] else [],
        dtype=float,
    )
    return RegressionModel(
        feature_set=fields["feature_set"],
        target=fields["target"],
        weights=weights,
        intercept=float(fields["intercept"]),
    )

"""Inter-rater agreement on total severity scores (Fleiss' kappa).

Categories are the full ordinal range of the scale (0..8 for extent,
0..6 for opacity) regardless of which totals actually occur: empty
categories contribute nothing to observed agreement but keep the chance
term stable across data subsets. Agreement is nominal, per the standard
Fleiss definition; ordinal distance between categories is ignored.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_data import EXTENT_MAX, OPACITY_MAX, LabelTable

SCALES = ("extent", "opacity")


@dataclass(frozen=True)
class RatingMatrix:
    """Raters-per-category counts, one row per image.

    ``counts[i, j]`` is the number of raters that assigned item ``i``
    the total score ``categories[j]``. Every row sums to ``n_raters``.
    """

    categories: tuple[int, ...]
    counts: np.ndarray
    n_raters: int
    image_ids: tuple[str, ...]

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts)
        if counts.ndim != 2 or counts.shape != (len(self.image_ids), len(self.categories)):
            raise ValueError(
                f"counts must be {len(self.image_ids)}x{len(self.categories)},"
                f" got {counts.shape}"
            )
        if np.any(counts < 0) or not np.issubdtype(counts.dtype, np.integer):
            raise ValueError("counts must be non-negative integers")
        row_sums = counts.sum(axis=1)
        if np.any(row_sums != self.n_raters):
            bad = int(np.argmax(row_sums != self.n_raters))
            raise ValueError(
                f"row for {self.image_ids[bad]!r} sums to {int(row_sums[bad])},"
                f" expected {self.n_raters}"
            )

    @property
    def n_items(self) -> int:
        return len(self.image_ids)

    @property
    def n_categories(self) -> int:
        return len(self.categories)


def ratings_from_labels(labels: LabelTable, scale: str) -> RatingMatrix:
    """Tabulate rater total scores into a :class:`RatingMatrix`.

    Every image must carry the same number of rater rows; kappa is not
    defined over a mix of panel sizes.
    """
    if scale not in SCALES:
        raise ValueError(f"scale must be one of {SCALES}, got {scale!r}")
    if len(labels) == 0:
        raise ValueError("empty label table")
    max_total = EXTENT_MAX if scale == "extent" else OPACITY_MAX
    categories = tuple(range(max_total + 1))

    by_image = labels.by_image()
    image_ids = tuple(labels.image_ids())
    rater_counts = {len(by_image[i]) for i in image_ids}
    if len(rater_counts) > 1:
        raise ValueError(
            f"all images must have the same number of raters, got counts {sorted(rater_counts)}"
        )
    n_raters = rater_counts.pop()

    counts = np.zeros((len(image_ids), len(categories)), dtype=np.int64)
    for i, image_id in enumerate(image_ids):
        for score in by_image[image_id]:
            total = score.extent_total if scale == "extent" else score.opacity_total
            counts[i, total] += 1
    return RatingMatrix(
        categories=categories, counts=counts, n_raters=n_raters, image_ids=image_ids
    )


def fleiss_kappa(m: RatingMatrix) -> float:
    """Fleiss' kappa over the rating matrix.

    kappa = (P_bar - Pe_bar) / (1 - Pe_bar), where P_bar is the mean
    per-item fraction of agreeing rater pairs and Pe_bar the chance
    agreement from the category marginals. Raises when chance agreement
    is 1 (all ratings in a single category across all items), where the
    statistic is undefined.
    """
    if m.n_raters < 2:
        raise ValueError(f"need at least 2 raters, got {m.n_raters}")
    if m.n_items < 1:
        raise ValueError("need at least 1 item")
    counts = np.asarray(m.counts, dtype=float)
    n = float(m.n_raters)

    p_cat = counts.sum(axis=0) / counts.sum()
    p_expected = float((p_cat * p_cat).sum())
    per_item = ((counts * counts).sum(axis=1) - n) / (n * (n - 1.0))
    p_observed = float(per_item.mean())

    if p_expected == 1.0:
        raise ValueError(
            "kappa is undefined: all ratings fall in a single category"
            " (chance agreement is 1)"
        )
    return (p_observed - p_expected) / (1.0 - p_expected)

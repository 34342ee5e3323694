"""MAE, MASE against a training-median baseline, error distributions and
IEEE-style grading.

MASE divides the model's MAE by the MAE obtained when every reference is
predicted by the component-wise median of the training labels, so 1.0
means "no better than the simplest non-parametric predictor".
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, ValidationError

# error histograms: 1 mmHg bins over [0, 60]; larger errors land in the top bin
ERROR_HIST_MAX = 60

# grade bands, mmHg. Only the D threshold (MAE above 7) is externally
# anchored; the A/B/C sub-thresholds are configurable conventions.
DEFAULT_GRADE_THRESHOLDS = {"A": 5.0, "B": 6.0, "C": 7.0}


def _check_pair_shape(predictions, references):
    p = np.asarray(predictions, dtype=np.float64)
    r = np.asarray(references, dtype=np.float64)
    if p.shape != r.shape or p.ndim != 2 or p.shape[1] != 2:
        raise ShapeError(f"expected matching (n, 2) arrays, got {p.shape} and {r.shape}")
    if p.shape[0] < 1:
        raise ShapeError("need at least one prediction")
    return p, r


def median_baseline(train_labels) -> tuple[float, float]:
    """Component-wise median of (n, 2) training labels; even counts average
    the two middle values."""
    labels = np.asarray(train_labels, dtype=np.float64)
    if labels.size == 0:
        raise ValidationError("median_baseline needs a nonempty label set")
    if labels.ndim != 2 or labels.shape[1] != 2:
        raise ShapeError(f"expected (n, 2) labels, got {labels.shape}")
    med = np.median(labels, axis=0)
    return float(med[0]), float(med[1])


def mae(predictions, references) -> tuple[float, float]:
    """Per-output mean absolute error in mmHg: (sbp, dbp)."""
    p, r = _check_pair_shape(predictions, references)
    err = np.abs(p - r).mean(axis=0)
    return float(err[0]), float(err[1])


def mase(predictions, references, baseline_median: tuple[float, float]) -> tuple[float, float]:
    """Per-output MAE divided by the median-predictor MAE on the same
    references. Raises when a baseline MAE is zero (constant references
    equal to the median leave the ratio undefined)."""
    p, r = _check_pair_shape(predictions, references)
    base = np.tile(np.asarray(baseline_median, dtype=np.float64), (r.shape[0], 1))
    base_mae = np.abs(base - r).mean(axis=0)
    if (base_mae == 0).any():
        raise ValidationError(
            "baseline MAE is zero (references constant at the median); MASE undefined"
        )
    model_mae = np.abs(p - r).mean(axis=0)
    ratio = model_mae / base_mae
    return float(ratio[0]), float(ratio[1])


def ieee_grade(mae_mmhg: float, thresholds: dict | None = None) -> str:
    """Grade label for a single MAE value; strictly above the C threshold
    (7 mmHg by default) grades D."""
    if mae_mmhg < 0:
        raise ValidationError("MAE must be >= 0")
    t = dict(DEFAULT_GRADE_THRESHOLDS if thresholds is None else thresholds)
    for grade in sorted(t, key=t.get):
        if mae_mmhg <= t[grade]:
            return grade
    return "D"


def error_histogram(predictions, references) -> dict[str, list[int]]:
    """Per-output absolute-error counts in 1 mmHg bins over [0, 60]."""
    p, r = _check_pair_shape(predictions, references)
    err = np.abs(p - r)
    out = {}
    for j, key in enumerate(("sbp", "dbp")):
        idx = np.clip(np.floor(err[:, j]).astype(int), 0, ERROR_HIST_MAX - 1)
        out[key] = np.bincount(idx, minlength=ERROR_HIST_MAX).tolist()
    return out


@dataclass
class EvalResult:
    """Evaluation of one (model, test set) pair."""

    mae_sbp: float
    mae_dbp: float
    mase_sbp: float
    mase_dbp: float
    n: int
    baseline_median: tuple[float, float]
    error_hist: dict[str, list[int]] = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, predictions, references, baseline_median) -> "EvalResult":
        p, r = _check_pair_shape(predictions, references)
        mae_sbp, mae_dbp = mae(p, r)
        mase_sbp, mase_dbp = mase(p, r, baseline_median)
        return cls(
            mae_sbp=mae_sbp,
            mae_dbp=mae_dbp,
            mase_sbp=mase_sbp,
            mase_dbp=mase_dbp,
            n=p.shape[0],
            baseline_median=(float(baseline_median[0]), float(baseline_median[1])),
            error_hist=error_histogram(p, r),
        )

    def to_json(self) -> str:
        return json.dumps(
            {
                "mae_sbp": self.mae_sbp,
                "mae_dbp": self.mae_dbp,
                "mase_sbp": self.mase_sbp,
                "mase_dbp": self.mase_dbp,
                "n": self.n,
                "baseline_median": list(self.baseline_median),
                "error_hist": self.error_hist,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "EvalResult":
        d = json.loads(text)
        return cls(
            mae_sbp=d["mae_sbp"],
            mae_dbp=d["mae_dbp"],
            mase_sbp=d["mase_sbp"],
            mase_dbp=d["mase_dbp"],
            n=d["n"],
            baseline_median=tuple(d["baseline_median"]),
            error_hist=d.get("error_hist", {}),
        )

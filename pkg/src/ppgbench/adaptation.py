"""Label histograms, ratio-based importance weights and the Earth Mover's
Distance between label distributions.

Weights follow the clipped density-ratio rule: for a bin with training
mass h_train and target mass h_test,

    w = max(tau, h_test / h_train)   if h_train > 0
    w = tau                          otherwise

so no training sample is ever downweighted below tau. Bins are half-open
[edge, edge + width) with the last bin closed; out-of-range labels clip
into the boundary bins so extreme values still receive weights.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import BinningMismatchError, ValidationError

DEFAULT_TAU = 1.0

# default label binnings, mmHg; 2 mmHg balances resolution and occupancy
SBP_BINNING_RANGE = (40.0, 220.0)
DBP_BINNING_RANGE = (30.0, 150.0)
DEFAULT_BIN_WIDTH = 2.0


@dataclass(frozen=True)
class HistogramBinning:
    low: float
    high: float
    bin_width: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ValidationError("binning requires low < high")
        if not self.bin_width > 0:
            raise ValidationError("bin_width must be > 0")
        n = (self.high - self.low) / self.bin_width
        if abs(n - round(n)) > 1e-9:
            raise ValidationError("(high - low) must be a whole number of bins")

    @property
    def n_bins(self) -> int:
        return int(round((self.high - self.low) / self.bin_width))

    def centers(self) -> np.ndarray:
        return self.low + (np.arange(self.n_bins) + 0.5) * self.bin_width

    def index_of(self, values) -> np.ndarray:
        """Bin index per value; out-of-range values clip to the boundary bins."""
        v = np.asarray(values, dtype=np.float64)
        idx = np.floor((v - self.low) / self.bin_width).astype(np.int64)
        return np.clip(idx, 0, self.n_bins - 1)


def default_sbp_binning() -> HistogramBinning:
    return HistogramBinning(*SBP_BINNING_RANGE, DEFAULT_BIN_WIDTH)


def default_dbp_binning() -> HistogramBinning:
    return HistogramBinning(*DBP_BINNING_RANGE, DEFAULT_BIN_WIDTH)


@dataclass(frozen=True, eq=False)
class LabelHistogram:
    binning: HistogramBinning
    mass: np.ndarray  # normalized, one entry per bin

    def __eq__(self, other):
        if not isinstance(other, LabelHistogram):
            return NotImplemented
        return self.binning == other.binning and np.array_equal(self.mass, other.mass)

    def __post_init__(self):
        m = np.asarray(self.mass, dtype=np.float64)
        if m.shape != (self.binning.n_bins,):
            raise ValidationError(
                f"mass has {m.shape} entries, binning defines {self.binning.n_bins} bins"
            )
        if (m < 0).any():
            raise ValidationError("histogram mass must be nonnegative")
        if abs(float(m.sum()) - 1.0) > 1e-12:
            raise ValidationError("histogram mass must sum to 1")
        object.__setattr__(self, "mass", m)

    def to_json(self) -> str:
        return json.dumps(
            {
                "low": self.binning.low,
                "high": self.binning.high,
                "bin_width": self.binning.bin_width,
                "values": self.mass.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "LabelHistogram":
        d = json.loads(text)
        return cls(HistogramBinning(d["low"], d["high"], d["bin_width"]), np.array(d["values"]))


@dataclass(frozen=True, eq=False)
class WeightTable:
    binning: HistogramBinning
    weight: np.ndarray
    tau: float

    def __eq__(self, other):
        if not isinstance(other, WeightTable):
            return NotImplemented
        return (
            self.binning == other.binning
            and self.tau == other.tau
            and np.array_equal(self.weight, other.weight)
        )

    def __post_init__(self):
        w = np.asarray(self.weight, dtype=np.float64)
        if w.shape != (self.binning.n_bins,):
            raise ValidationError("weight table size does not match binning")
        if not np.isfinite(w).all():
            raise ValidationError("weights must be finite")
        if (w < self.tau).any():
            raise ValidationError("every weight must be >= tau")
        object.__setattr__(self, "weight", w)

    def to_json(self) -> str:
        return json.dumps(
            {
                "low": self.binning.low,
                "high": self.binning.high,
                "bin_width": self.binning.bin_width,
                "tau": self.tau,
                "values": self.weight.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "WeightTable":
        d = json.loads(text)
        return cls(
            HistogramBinning(d["low"], d["high"], d["bin_width"]),
            np.array(d["values"]),
            d["tau"],
        )


def save_json(obj, path: str | os.PathLike):
    with open(path, "w", encoding="utf-8") as f:
        f.write(obj.to_json())


def build_histogram(values, binning: HistogramBinning) -> LabelHistogram:
    """Normalized histogram of the values under the binning (clip-then-count)."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("cannot build a histogram from an empty value list")
    if not np.isfinite(v).all():
        raise ValidationError("histogram values must be finite")
    counts = np.bincount(binning.index_of(v), minlength=binning.n_bins).astype(np.float64)
    return LabelHistogram(binning, counts / counts.sum())


def _require_same_binning(a: HistogramBinning, b: HistogramBinning):
    if a != b:
        raise BinningMismatchError(f"binning mismatch: {a} vs {b}")


def compute_weights(
    h_train: LabelHistogram, h_test: LabelHistogram, tau: float = DEFAULT_TAU
) -> WeightTable:
    """Per-bin clipped density-ratio weights (see module docstring)."""
    _require_same_binning(h_train.binning, h_test.binning)
    if not tau > 0:
        raise ValidationError("tau must be > 0")
    n = h_train.binning.n_bins
    w = np.empty(n, dtype=np.float64)
    for i in range(n):
        if h_train.mass[i] > 0.0:
            w[i] = max(tau, h_test.mass[i] / h_train.mass[i])
        else:
            w[i] = tau
    return WeightTable(h_train.binning, w, tau)


def assign_weights(records, sbp_table: WeightTable, dbp_table: WeightTable) -> np.ndarray:
    """(n, 2) per-record weights: column 0 from the SBP table, column 1 from
    the DBP table. Out-of-range labels use the boundary bins."""
    records = list(records)
    if not records:
        raise ValidationError("assign_weights needs at least one record")
    sbp_idx = sbp_table.binning.index_of([r.sbp for r in records])
    dbp_idx = dbp_table.binning.index_of([r.dbp for r in records])
    return np.stack([sbp_table.weight[sbp_idx], dbp_table.weight[dbp_idx]], axis=1)


def emd(h_a: LabelHistogram, h_b: LabelHistogram) -> float:
    """1-D Wasserstein-1 distance in mmHg between two histograms on the same
    binning: bin_width * sum_i |CDF_a(i) - CDF_b(i)|."""
    _require_same_binning(h_a.binning, h_b.binning)
    cdf_a = np.cumsum(h_a.mass)
    cdf_b = np.cumsum(h_b.mass)
    return float(h_a.binning.bin_width * np.abs(cdf_a - cdf_b).sum())

import numpy as np
import pytest
from scipy.optimize import linprog

from ppgbench import (
    HistogramBinning,
    LabelHistogram,
    build_histogram,
    compute_weights,
    emd,
)
from ppgbench.adaptation import WeightTable, assign_weights, default_sbp_binning
from ppgbench.errors import BinningMismatchError, ValidationError

from test_data import make_record


def reference_weights(h_train, h_test, tau):
    """Independent direct evaluation of the clipped-ratio rule."""
    out = []
    for ht, hs in zip(h_train, h_test):
        if ht > 0.0:
            out.append(max(tau, hs / ht))
        else:
            out.append(tau)
    return np.array(out)


def transport_lp(mass_a, mass_b, bin_width):
    """Minimum-cost transport between two histograms, solved as an LP."""
    n = len(mass_a)
    cost = np.array([[abs(i - j) * bin_width for j in range(n)] for i in range(n)]).ravel()
    a_eq = []
    for i in range(n):  # row sums = mass_a
        row = np.zeros(n * n)
        row[i * n : (i + 1) * n] = 1.0
        a_eq.append(row)
    for j in range(n):  # column sums = mass_b
        col = np.zeros(n * n)
        col[j::n] = 1.0
        a_eq.append(col)
    b_eq = np.concatenate([mass_a, mass_b])
    res = linprog(cost, A_eq=np.array(a_eq), b_eq=b_eq, bounds=(0, None), method="highs")
    assert res.success
    return res.fun


def random_histogram(rng, binning):
    mass = rng.uniform(0.0, 1.0, binning.n_bins)
    zeros = rng.random(binning.n_bins) < 0.25  # exercise empty bins
    mass[zeros] = 0.0
    if mass.sum() == 0:
        mass[0] = 1.0
    return LabelHistogram(binning, mass / mass.sum())


class TestHistogram:
    def test_point_mass(self):
        binning = HistogramBinning(100.0, 110.0, 2.0)
        h = build_histogram([103.0, 103.5, 103.9], binning)
        assert h.mass[1] == 1.0 and h.mass.sum() == 1.0

    def test_half_open_bins(self):
        binning = HistogramBinning(100.0, 120.0, 2.0)
        h = build_histogram([100.0, 102.0], binning)
        assert h.mass[0] == 0.5 and h.mass[1] == 0.5

    def test_out_of_range_clips_to_boundary_bins(self):
        binning = HistogramBinning(100.0, 110.0, 2.0)
        h = build_histogram([10.0, 500.0], binning)
        assert h.mass[0] == 0.5 and h.mass[-1] == 0.5

    def test_normal_draws_mean_recovered(self):
        rng = np.random.default_rng(1)
        values = rng.normal(115.62, 18.92, 10_000)
        h = build_histogram(values, default_sbp_binning())
        hist_mean = float((h.mass * h.binning.centers()).sum())
        assert abs(hist_mean - 115.62) < 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValidationError):
            build_histogram([], HistogramBinning(0.0, 10.0, 1.0))

    def test_bad_binning_rejected(self):
        with pytest.raises(ValidationError):
            HistogramBinning(10.0, 5.0, 1.0)
        with pytest.raises(ValidationError):
            HistogramBinning(0.0, 10.0, 3.0)  # not a whole number of bins

    def test_json_round_trip(self):
        binning = HistogramBinning(40.0, 60.0, 2.0)
        h = build_histogram([41.0, 47.0, 58.0], binning)
        assert LabelHistogram.from_json(h.to_json()) == h


class TestWeights:
    def test_identical_histograms_give_unit_weights(self):
        binning = HistogramBinning(0.0, 10.0, 1.0)
        h = build_histogram([0.5, 3.2, 9.0, 9.5], binning)
        table = compute_weights(h, h, tau=1.0)
        assert (table.weight == 1.0).all()

    def test_hand_computed_pair(self):
        binning = HistogramBinning(0.0, 2.0, 1.0)
        h_train = LabelHistogram(binning, np.array([0.5, 0.5]))
        h_test = LabelHistogram(binning, np.array([0.25, 0.75]))
        table = compute_weights(h_train, h_test, tau=1.0)
        assert table.weight.tolist() == [1.0, 1.5]

    def test_empty_train_bin_falls_back_to_tau(self):
        binning = HistogramBinning(0.0, 2.0, 1.0)
        h_train = LabelHistogram(binning, np.array([1.0, 0.0]))
        h_test = LabelHistogram(binning, np.array([0.7, 0.3]))
        table = compute_weights(h_train, h_test, tau=1.0)
        assert table.weight[1] == 1.0

    def test_matches_reference_evaluator_bit_for_bit(self):
        rng = np.random.default_rng(99)
        binning = HistogramBinning(0.0, 30.0, 2.0)
        for _ in range(300):
            h_train = random_histogram(rng, binning)
            h_test = random_histogram(rng, binning)
            tau = float(rng.choice([0.25, 0.5, 1.0, 2.0]))
            table = compute_weights(h_train, h_test, tau)
            expected = reference_weights(h_train.mass, h_test.mass, tau)
            assert (table.weight == expected).all()
            assert (table.weight >= tau).all()

    def test_binning_mismatch_rejected(self):
        a = build_histogram([1.0], HistogramBinning(0.0, 10.0, 1.0))
        b = build_histogram([1.0], HistogramBinning(0.0, 10.0, 2.0))
        with pytest.raises(BinningMismatchError):
            compute_weights(a, b)

    def test_assign_weights_lookup_and_clipping(self):
        binning = HistogramBinning(100.0, 104.0, 2.0)
        sbp_table = WeightTable(binning, np.array([1.5, 1.0]), tau=1.0)
        dbp_binning = HistogramBinning(60.0, 64.0, 2.0)
        dbp_table = WeightTable(dbp_binning, np.array([1.0, 2.0]), tau=1.0)
        records = [
            make_record("a", sbp=101.0, dbp=63.0),  # bins 0 and 1
            make_record("b", sbp=50.0, dbp=63.0),   # sbp below range -> lowest bin
        ]
        w = assign_weights(records, sbp_table, dbp_table)
        assert w[0].tolist() == [1.5, 2.0]
        assert w[1].tolist() == [1.5, 2.0]

    def test_identical_histograms_give_all_one_record_weights(self, small_bundle):
        binning = default_sbp_binning()
        h = build_histogram([r.sbp for r in small_bundle.records], binning)
        table = compute_weights(h, h)
        w = assign_weights(small_bundle.records, table, table)
        assert (w == 1.0).all()


class TestEmd:
    def test_identical_histograms_zero(self):
        h = build_histogram([3.0, 7.0], HistogramBinning(0.0, 10.0, 1.0))
        assert emd(h, h) == 0.0

    def test_translated_point_mass(self):
        binning = HistogramBinning(90.0, 120.0, 2.0)
        a = build_histogram([100.0], binning)
        b = build_histogram([110.0], binning)
        assert emd(a, b) == pytest.approx(10.0, abs=1e-12)

    def test_matches_transport_lp(self):
        rng = np.random.default_rng(7)
        binning = HistogramBinning(0.0, 12.0, 2.0)  # 6 bins -> 36 flows
        for _ in range(25):
            a = random_histogram(rng, binning)
            b = random_histogram(rng, binning)
            assert emd(a, b) == pytest.approx(transport_lp(a.mass, b.mass, 2.0), abs=1e-9)

    def test_metric_properties(self):
        rng = np.random.default_rng(17)
        binning = HistogramBinning(0.0, 16.0, 2.0)
        for _ in range(50):
            a, b, c = (random_histogram(rng, binning) for _ in range(3))
            dab, dba = emd(a, b), emd(b, a)
            assert dab == pytest.approx(dba, abs=1e-12)
            assert dab >= 0
            assert emd(a, c) <= dab + emd(b, c) + 1e-9

    def test_bin_width_scales_distance(self):
        mass_a = np.array([0.2, 0.3, 0.5, 0.0])
        mass_b = np.array([0.5, 0.0, 0.25, 0.25])
        d1 = emd(
            LabelHistogram(HistogramBinning(0.0, 4.0, 1.0), mass_a),
            LabelHistogram(HistogramBinning(0.0, 4.0, 1.0), mass_b),
        )
        d3 = emd(
            LabelHistogram(HistogramBinning(0.0, 12.0, 3.0), mass_a),
            LabelHistogram(HistogramBinning(0.0, 12.0, 3.0), mass_b),
        )
        assert d3 == pytest.approx(3.0 * d1, rel=1e-12)

    def test_binning_mismatch_rejected(self):
        a = build_histogram([1.0], HistogramBinning(0.0, 10.0, 1.0))
        b = build_histogram([1.0], HistogramBinning(0.0, 20.0, 1.0))
        with pytest.raises(BinningMismatchError):
            emd(a, b)

import numpy as np
import pytest

from ppgbench import (
    DatasetBundle,
    SplitSpec,
    SynthConfig,
    TailQuota,
    generate_synthetic,
    make_split,
    verify_split,
)
from ppgbench.errors import InfeasibleQuotaError, SplitError
from ppgbench.splits import load_assignment, save_assignment

from conftest import random_bundle


def roles_by_subject(bundle, assignment):
    out = {}
    for r in bundle.records:
        out.setdefault(r.subject_id, []).append(assignment.role_of[r.segment_id])
    return out


class TestCalibFree:
    def test_exactly_two_test_subjects(self, small_bundle):
        # 6 subjects x 10 segments, test fraction 0.33 -> 2 whole subjects in test
        spec = SplitSpec(scenario="calibfree", test_fraction=0.33, val_fraction=0.17, seed=0)
        assignment = make_split(small_bundle, spec)
        per_subject = roles_by_subject(small_bundle, assignment)
        test_subjects = [s for s, roles in per_subject.items() if "test" in roles]
        assert len(test_subjects) == 2
        for s in test_subjects:
            assert set(per_subject[s]) == {"test"}  # whole subject goes to test
        train_subjects = {s for s, roles in per_subject.items() if "train" in roles}
        assert train_subjects.isdisjoint(test_subjects)

    def test_record_order_does_not_change_subject_roles(self, small_bundle):
        spec = SplitSpec(scenario="calibfree", test_fraction=0.33, val_fraction=0.17, seed=5)
        shuffled = DatasetBundle(
            records=list(reversed(small_bundle.records)),
            sample_rate=small_bundle.sample_rate,
            name=small_bundle.name,
            provenance=small_bundle.provenance,
        )
        a = make_split(small_bundle, spec)
        b = make_split(shuffled, spec)
        assert a.role_of == b.role_of

    def test_too_few_subjects_rejected(self):
        bundle = generate_synthetic(SynthConfig(n_subjects=3, segments_per_subject=4, segment_length=16))
        with pytest.raises(SplitError):
            make_split(bundle, SplitSpec(scenario="calibfree"))


class TestCalib:
    def test_per_subject_counts(self, small_bundle):
        # tiny val fraction rounds to zero per subject: 8 train + 2 test each
        spec = SplitSpec(scenario="calib", test_fraction=0.2, val_fraction=0.01, seed=1)
        assignment = make_split(small_bundle, spec)
        for s, roles in roles_by_subject(small_bundle, assignment).items():
            assert roles.count("test") == 2, s
            assert roles.count("train") == 8, s

    def test_every_test_subject_keeps_train_segments(self, small_bundle):
        spec = SplitSpec(scenario="calib", test_fraction=0.2, val_fraction=0.1, seed=3)
        assignment = make_split(small_bundle, spec)
        assert verify_split(small_bundle, assignment) == []

    def test_single_segment_subject_goes_train_only_with_warning(self):
        bundle = generate_synthetic(
            SynthConfig(n_subjects=5, segments_per_subject=1, segment_length=16, seed=2)
        )
        spec = SplitSpec(scenario="calib", test_fraction=0.3, val_fraction=0.1)
        assignment = make_split(bundle, spec)
        assert all(role == "train" for role in assignment.role_of.values())
        assert len(assignment.warnings) == 5


class TestAami:
    def _tail_heavy_bundle(self):
        # wide SBP spread so both tails are populated
        return generate_synthetic(
            SynthConfig(
                n_subjects=24,
                segments_per_subject=6,
                segment_length=16,
                sbp_mean=125.0,
                sbp_sd=35.0,
                dbp_mean=60.0,
                dbp_sd=8.0,
                seed=3,
            )
        )

    def test_quota_satisfied(self):
        bundle = self._tail_heavy_bundle()
        spec = SplitSpec(scenario="aami", test_fraction=0.25, val_fraction=0.15, seed=1)
        assignment = make_split(bundle, spec)
        assert verify_split(bundle, assignment) == []
        recs = bundle.by_id()
        test_sbp = np.array(
            [recs[sid].sbp for sid, role in assignment.role_of.items() if role == "test"]
        )
        quota = spec.aami_tail_quota
        assert (test_sbp < quota.low_sbp_threshold).mean() >= quota.min_tail_fraction
        assert (test_sbp > quota.high_sbp_threshold).mean() >= quota.min_tail_fraction

    def test_infeasible_quota_reports_achievable_fractions(self):
        # narrow SBP distribution: essentially nothing above 160 mmHg
        bundle = generate_synthetic(
            SynthConfig(
                n_subjects=20,
                segments_per_subject=6,
                segment_length=16,
                sbp_mean=115.0,
                sbp_sd=6.0,
                seed=4,
            )
        )
        high_tail = sum(r.sbp > 160.0 for r in bundle.records) / len(bundle)
        assert high_tail < 0.05  # precondition of this scenario
        spec = SplitSpec(
            scenario="aami",
            test_fraction=0.2,
            val_fraction=0.1,
            aami_tail_quota=TailQuota(100.0, 160.0, 0.2),
            seed=4,
        )
        with pytest.raises(InfeasibleQuotaError) as exc:
            make_split(bundle, spec)
        assert exc.value.achievable_high < 0.2


class TestVerifyAndProperties:
    def test_make_then_verify_over_random_inputs(self):
        rng = np.random.default_rng(207)
        for i in range(30):
            bundle = random_bundle(rng)
            scenario = ("calib", "calibfree", "aami")[i % 3]
            spec = SplitSpec(
                scenario=scenario,
                test_fraction=float(rng.uniform(0.15, 0.4)),
                val_fraction=float(rng.uniform(0.1, 0.25)),
                calib_fraction=float(rng.choice([0.0, 0.1])),
                aami_tail_quota=TailQuota(100.0, 160.0, 0.02),
                seed=int(rng.integers(0, 2**31)),
            )
            try:
                assignment = make_split(bundle, spec)
            except (SplitError, InfeasibleQuotaError):
                continue  # small random bundles may make the quota infeasible
            assert verify_split(bundle, assignment) == [], (i, scenario)

    def test_verify_flags_subject_overlap(self, small_bundle):
        spec = SplitSpec(scenario="calibfree", test_fraction=0.33, val_fraction=0.17, seed=0)
        assignment = make_split(small_bundle, spec)
        test_sid = next(sid for sid, role in assignment.role_of.items() if role == "test")
        subject = small_bundle.by_id()[test_sid].subject_id
        sibling = next(
            r.segment_id
            for r in small_bundle.records
            if r.subject_id == subject and r.segment_id != test_sid
        )
        assignment.role_of[sibling] = "train"
        violations = verify_split(small_bundle, assignment)
        assert any("subject overlap" in v for v in violations)

    def test_verify_flags_missing_coverage(self, small_bundle):
        spec = SplitSpec(scenario="calibfree", test_fraction=0.33, val_fraction=0.17, seed=0)
        assignment = make_split(small_bundle, spec)
        dropped = next(iter(assignment.role_of))
        del assignment.role_of[dropped]
        violations = verify_split(small_bundle, assignment)
        assert any(v.startswith("coverage") for v in violations)

    def test_assignment_round_trip(self, tmp_path, small_bundle):
        spec = SplitSpec(scenario="calibfree", test_fraction=0.33, val_fraction=0.17, seed=9)
        assignment = make_split(small_bundle, spec)
        save_assignment(assignment, spec, tmp_path / "split")
        back = load_assignment(tmp_path / "split")
        assert back.role_of == assignment.role_of
        assert back.scenario == assignment.scenario

    def test_same_seed_same_split(self, small_bundle):
        spec = SplitSpec(scenario="aami", test_fraction=0.33, val_fraction=0.17, seed=12,
                         aami_tail_quota=TailQuota(100.0, 160.0, 0.0))
        assert make_split(small_bundle, spec).role_of == make_split(small_bundle, spec).role_of

"""Calib / CalibFree / AAMI train-validation-calibration-test assignments.

Calib partitions within each subject by segment, so every subject
contributes to both training and test. CalibFree and AAMI partition by
subject: train, validation, calibration and test are pairwise
subject-disjoint groups. AAMI additionally requires the test set to
emphasize both tails of the SBP distribution via a configurable quota.

Subject selection is a seeded shuffle of the sorted subject ids, so record
order in the bundle never influences the subject-to-role decisions.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .data import DatasetBundle, validate_bundle
from .errors import InfeasibleQuotaError, SplitError, ValidationError

SCENARIOS = ("calib", "calibfree", "aami")
ROLES = ("train", "validation", "calibration", "test")


@dataclass(frozen=True)
class TailQuota:
    """AAMI test-set quota: minimum fraction of segments below/above the
    SBP thresholds."""

    low_sbp_threshold: float = 100.0
    high_sbp_threshold: float = 160.0
    min_tail_fraction: float = 0.10

    def validate(self):
        if not self.low_sbp_threshold < self.high_sbp_threshold:
            raise ValidationError("tail thresholds must satisfy low < high")
        if not 0.0 <= self.min_tail_fraction < 0.5:
            raise ValidationError("min_tail_fraction must lie in [0, 0.5)")


@dataclass(frozen=True)
class SplitSpec:
    scenario: str = "calibfree"
    test_fraction: float = 0.10
    val_fraction: float = 0.10
    calib_fraction: float = 0.0125
    aami_tail_quota: TailQuota = field(default_factory=TailQuota)
    seed: int = 0

    def validate(self):
        if self.scenario not in SCENARIOS:
            raise ValidationError(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValidationError("test_fraction must lie in (0, 1)")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValidationError("val_fraction must lie in (0, 1)")
        if not 0.0 <= self.calib_fraction < 1.0:
            raise ValidationError("calib_fraction must lie in [0, 1)")
        if self.test_fraction + self.val_fraction + self.calib_fraction >= 1.0:
            raise ValidationError("fractions must sum to < 1")
        self.aami_tail_quota.validate()


@dataclass
class SplitAssignment:
    """segment_id -> role map for one bundle under one scenario."""

    role_of: dict[str, str]
    scenario: str
    source_bundle: str
    warnings: list[str] = field(default_factory=list)
    tail_quota: TailQuota | None = None  # set for aami assignments

    def ids_with_role(self, role: str) -> list[str]:
        return [sid for sid, r in self.role_of.items() if r == role]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["segment_id", "role"])
        for sid, role in self.role_of.items():
            w.writerow([sid, role])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, scenario: str, source_bundle: str) -> "SplitAssignment":
        reader = csv.DictReader(io.StringIO(text))
        role_of = {}
        for row in reader:
            if row["role"] not in ROLES:
                raise SplitError(f"unknown role {row['role']!r} for {row['segment_id']}")
            role_of[row["segment_id"]] = row["role"]
        return cls(role_of=role_of, scenario=scenario, source_bundle=source_bundle)


def save_assignment(assignment: SplitAssignment, spec: SplitSpec, path: str | os.PathLike):
    """Write <path>.csv plus a JSON sidecar holding the split spec."""
    path = str(path)
    with open(path + ".csv", "w", encoding="utf-8", newline="") as f:
        f.write(assignment.to_csv())
    sidecar = {
        "scenario": assignment.scenario,
        "source_bundle": assignment.source_bundle,
        "spec": asdict(spec),
        "warnings": assignment.warnings,
    }
    with open(path + ".json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)


def load_assignment(path: str | os.PathLike) -> SplitAssignment:
    path = str(path)
    with open(path + ".json", "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    with open(path + ".csv", "r", encoding="utf-8", newline="") as f:
        assignment = SplitAssignment.from_csv(
            f.read(), sidecar["scenario"], sidecar["source_bundle"]
        )
    assignment.warnings = list(sidecar.get("warnings", []))
    if assignment.scenario == "aami":
        assignment.tail_quota = TailQuota(**sidecar["spec"]["aami_tail_quota"])
    return assignment


def _half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def _subject_segments(bundle: DatasetBundle) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for r in bundle.records:
        out.setdefault(r.subject_id, []).append(r.segment_id)
    for sid in out:
        out[sid].sort()
    return out


def _split_calib(bundle: DatasetBundle, spec: SplitSpec, rng: np.random.Generator):
    role_of: dict[str, str] = {}
    warnings: list[str] = []
    segments = _subject_segments(bundle)
    for subject in sorted(segments):
        segs = segments[subject]
        n = len(segs)
        if n == 1:
            role_of[segs[0]] = "train"
            warnings.append(f"subject {subject} has a single segment; assigned train-only")
            continue
        order = list(segs)
        rng.shuffle(order)
        n_test = min(max(_half_up(spec.test_fraction * n), 0), n - 1)
        remaining = n - n_test
        n_val = min(max(_half_up(spec.val_fraction * n), 0), remaining - 1)
        remaining -= n_val
        n_calib = min(max(_half_up(spec.calib_fraction * n), 0), remaining - 1)
        cursor = 0
        for sid in order[cursor : cursor + n_test]:
            role_of[sid] = "test"
        cursor += n_test
        for sid in order[cursor : cursor + n_val]:
            role_of[sid] = "validation"
        cursor += n_val
        for sid in order[cursor : cursor + n_calib]:
            role_of[sid] = "calibration"
        cursor += n_calib
        for sid in order[cursor:]:
            role_of[sid] = "train"
    return role_of, warnings


def _group_counts(n_subjects: int, spec: SplitSpec) -> tuple[int, int, int]:
    n_test = max(1, _half_up(spec.test_fraction * n_subjects))
    n_val = max(1, _half_up(spec.val_fraction * n_subjects))
    n_calib = max(1, _half_up(spec.calib_fraction * n_subjects)) if spec.calib_fraction > 0 else 0
    if n_test + n_val + n_calib > n_subjects - 1:
        raise SplitError(
            f"cannot reserve {n_test} test + {n_val} validation + {n_calib} calibration "
            f"subjects out of {n_subjects} and still keep a training subject"
        )
    return n_test, n_val, n_calib


def _assign_by_subject(subject_order, segments, n_test, n_val, n_calib):
    role_of: dict[str, str] = {}
    cursor = 0
    for role, count in (("test", n_test), ("validation", n_val), ("calibration", n_calib)):
        for subject in subject_order[cursor : cursor + count]:
            for sid in segments[subject]:
                role_of[sid] = role
        cursor += count
    for subject in subject_order[cursor:]:
        for sid in segments[subject]:
            role_of[sid] = "train"
    return role_of


def _tail_stats(bundle: DatasetBundle, quota: TailQuota) -> dict[str, tuple[int, int, int]]:
    """Per subject: (n_segments, n_below_low, n_above_high)."""
    stats: dict[str, list[int]] = {}
    for r in bundle.records:
        s = stats.setdefault(r.subject_id, [0, 0, 0])
        s[0] += 1
        if r.sbp < quota.low_sbp_threshold:
            s[1] += 1
        if r.sbp > quota.high_sbp_threshold:
            s[2] += 1
    return {k: tuple(v) for k, v in stats.items()}


def _fractions(test_subjects, stats) -> tuple[float, float]:
    total = sum(stats[s][0] for s in test_subjects)
    low = sum(stats[s][1] for s in test_subjects)
    high = sum(stats[s][2] for s in test_subjects)
    return low / total, high / total


def _best_single_side(stats, subjects, k: int, side: int) -> float:
    """Greedy upper estimate of the achievable tail fraction on one side
    when choosing k whole subjects (side 1 = low tail, 2 = high tail)."""
    ranked = sorted(subjects, key=lambda s: (-(stats[s][side] / stats[s][0]), s))
    chosen = ranked[:k]
    frac_low, frac_high = _fractions(chosen, stats)
    return frac_low if side == 1 else frac_high


def _select_aami_test(subjects_shuffled, stats, k: int, quota: TailQuota) -> list[str]:
    """Pick k test subjects meeting both tail quotas.

    Seeds the selection with the subjects richest in each tail, then
    hill-climbs single swaps on the joint quota deficit. Deterministic:
    candidates are visited in a fixed order.
    """
    q = quota.min_tail_fraction

    def deficit(sel):
        lo, hi = _fractions(sel, stats)
        return max(0.0, q - lo) + max(0.0, q - hi)

    by_low = sorted(subjects_shuffled, key=lambda s: (-(stats[s][1] / stats[s][0]), s))
    by_high = sorted(subjects_shuffled, key=lambda s: (-(stats[s][2] / stats[s][0]), s))
    selected: list[str] = []
    for cand in [x for pair in zip(by_low, by_high) for x in pair] + list(subjects_shuffled):
        if cand not in selected:
            selected.append(cand)
        if len(selected) == k:
            break

    current = deficit(selected)
    improved = True
    while current > 0 and improved:
        improved = False
        outside = [s for s in subjects_shuffled if s not in selected]
        best_swap, best_deficit = None, current
        for out_s in list(selected):
            for in_s in outside:
                trial = [x for x in selected if x != out_s] + [in_s]
                d = deficit(trial)
                if d < best_deficit - 1e-12:
                    best_swap, best_deficit = (out_s, in_s), d
        if best_swap is not None:
            out_s, in_s = best_swap
            selected = [x for x in selected if x != out_s] + [in_s]
            current = best_deficit
            improved = True

    if current > 0:
        lo, hi = _fractions(selected, stats)
        best_lo = _best_single_side(stats, subjects_shuffled, k, 1)
        best_hi = _best_single_side(stats, subjects_shuffled, k, 2)
        raise InfeasibleQuotaError(
            f"tail quota {q:.3f} infeasible with {k} test subjects: best selection found "
            f"reaches low={lo:.3f}, high={hi:.3f}; single-side maxima are "
            f"low={best_lo:.3f}, high={best_hi:.3f}",
            achievable_low=best_lo,
            achievable_high=best_hi,
        )
    return selected


def make_split(bundle: DatasetBundle, spec: SplitSpec) -> SplitAssignment:
    """Construct a role assignment for the bundle under the given spec."""
    spec.validate()
    report = validate_bundle(bundle)
    if not report.ok:
        raise ValidationError(f"bundle invalid: {report}")
    if not bundle.records:
        raise ValidationError("cannot split an empty bundle")

    segments = _subject_segments(bundle)
    subjects = sorted(segments)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))

    if spec.scenario == "calib":
        role_of, warnings = _split_calib(bundle, spec, rng)
        return SplitAssignment(role_of, spec.scenario, bundle.name, warnings)

    if len(subjects) < 4:
        raise SplitError(f"{spec.scenario} needs at least 4 subjects, bundle has {len(subjects)}")
    n_test, n_val, n_calib = _group_counts(len(subjects), spec)
    order = list(subjects)
    rng.shuffle(order)

    if spec.scenario == "calibfree":
        role_of = _assign_by_subject(order, segments, n_test, n_val, n_calib)
        return SplitAssignment(role_of, spec.scenario, bundle.name, [])

    # aami: quota-driven test selection, remaining subjects keep shuffle order
    stats = _tail_stats(bundle, spec.aami_tail_quota)
    test_subjects = _select_aami_test(order, stats, n_test, spec.aami_tail_quota)
    rest = [s for s in order if s not in test_subjects]
    role_of = _assign_by_subject(test_subjects + rest, segments, n_test, n_val, n_calib)
    return SplitAssignment(role_of, spec.scenario, bundle.name, [], tail_quota=spec.aami_tail_quota)


def verify_split(bundle: DatasetBundle, assignment: SplitAssignment) -> list[str]:
    """Return a list of invariant violations (empty iff the split is valid)."""
    violations: list[str] = []
    bundle_ids = {r.segment_id for r in bundle.records}
    assigned_ids = set(assignment.role_of)

    unknown = assigned_ids - bundle_ids
    if unknown:
        violations.append(f"unknown ids: assignment references {sorted(unknown)[:5]}")
    missing = bundle_ids - assigned_ids
    if missing:
        violations.append(f"coverage: segments missing from assignment: {sorted(missing)[:5]}")
    bad_roles = {r for r in assignment.role_of.values() if r not in ROLES}
    if bad_roles:
        violations.append(f"unknown roles: {sorted(bad_roles)}")

    subject_of = {r.segment_id: r.subject_id for r in bundle.records}
    subjects_by_role: dict[str, set[str]] = {role: set() for role in ROLES}
    for sid, role in assignment.role_of.items():
        if sid in subject_of and role in subjects_by_role:
            subjects_by_role[role].add(subject_of[sid])

    if assignment.scenario == "calib":
        orphans = subjects_by_role["test"] - subjects_by_role["train"]
        if orphans:
            violations.append(
                f"calib subject-sharing: test subjects without train segments: {sorted(orphans)[:5]}"
            )
    elif assignment.scenario in ("calibfree", "aami"):
        overlap = subjects_by_role["train"] & subjects_by_role["test"]
        if overlap:
            violations.append(f"subject overlap between train and test: {sorted(overlap)[:5]}")

    if assignment.scenario == "aami":
        recs = {r.segment_id: r for r in bundle.records}
        test_ids = [sid for sid, role in assignment.role_of.items() if role == "test" and sid in recs]
        if test_ids:
            quota = assignment.tail_quota or TailQuota()
            sbp = np.array([recs[sid].sbp for sid in test_ids])
            low = float(np.mean(sbp < quota.low_sbp_threshold))
            high = float(np.mean(sbp > quota.high_sbp_threshold))
            if low < quota.min_tail_fraction or high < quota.min_tail_fraction:
                violations.append(
                    f"aami tail quota: test tail fractions low={low:.3f} high={high:.3f} "
                    f"below {quota.min_tail_fraction}"
                )
    return violations

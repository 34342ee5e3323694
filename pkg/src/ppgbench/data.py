"""Segment-dataset container, validation, disk format, CSV ingest and a
synthetic PPG/BP generator.

A bundle is an ordered list of waveform segments with SBP/DBP reference
labels. All segments in one bundle share a sample rate and a waveform
length (one bundle = one acquisition protocol). Waveforms are float32,
labels are plain floats serialized as decimal text so they round-trip
exactly.

On-disk layout (one directory per bundle):
    manifest.json   {format_version, name, sample_rate, n_records,
                     waveform_length, provenance}
    records.csv     segment_id,subject_id,source,sbp,dbp,offset,length
    waveforms.f32le little-endian float32, concatenated in CSV row order
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import BundleFormatError, ValidationError

SBP_MIN, SBP_MAX = 40.0, 300.0
DBP_MIN, DBP_MAX = 20.0, 200.0

# per-segment label jitter around the subject baseline, mmHg
LABEL_JITTER = 3.0

CSV_HEADER = ["segment_id", "subject_id", "source", "sbp", "dbp", "offset", "length"]


@dataclass(frozen=True)
class SegmentRecord:
    """One PPG segment with its reference labels and identity."""

    segment_id: str
    subject_id: str
    source: str
    waveform: np.ndarray  # float32, read-only
    sbp: float
    dbp: float

    def __eq__(self, other):
        if not isinstance(other, SegmentRecord):
            return NotImplemented
        return (
            self.segment_id == other.segment_id
            and self.subject_id == other.subject_id
            and self.source == other.source
            and self.sbp == other.sbp
            and self.dbp == other.dbp
            and self.waveform.dtype == other.waveform.dtype
            and self.waveform.shape == other.waveform.shape
            and self.waveform.tobytes() == other.waveform.tobytes()
        )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


@dataclass
class DatasetBundle:
    """Ordered collection of segments plus manifest metadata."""

    records: list[SegmentRecord]
    sample_rate: float = 125.0
    name: str = "bundle"
    provenance: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.name == other.name
            and self.sample_rate == other.sample_rate
            and self.provenance == other.provenance
            and self.records == other.records
        )

    def __len__(self):
        return len(self.records)

    @property
    def waveform_length(self) -> int:
        return len(self.records[0].waveform) if self.records else 0

    def labels(self) -> np.ndarray:
        """(n, 2) float64 array of (sbp, dbp)."""
        return np.array([[r.sbp, r.dbp] for r in self.records], dtype=np.float64)

    def waveforms(self) -> np.ndarray:
        """(n, length) float32 array."""
        return np.stack([r.waveform for r in self.records]).astype(np.float32)

    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.records]

    def by_id(self) -> dict[str, SegmentRecord]:
        return {r.segment_id: r for r in self.records}

    def subset(self, segment_ids, name: str | None = None) -> "DatasetBundle":
        """New bundle restricted to the given ids, original order kept."""
        wanted = set(segment_ids)
        recs = [r for r in self.records if r.segment_id in wanted]
        missing = wanted - {r.segment_id for r in recs}
        if missing:
            raise ValidationError(f"unknown segment ids: {sorted(missing)[:5]}")
        return DatasetBundle(
            records=recs,
            sample_rate=self.sample_rate,
            name=name or self.name,
            provenance=dict(self.provenance),
        )


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic PPG/BP generator.

    morphology_coupling in [0, 1] controls how strongly the waveform shape
    depends on the subject's blood pressure; 0 makes waveforms statistically
    independent of the labels (an unlearnable task), 1 gives the cleanest
    dependence. Default label statistics follow a large perioperative
    reference cohort.
    """

    n_subjects: int = 50
    segments_per_subject: int = 10
    segment_length: int = 625
    sbp_mean: float = 115.62
    sbp_sd: float = 18.92
    dbp_mean: float = 63.03
    dbp_sd: float = 12.05
    heart_rate_range: tuple[float, float] = (55.0, 95.0)
    morphology_coupling: float = 1.0
    noise_sd: float = 0.05
    seed: int = 0

    def validate(self):
        if self.n_subjects < 1 or self.segments_per_subject < 1:
            raise ValidationError("n_subjects and segments_per_subject must be >= 1")
        if self.segment_length < 1:
            raise ValidationError("segment_length must be >= 1")
        if self.sbp_sd < 0 or self.dbp_sd < 0 or self.noise_sd < 0:
            raise ValidationError("standard deviations must be >= 0")
        if not (0.0 <= self.morphology_coupling <= 1.0):
            raise ValidationError("morphology_coupling must lie in [0, 1]")
        lo, hi = self.heart_rate_range
        if not (0 < lo <= hi):
            raise ValidationError("heart_rate_range must satisfy 0 < low <= high")


@dataclass(frozen=True)
class Violation:
    kind: str
    record_id: str
    message: str


@dataclass
class ValidationReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(f"{v.kind} [{v.record_id}]: {v.message}" for v in self.violations)


def validate_bundle(bundle: DatasetBundle) -> ValidationReport:
    """Check every bundle invariant; the report lists all violations."""
    report = ValidationReport()
    seen: set[str] = set()
    length = bundle.waveform_length
    for r in bundle.records:
        if r.segment_id in seen:
            report.violations.append(
                Violation("duplicate id", r.segment_id, "segment_id occurs more than once")
            )
        seen.add(r.segment_id)
        if not np.isfinite(np.asarray(r.waveform)).all():
            report.violations.append(
                Violation("non-finite waveform", r.segment_id, "waveform contains NaN or inf")
            )
        if len(r.waveform) != length:
            report.violations.append(
                Violation(
                    "length heterogeneity",
                    r.segment_id,
                    f"waveform length {len(r.waveform)} != bundle length {length}",
                )
            )
        if not (math.isfinite(r.sbp) and math.isfinite(r.dbp)):
            report.violations.append(
                Violation("non-finite label", r.segment_id, "sbp/dbp must be finite")
            )
            continue
        if not r.sbp > r.dbp:
            report.violations.append(
                Violation(
                    "label ordering",
                    r.segment_id,
                    f"sbp must exceed dbp (got sbp={r.sbp}, dbp={r.dbp})",
                )
            )
        if not (SBP_MIN <= r.sbp <= SBP_MAX):
            report.violations.append(
                Violation("label bounds", r.segment_id, f"sbp={r.sbp} outside [{SBP_MIN}, {SBP_MAX}]")
            )
        if not (DBP_MIN <= r.dbp <= DBP_MAX):
            report.violations.append(
                Violation("label bounds", r.segment_id, f"dbp={r.dbp} outside [{DBP_MIN}, {DBP_MAX}]")
            )
    return report


# ---------------------------------------------------------------------------
# synthetic generator
# ---------------------------------------------------------------------------

# normalization anchors for the morphology law
_SBP_REF, _SBP_SCALE = 115.0, 40.0
_DBP_REF, _DBP_SCALE = 63.0, 30.0


def _morphology(sbp: float, dbp: float, coupling: float) -> tuple[float, float, float]:
    """Map a subject's (sbp, dbp) to pulse-shape parameters.

    Returns (pulse_width, notch_amplitude, upstroke_factor). Each is an
    affine function of the normalized labels, scaled by the coupling knob
    and clipped to a physically sane range. The three coefficients span a
    rank-2 map so both labels stay recoverable from the shape.
    """
    sn = (sbp - _SBP_REF) / _SBP_SCALE
    dn = (dbp - _DBP_REF) / _DBP_SCALE
    width = 0.11 + coupling * (-0.050 * sn + 0.020 * dn)
    notch = 0.30 + coupling * (0.100 * sn + 0.300 * dn)
    upstroke = 1.60 + coupling * (0.60 * sn - 0.30 * dn)
    return (
        float(np.clip(width, 0.04, 0.26)),
        float(np.clip(notch, 0.02, 0.90)),
        float(np.clip(upstroke, 0.8, 4.0)),
    )


def _pulse_train(
    n_samples: int,
    sample_rate: float,
    heart_rate: float,
    phase0: float,
    width: float,
    notch: float,
    upstroke: float,
) -> np.ndarray:
    """One Gaussian-mixture pulse per beat: asymmetric systolic wave plus a
    dicrotic bump, evaluated on the beat phase in [0, 1)."""
    t = np.arange(n_samples, dtype=np.float64) / sample_rate
    period = 60.0 / heart_rate
    phase = (t / period + phase0) % 1.0

    peak = 0.23
    sigma_left = width / upstroke
    sigma = np.where(phase < peak, sigma_left, width)
    main = np.exp(-0.5 * ((phase - peak) / sigma) ** 2)
    dicrotic = notch * np.exp(-0.5 * ((phase - 0.55) / 0.07) ** 2)
    return main + dicrotic


def _sample_baseline(rng: np.random.Generator, cfg: SynthConfig) -> tuple[float, float]:
    for _ in range(10_000):
        sbp = float(np.clip(rng.normal(cfg.sbp_mean, cfg.sbp_sd), SBP_MIN, SBP_MAX))
        dbp = float(np.clip(rng.normal(cfg.dbp_mean, cfg.dbp_sd), DBP_MIN, DBP_MAX))
        if sbp > dbp:
            return sbp, dbp
    raise ValidationError("could not sample a subject baseline with sbp > dbp")


def _jitter_labels(rng: np.random.Generator, sbp0: float, dbp0: float) -> tuple[float, float]:
    for _ in range(10_000):
        sbp = float(np.clip(sbp0 + rng.uniform(-LABEL_JITTER, LABEL_JITTER), SBP_MIN, SBP_MAX))
        dbp = float(np.clip(dbp0 + rng.uniform(-LABEL_JITTER, LABEL_JITTER), DBP_MIN, DBP_MAX))
        if sbp > dbp:
            return sbp, dbp
    raise ValidationError("could not jitter labels while keeping sbp > dbp")


def generate_synthetic(config: SynthConfig, name: str | None = None) -> DatasetBundle:
    """Generate a deterministic synthetic bundle from the given config.

    Per subject a baseline (sbp, dbp) is drawn from the configured
    Gaussians, clipped to the sanity bounds and resampled until sbp > dbp.
    Each segment is a beat train at the subject's heart rate whose shape
    parameters follow the morphology law above, plus white noise; labels
    jitter uniformly within +-3 mmHg of the subject baseline.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(config.seed)))
    bundle_name = name or f"synth-{config.seed}"
    sample_rate = 125.0

    records: list[SegmentRecord] = []
    for s in range(config.n_subjects):
        subject_id = f"subj{s:04d}"
        sbp0, dbp0 = _sample_baseline(rng, config)
        heart_rate = float(rng.uniform(*config.heart_rate_range))
        width, notch, upstroke = _morphology(sbp0, dbp0, config.morphology_coupling)
        for j in range(config.segments_per_subject):
            sbp, dbp = _jitter_labels(rng, sbp0, dbp0)
            phase0 = float(rng.uniform(0.0, 1.0))
            wf = _pulse_train(
                config.segment_length, sample_rate, heart_rate, phase0, width, notch, upstroke
            )
            wf = wf + rng.normal(0.0, config.noise_sd, size=config.segment_length)
            records.append(
                SegmentRecord(
                    segment_id=f"{bundle_name}-{subject_id}-{j:04d}",
                    subject_id=subject_id,
                    source="synthetic",
                    waveform=_frozen(wf),
                    sbp=sbp,
                    dbp=dbp,
                )
            )

    # json round trip normalizes tuples to lists so provenance equality
    # survives write/load
    provenance = json.loads(json.dumps({"generator": "ppgbench.synthetic", "config": asdict(config)}))
    return DatasetBundle(
        records=records,
        sample_rate=sample_rate,
        name=bundle_name,
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def write_bundle(bundle: DatasetBundle, path: str | os.PathLike) -> None:
    """Write a bundle directory (manifest.json, records.csv, waveforms.f32le)."""
    report = validate_bundle(bundle)
    if not report.ok:
        raise ValidationError(f"refusing to write invalid bundle: {report}")
    os.makedirs(path, exist_ok=True)

    manifest = {
        "format_version": 1,
        "name": bundle.name,
        "sample_rate": bundle.sample_rate,
        "n_records": len(bundle.records),
        "waveform_length": bundle.waveform_length,
        "provenance": bundle.provenance,
    }
    with open(os.path.join(path, "manifest.json"), "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    offset = 0
    blobs = []
    for r in bundle.records:
        n = len(r.waveform)
        # repr() keeps the shortest exact decimal form, so labels round-trip
        writer.writerow([r.segment_id, r.subject_id, r.source, repr(r.sbp), repr(r.dbp), offset, n])
        blobs.append(np.asarray(r.waveform, dtype="<f4").tobytes())
        offset += n
    with open(os.path.join(path, "records.csv"), "w", encoding="utf-8", newline="") as f:
        f.write(buf.getvalue())
    with open(os.path.join(path, "waveforms.f32le"), "wb") as f:
        f.write(b"".join(blobs))


def _parse_rows(csv_text: str, csv_name: str) -> list[dict]:
    reader = csv.DictReader(io.StringIO(csv_text))
    if reader.fieldnames != CSV_HEADER:
        raise BundleFormatError(
            f"{csv_name}: expected header {','.join(CSV_HEADER)}, got {reader.fieldnames}"
        )
    rows = []
    for lineno, row in enumerate(reader, start=2):
        try:
            parsed = {
                "segment_id": row["segment_id"],
                "subject_id": row["subject_id"],
                "source": row["source"],
                "sbp": float(row["sbp"]),
                "dbp": float(row["dbp"]),
                "offset": int(row["offset"]),
                "length": int(row["length"]),
            }
        except (TypeError, ValueError) as exc:
            raise BundleFormatError(f"{csv_name} line {lineno}: {exc}") from exc
        rows.append(parsed)
    return rows


def _records_from_rows(rows: list[dict], blob: np.ndarray) -> list[SegmentRecord]:
    """Rows must tile the blob exactly, without overlap or gaps."""
    total = len(blob)
    if sum(r["length"] for r in rows) != total:
        raise BundleFormatError(
            f"blob size mismatch: rows cover {sum(r['length'] for r in rows)} samples, "
            f"blob holds {total}"
        )
    covered = sorted(rows, key=lambda r: r["offset"])
    cursor = 0
    for r in covered:
        if r["offset"] != cursor:
            kind = "overlap" if r["offset"] < cursor else "gap"
            raise BundleFormatError(
                f"record {r['segment_id']}: offset {r['offset']} creates an {kind} "
                f"(expected {cursor})"
            )
        if r["offset"] + r["length"] > total:
            raise BundleFormatError(
                f"record {r['segment_id']}: extends past end of waveform blob"
            )
        cursor = r["offset"] + r["length"]
    if cursor != total:
        raise BundleFormatError(
            f"waveform blob not fully tiled: records end at {cursor}, blob holds {total}"
        )

    records = []
    for r in rows:
        wf = blob[r["offset"] : r["offset"] + r["length"]]
        records.append(
            SegmentRecord(
                segment_id=r["segment_id"],
                subject_id=r["subject_id"],
                source=r["source"],
                waveform=_frozen(wf),
                sbp=r["sbp"],
                dbp=r["dbp"],
            )
        )
    return records


def load_bundle(path: str | os.PathLike) -> DatasetBundle:
    """Load a bundle directory written by write_bundle.

    Raises BundleFormatError naming the offending record on any structural
    problem (size mismatch, duplicate ids, invariant violations).
    """
    try:
        with open(os.path.join(path, "manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as exc:
        raise BundleFormatError(f"corrupt or missing manifest.json: {exc}") from exc
    for key in ("format_version", "name", "sample_rate", "n_records", "waveform_length"):
        if key not in manifest:
            raise BundleFormatError(f"manifest.json missing key {key!r}")
    if manifest["format_version"] != 1:
        raise BundleFormatError(f"unsupported format_version {manifest['format_version']}")

    with open(os.path.join(path, "records.csv"), "r", encoding="utf-8", newline="") as f:
        rows = _parse_rows(f.read(), "records.csv")
    if len(rows) != manifest["n_records"]:
        raise BundleFormatError(
            f"manifest says {manifest['n_records']} records, records.csv has {len(rows)}"
        )

    blob_bytes = open(os.path.join(path, "waveforms.f32le"), "rb").read()
    expected = manifest["n_records"] * manifest["waveform_length"] * 4
    if len(blob_bytes) != expected:
        raise BundleFormatError(
            f"blob size mismatch: waveforms.f32le holds {len(blob_bytes)} bytes, "
            f"manifest implies {expected}"
        )
    blob = np.frombuffer(blob_bytes, dtype="<f4")

    for r in rows:
        if r["length"] != manifest["waveform_length"]:
            raise BundleFormatError(
                f"record {r['segment_id']}: length {r['length']} != manifest "
                f"waveform_length {manifest['waveform_length']}"
            )

    records = _records_from_rows(rows, blob)
    bundle = DatasetBundle(
        records=records,
        sample_rate=manifest["sample_rate"],
        name=manifest["name"],
        provenance=manifest.get("provenance", {}),
    )
    report = validate_bundle(bundle)
    if not report.ok:
        raise BundleFormatError(f"loaded bundle violates invariants: {report}")
    return bundle


def ingest_csv(
    manifest_csv: str | os.PathLike,
    waveform_blob: str | os.PathLike,
    name: str = "ingested",
    sample_rate: float = 125.0,
) -> DatasetBundle:
    """Build a bundle from an externally prepared CSV + raw float32 blob.

    The CSV uses the records.csv schema; offsets/lengths must tile the blob
    without overlap. The resulting bundle must pass validate_bundle.
    """
    with open(manifest_csv, "r", encoding="utf-8", newline="") as f:
        rows = _parse_rows(f.read(), str(manifest_csv))
    if not rows:
        raise BundleFormatError("ingest CSV holds no records")
    blob = np.frombuffer(open(waveform_blob, "rb").read(), dtype="<f4")
    records = _records_from_rows(rows, blob)
    bundle = DatasetBundle(records=records, sample_rate=sample_rate, name=name)
    report = validate_bundle(bundle)
    if not report.ok:
        raise BundleFormatError(f"ingested bundle invalid: {report}")
    return bundle

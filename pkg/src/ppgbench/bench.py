"""Train-by-test evaluation grids and report rendering.

A grid trains one model per row (a training set + split) and evaluates it
on every column (a test set), recording MAE and MASE per output. MASE in a
cell always uses the row's training-set median as baseline. Failed rows or
cells are recorded as first-class values, never silently dropped.

Annotation follows the usual table conventions: the k best MAEs per column
and output are flagged (ties at the k-th value all flagged), per-row counts
summarize the flags, and the per-column best is underlined in rendered
Markdown.
"""

from __future__ import annotations

import concurrent.futures
import json
import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .adaptation import (
    LabelHistogram,
    build_histogram,
    compute_weights,
    default_dbp_binning,
    default_sbp_binning,
    emd,
)
from .data import DatasetBundle
from .errors import BinningMismatchError, ValidationError
from .metrics import EvalResult, median_baseline
from .models import ModelSpec, build_model
from .splits import SplitAssignment
from .training import TrainConfig, predict_in_batches, train

DEFAULT_TOP_K = 3


@dataclass(frozen=True)
class GridCell:
    mae_sbp: float | None = None
    mae_dbp: float | None = None
    mase_sbp: float | None = None
    mase_dbp: float | None = None
    failed: bool = False
    error: str | None = None


@dataclass
class TrainSetRef:
    name: str
    bundle: DatasetBundle
    assignment: SplitAssignment


@dataclass
class TestSetRef:
    """A grid column: a bundle, optionally restricted to specific segments."""

    __test__ = False  # not a pytest class despite the name

    name: str
    bundle: DatasetBundle
    segment_ids: list[str] | None = None

    def records(self):
        if self.segment_ids is None:
            return list(self.bundle.records)
        wanted = set(self.segment_ids)
        return [r for r in self.bundle.records if r.segment_id in wanted]


@dataclass
class GridReport:
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], GridCell]
    annotations: dict[tuple[str, str], tuple[bool, bool]] = field(default_factory=dict)
    counts: dict[str, tuple[int, int]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def cell(self, row: str, col: str) -> GridCell:
        return self.cells[(row, col)]

    @classmethod
    def from_mae_matrix(cls, rows, cols, mae_sbp, mae_dbp) -> "GridReport":
        """Build a report from plain per-output MAE matrices (no MASE)."""
        sbp = np.asarray(mae_sbp, dtype=np.float64)
        dbp = np.asarray(mae_dbp, dtype=np.float64)
        if sbp.shape != (len(rows), len(cols)) or dbp.shape != sbp.shape:
            raise ValidationError("matrix shapes must be (len(rows), len(cols))")
        cells = {
            (r, c): GridCell(mae_sbp=float(sbp[i, j]), mae_dbp=float(dbp[i, j]))
            for i, r in enumerate(rows)
            for j, c in enumerate(cols)
        }
        return cls(rows=list(rows), cols=list(cols), cells=cells)

    def to_json(self) -> str:
        cells = {
            r: {c: vars(self.cells[(r, c)]) for c in self.cols if (r, c) in self.cells}
            for r in self.rows
        }
        ann = {
            r: {c: list(self.annotations[(r, c)]) for c in self.cols if (r, c) in self.annotations}
            for r in self.rows
        }
        return json.dumps(
            {
                "rows": self.rows,
                "cols": self.cols,
                "cells": cells,
                "annotations": ann,
                "counts": {r: list(v) for r, v in self.counts.items()},
                "meta": self.meta,
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "GridReport":
        d = json.loads(text)
        cells = {
            (r, c): GridCell(**cell)
            for r, row_cells in d["cells"].items()
            for c, cell in row_cells.items()
        }
        ann = {
            (r, c): tuple(flags)
            for r, row_ann in d.get("annotations", {}).items()
            for c, flags in row_ann.items()
        }
        return cls(
            rows=d["rows"],
            cols=d["cols"],
            cells=cells,
            annotations=ann,
            counts={r: tuple(v) for r, v in d.get("counts", {}).items()},
            meta=d.get("meta", {}),
        )


def _evaluate_cell(trained, records, baseline) -> GridCell:
    refs = np.array([[r.sbp, r.dbp] for r in records], dtype=np.float64)
    preds = predict_in_batches(trained, np.stack([r.waveform for r in records]))
    res = EvalResult.from_predictions(preds, refs, baseline)
    return GridCell(
        mae_sbp=res.mae_sbp, mae_dbp=res.mae_dbp, mase_sbp=res.mase_sbp, mase_dbp=res.mase_dbp
    )


def _weight_tables_for_row(train_records, target_records, tau):
    sbp_binning, dbp_binning = default_sbp_binning(), default_dbp_binning()
    h_train_sbp = build_histogram([r.sbp for r in train_records], sbp_binning)
    h_train_dbp = build_histogram([r.dbp for r in train_records], dbp_binning)
    h_test_sbp = build_histogram([r.sbp for r in target_records], sbp_binning)
    h_test_dbp = build_histogram([r.dbp for r in target_records], dbp_binning)
    return (
        compute_weights(h_train_sbp, h_test_sbp, tau),
        compute_weights(h_train_dbp, h_test_dbp, tau),
    )


def _run_row(row: TrainSetRef, test_sets, model, train_config, weight_tables):
    out: dict[tuple[str, str], GridCell] = {}
    t0 = time.perf_counter()
    try:
        trained, history = train(model, row.bundle, row.assignment, train_config, weight_tables)
    except Exception as exc:  # failed rows stay visible in the report
        cell = GridCell(failed=True, error=f"training failed: {exc}")
        return {(row.name, ts.name): cell for ts in test_sets}, None, time.perf_counter() - t0

    train_labels = [
        [r.sbp, r.dbp]
        for r in row.bundle.records
        if row.assignment.role_of.get(r.segment_id) == "train"
    ]
    baseline = median_baseline(np.array(train_labels))
    for ts in test_sets:
        try:
            out[(row.name, ts.name)] = _evaluate_cell(trained, ts.records(), baseline)
        except Exception as exc:
            out[(row.name, ts.name)] = GridCell(failed=True, error=f"evaluation failed: {exc}")
    return out, history, time.perf_counter() - t0


def run_grid(
    train_sets: list[TrainSetRef],
    test_sets: list[TestSetRef],
    model_spec: ModelSpec,
    train_config: TrainConfig,
    weighting: bool = False,
    weight_target: str | None = None,
    tau: float = 1.0,
    jobs: int = 1,
) -> GridReport:
    """Train one model per row and evaluate it on every test set.

    With weighting enabled, every row trains with per-sample weights toward
    the label distribution of the named weight_target test set (one model
    per row is preserved; rerun the grid per target to emulate per-cell
    adaptation).
    """
    if not train_sets or not test_sets:
        raise ValidationError("need at least one train set and one test set")
    names = [ts.name for ts in test_sets]
    if len(set(names)) != len(names) or len({r.name for r in train_sets}) != len(train_sets):
        raise ValidationError("train/test set names must be unique")
    target = None
    if weighting:
        if weight_target is None:
            raise ValidationError("weighting requires weight_target (a test-set name)")
        matches = [ts for ts in test_sets if ts.name == weight_target]
        if not matches:
            raise ValidationError(f"weight_target {weight_target!r} is not a test set")
        target = matches[0]

    def row_tables(row):
        if not weighting:
            return None
        train_records = [
            r
            for r in row.bundle.records
            if row.assignment.role_of.get(r.segment_id) == "train"
        ]
        return _weight_tables_for_row(train_records, target.records(), tau)

    # one shared initial model: every row trains its own copy of it
    initial = build_model(model_spec)
    results: dict[tuple[str, str], GridCell] = {}
    timings: dict[str, float] = {}
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            futures = {
                pool.submit(
                    _run_row, row, test_sets, initial, train_config, row_tables(row)
                ): row.name
                for row in train_sets
            }
            for fut in concurrent.futures.as_completed(futures):
                cells, _, elapsed = fut.result()
                results.update(cells)
                timings[futures[fut]] = elapsed
    else:
        for row in train_sets:
            cells, _, elapsed = _run_row(row, test_sets, initial, train_config, row_tables(row))
            results.update(cells)
            timings[row.name] = elapsed

    report = GridReport(
        rows=[r.name for r in train_sets],
        cols=names,
        cells=results,
        meta={
            "model": vars(model_spec),
            "train_config": vars(train_config),
            "weighting": weighting,
            "weight_target": weight_target,
            "tau": tau,
            "row_seconds": timings,
        },
    )
    return mark_top_k(report)


def mark_top_k(report: GridReport, k: int = DEFAULT_TOP_K) -> GridReport:
    """Flag the k smallest MAEs per column and output; ties at the k-th
    value are all flagged. Returns a new report with recomputed counts."""
    annotations: dict[tuple[str, str], tuple[bool, bool]] = {}
    flags = {0: {}, 1: {}}
    for j, col in enumerate(report.cols):
        for out_idx, attr in enumerate(("mae_sbp", "mae_dbp")):
            values = [
                (getattr(report.cells[(r, col)], attr), r)
                for r in report.rows
                if (r, col) in report.cells and not report.cells[(r, col)].failed
            ]
            flagged = set()
            if values:
                ordered = sorted(v for v, _ in values)
                kth = ordered[min(k, len(ordered)) - 1]
                flagged = {r for v, r in values if v <= kth}
            flags[out_idx][col] = flagged
    for r in report.rows:
        for c in report.cols:
            if (r, c) in report.cells:
                annotations[(r, c)] = (r in flags[0][c], r in flags[1][c])
    counts = {
        r: (
            sum(1 for c in report.cols if annotations.get((r, c), (False, False))[0]),
            sum(1 for c in report.cols if annotations.get((r, c), (False, False))[1]),
        )
        for r in report.rows
    }
    return replace(report, annotations=annotations, counts=counts)


@dataclass
class DiffGrid:
    rows: list[str]
    cols: list[str]
    cells: dict[tuple[str, str], tuple[float | None, float | None]]
    summary: tuple[float, float]  # mean diff per output over included cells
    meta: dict = field(default_factory=dict)


def diff_grids(weighted: GridReport, unweighted: GridReport, exclude=None) -> DiffGrid:
    """Cellwise (weighted - unweighted) MAE differences; negative values are
    improvements. exclude, when given, is a set of (row, col) pairs left out
    of the summary means (e.g. in-distribution diagonals)."""
    if weighted.rows != unweighted.rows or weighted.cols != unweighted.cols:
        raise ValidationError("grids must share identical row and column sets")
    exclude = set(exclude or ())
    cells = {}
    diffs_sbp, diffs_dbp = [], []
    for r in weighted.rows:
        for c in weighted.cols:
            a, b = weighted.cells[(r, c)], unweighted.cells[(r, c)]
            if a.failed or b.failed:
                cells[(r, c)] = (None, None)
                continue
            d = (a.mae_sbp - b.mae_sbp, a.mae_dbp - b.mae_dbp)
            cells[(r, c)] = d
            if (r, c) not in exclude:
                diffs_sbp.append(d[0])
                diffs_dbp.append(d[1])
    if not diffs_sbp:
        raise ValidationError("no cells left to summarize")
    return DiffGrid(
        rows=list(weighted.rows),
        cols=list(weighted.cols),
        cells=cells,
        summary=(float(np.mean(diffs_sbp)), float(np.mean(diffs_dbp))),
        meta={"excluded": sorted(exclude)},
    )


@dataclass
class EmdMaeRow:
    test_set: str
    emd_mmhg: float
    mae_mmhg: float


@dataclass
class EmdMaeTable:
    rows: list[EmdMaeRow]
    pearson: float


def emd_mae_table(train_hist: LabelHistogram, entries) -> EmdMaeTable:
    """Scatter data relating label-distribution distance to OOD error.

    entries: iterable of (test_set_name, LabelHistogram, mae_mmhg); every
    histogram must share the training histogram's binning. The Pearson
    correlation of (emd, mae) is reported alongside the rows.
    """
    rows = []
    for name, hist, mae_value in entries:
        if hist.binning != train_hist.binning:
            raise BinningMismatchError(f"test set {name!r} uses a different binning")
        rows.append(EmdMaeRow(name, emd(train_hist, hist), float(mae_value)))
    if len(rows) >= 2:
        e = np.array([r.emd_mmhg for r in rows])
        m = np.array([r.mae_mmhg for r in rows])
        pearson = float(np.corrcoef(e, m)[0, 1]) if e.std() > 0 and m.std() > 0 else float("nan")
    else:
        pearson = float("nan")
    return EmdMaeTable(rows=rows, pearson=pearson)


def grid_emd_scatter(train_sets, test_sets, report: GridReport):
    """Per-row EMD/MAE scatter data for a finished grid (SBP output).

    Returns (rows, pearson_by_train_set) where rows are tuples of
    (train_set, test_set, emd_mmhg, mae_sbp_mmhg); failed cells are skipped.
    """
    binning = default_sbp_binning()
    col_hists = {
        ts.name: build_histogram([r.sbp for r in ts.records()], binning)
        for ts in test_sets
        if ts.records()
    }
    rows, pearson = [], {}
    for row in train_sets:
        train_sbp = [
            r.sbp
            for r in row.bundle.records
            if row.assignment.role_of.get(r.segment_id) == "train"
        ]
        h_train = build_histogram(train_sbp, binning)
        entries = []
        for ts in test_sets:
            cell = report.cells.get((row.name, ts.name))
            if cell is None or cell.failed or ts.name not in col_hists:
                continue
            entries.append((ts.name, col_hists[ts.name], cell.mae_sbp))
        table = emd_mae_table(h_train, entries)
        pearson[row.name] = table.pearson
        rows.extend((row.name, r.test_set, r.emd_mmhg, r.mae_mmhg) for r in table.rows)
    return rows, pearson


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def _column_best(report: GridReport) -> dict[tuple[str, int], str | None]:
    """Per (column, output): the row holding the smallest MAE (ties: first
    row in row order)."""
    best: dict[tuple[str, int], str | None] = {}
    for col in report.cols:
        for out_idx, attr in enumerate(("mae_sbp", "mae_dbp")):
            candidates = [
                (getattr(report.cells[(r, col)], attr), r)
                for r in report.rows
                if not report.cells[(r, col)].failed
            ]
            if not candidates:
                best[(col, out_idx)] = None
                continue
            low = min(v for v, _ in candidates)
            best[(col, out_idx)] = next(r for v, r in candidates if v == low)
    return best


def _md_value(value: float, bold: bool, underline: bool) -> str:
    s = f"{value:.2f}"
    if bold:
        s = f"**{s}**"
    if underline:
        s = f"<u>{s}</u>"
    return s


def grid_to_csv(report: GridReport) -> str:
    lines = [
        "train_set,test_set,mae_sbp,mae_dbp,mase_sbp,mase_dbp,"
        "top3_sbp,top3_dbp,failed,error,display"
    ]
    for r in report.rows:
        for c in report.cols:
            cell = report.cells[(r, c)]
            flags = report.annotations.get((r, c), (False, False))
            if cell.failed:
                err = (cell.error or "").replace('"', "'")
                lines.append(f'{r},{c},,,,,0,0,1,"{err}",')
                continue

            def num(x):
                return "" if x is None else repr(x)

            display = f"{cell.mae_sbp:.2f} / {cell.mae_dbp:.2f}"
            lines.append(
                f"{r},{c},{num(cell.mae_sbp)},{num(cell.mae_dbp)},"
                f"{num(cell.mase_sbp)},{num(cell.mase_dbp)},"
                f"{int(flags[0])},{int(flags[1])},0,,{display}"
            )
    return "\n".join(lines) + "\n"


def grid_to_markdown(report: GridReport) -> str:
    best = _column_best(report)
    header = "| Train set | " + " | ".join(report.cols) + " | Count (SBP/DBP) |"
    sep = "|" + "---|" * (len(report.cols) + 2)
    out = [header, sep]
    any_failed = False
    for r in report.rows:
        cells_md = []
        for c in report.cols:
            cell = report.cells[(r, c)]
            if cell.failed:
                cells_md.append("—[^fail]")
                any_failed = True
                continue
            flags = report.annotations.get((r, c), (False, False))
            sbp = _md_value(cell.mae_sbp, flags[0], best[(c, 0)] == r)
            dbp = _md_value(cell.mae_dbp, flags[1], best[(c, 1)] == r)
            cells_md.append(f"{sbp} / {dbp}")
        count = report.counts.get(r, (0, 0))
        out.append(f"| {r} | " + " | ".join(cells_md) + f" | {count[0]} / {count[1]} |")
    if any_failed:
        out.append("")
        out.append("[^fail]: cell failed; see the CSV error column for the cause.")
    return "\n".join(out) + "\n"


def diff_to_csv(diff: DiffGrid) -> str:
    lines = ["train_set,test_set,diff_mae_sbp,diff_mae_dbp,failed"]
    for r in diff.rows:
        for c in diff.cols:
            d_sbp, d_dbp = diff.cells[(r, c)]
            if d_sbp is None:
                lines.append(f"{r},{c},,,1")
            else:
                lines.append(f"{r},{c},{d_sbp!r},{d_dbp!r},0")
    lines.append(f"mean,,{diff.summary[0]!r},{diff.summary[1]!r},0")
    return "\n".join(lines) + "\n"


def diff_to_markdown(diff: DiffGrid) -> str:
    header = "| Train set | " + " | ".join(diff.cols) + " |"
    sep = "|" + "---|" * (len(diff.cols) + 1)
    out = [header, sep]
    for r in diff.rows:
        cells_md = []
        for c in diff.cols:
            d_sbp, d_dbp = diff.cells[(r, c)]
            cells_md.append("—[^fail]" if d_sbp is None else f"{d_sbp:+.2f} / {d_dbp:+.2f}")
        out.append(f"| {r} | " + " | ".join(cells_md) + " |")
    out.append("")
    out.append(
        f"Mean difference (weighted - unweighted): {diff.summary[0]:+.2f} mmHg SBP, "
        f"{diff.summary[1]:+.2f} mmHg DBP (negative = improvement)."
    )
    if any(v[0] is None for v in diff.cells.values()):
        out.append("")
        out.append("[^fail]: cell failed in at least one of the two grids.")
    return "\n".join(out) + "\n"


def mase_plotdata_csv(report: GridReport) -> str:
    lines = ["train_set,test_set,mase_sbp,mase_dbp"]
    for r in report.rows:
        for c in report.cols:
            cell = report.cells[(r, c)]
            if not cell.failed and cell.mase_sbp is not None:
                lines.append(f"{r},{c},{cell.mase_sbp!r},{cell.mase_dbp!r}")
    return "\n".join(lines) + "\n"


def emd_scatter_csv(table: EmdMaeTable) -> str:
    lines = ["test_set,emd_mmhg,mae_mmhg"]
    for row in table.rows:
        lines.append(f"{row.test_set},{row.emd_mmhg!r},{row.mae_mmhg!r}")
    return "\n".join(lines) + "\n"


def render_report(obj, out_dir: str | os.PathLike, stem: str | None = None) -> list[str]:
    """Write CSV + Markdown (and plot data where applicable) for a GridReport,
    DiffGrid or EmdMaeTable. Returns the written paths."""
    os.makedirs(out_dir, exist_ok=True)
    written = []

    def put(name, text):
        path = os.path.join(out_dir, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        written.append(path)

    if isinstance(obj, GridReport):
        stem = stem or "grid"
        put(f"{stem}.csv", grid_to_csv(obj))
        put(f"{stem}.md", grid_to_markdown(obj))
        put("mase_plotdata.csv", mase_plotdata_csv(obj))
        put(f"{stem}.json", obj.to_json())
    elif isinstance(obj, DiffGrid):
        stem = stem or "diff"
        put(f"{stem}.csv", diff_to_csv(obj))
        put(f"{stem}.md", diff_to_markdown(obj))
    elif isinstance(obj, EmdMaeTable):
        put("emd_scatter.csv", emd_scatter_csv(obj))
    else:
        raise ValidationError(f"cannot render object of type {type(obj).__name__}")
    return written

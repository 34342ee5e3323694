"""Benchmark harness for PPG-based blood-pressure regression."""

__version__ = "0.1.0"

from .adaptation import (
    HistogramBinning,
    LabelHistogram,
    WeightTable,
    assign_weights,
    build_histogram,
    compute_weights,
    emd,
)
from .bench import (
    DiffGrid,
    EmdMaeTable,
    GridCell,
    GridReport,
    TestSetRef,
    TrainSetRef,
    diff_grids,
    emd_mae_table,
    mark_top_k,
    render_report,
    run_grid,
)
from .data import (
    DatasetBundle,
    SegmentRecord,
    SynthConfig,
    ValidationReport,
    generate_synthetic,
    ingest_csv,
    load_bundle,
    validate_bundle,
    write_bundle,
)
from .metrics import EvalResult, ieee_grade, mae, mase, median_baseline
from .models import Model, ModelSpec, build_model, forward, gradients, load_checkpoint, save_checkpoint
from .splits import SplitAssignment, SplitSpec, TailQuota, make_split, verify_split
from .training import TrainConfig, TrainHistory, lr_find, train, weighted_loss

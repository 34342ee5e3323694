"""Importance-weighted empirical risk minimization.

The loss is a per-output weighted squared error,

    L = (1/n) * sum_i [ w_sbp,i * (sbp_hat_i - sbp_i)^2
                       + w_dbp,i * (dbp_hat_i - dbp_i)^2 ],

optimized with AdamW. Effective batches are assembled from micro-batches
by summing gradients and scaling by the true effective batch size, so any
micro-batch size yields the same update. Unit weights reproduce the
unweighted run bit for bit (the unweighted path multiplies by ones).

Model selection tracks the unweighted validation MAE (mean of the SBP and
DBP MAE) per epoch and returns the checkpoint of the best epoch, not the
last one.
"""

from __future__ import annotations

import copy
import csv
import io
from dataclasses import dataclass, field

import numpy as np
import torch

from .adaptation import WeightTable, assign_weights
from .data import DatasetBundle
from .errors import ShapeError, TrainingError, ValidationError
from .models import Model, forward
from .splits import SplitAssignment

DEFAULT_LEARNING_RATE = 1e-3

# learning-rate sweep: exponential from 1e-7 to 1 over at most 100 steps;
# divergence = smoothed loss exceeding 4x its best (or going non-finite)
LR_SWEEP_START = 1e-7
LR_SWEEP_STOP = 1.0
LR_SWEEP_STEPS = 100
LR_DIVERGENCE_FACTOR = 4.0
LR_SMOOTHING = 0.98


@dataclass(frozen=True)
class TrainConfig:
    effective_batch_size: int = 512
    micro_batch_size: int = 64
    epochs: int = 50
    learning_rate: float | str = DEFAULT_LEARNING_RATE  # a float or "auto"
    weight_decay: float = 0.01
    seed: int = 0

    def validate(self):
        if self.micro_batch_size < 1 or self.effective_batch_size < 1:
            raise ValidationError("batch sizes must be >= 1")
        if self.effective_batch_size % self.micro_batch_size != 0:
            raise ValidationError(
                "effective_batch_size must be a positive multiple of micro_batch_size"
            )
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if isinstance(self.learning_rate, str):
            if self.learning_rate != "auto":
                raise ValidationError("learning_rate must be a float or 'auto'")
        elif not self.learning_rate > 0:
            raise ValidationError("learning_rate must be > 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_mae_sbp: float
    val_mae_dbp: float
    checkpoint_ref: str

    @property
    def selection_metric(self) -> float:
        return 0.5 * (self.val_mae_sbp + self.val_mae_dbp)


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = 0
    learning_rate: float = DEFAULT_LEARNING_RATE

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_mae_sbp", "val_mae_dbp", "is_best"])
        for e in self.epochs:
            w.writerow(
                [
                    e.epoch,
                    repr(e.train_loss),
                    repr(e.val_mae_sbp),
                    repr(e.val_mae_dbp),
                    int(e.epoch == self.best_epoch),
                ]
            )
        return buf.getvalue()


def weighted_loss(predictions, targets, weights) -> float:
    """Importance-weighted squared-error loss over a batch (see module doc).

    Accepts numpy arrays or torch tensors; weights is (n, 2) with the SBP
    weight in column 0. With all weights 1 this equals the per-output-summed
    MSE term for term.
    """
    if isinstance(predictions, torch.Tensor):
        p, t, w = predictions, torch.as_tensor(targets), torch.as_tensor(weights)
        if p.shape != t.shape or p.shape != w.shape:
            raise ShapeError(f"shape mismatch: {tuple(p.shape)}, {tuple(t.shape)}, {tuple(w.shape)}")
        if not (torch.isfinite(p).all() and torch.isfinite(t).all() and torch.isfinite(w).all()):
            raise ValidationError("weighted_loss inputs must be finite")
        return float((w * (p - t) ** 2).sum(dim=1).sum() / p.shape[0])
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if p.shape != t.shape or p.shape != w.shape:
        raise ShapeError(f"shape mismatch: {p.shape}, {t.shape}, {w.shape}")
    if not (np.isfinite(p).all() and np.isfinite(t).all() and np.isfinite(w).all()):
        raise ValidationError("weighted_loss inputs must be finite")
    return float((w * (p - t) ** 2).sum(axis=1).sum() / p.shape[0])


def _loss_sum(net, x, t, w) -> torch.Tensor:
    """Sum (not mean) of per-sample weighted squared errors for a micro-batch."""
    preds = net(x)
    return (w * (preds - t) ** 2).sum(dim=1).sum()


def predict_in_batches(model: Model, waveforms: np.ndarray, micro_batch_size: int = 256) -> np.ndarray:
    """(n, length) float waveforms -> (n, 2) predictions, batched forward."""
    x = np.asarray(waveforms, dtype=np.float32)[:, None, :]
    outs = [
        forward(model, x[i : i + micro_batch_size]) for i in range(0, len(x), micro_batch_size)
    ]
    return np.concatenate(outs, axis=0)


def _role_records(bundle: DatasetBundle, assignment: SplitAssignment, role: str):
    roles = assignment.role_of
    return [r for r in bundle.records if roles.get(r.segment_id) == role]


def _tensors_for(records, weight_tables) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([r.waveform for r in records])[:, None, :].astype(np.float32))
    y = torch.from_numpy(np.array([[r.sbp, r.dbp] for r in records], dtype=np.float32))
    if weight_tables is None:
        w = torch.ones_like(y)
    else:
        sbp_table, dbp_table = weight_tables
        w = torch.from_numpy(assign_weights(records, sbp_table, dbp_table).astype(np.float32))
    return x, y, w


def lr_sweep(net, batches, steps: int = LR_SWEEP_STEPS) -> float | None:
    """Exponential learning-rate sweep with plain gradient steps.

    Runs on a throwaway copy of the network, one micro-batch per step,
    tracking an exponentially smoothed loss. Returns the learning rate one
    decade below the divergence point, or None when the sweep never
    diverges. Raw (non-adaptive) steps keep the divergence point tied to
    the loss curvature.
    """
    net = copy.deepcopy(net)
    lrs = np.geomspace(LR_SWEEP_START, LR_SWEEP_STOP, steps)
    smoothed, best = None, None
    for i, lr in enumerate(lrs):
        x, t, w = batches[i % len(batches)]
        net.zero_grad(set_to_none=True)
        loss = _loss_sum(net, x, t, w) / x.shape[0]
        value = float(loss.detach())
        if not np.isfinite(value):
            return float(lrs[i]) / 10.0
        smoothed = value if smoothed is None else LR_SMOOTHING * smoothed + (1 - LR_SMOOTHING) * value
        corrected = smoothed / (1 - LR_SMOOTHING ** (i + 1))
        best = corrected if best is None else min(best, corrected)
        if corrected > LR_DIVERGENCE_FACTOR * best:
            return float(lrs[i]) / 10.0
        loss.backward()
        with torch.no_grad():
            for p in net.parameters():
                if p.grad is not None:
                    p -= lr * p.grad
    return None


def lr_find(
    model: Model,
    bundle: DatasetBundle,
    assignment: SplitAssignment,
    config: TrainConfig,
    weight_tables: tuple[WeightTable, WeightTable] | None = None,
) -> float:
    """Sweep-based learning-rate choice on the training role; falls back to
    0.001 when no divergence is detected."""
    config.validate()
    records = _role_records(bundle, assignment, "train")
    if not records:
        raise ValidationError("lr_find needs a nonempty train role")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, 7])))
    order = rng.permutation(len(records))
    x, y, w = _tensors_for([records[i] for i in order], weight_tables)
    mb = config.micro_batch_size
    batches = [
        (x[i : i + mb], y[i : i + mb], w[i : i + mb]) for i in range(0, len(records), mb)
    ]
    found = lr_sweep(model.net, batches)
    return DEFAULT_LEARNING_RATE if found is None else found


def train(
    model: Model,
    bundle: DatasetBundle,
    assignment: SplitAssignment,
    config: TrainConfig,
    weight_tables: tuple[WeightTable, WeightTable] | None = None,
) -> tuple[Model, TrainHistory]:
    """Train a copy of the model on the bundle's train role.

    Weight tables, when given, are looked up per training record to form
    the per-sample loss weights; omitting them is identical to all-ones
    tables. Validation MAE is always unweighted. Returns the model at the
    best-validation epoch plus the full history. Deterministic given the
    config seed (fixed per-epoch shuffle schedule).
    """
    config.validate()
    train_records = _role_records(bundle, assignment, "train")
    val_records = _role_records(bundle, assignment, "validation")
    if not train_records or not val_records:
        raise ValidationError("train and validation roles must both be nonempty")

    lr = config.learning_rate
    if lr == "auto":
        lr = lr_find(model, bundle, assignment, config, weight_tables)

    torch.manual_seed(config.seed)
    net = copy.deepcopy(model.net)
    net.train()
    optimizer = torch.optim.AdamW(net.parameters(), lr=lr, weight_decay=config.weight_decay)

    x_all, y_all, w_all = _tensors_for(train_records, weight_tables)
    x_val = np.stack([r.waveform for r in val_records]).astype(np.float32)
    y_val = np.array([[r.sbp, r.dbp] for r in val_records], dtype=np.float64)

    n = len(train_records)
    eff, mb = config.effective_batch_size, config.micro_batch_size
    history = TrainHistory(learning_rate=float(lr))
    best_metric, best_state = None, None

    for epoch in range(config.epochs):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([config.seed, epoch])))
        perm = torch.from_numpy(rng.permutation(n))
        epoch_loss_sum = 0.0
        for start in range(0, n, eff):
            idx = perm[start : start + eff]
            batch_n = len(idx)  # final effective batch keeps its true size
            optimizer.zero_grad(set_to_none=True)
            for ms in range(0, batch_n, mb):
                sel = idx[ms : ms + mb]
                loss_sum = _loss_sum(net, x_all[sel], y_all[sel], w_all[sel])
                value = float(loss_sum.detach())
                if not np.isfinite(value):
                    raise TrainingError(
                        f"non-finite loss at epoch {epoch}, effective batch starting {start}, "
                        f"micro offset {ms}"
                    )
                (loss_sum / batch_n).backward()
                epoch_loss_sum += value
            optimizer.step()

        net.eval()
        trained = Model(model.spec, net, model.minimum_input_length)
        preds = predict_in_batches(trained, x_val, micro_batch_size=max(mb, 64))
        net.train()
        val_mae = np.abs(preds - y_val).mean(axis=0)
        stats = EpochStats(
            epoch=epoch,
            train_loss=epoch_loss_sum / n,
            val_mae_sbp=float(val_mae[0]),
            val_mae_dbp=float(val_mae[1]),
            checkpoint_ref=f"epoch-{epoch:03d}",
        )
        history.epochs.append(stats)
        if best_metric is None or stats.selection_metric < best_metric:
            best_metric = stats.selection_metric
            best_state = copy.deepcopy(net.state_dict())
            history.best_epoch = epoch

    net.load_state_dict(best_state)
    net.eval()
    return Model(model.spec, net, model.minimum_input_length), history

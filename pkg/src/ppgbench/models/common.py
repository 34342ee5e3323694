"""Model wrapper, registry, functional forward/gradients and checkpoints."""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass, asdict

import numpy as np
import torch
from torch import nn

from ..errors import ShapeError, TrainingError, ValidationError

ARCHITECTURES = ("lenet1d", "xresnet1d50", "xresnet1d101", "inception1d", "s4")

# (SBP, DBP) head-bias prior in mmHg; keeps early training losses sane
HEAD_BIAS_INIT = (120.0, 70.0)


def scaled(base: int, multiplier: float) -> int:
    """Channel count under a width multiplier, never below 1."""
    return max(1, round(base * multiplier))


def norm1d(channels: int) -> nn.Module:
    # per-sample normalization over (channels, time); no batch statistics
    return nn.GroupNorm(1, channels)


class PooledHead(nn.Module):
    """Global average pooling over time followed by a 2-unit linear head."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, 2)
        with torch.no_grad():
            self.fc.bias.copy_(torch.tensor(HEAD_BIAS_INIT, dtype=self.fc.bias.dtype))

    def forward(self, x):
        return self.fc(x.mean(dim=-1))


@dataclass(frozen=True)
class ModelSpec:
    architecture: str
    width_multiplier: float = 1.0
    input_channels: int = 1
    seed: int = 0

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(
                f"unknown architecture {self.architecture!r}; choose from {ARCHITECTURES}"
            )
        if not self.width_multiplier > 0:
            raise ValidationError("width_multiplier must be > 0")
        if self.input_channels < 1:
            raise ValidationError("input_channels must be >= 1")


@dataclass
class Model:
    spec: ModelSpec
    net: nn.Module
    minimum_input_length: int

    def parameter_arrays(self) -> dict[str, np.ndarray]:
        """Named parameter tensors as float32 numpy copies."""
        return {
            name: p.detach().cpu().numpy().astype(np.float32, copy=True)
            for name, p in self.net.named_parameters()
        }

    @property
    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.net.parameters())


def parameter_count(spec: ModelSpec) -> int:
    return build_model(spec).n_parameters


def _registry():
    from .inception import build_inception1d
    from .lenet import build_lenet1d
    from .s4 import build_s4
    from .xresnet import build_xresnet1d

    return {
        "lenet1d": build_lenet1d,
        "xresnet1d50": lambda spec: build_xresnet1d(spec, layers=(3, 4, 6, 3)),
        "xresnet1d101": lambda spec: build_xresnet1d(spec, layers=(3, 4, 23, 3)),
        "inception1d": build_inception1d,
        "s4": build_s4,
    }


# initialization draws from torch's process-global RNG; serialize so
# concurrent builders stay deterministic
_BUILD_LOCK = threading.Lock()


def build_model(spec: ModelSpec) -> Model:
    """Deterministically build and initialize a model from its spec."""
    spec.validate()
    with _BUILD_LOCK:
        torch.manual_seed(spec.seed)
        net, min_len = _registry()[spec.architecture](spec)
    net = net.float()
    net.eval()
    return Model(spec=spec, net=net, minimum_input_length=min_len)


def _check_batch(model: Model, batch) -> torch.Tensor:
    if isinstance(batch, torch.Tensor):
        x = batch
    else:
        x = torch.as_tensor(np.asarray(batch))
    if x.ndim != 3:
        raise ShapeError(f"expected a (batch, channels, length) array, got shape {tuple(x.shape)}")
    if x.shape[1] != model.spec.input_channels:
        raise ShapeError(
            f"model expects {model.spec.input_channels} channel(s), batch has {x.shape[1]}"
        )
    if x.shape[2] < model.minimum_input_length:
        raise ShapeError(
            f"input length {x.shape[2]} below the architecture minimum "
            f"{model.minimum_input_length} (no padding is applied)"
        )
    if not torch.isfinite(x).all():
        raise ValidationError("batch contains non-finite values")
    param_dtype = next(model.net.parameters()).dtype
    return x.to(param_dtype)


def forward(model: Model, batch) -> np.ndarray:
    """Predict (SBP, DBP) in mmHg for a (n, channels, length) batch."""
    x = _check_batch(model, batch)
    with torch.no_grad():
        out = model.net(x)
    return out.detach().cpu().numpy().astype(np.float64)


def gradients(model: Model, batch, targets, loss_fn) -> dict[str, np.ndarray]:
    """Gradient of loss_fn(predictions, targets) w.r.t. every named parameter.

    loss_fn maps two (n, 2) tensors to a scalar tensor. A non-finite loss
    aborts with the index of the first sample that produces one.
    """
    x = _check_batch(model, batch)
    t = torch.as_tensor(np.asarray(targets)).to(x.dtype)
    if t.shape != (x.shape[0], 2):
        raise ShapeError(f"targets must be ({x.shape[0]}, 2), got {tuple(t.shape)}")

    model.net.zero_grad(set_to_none=True)
    preds = model.net(x)
    loss = loss_fn(preds, t)
    if not torch.isfinite(loss):
        for i in range(x.shape[0]):
            with torch.no_grad():
                li = loss_fn(model.net(x[i : i + 1]), t[i : i + 1])
            if not torch.isfinite(li):
                raise TrainingError(f"non-finite loss produced by batch index {i}")
        raise TrainingError("non-finite loss (no single offending sample identified)")
    loss.backward()

    out = {}
    for name, p in model.net.named_parameters():
        g = p.grad
        out[name] = (
            np.zeros(p.shape, dtype=np.float64)
            if g is None
            else g.detach().cpu().numpy().astype(np.float64, copy=True)
        )
    model.net.zero_grad(set_to_none=True)
    return out


# ---------------------------------------------------------------------------
# checkpoints: spec.json + one float32 blob per parameter + index.json
# ---------------------------------------------------------------------------


def _blob_name(param_name: str) -> str:
    return param_name.replace(".", "__") + ".f32le"


def save_checkpoint(model: Model, path: str | os.PathLike) -> None:
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "spec.json"), "w", encoding="utf-8") as f:
        json.dump(asdict(model.spec), f, indent=2)
    index = {}
    for name, p in model.net.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        blob = _blob_name(name)
        with open(os.path.join(path, blob), "wb") as f:
            f.write(arr.tobytes())
        index[name] = {"blob": blob, "shape": list(arr.shape), "offset": 0}
    with open(os.path.join(path, "index.json"), "w", encoding="utf-8") as f:
        json.dump(index, f, indent=2)


def load_checkpoint(path: str | os.PathLike) -> Model:
    with open(os.path.join(path, "spec.json"), "r", encoding="utf-8") as f:
        spec = ModelSpec(**json.load(f))
    with open(os.path.join(path, "index.json"), "r", encoding="utf-8") as f:
        index = json.load(f)
    model = build_model(spec)
    state = {}
    for name, entry in index.items():
        raw = open(os.path.join(path, entry["blob"]), "rb").read()
        arr = np.frombuffer(raw, dtype="<f4", offset=entry["offset"])
        expected = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if arr.size != expected:
            raise ValidationError(
                f"checkpoint blob {entry['blob']} holds {arr.size} floats, "
                f"shape {entry['shape']} needs {expected}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError(f"checkpoint parameter {name} contains non-finite values")
        state[name] = torch.from_numpy(arr.reshape(entry["shape"]).copy())
    missing = {n for n, _ in model.net.named_parameters()} - set(state)
    if missing:
        raise ValidationError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    model.net.load_state_dict(state, strict=True)
    return model

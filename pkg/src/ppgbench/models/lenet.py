"""Plain feed-forward CNN.

Layer table (base widths, each scaled by the width multiplier):

    conv1   Conv1d(in, 16, k=5, pad=2) + ReLU + MaxPool1d(2)
    conv2   Conv1d(16, 32, k=5, pad=2) + ReLU + MaxPool1d(2)
    conv3   Conv1d(32, 64, k=5, pad=2) + ReLU + MaxPool1d(2)
    head    GAP + Linear(64, 120) + ReLU + Linear(120, 2)

Total downsampling factor 8, so the minimum admissible input length is 16.
"""

import torch
from torch import nn

from .common import HEAD_BIAS_INIT, scaled

MIN_INPUT_LENGTH = 16


class LeNet1d(nn.Module):
    def __init__(self, in_channels: int, multiplier: float):
        super().__init__()
        c1, c2, c3 = scaled(16, multiplier), scaled(32, multiplier), scaled(64, multiplier)
        hidden = scaled(120, multiplier)
        self.features = nn.Sequential(
            nn.Conv1d(in_channels, c1, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(c1, c2, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.MaxPool1d(2),
            nn.Conv1d(c2, c3, kernel_size=5, padding=2),
            nn.ReLU(),
            nn.MaxPool1d(2),
        )
        self.fc1 = nn.Linear(c3, hidden)
        self.fc2 = nn.Linear(hidden, 2)
        with torch.no_grad():
            self.fc2.bias.copy_(torch.tensor(HEAD_BIAS_INIT, dtype=self.fc2.bias.dtype))

    def forward(self, x):
        x = self.features(x).mean(dim=-1)
        x = nn.functional.relu(self.fc1(x))
        return self.fc2(x)


def build_lenet1d(spec):
    return LeNet1d(spec.input_channels, spec.width_multiplier), MIN_INPUT_LENGTH

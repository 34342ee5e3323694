"""Inception-style 1D network: six modules of parallel convolutions with
kernel sizes 39/19/9 plus a max-pool branch, a residual shortcut every
three modules, then the pooled two-unit head.

Per module (base filter count 32, scaled by the width multiplier):

    bottleneck  Conv1d(in, 32, k=1)
    branches    Conv1d(32, 32, k) for k in (39, 19, 9), padding k // 2
    pool branch MaxPool1d(3, s=1, pad=1) + Conv1d(in, 32, k=1)
    merge       concat (4 * 32 channels) + GroupNorm + ReLU

Stride is 1 everywhere; the minimum admissible input length is 2.
"""

import torch
from torch import nn

from .common import PooledHead, norm1d, scaled

MIN_INPUT_LENGTH = 2
KERNEL_SIZES = (39, 19, 9)
DEPTH = 6


class InceptionModule(nn.Module):
    def __init__(self, cin, nf):
        super().__init__()
        self.bottleneck = nn.Conv1d(cin, nf, kernel_size=1, bias=False)
        self.branches = nn.ModuleList(
            nn.Conv1d(nf, nf, kernel_size=k, padding=k // 2, bias=False) for k in KERNEL_SIZES
        )
        self.pool = nn.MaxPool1d(3, stride=1, padding=1)
        self.pool_conv = nn.Conv1d(cin, nf, kernel_size=1, bias=False)
        self.norm = norm1d(nf * (len(KERNEL_SIZES) + 1))
        self.act = nn.ReLU()

    def forward(self, x):
        b = self.bottleneck(x)
        out = torch.cat([conv(b) for conv in self.branches] + [self.pool_conv(self.pool(x))], dim=1)
        return self.act(self.norm(out))


class Inception1d(nn.Module):
    def __init__(self, in_channels: int, multiplier: float):
        super().__init__()
        nf = scaled(32, multiplier)
        cout = nf * 4
        self.modules_list = nn.ModuleList()
        self.shortcuts = nn.ModuleList()
        cin = in_channels
        for d in range(DEPTH):
            self.modules_list.append(InceptionModule(cin, nf))
            if d % 3 == 2:
                # residual entry point was 3 modules back
                res_in = in_channels if d == 2 else cout
                self.shortcuts.append(
                    nn.Sequential(nn.Conv1d(res_in, cout, kernel_size=1, bias=False), norm1d(cout))
                )
            cin = cout
        self.act = nn.ReLU()
        self.head = PooledHead(cout)

    def forward(self, x):
        residual = x
        shortcut_idx = 0
        for d, module in enumerate(self.modules_list):
            x = module(x)
            if d % 3 == 2:
                x = self.act(x + self.shortcuts[shortcut_idx](residual))
                residual = x
                shortcut_idx += 1
        return self.head(x)


def build_inception1d(spec):
    return Inception1d(spec.input_channels, spec.width_multiplier), MIN_INPUT_LENGTH

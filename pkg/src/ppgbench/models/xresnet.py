"""1D residual networks with the usual tweaks: three-conv stem, bottleneck
blocks with expansion 4, average-pool downsampling on the identity path and
zero-initialized final norm per block.

Layer table (base widths, scaled by the width multiplier):

    stem    Conv1d(in, 32, k=5, s=2) - Conv1d(32, 32, k=5) - Conv1d(32, 64, k=5)
            each followed by GroupNorm + ReLU, then MaxPool1d(3, s=2, pad=1)
    stage1  blocks[0] bottleneck blocks, width 64,  stride 1
    stage2  blocks[1] bottleneck blocks, width 128, stride 2
    stage3  blocks[2] bottleneck blocks, width 256, stride 2
    stage4  blocks[3] bottleneck blocks, width 512, stride 2
    head    GAP + Linear(512 * 4, 2)

Bottleneck block: 1x1 reduce -> 3x conv (stride on the first block of a
stage) -> 1x1 expand (x4). blocks = (3, 4, 6, 3) for the 50-layer variant,
(3, 4, 23, 3) for the 101-layer one. Total downsampling factor 32, so the
minimum admissible input length is 64.
"""

from torch import nn

from .common import PooledHead, norm1d, scaled

MIN_INPUT_LENGTH = 64
EXPANSION = 4


def conv_norm_act(cin, cout, kernel, stride=1, act=True, zero_norm=False):
    layers = [
        nn.Conv1d(cin, cout, kernel_size=kernel, stride=stride, padding=kernel // 2, bias=False),
        norm1d(cout),
    ]
    if zero_norm:
        nn.init.zeros_(layers[1].weight)
    if act:
        layers.append(nn.ReLU())
    return nn.Sequential(*layers)


class Bottleneck(nn.Module):
    def __init__(self, cin, width, stride):
        super().__init__()
        cout = width * EXPANSION
        self.convs = nn.Sequential(
            conv_norm_act(cin, width, 1),
            conv_norm_act(width, width, 3, stride=stride),
            conv_norm_act(width, cout, 1, act=False, zero_norm=True),
        )
        if stride != 1 or cin != cout:
            pool = [nn.AvgPool1d(stride, stride, ceil_mode=True)] if stride != 1 else []
            self.shortcut = nn.Sequential(*pool, conv_norm_act(cin, cout, 1, act=False))
        else:
            self.shortcut = nn.Identity()
        self.act = nn.ReLU()

    def forward(self, x):
        return self.act(self.convs(x) + self.shortcut(x))


class XResNet1d(nn.Module):
    def __init__(self, in_channels: int, multiplier: float, layers):
        super().__init__()
        s1, s2 = scaled(32, multiplier), scaled(64, multiplier)
        self.stem = nn.Sequential(
            conv_norm_act(in_channels, s1, 5, stride=2),
            conv_norm_act(s1, s1, 5),
            conv_norm_act(s1, s2, 5),
            nn.MaxPool1d(3, stride=2, padding=1),
        )
        widths = [scaled(w, multiplier) for w in (64, 128, 256, 512)]
        stages = []
        cin = s2
        for i, (width, n_blocks) in enumerate(zip(widths, layers)):
            for b in range(n_blocks):
                stride = 2 if (i > 0 and b == 0) else 1
                stages.append(Bottleneck(cin, width, stride))
                cin = width * EXPANSION
        self.stages = nn.Sequential(*stages)
        self.head = PooledHead(cin)

    def forward(self, x):
        return self.head(self.stages(self.stem(x)))


def build_xresnet1d(spec, layers):
    return XResNet1d(spec.input_channels, spec.width_multiplier, layers), MIN_INPUT_LENGTH

"""Diagonal state-space sequence model.

Each layer owns, per channel, a bank of N complex first-order systems with
diagonal transition eigenvalues. Under zero-order hold with step dt the
convolution kernel is

    K[l] = Re( sum_n C_n * B_n * exp(lambda_n * dt * l) ),
    B_n  = (exp(lambda_n * dt) - 1) / lambda_n,

applied as a causal FFT convolution plus a learned per-channel skip. The
real parts of the eigenvalues are parameterized through a log so they stay
strictly negative (stable kernels); all stored parameters are real arrays.

Network: 1x1 encoder to the model width, four pre-norm residual blocks of
(GroupNorm - state-space layer - GELU - pointwise Linear), then the pooled
two-unit head. Stride is 1 everywhere; minimum admissible input length 2.
"""

import math

import torch
from torch import nn

from .common import PooledHead, norm1d, scaled

MIN_INPUT_LENGTH = 2
STATE_SIZE = 8
N_BLOCKS = 4


class DiagonalSSM(nn.Module):
    def __init__(self, channels: int, state_size: int = STATE_SIZE):
        super().__init__()
        h, n = channels, state_size
        self.log_neg_re = nn.Parameter(torch.full((h, n), math.log(0.5)))
        self.lambda_im = nn.Parameter(
            math.pi * torch.arange(n, dtype=torch.float32).repeat(h, 1)
        )
        self.c_re = nn.Parameter(torch.randn(h, n) * 0.5)
        self.c_im = nn.Parameter(torch.randn(h, n) * 0.5)
        log_dt_min, log_dt_max = math.log(1e-3), math.log(1e-1)
        self.log_dt = nn.Parameter(
            torch.rand(h) * (log_dt_max - log_dt_min) + log_dt_min
        )
        self.skip = nn.Parameter(torch.ones(h))

    def kernel(self, length: int, dtype) -> torch.Tensor:
        cdtype = torch.complex128 if dtype == torch.float64 else torch.complex64
        lam = torch.complex(-torch.exp(self.log_neg_re), self.lambda_im).to(cdtype)
        dt = torch.exp(self.log_dt).to(lam.real.dtype)
        dtl = lam * dt[:, None]  # (h, n)
        b = (torch.exp(dtl) - 1.0) / lam
        c = torch.complex(self.c_re, self.c_im).to(cdtype)
        steps = torch.arange(length, dtype=lam.real.dtype)
        decay = torch.exp(dtl[:, :, None] * steps)  # (h, n, l)
        return torch.einsum("hn,hnl->hl", c * b, decay).real.to(dtype)

    def forward(self, u):
        length = u.shape[-1]
        k = self.kernel(length, u.dtype)
        n_fft = 2 * length
        y = torch.fft.irfft(
            torch.fft.rfft(u, n=n_fft) * torch.fft.rfft(k, n=n_fft), n=n_fft
        )[..., :length]
        return y + u * self.skip[:, None]


class SSMBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.norm = norm1d(channels)
        self.ssm = DiagonalSSM(channels)
        self.act = nn.GELU()
        self.mix = nn.Conv1d(channels, channels, kernel_size=1)

    def forward(self, x):
        return x + self.mix(self.act(self.ssm(self.norm(x))))


class S4Regressor(nn.Module):
    def __init__(self, in_channels: int, multiplier: float):
        super().__init__()
        width = scaled(64, multiplier)
        self.encoder = nn.Conv1d(in_channels, width, kernel_size=1)
        self.blocks = nn.Sequential(*[SSMBlock(width) for _ in range(N_BLOCKS)])
        self.norm = norm1d(width)
        self.head = PooledHead(width)

    def forward(self, x):
        return self.head(self.norm(self.blocks(self.encoder(x))))


def build_s4(spec):
    return S4Regressor(spec.input_channels, spec.width_multiplier), MIN_INPUT_LENGTH

import numpy as np
import pytest
import torch

from ppgbench import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_bundle():
    """6 subjects x 10 segments, short waveforms; enough for split tests."""
    cfg = SynthConfig(n_subjects=6, segments_per_subject=10, segment_length=64, seed=11)
    return generate_synthetic(cfg)


@pytest.fixture(scope="session")
def train_bundle():
    """Learnable desk-scale bundle shared by the training-level tests.

    The narrow heart-rate range keeps beat-period variation from masking
    the pulse-shape cues, which makes short CPU trainings informative.
    """
    cfg = SynthConfig(
        n_subjects=100,
        segments_per_subject=16,
        segment_length=250,
        morphology_coupling=1.0,
        noise_sd=0.05,
        heart_rate_range=(66, 80),
        seed=21,
    )
    return generate_synthetic(cfg)


def finite_difference_worst_error(model, loss_fn, x, t, rng, n_coords=20, h=1e-4):
    """Worst relative error between autograd and central differences over
    randomly sampled parameter coordinates.

    Coordinates where two step sizes disagree are skipped: there the loss is
    locally non-smooth (a ReLU kink or pool argmax flip within h), so a
    first-order comparison is meaningless. At least half the sampled
    coordinates must be usable.
    """
    from ppgbench import gradients

    analytic = gradients(model, x, t, loss_fn)
    params = dict(model.net.named_parameters())
    names = sorted(analytic)
    xp, tp = torch.as_tensor(x), torch.as_tensor(t)

    def fd_at(flat, i, step):
        with torch.no_grad():
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn(model.net(xp), tp).item()
            flat[i] = orig - step
            down = loss_fn(model.net(xp), tp).item()
            flat[i] = orig
        return (up - down) / (2 * step)

    worst, used = 0.0, 0
    for _ in range(n_coords):
        name = names[int(rng.integers(len(names)))]
        flat = params[name].detach().view(-1)
        i = int(rng.integers(flat.numel()))
        fd = fd_at(flat, i, h)
        fd_half = fd_at(flat, i, h / 2)
        if abs(fd - fd_half) > 1e-2 * max(abs(fd), abs(fd_half), 1e-6):
            continue  # non-smooth locally
        ad = analytic[name].ravel()[i]
        worst = max(worst, abs(ad - fd) / max(abs(ad), abs(fd), 1e-6))
        used += 1
    assert used >= n_coords // 2, f"too many non-smooth coordinates ({used}/{n_coords} usable)"
    return worst


def random_bundle(rng: np.random.Generator, max_subjects=12, max_segments=8):
    """Small random bundle for property-style loops."""
    cfg = SynthConfig(
        n_subjects=int(rng.integers(4, max_subjects + 1)),
        segments_per_subject=int(rng.integers(2, max_segments + 1)),
        segment_length=int(rng.integers(16, 48)),
        sbp_mean=float(rng.uniform(100, 140)),
        sbp_sd=float(rng.uniform(5, 25)),
        dbp_mean=float(rng.uniform(55, 75)),
        dbp_sd=float(rng.uniform(4, 15)),
        morphology_coupling=float(rng.uniform(0, 1)),
        noise_sd=float(rng.uniform(0, 0.2)),
        seed=int(rng.integers(0, 2**31)),
    )
    return generate_synthetic(cfg)

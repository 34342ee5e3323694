import numpy as np
import pytest
import torch

from ppgbench import ModelSpec, build_model, forward, gradients, load_checkpoint, save_checkpoint
from ppgbench.errors import ShapeError, ValidationError
from ppgbench.models.common import scaled

from conftest import finite_difference_worst_error

ALL_ARCHS = ("lenet1d", "xresnet1d50", "xresnet1d101", "inception1d", "s4")

# width multipliers giving < 5k parameters, small enough for cheap
# finite-difference checks
GRADCHECK_WIDTH = {
    "lenet1d": 0.25,
    "xresnet1d50": 1 / 64,
    "xresnet1d101": 1 / 96,
    "inception1d": 1 / 16,
    "s4": 0.25,
}


def mse_sum_loss(preds, targets):
    return ((preds - targets) ** 2).sum(dim=1).mean()


class TestBuild:
    def test_same_seed_identical_parameters(self):
        for arch in ALL_ARCHS:
            spec = ModelSpec(arch, width_multiplier=GRADCHECK_WIDTH[arch], seed=17)
            a, b = build_model(spec), build_model(spec)
            pa, pb = a.parameter_arrays(), b.parameter_arrays()
            assert pa.keys() == pb.keys()
            for name in pa:
                assert np.array_equal(pa[name], pb[name]), (arch, name)

    def test_seed_changes_parameters(self):
        a = build_model(ModelSpec("lenet1d", seed=0)).parameter_arrays()
        b = build_model(ModelSpec("lenet1d", seed=1)).parameter_arrays()
        assert any(not np.array_equal(a[n], b[n]) for n in a)

    def test_lenet_parameter_count_matches_layer_table(self):
        m = 0.25
        c1, c2, c3, hidden = scaled(16, m), scaled(32, m), scaled(64, m), scaled(120, m)
        expected = (
            (1 * c1 * 5 + c1)
            + (c1 * c2 * 5 + c2)
            + (c2 * c3 * 5 + c3)
            + (c3 * hidden + hidden)
            + (hidden * 2 + 2)
        )
        model = build_model(ModelSpec("lenet1d", width_multiplier=m))
        assert model.n_parameters == expected
        assert model.n_parameters < 10_000

    @pytest.mark.parametrize("width", [0.25, 1.0])
    def test_deeper_resnet_has_strictly_more_parameters(self, width):
        n50 = build_model(ModelSpec("xresnet1d50", width_multiplier=width)).n_parameters
        n101 = build_model(ModelSpec("xresnet1d101", width_multiplier=width)).n_parameters
        assert n101 > n50

    def test_unknown_architecture_rejected(self):
        with pytest.raises(ValidationError):
            ModelSpec("transformer").validate()
        with pytest.raises(ValidationError):
            ModelSpec("lenet1d", width_multiplier=0.0).validate()


class TestForward:
    @pytest.mark.parametrize("arch", ALL_ARCHS)
    @pytest.mark.parametrize("length", [262, 625, 1250])
    def test_shape_law(self, arch, length):
        model = build_model(ModelSpec(arch, width_multiplier=0.25, seed=2))
        x = np.random.default_rng(0).normal(size=(4, 1, length)).astype(np.float32)
        out = forward(model, x)
        assert out.shape == (4, 2)
        assert np.isfinite(out).all()

    @pytest.mark.parametrize("arch", ALL_ARCHS)
    def test_too_short_input_errors_with_minimum(self, arch):
        model = build_model(ModelSpec(arch, width_multiplier=0.125, seed=2))
        x = np.zeros((1, 1, model.minimum_input_length - 1), dtype=np.float32)
        with pytest.raises(ShapeError, match=str(model.minimum_input_length)):
            forward(model, x)

    def test_forward_is_deterministic(self):
        model = build_model(ModelSpec("inception1d", width_multiplier=0.125, seed=4))
        x = np.zeros((3, 1, 300), dtype=np.float32)
        assert np.array_equal(forward(model, x), forward(model, x))

    def test_channel_mismatch_rejected(self):
        model = build_model(ModelSpec("lenet1d", seed=0))
        with pytest.raises(ShapeError):
            forward(model, np.zeros((1, 2, 100), dtype=np.float32))

    def test_non_finite_input_rejected(self):
        model = build_model(ModelSpec("lenet1d", seed=0))
        x = np.zeros((1, 1, 100), dtype=np.float32)
        x[0, 0, 3] = np.nan
        with pytest.raises(ValidationError):
            forward(model, x)


class TestGradients:
    def test_zero_weighted_loss_gives_exactly_zero_gradients(self):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=6))
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 1, 64))
        t = rng.normal(loc=(120, 70), scale=5, size=(3, 2))

        def zero_loss(preds, targets):
            return (torch.zeros_like(preds) * (preds - targets) ** 2).sum(dim=1).mean()

        grads = gradients(model, x, t, zero_loss)
        assert all((g == 0).all() for g in grads.values())

    def test_doubling_the_loss_doubles_gradients_exactly(self):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=6))
        rng = np.random.default_rng(2)
        x = rng.normal(size=(3, 1, 64))
        t = rng.normal(loc=(120, 70), scale=5, size=(3, 2))
        g1 = gradients(model, x, t, mse_sum_loss)
        g2 = gradients(model, x, t, lambda p, tt: 2.0 * mse_sum_loss(p, tt))
        for name in g1:
            assert np.array_equal(2.0 * g1[name], g2[name]), name

    @pytest.mark.parametrize("arch", ALL_ARCHS)
    def test_matches_central_finite_differences(self, arch):
        model = build_model(ModelSpec(arch, width_multiplier=GRADCHECK_WIDTH[arch], seed=5))
        assert model.n_parameters < 5_000
        model.net.double()
        rng = np.random.default_rng(12)
        # move off the init point: zero-initialized residual norms park ReLU
        # pre-activations exactly on the kink, where derivatives don't exist
        with torch.no_grad():
            for p in model.net.parameters():
                p += torch.as_tensor(rng.normal(0.0, 0.05, size=tuple(p.shape)))
        x = rng.normal(size=(2, 1, 64))
        t = rng.normal(loc=(120, 70), scale=5, size=(2, 2))
        worst = finite_difference_worst_error(model, mse_sum_loss, x, t, rng)
        assert worst < 1e-3, (arch, worst)

    def test_non_finite_loss_names_batch_index(self):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=6))
        x = np.zeros((4, 1, 64))
        t = np.full((4, 2), 100.0)
        t[2, 0] = np.inf  # this sample poisons the loss

        from ppgbench.errors import TrainingError

        with pytest.raises(TrainingError, match="batch index 2"):
            gradients(model, x, t, mse_sum_loss)


class TestCheckpoints:
    @pytest.mark.parametrize("arch", ALL_ARCHS)
    def test_round_trip(self, tmp_path, arch):
        model = build_model(ModelSpec(arch, width_multiplier=GRADCHECK_WIDTH[arch], seed=9))
        save_checkpoint(model, tmp_path / arch)
        back = load_checkpoint(tmp_path / arch)
        assert back.spec == model.spec
        assert back.minimum_input_length == model.minimum_input_length
        pa, pb = model.parameter_arrays(), back.parameter_arrays()
        for name in pa:
            assert np.array_equal(pa[name], pb[name]), name
        x = np.random.default_rng(3).normal(size=(2, 1, 64)).astype(np.float32)
        assert np.array_equal(forward(model, x), forward(back, x))

    def test_files_exist(self, tmp_path):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=9))
        save_checkpoint(model, tmp_path / "ck")
        assert (tmp_path / "ck" / "spec.json").exists()
        assert (tmp_path / "ck" / "index.json").exists()
        blobs = list((tmp_path / "ck").glob("*.f32le"))
        assert len(blobs) == len(model.parameter_arrays())

    def test_truncated_blob_rejected(self, tmp_path):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=9))
        save_checkpoint(model, tmp_path / "ck")
        blob = next((tmp_path / "ck").glob("*.f32le"))
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ValidationError, match="floats"):
            load_checkpoint(tmp_path / "ck")

    def test_non_finite_parameters_rejected(self, tmp_path):
        model = build_model(ModelSpec("lenet1d", width_multiplier=0.25, seed=9))
        save_checkpoint(model, tmp_path / "ck")
        blob = next((tmp_path / "ck").glob("*.f32le"))
        poisoned = np.frombuffer(blob.read_bytes(), dtype="<f4").copy()
        poisoned[0] = np.nan
        blob.write_bytes(poisoned.tobytes())
        with pytest.raises(ValidationError, match="non-finite"):
            load_checkpoint(tmp_path / "ck")

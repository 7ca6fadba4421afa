import numpy as np
import pytest
import torch

from sepgen.config import DspConfig, SeparatorConfig
from sepgen.dsp import Waveform, stft_tensor
from sepgen.errors import ShapeError
from sepgen.losses import reconstruction_loss_batch
from sepgen.separator import (
    MaskUNet,
    forward_masks,
    load_separator,
    save_separator,
    separate,
    separate_batch,
)

TOY_DSP = DspConfig(sample_rate=2000, duration_s=2.0, frame_length=128, hop=32)
TOY_MODEL = SeparatorConfig(
    num_sources=6,
    encoder_in_channels=(4, 4, 8, 16, 32),
    decoder_out_channels=(64, 32, 16, 8, 8),
    se_reduction=4,
)


@pytest.fixture(scope="module")
def toy_model():
    torch.manual_seed(0)
    return MaskUNet(TOY_MODEL)


def toy_mixture(seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(4000, generator=g, dtype=torch.float64)


class TestForwardMasks:
    def test_default_plan_shape_contract(self):
        torch.manual_seed(1)
        model = MaskUNet(SeparatorConfig())
        model.eval()
        with torch.no_grad():
            out = forward_masks(model, torch.rand(512, 512, dtype=torch.float64))
        assert out.masks.shape == (6, 512, 512)
        assert float(out.masks.min()) >= 0.0
        assert float(out.masks.max()) <= 1.0

    def test_outputs_in_unit_interval(self, toy_model):
        toy_model.eval()
        with torch.no_grad():
            for seed in range(3):
                g = torch.Generator().manual_seed(seed)
                mag = torch.rand(64, 128, generator=g, dtype=torch.float64) * 50
                masks = forward_masks(toy_model, mag).masks
                assert float(masks.min()) >= 0.0
                assert float(masks.max()) <= 1.0

    def test_not_scale_invariant(self, toy_model):
        toy_model.eval()
        g = torch.Generator().manual_seed(4)
        mag = torch.rand(64, 128, generator=g, dtype=torch.float64)
        with torch.no_grad():
            a = forward_masks(toy_model, mag).masks
            b = forward_masks(toy_model, 10.0 * mag).masks
        assert float((a - b).abs().max()) > 1e-6

    def test_dims_not_divisible_by_16(self, toy_model):
        with pytest.raises(ShapeError):
            forward_masks(toy_model, torch.rand(60, 128, dtype=torch.float64))

    def test_negative_magnitude_rejected(self, toy_model):
        mag = torch.rand(64, 128, dtype=torch.float64)
        mag[0, 0] = -1.0
        with pytest.raises(ShapeError):
            forward_masks(toy_model, mag)


class _ForcedMaskModel(torch.nn.Module):
    def __init__(self, num_sources, value):
        super().__init__()
        self.num_sources = num_sources
        self.value = value

    def forward(self, magnitude):
        b, _, f, t = magnitude.shape
        return torch.full((b, self.num_sources, f, t), self.value, dtype=magnitude.dtype)


class TestSeparate:
    def test_identity_masks_recover_mixture(self):
        model = _ForcedMaskModel(6, 1.0)
        m = toy_mixture()
        out = separate_batch(model, m.unsqueeze(0), TOY_DSP)[0]
        for i in range(6):
            rel = float(torch.linalg.norm(out[i] - m) / torch.linalg.norm(m))
            assert rel < 1e-6

    def test_zero_masks_give_silence(self):
        model = _ForcedMaskModel(6, 0.0)
        m = toy_mixture(1)
        out = separate_batch(model, m.unsqueeze(0), TOY_DSP)[0]
        assert float(out.abs().max()) == 0.0

    def test_untrained_model_contract(self, toy_model):
        mix = Waveform(toy_mixture(2), 2000)
        parts = separate(toy_model, mix, TOY_DSP)
        assert len(parts) == TOY_MODEL.num_sources
        for p in parts:
            assert p.num_samples == mix.num_samples
            assert torch.isfinite(p.samples).all()

    def test_phase_matches_mixture_phase(self, toy_model):
        from sepgen.separator import masked_spectrograms

        toy_model.eval()
        mix = toy_mixture(3)
        with torch.no_grad():
            spec = masked_spectrograms(toy_model, mix.unsqueeze(0), TOY_DSP)[0]
        mix_phase = stft_tensor(mix, TOY_DSP).angle()
        for i in range(spec.shape[0]):
            keep = spec[i].abs() > 1e-6
            diff = spec[i].angle()[keep] - mix_phase[keep]
            wrapped = torch.atan2(torch.sin(diff), torch.cos(diff))
            assert float(wrapped.abs().max()) < 1e-9

    def test_gradient_reaches_every_parameter(self):
        torch.manual_seed(5)
        model = MaskUNet(TOY_MODEL)
        model.train()
        g = torch.Generator().manual_seed(6)
        m1 = torch.randn(2, 4000, generator=g, dtype=torch.float64)
        m2 = torch.randn(2, 4000, generator=g, dtype=torch.float64)
        sep = separate_batch(model, m1 + m2, TOY_DSP)
        loss, _ = reconstruction_loss_batch(m1, m2, sep)
        loss.mean().backward()
        for name, p in model.named_parameters():
            assert p.grad is not None, name
            assert float(p.grad.abs().sum()) > 0, name


class TestCheckpoint:
    def test_round_trip(self, tmp_path, toy_model):
        path = tmp_path / "sep.pt"
        save_separator(path, toy_model, {"note": "test"})
        loaded, state = load_separator(path)
        assert state["note"] == "test"
        for (a_name, a), (b_name, b) in zip(
            toy_model.state_dict().items(), loaded.state_dict().items()
        ):
            assert a_name == b_name
            assert torch.equal(a, b)

    def test_format_version_required(self, tmp_path):
        import torch as _torch

        bad = tmp_path / "bad.pt"
        _torch.save({"state": {}}, bad)
        from sepgen.errors import DataError

        with pytest.raises(DataError):
            load_separator(bad)

    def test_kind_checked(self, tmp_path, toy_model):
        from sepgen.checkpoint import save_archive
        from sepgen.errors import DataError

        path = tmp_path / "wrong.pt"
        save_archive(path, kind="generator", config={}, state={})
        with pytest.raises(DataError):
            load_separator(path)

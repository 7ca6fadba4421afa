import numpy as np
import pytest
import torch
from scipy.io import wavfile

from sepgen.config import DspConfig
from sepgen.dsp import (
    Waveform,
    istft,
    load_audio,
    make_mom,
    pad_for_model,
    stft,
    stft_tensor,
    unpad_masks,
)
from sepgen.errors import DecodeError, EmptyAudioError, ShapeError

CFG = DspConfig()  # 16 kHz / 8 s / 1024 / 256 / hann


def sine(freq, sr, seconds, amp=1.0):
    t = np.arange(int(sr * seconds)) / sr
    return amp * np.sin(2 * np.pi * freq * t)


def write_wav(path, data, sr, dtype=np.float32):
    if np.issubdtype(dtype, np.integer):
        data = (np.clip(data, -1, 1) * np.iinfo(dtype).max).astype(dtype)
    else:
        data = data.astype(dtype)
    wavfile.write(path, sr, data)


class TestLoadAudio:
    def test_zero_pads_short_clip(self, tmp_path):
        p = tmp_path / "short.wav"
        write_wav(p, sine(200, 16000, 4.0), 16000)
        w = load_audio(p, 16000, 8.0)
        assert w.num_samples == 128000
        assert torch.all(w.samples[64000:] == 0)
        assert torch.any(w.samples[:64000] != 0)

    def test_truncates_long_clip(self, tmp_path):
        p = tmp_path / "long.wav"
        full = sine(200, 16000, 10.0)
        write_wav(p, full, 16000)
        w = load_audio(p, 16000, 8.0)
        assert w.num_samples == 128000
        np.testing.assert_allclose(w.samples.numpy(), full[:128000], atol=1e-6)

    def test_resample_preserves_tone(self, tmp_path):
        p = tmp_path / "hi.wav"
        write_wav(p, sine(440, 32000, 8.0), 32000)
        w = load_audio(p, 16000, 8.0)
        assert w.num_samples == 128000
        mag = stft(w, CFG).magnitude.mean(dim=1)
        peak = int(mag.argmax())
        assert abs(peak - 440 * CFG.frame_length / 16000) <= 1.0

    def test_int16_and_stereo(self, tmp_path):
        p = tmp_path / "st.wav"
        stereo = np.stack([sine(300, 16000, 1.0), sine(300, 16000, 1.0)], axis=1)
        write_wav(p, stereo, 16000, dtype=np.int16)
        w = load_audio(p, 16000, 1.0)
        assert w.num_samples == 16000
        assert torch.isfinite(w.samples).all()

    def test_unreadable_file(self, tmp_path):
        p = tmp_path / "garbage.wav"
        p.write_bytes(b"not a wav file at all")
        with pytest.raises(DecodeError):
            load_audio(p, 16000, 1.0)

    def test_empty_audio(self, tmp_path):
        p = tmp_path / "empty.wav"
        wavfile.write(p, 16000, np.zeros(0, dtype=np.float32))
        with pytest.raises(EmptyAudioError):
            load_audio(p, 16000, 1.0)


class TestStft:
    def test_zero_waveform_gives_zero_magnitude(self):
        w = Waveform(torch.zeros(16000, dtype=torch.float64), 16000)
        assert float(stft(w, CFG).magnitude.abs().max()) == 0.0

    def test_bin_centered_sine_peaks_at_bin(self):
        freq = 32 * 16000 / CFG.frame_length  # exactly bin 32
        w = Waveform(torch.as_tensor(sine(freq, 16000, 2.0)), 16000)
        profile = stft(w, CFG).magnitude.mean(dim=1)
        assert int(profile.argmax()) == 32

    def test_shapes(self):
        w = Waveform(torch.randn(128000, dtype=torch.float64), 16000)
        spec = stft(w, CFG)
        assert spec.bins.shape == (CFG.frame_length // 2 + 1, 128000 // CFG.hop + 1)

    def test_too_short_waveform(self):
        w = Waveform(torch.randn(100, dtype=torch.float64), 16000)
        with pytest.raises(ShapeError):
            stft(w, CFG)

    def test_linearity(self):
        g = torch.Generator().manual_seed(7)
        w1 = torch.randn(32000, generator=g, dtype=torch.float64)
        w2 = torch.randn(32000, generator=g, dtype=torch.float64)
        lhs = stft_tensor(2.5 * w1 - 0.7 * w2, CFG)
        rhs = 2.5 * stft_tensor(w1, CFG) - 0.7 * stft_tensor(w2, CFG)
        assert float((lhs - rhs).abs().max()) < 1e-6


class TestIstft:
    def test_round_trip(self):
        g = torch.Generator().manual_seed(0)
        w = Waveform(torch.randn(128000, generator=g, dtype=torch.float64), 16000)
        back = istft(stft(w, CFG), w.num_samples)
        rel = float(torch.linalg.norm(back.samples - w.samples) / torch.linalg.norm(w.samples))
        assert rel < 1e-6

    def test_zero_spectrogram(self):
        w = Waveform(torch.zeros(16000, dtype=torch.float64), 16000)
        spec = stft(w, CFG)
        assert float(istft(spec, 16000).samples.abs().max()) == 0.0

    def test_magnitude_scaling_is_linear(self):
        g = torch.Generator().manual_seed(1)
        w = Waveform(torch.randn(32000, generator=g, dtype=torch.float64), 16000)
        spec = stft(w, CFG)
        doubled = type(spec)(
            bins=2.0 * spec.magnitude * torch.exp(1j * spec.phase),
            frame_length=spec.frame_length,
            hop=spec.hop,
            window=spec.window,
            sample_rate=spec.sample_rate,
        )
        back = istft(doubled, w.num_samples)
        rel = float(
            torch.linalg.norm(back.samples - 2 * w.samples) / torch.linalg.norm(2 * w.samples)
        )
        assert rel < 1e-6

    def test_inconsistent_dims(self):
        bad = torch.zeros(100, 50, dtype=torch.complex128)
        from sepgen.dsp import Spectrogram

        spec = Spectrogram(bad, CFG.frame_length, CFG.hop, CFG.window, 16000)
        with pytest.raises(ShapeError):
            istft(spec, 16000)


class TestMakeMom:
    def test_identity(self):
        g = torch.Generator().manual_seed(2)
        m2 = Waveform(torch.randn(8000, generator=g, dtype=torch.float64), 16000)
        zero = Waveform(torch.zeros(8000, dtype=torch.float64), 16000)
        assert torch.equal(make_mom(zero, m2).samples, m2.samples)

    def test_cancellation(self):
        g = torch.Generator().manual_seed(3)
        m1 = Waveform(torch.randn(8000, generator=g, dtype=torch.float64), 16000)
        m2 = Waveform(-m1.samples, 16000)
        assert float(make_mom(m1, m2).samples.abs().max()) == 0.0

    def test_commutative(self):
        g = torch.Generator().manual_seed(4)
        m1 = Waveform(torch.randn(8000, generator=g, dtype=torch.float64), 16000)
        m2 = Waveform(torch.randn(8000, generator=g, dtype=torch.float64), 16000)
        assert torch.equal(make_mom(m1, m2).samples, make_mom(m2, m1).samples)

    def test_two_tones_show_two_band_peaks(self):
        m1 = Waveform(torch.as_tensor(sine(300, 16000, 2.0)), 16000)
        m2 = Waveform(torch.as_tensor(sine(2000, 16000, 2.0)), 16000)
        profile = stft(make_mom(m1, m2), CFG).magnitude.mean(dim=1).numpy()
        order = np.argsort(profile)[::-1]
        top2 = sorted(order[:2])
        expected = sorted([300 * CFG.frame_length / 16000, 2000 * CFG.frame_length / 16000])
        assert abs(top2[0] - expected[0]) <= 1
        assert abs(top2[1] - expected[1]) <= 1

    def test_mismatched_inputs(self):
        a = Waveform(torch.zeros(100, dtype=torch.float64), 16000)
        b = Waveform(torch.zeros(101, dtype=torch.float64), 16000)
        c = Waveform(torch.zeros(100, dtype=torch.float64), 8000)
        with pytest.raises(ShapeError):
            make_mom(a, b)
        with pytest.raises(ShapeError):
            make_mom(a, c)


class TestPadding:
    def test_pad_and_unpad_are_inverse_on_masks(self):
        mag = torch.rand(65, 126, dtype=torch.float64)
        padded, original = pad_for_model(mag)
        assert padded.shape == (64, 128)
        assert torch.equal(padded[:, :126], mag[:64, :])
        assert float(padded[:, 126:].abs().sum()) == 0.0
        masks = torch.rand(6, 64, 128)
        restored = unpad_masks(masks, original)
        assert restored.shape == (6, 65, 126)
        assert torch.equal(restored[:, :64, :], masks[:, :, :126])
        assert torch.equal(restored[:, 64, :], masks[:, 63, :126])

    def test_batched(self):
        mag = torch.rand(3, 513, 501, dtype=torch.float64)
        padded, original = pad_for_model(mag)
        assert padded.shape == (3, 512, 512)
        restored = unpad_masks(torch.rand(3, 6, 512, 512), original)
        assert restored.shape == (3, 6, 513, 501)

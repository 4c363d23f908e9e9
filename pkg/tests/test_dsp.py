import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from clipsep import dsp
from clipsep.errors import ClipTooShortError, InvalidInputError


def interior_snr(ref, est, edge=dsp.N_FFT):
    r, e = ref[edge:-edge], est[edge:-edge]
    return 10 * np.log10(np.sum(r**2) / np.sum((r - e) ** 2))


def test_training_clip_grid_shape():
    spec = dsp.stft(np.random.default_rng(0).standard_normal(65535))
    assert spec.shape == (256, 513)
    assert spec.shape[0] == dsp.num_frames(65535)


def test_matches_torch_stft():
    x = np.random.default_rng(1).standard_normal(5000)
    ours = dsp.stft(x)
    win = torch.hann_window(1024, periodic=True, dtype=torch.float64)
    ref = torch.stft(torch.from_numpy(x), 1024, 256, 1024, window=win, center=True,
                     pad_mode="reflect", return_complex=True).numpy().T
    np.testing.assert_allclose(ours, ref, rtol=1e-10, atol=1e-9)


def test_matches_explicit_dft_on_one_frame():
    x = np.random.default_rng(2).standard_normal(3000)
    t = 3
    padded = np.pad(x, 512, mode="reflect")
    frame = padded[t * 256:t * 256 + 1024] * dsp.hann_window()
    n = np.arange(1024)
    basis = np.exp(-2j * np.pi * np.outer(np.arange(513), n) / 1024)
    expected = basis @ frame
    np.testing.assert_allclose(dsp.stft(x)[t], expected, atol=1e-9)


def test_sinusoid_peak_is_half_window_sum():
    # bin-centred sinusoid of amplitude 0.3 reads 0.3 * sum(w) / 2 = 76.8 at its bin
    f_bin = 64
    t = np.arange(16000) / 16000
    x = 0.3 * np.cos(2 * np.pi * f_bin * 16000 / 1024 * t)
    mags = np.abs(dsp.stft(x))[4:-4]
    np.testing.assert_allclose(mags[:, f_bin], 0.3 * dsp.hann_window().sum() / 2, rtol=1e-6)


def test_zero_clip_gives_zero_spectrogram_and_back():
    spec = dsp.stft(np.zeros(4096))
    assert not spec.any()
    assert not dsp.istft(spec, 4096).samples.any()


def test_short_clip_rejected():
    with pytest.raises(ClipTooShortError):
        dsp.stft(np.zeros(1023))
    with pytest.raises(InvalidInputError):
        dsp.stft(np.zeros(1023))


def test_round_trip_interior_snr():
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.standard_normal(int(rng.integers(4096, 20000)))
        y = dsp.istft(dsp.stft(x), len(x)).samples
        assert interior_snr(x, y) > 40


def test_round_trip_is_nearly_exact_everywhere():
    x = np.random.default_rng(4).standard_normal(8191)
    y = dsp.istft(dsp.stft(x), len(x)).samples
    np.testing.assert_allclose(y, x, atol=1e-9)


def test_istft_pads_or_cuts_to_target_length():
    spec = dsp.stft(np.ones(2048))
    assert len(dsp.istft(spec, 100)) == 100
    assert len(dsp.istft(spec, 5000)) == 5000


@pytest.mark.parametrize("bad", [np.zeros((0, 513)), np.zeros((4, 512)), np.full((4, 513), np.nan)])
def test_istft_rejects_degenerate_input(bad):
    with pytest.raises(InvalidInputError):
        dsp.istft(bad, 1024)


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 2**16))
def test_stft_is_linear(a, b, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((2, 2048))
    np.testing.assert_allclose(dsp.stft(a * x + b * y), a * dsp.stft(x) + b * dsp.stft(y), atol=1e-9)


def test_audio_clip_validation():
    with pytest.raises(InvalidInputError):
        dsp.AudioClip(np.zeros((2, 10)))
    with pytest.raises(InvalidInputError):
        dsp.AudioClip(np.array([0.0, np.inf]))
    assert dsp.AudioClip([1, 2]).samples.dtype == np.float64


def test_apply_mask_checks():
    spec = dsp.stft(np.ones(2048))
    with pytest.raises(InvalidInputError):
        dsp.apply_mask(spec, np.ones((3, 3)))
    with pytest.raises(InvalidInputError):
        dsp.apply_mask(spec, np.full(spec.shape, 1.5))
    np.testing.assert_array_equal(dsp.apply_mask(spec, np.ones(spec.shape)), spec)


def _argmax_oracle(mags):
    n, T, F = mags.shape
    out = np.zeros_like(mags)
    for t in range(T):
        for f in range(F):
            best = 0
            for i in range(1, n):
                if mags[i, t, f] > mags[best, t, f]:
                    best = i
            out[best, t, f] = 1
    return out


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**16), n=st.integers(1, 4))
def test_binary_masks_match_loop_oracle(seed, n):
    rng = np.random.default_rng(seed)
    mags = rng.integers(0, 3, size=(n, 5, 6)).astype(float)  # many ties
    masks = dsp.ground_truth_masks(list(mags))
    np.testing.assert_array_equal(masks, _argmax_oracle(mags))
    np.testing.assert_array_equal(masks.sum(axis=0), 1)


def test_silent_sources_go_to_first():
    masks = dsp.ground_truth_masks([np.zeros((3, 4)), np.zeros((3, 4))])
    assert masks[0].all() and not masks[1].any()


def test_ratio_masks():
    a, b = np.full((2, 2), 3.0), np.full((2, 2), 1.0)
    r = dsp.ground_truth_masks([a, b], kind="ratio")
    np.testing.assert_allclose(r[0], 0.75, rtol=1e-7)
    z = dsp.ground_truth_masks([np.zeros((2, 2))] * 2, kind="ratio")
    assert not z.any()
    with pytest.raises(InvalidInputError):
        dsp.ground_truth_masks([a], kind="soft")


def test_disjoint_band_masks_follow_band():
    t = np.arange(8192) / 16000
    tone = 0.5 * np.sin(2 * np.pi * 500 * t)
    rng = np.random.default_rng(5)
    spec_noise = dsp.stft(rng.standard_normal(8192))
    spec_noise[:, :200] = 0  # noise only above ~3 kHz
    noise = dsp.istft(spec_noise, 8192).samples
    masks = dsp.ground_truth_masks([np.abs(dsp.stft(tone)), np.abs(dsp.stft(noise))])
    bin500 = round(500 * 1024 / 16000)
    assert masks[0][4:-4, bin500].all()
    assert masks[1][4:-4, 300:].mean() > 0.99


def test_wav_round_trip(tmp_path):
    import scipy.io.wavfile

    x = np.random.default_rng(6).uniform(-0.5, 0.5, 3000)
    dsp.write_wav(tmp_path / "a.wav", x)
    np.testing.assert_allclose(dsp.read_wav(tmp_path / "a.wav").samples, x, atol=1e-7)

    stereo = (np.stack([x, -x], axis=1) * 32767).astype(np.int16)
    scipy.io.wavfile.write(tmp_path / "s.wav", 16000, stereo)
    np.testing.assert_allclose(dsp.read_wav(tmp_path / "s.wav").samples, 0, atol=1e-4)

    scipy.io.wavfile.write(tmp_path / "r.wav", 8000, x.astype(np.float32))
    with pytest.raises(InvalidInputError, match="sample rate"):
        dsp.read_wav(tmp_path / "r.wav")

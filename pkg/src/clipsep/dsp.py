"""Waveform <-> time-frequency conversion and mask utilities.

Spectrograms are complex arrays of shape (T, F) with F = n_fft // 2 + 1.
Framing is centered: the signal is reflection-padded by n_fft // 2 on both
sides, so T = 1 + len // hop.  Magnitudes are amplitude-calibrated: a
sinusoid of amplitude A centred on a bin shows a peak magnitude of A.
"""

from dataclasses import dataclass

import numpy as np
import scipy.io.wavfile

from .errors import ClipTooShortError, InvalidInputError

SAMPLE_RATE = 16000
N_FFT = 1024
HOP_LENGTH = 256
WIN_LENGTH = 1024
WINDOW_SUM_FLOOR = 1e-8
RATIO_EPS = 1e-8


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise InvalidInputError(f"expected mono samples, got shape {samples.shape}")
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        if not np.all(np.isfinite(samples)):
            raise InvalidInputError("audio contains non-finite samples")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]


def hann_window(win_length=WIN_LENGTH):
    # periodic Hann: overlap-adds to a constant at 75% overlap
    n = np.arange(win_length)
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / win_length)


def _as_samples(clip):
    if isinstance(clip, AudioClip):
        return clip.samples
    samples = np.asarray(clip, dtype=np.float64)
    if samples.ndim != 1:
        raise InvalidInputError(f"expected 1-D samples, got shape {samples.shape}")
    return samples


def num_frames(length, hop_length=HOP_LENGTH):
    return 1 + length // hop_length


def stft(clip, n_fft=N_FFT, hop_length=HOP_LENGTH, win_length=WIN_LENGTH):
    """Centered Hann-window STFT returning a complex (T, F) array.

    Unnormalized, as in ``torch.stft``: a full-scale sinusoid of amplitude A
    peaks near ``A * sum(window) / 2``.
    """
    x = _as_samples(clip)
    if x.shape[0] < win_length:
        raise ClipTooShortError(
            f"clip has {x.shape[0]} samples, need at least one window ({win_length})"
        )
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("audio contains non-finite samples")
    window = _padded_window(n_fft, win_length)
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, n_fft)[::hop_length]
    return np.fft.rfft(frames * window, axis=-1)


def _padded_window(n_fft, win_length):
    window = hann_window(win_length)
    if win_length < n_fft:
        left = (n_fft - win_length) // 2
        window = np.pad(window, (left, n_fft - win_length - left))
    return window


def istft(spec, target_len, n_fft=N_FFT, hop_length=HOP_LENGTH, win_length=WIN_LENGTH):
    """Weighted overlap-add inverse of :func:`stft`, cut or zero-padded to ``target_len``."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[0] == 0:
        raise InvalidInputError(f"degenerate spectrogram of shape {spec.shape}")
    if spec.shape[1] != n_fft // 2 + 1:
        raise InvalidInputError(f"expected {n_fft // 2 + 1} bins, got {spec.shape[1]}")
    if not np.all(np.isfinite(spec)):
        raise InvalidInputError("spectrogram contains non-finite values")
    window = _padded_window(n_fft, win_length)
    frames = np.fft.irfft(spec, n=n_fft, axis=-1) * window
    n_frames = spec.shape[0]
    total = n_fft + hop_length * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    wsq = window**2
    for t in range(n_frames):
        start = t * hop_length
        out[start:start + n_fft] += frames[t]
        norm[start:start + n_fft] += wsq
    out /= np.maximum(norm, WINDOW_SUM_FLOOR)
    pad = n_fft // 2
    out = out[pad:]
    if out.shape[0] >= target_len:
        out = out[:target_len]
    else:
        out = np.pad(out, (0, target_len - out.shape[0]))
    return AudioClip(out)


def magnitude(spec):
    return np.abs(spec)


def apply_mask(spec, mask):
    """Scale each bin's magnitude by ``mask`` while keeping the mixture phase."""
    spec = np.asarray(spec)
    mask = np.asarray(mask, dtype=np.float64)
    if spec.shape != mask.shape:
        raise InvalidInputError(f"mask shape {mask.shape} does not match spectrogram {spec.shape}")
    if not np.all(np.isfinite(mask)) or mask.min(initial=0.0) < 0.0 or mask.max(initial=0.0) > 1.0:
        raise InvalidInputError("mask values must lie in [0, 1]")
    return spec * mask


def ground_truth_masks(sources, kind="binary", eps=RATIO_EPS):
    """Ideal masks for a list of (T, F) source magnitudes.

    ``binary``: bin belongs to the loudest source (ties go to the lowest index).
    ``ratio``: |S_i| / (sum_j |S_j| + eps), clipped to [0, 1].
    """
    if len(sources) == 0:
        raise InvalidInputError("need at least one source")
    mags = np.stack([np.asarray(s, dtype=np.float64) for s in sources])
    if mags.ndim != 3:
        raise InvalidInputError("sources must be (T, F) grids of equal shape")
    if kind == "binary":
        winner = np.argmax(mags, axis=0)
        return (winner[None] == np.arange(len(sources))[:, None, None]).astype(np.float64)
    if kind == "ratio":
        return np.clip(mags / (mags.sum(axis=0, keepdims=True) + eps), 0.0, 1.0)
    raise InvalidInputError(f"unknown mask kind {kind!r}")


def read_wav(path):
    rate, data = scipy.io.wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise InvalidInputError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (no resampling)")
    if data.dtype == np.int16:
        data = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        data = data.astype(np.float64)
    else:
        raise InvalidInputError(f"{path}: unsupported sample format {data.dtype}")
    if data.ndim == 2:
        data = data.mean(axis=1)
    return AudioClip(data, rate)


def write_wav(path, clip):
    samples = _as_samples(clip).astype(np.float32)
    scipy.io.wavfile.write(path, SAMPLE_RATE, samples)

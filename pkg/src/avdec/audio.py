"""Audio front-end: WAV I/O, resampling, MFCC and CQT feature extraction.

All extraction is pure numpy and deterministic. Framing follows the law
T = 1 + floor((len - window) / hop) with window=2048, hop=512 at 16 kHz.
"""

from __future__ import annotations

import wave

import numpy as np

from avdec.autodiff import add, matmul, tanh

SAMPLE_RATE = 16_000
WINDOW = 2048
HOP = 512
LOG_EPS = 1e-10


def read_wav(path):
    """Read a 16-bit PCM WAV; stereo is downmixed by channel averaging.

    Returns (samples in [-1, 1] as float64, sample_rate).
    """
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM supported, got width {f.getsampwidth()}")
        n_channels = f.getnchannels()
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    if n_channels > 1:
        data = data.reshape(-1, n_channels).mean(axis=1)
    if data.size == 0:
        raise ValueError(f"{path}: empty audio")
    return data, rate


def write_wav(path, samples, rate=SAMPLE_RATE):
    """Write mono float samples in [-1, 1] as 16-bit PCM."""
    scaled = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(rate)
        f.writeframes(pcm.tobytes())


def resample(samples, orig_rate, target_rate):
    """Linear-interpolation resampling; duration preserved within one period."""
    if target_rate <= 0:
        raise ValueError("target rate must be positive")
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size == 0:
        raise ValueError("empty input")
    if orig_rate == target_rate:
        return samples.copy()
    n_out = int(round(samples.size * target_rate / orig_rate))
    t_out = np.arange(n_out) * (orig_rate / target_rate)
    return np.interp(t_out, np.arange(samples.size), samples)


def frame_signal(samples, window=WINDOW, hop=HOP):
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size < window:
        raise ValueError(f"audio of {samples.size} samples shorter than one window ({window})")
    return np.lib.stride_tricks.sliding_window_view(samples, window)[::hop].copy()


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels, n_fft, rate):
    """Triangular filters, mel-spaced from 0 to Nyquist, over rfft bins."""
    fft_freqs = np.arange(n_fft // 2 + 1) * (rate / n_fft)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(rate / 2.0), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bank = np.zeros((n_mels, fft_freqs.size))
    for i in range(n_mels):
        lo, mid, hi = hz_pts[i], hz_pts[i + 1], hz_pts[i + 2]
        rising = (fft_freqs - lo) / (mid - lo)
        falling = (hi - fft_freqs) / (hi - mid)
        bank[i] = np.maximum(0.0, np.minimum(rising, falling))
    return bank


def dct_ii_matrix(n):
    """Orthonormal DCT-II as an explicit cosine matrix (n x n)."""
    k = np.arange(n)[:, None]
    m = np.arange(n)[None, :]
    mat = np.cos(np.pi * k * (2 * m + 1) / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] *= np.sqrt(0.5)
    return mat


def mfcc(samples, rate=SAMPLE_RATE, n_coeffs=128, n_mels=128, window=WINDOW, hop=HOP):
    """Hann window, power spectrum, mel filterbank, log, DCT-II per frame."""
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {rate}")
    frames = frame_signal(samples, window, hop) * np.hanning(window)
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = power @ mel_filterbank(n_mels, window, rate).T
    logmel = np.log(mel + LOG_EPS)
    return logmel @ dct_ii_matrix(n_mels)[:n_coeffs].T


def cqt_frequencies(fmin=64.0, n_bins=60, bins_per_octave=12):
    return fmin * 2.0 ** (np.arange(n_bins) / bins_per_octave)


def cqt_kernels(fmin=64.0, n_bins=60, bins_per_octave=12, window=WINDOW, rate=SAMPLE_RATE):
    """Complex Hann-windowed kernels, each centered in the analysis window.

    Bin k spans N_k = min(window, ceil(Q * rate / f_k)) samples with
    Q = 1 / (2^(1/bpo) - 1); kernels are normalized by N_k so a unit tone
    yields comparable magnitude across bins.
    """
    freqs = cqt_frequencies(fmin, n_bins, bins_per_octave)
    if freqs[-1] >= rate / 2.0:
        raise ValueError(f"top bin {freqs[-1]:.1f} Hz reaches Nyquist ({rate / 2:.0f} Hz)")
    q = 1.0 / (2.0 ** (1.0 / bins_per_octave) - 1.0)
    kernels = np.zeros((window, n_bins), dtype=np.complex128)
    for k, fk in enumerate(freqs):
        n_k = min(window, int(np.ceil(q * rate / fk)))
        t = np.arange(n_k)
        kern = np.hanning(n_k) * np.exp(-2j * np.pi * fk * t / rate) / n_k
        start = (window - n_k) // 2
        kernels[start : start + n_k, k] = kern
    return kernels


def cqt(samples, rate=SAMPLE_RATE, fmin=64.0, n_bins=60, bins_per_octave=12,
        window=WINDOW, hop=HOP):
    """Constant-Q magnitudes: frame inner products against complex kernels."""
    if rate != SAMPLE_RATE:
        raise ValueError(f"expected {SAMPLE_RATE} Hz input, got {rate}")
    frames = frame_signal(samples, window, hop)
    kernels = cqt_kernels(fmin, n_bins, bins_per_octave, window, rate)
    return np.abs(frames @ kernels.conj())


def project_features(frames, weight, bias):
    """Per-frame affine map then tanh; the learnable F -> 512 projection."""
    if frames.shape[1] != weight.shape[0]:
        raise ValueError(f"projection mismatch: {frames.shape[1]} dims vs {weight.shape[0]}")
    return tanh(add(matmul(frames, weight), bias))


def extract(samples, rate, kind):
    """Dispatch on feature kind {mfcc, cqt}; resamples to 16 kHz if needed."""
    if rate != SAMPLE_RATE:
        samples = resample(samples, rate, SAMPLE_RATE)
    if kind == "mfcc":
        return mfcc(samples)
    if kind == "cqt":
        return cqt(samples)
    raise ValueError(f"unknown audio feature kind {kind!r}")

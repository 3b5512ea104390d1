"""Waveform and spectrogram processing.

Covers the signal path around the model: windowed-sinc upsampling and
anti-aliased decimation, centered STFT / least-squares iSTFT, magnitude
and phase splitting, log scaling, and full-band reconstruction that
reuses the interpolated signal's phase.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

N_FFT = 1024
HOP = 256
N_BINS = N_FFT // 2 + 1          # 513
LOW_BINS = N_FFT // 4 + 1        # 257 conditioning bins
HIGH_BINS = N_BINS - LOW_BINS    # 256 predicted bins
LOG_MAG_FLOOR = 1e-5

# Truncated realization of ideal band-limited interpolation: Kaiser window
# with the passband edge at the band edge itself, so the transition band
# straddles Nyquist instead of eating into the top working bins.
FILTER_TAPS = 129
KAISER_BETA = 8.6
CUTOFF_SCALE = 1.0


@dataclass
class AudioBuffer:
    """Mono waveform plus its sample rate; samples nominally in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError(f"AudioBuffer: expected mono 1-D samples, got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("AudioBuffer: samples must be finite")
        if self.sample_rate <= 0:
            raise DataError(f"AudioBuffer: sample rate must be positive, got {self.sample_rate}")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class ComplexSpectrogram:
    data: np.ndarray          # [T, F] complex
    n_fft: int
    hop: int
    sample_rate: int
    window_kind: str = "hann"

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def bins(self) -> int:
        return self.data.shape[1]


@dataclass
class LogMagnitude:
    """Natural-log magnitudes, floored at LOG_MAG_FLOOR before the log."""

    data: np.ndarray          # [T, F] real
    floor: float = LOG_MAG_FLOOR


@dataclass
class Phase:
    data: np.ndarray          # [T, F] radians in (-pi, pi]


def _hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def _windowed_sinc(cutoff: float, taps: int = FILTER_TAPS, beta: float = KAISER_BETA) -> np.ndarray:
    """Linear-phase low-pass FIR; cutoff in cycles/sample, unit DC gain."""
    m = (taps - 1) // 2
    n = np.arange(taps) - m
    h = 2.0 * cutoff * np.sinc(2.0 * cutoff * n)
    h *= np.kaiser(taps, beta)
    return h / np.sum(h)


def sinc_upsample(audio: AudioBuffer, factor: int) -> AudioBuffer:
    """Band-limited interpolation: zero insertion + windowed-sinc low-pass.

    Output has exactly factor * len(audio) samples at factor * sample_rate,
    time-aligned with the input (group delay compensated). Accuracy degrades
    near the edges where the truncated kernel runs off the signal.
    """
    if factor < 2:
        raise DataError(f"sinc_upsample: factor must be >= 2, got {factor}")
    if len(audio) == 0:
        raise DataError("sinc_upsample: empty input")
    n = len(audio)
    up = np.zeros(n * factor, dtype=np.float64)
    up[::factor] = audio.samples
    h = _windowed_sinc(CUTOFF_SCALE * 0.5 / factor) * factor
    delay = (FILTER_TAPS - 1) // 2
    y = np.convolve(up, h, mode="full")[delay:delay + n * factor]
    return AudioBuffer(y, audio.sample_rate * factor)


def downsample(audio: AudioBuffer, factor: int) -> AudioBuffer:
    """Anti-aliased decimation; trims the tail to a multiple of factor."""
    if factor < 2:
        raise DataError(f"downsample: factor must be >= 2, got {factor}")
    x = audio.samples
    n = (len(x) // factor) * factor
    if n == 0:
        raise DataError("downsample: input shorter than one output sample")
    x = x[:n]
    h = _windowed_sinc(CUTOFF_SCALE * 0.5 / factor)
    delay = (FILTER_TAPS - 1) // 2
    y = np.convolve(x, h, mode="full")[delay:delay + n]
    return AudioBuffer(y[::factor], audio.sample_rate // factor)


def stft(audio: AudioBuffer, n_fft: int = N_FFT, hop: int = HOP) -> ComplexSpectrogram:
    """Centered STFT with a periodic Hann window and reflect padding."""
    x = audio.samples
    if len(x) < n_fft:
        raise DataError(f"stft: audio length {len(x)} shorter than n_fft {n_fft}")
    pad = n_fft // 2
    xp = np.pad(x, (pad, pad), mode="reflect")
    n_frames = 1 + (len(xp) - n_fft) // hop
    window = _hann_periodic(n_fft)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * window
    return ComplexSpectrogram(np.fft.rfft(frames, axis=1), n_fft=n_fft, hop=hop,
                              sample_rate=audio.sample_rate)


def istft(spec: ComplexSpectrogram) -> AudioBuffer:
    """Least-squares overlap-add inverse of ``stft`` (window-square normalized)."""
    n_fft, hop = spec.n_fft, spec.hop
    window = _hann_periodic(n_fft)
    # constant-overlap-add check for the squared window
    wsq = window * window
    probe = np.zeros(2 * n_fft)
    for off in range(0, n_fft + 1, hop):
        probe[off:off + n_fft] += wsq
    core = probe[n_fft - hop:n_fft]
    if np.any(core < 1e-8) or (n_fft % hop) != 0:
        raise DataError(f"istft: window/hop combination (hann {n_fft}, hop {hop}) violates "
                        "the overlap-add constant condition")
    frames = np.fft.irfft(spec.data, n=n_fft, axis=1) * window
    length = (spec.frames - 1) * hop + n_fft
    y = np.zeros(length)
    norm = np.zeros(length)
    for t in range(spec.frames):
        y[t * hop:t * hop + n_fft] += frames[t]
        norm[t * hop:t * hop + n_fft] += wsq
    good = norm > 1e-10
    y[good] /= norm[good]
    pad = n_fft // 2
    return AudioBuffer(y[pad:length - pad], spec.sample_rate)


def split_mag_phase(spec: ComplexSpectrogram) -> tuple[np.ndarray, Phase]:
    magnitude = np.abs(spec.data)
    phase = np.angle(spec.data)  # in (-pi, pi]; angle(0) == 0 by convention
    return magnitude, Phase(phase)


def recombine(magnitude: np.ndarray, phase: Phase, n_fft: int, hop: int,
              sample_rate: int) -> ComplexSpectrogram:
    return ComplexSpectrogram(magnitude * np.exp(1j * phase.data), n_fft=n_fft,
                              hop=hop, sample_rate=sample_rate)


def to_log_magnitude(magnitude: np.ndarray, floor: float = LOG_MAG_FLOOR) -> LogMagnitude:
    return LogMagnitude(np.log(np.maximum(magnitude, floor)), floor=floor)


def from_log_magnitude(log_mag: LogMagnitude) -> np.ndarray:
    return np.exp(log_mag.data)


def reconstruct_full(low_log_mag: LogMagnitude, high_log_mag: LogMagnitude,
                     phase: Phase, sample_rate: int,
                     n_fft: int = N_FFT, hop: int = HOP) -> AudioBuffer:
    """Concatenate low + predicted high log magnitudes, reuse the given phase, iSTFT.

    Output is clamped to [-1, 1]; any clipping is reported via the module
    logger rather than silently discarded.
    """
    low, high = low_log_mag.data, high_log_mag.data
    if low.shape[0] != high.shape[0] or low.shape[0] != phase.data.shape[0]:
        raise ShapeError(f"reconstruct_full: frame counts differ "
                         f"(low {low.shape[0]}, high {high.shape[0]}, phase {phase.data.shape[0]})")
    full_bins = low.shape[1] + high.shape[1]
    if full_bins != n_fft // 2 + 1 or phase.data.shape[1] != full_bins:
        raise ShapeError(f"reconstruct_full: bin split {low.shape[1]}+{high.shape[1]} must equal "
                         f"{n_fft // 2 + 1} and match phase bins {phase.data.shape[1]}")
    magnitude = np.exp(np.concatenate([low, high], axis=1))
    audio = istft(recombine(magnitude, phase, n_fft, hop, sample_rate))
    clipped = int(np.sum(np.abs(audio.samples) > 1.0))
    if clipped:
        log.warning("reconstruct_full: clamped %d samples outside [-1, 1]", clipped)
        audio = AudioBuffer(np.clip(audio.samples, -1.0, 1.0), audio.sample_rate)
    return audio

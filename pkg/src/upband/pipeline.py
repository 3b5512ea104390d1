"""End-to-end inference: low-rate waveform in, full-band waveform out.

Stages: band-limited interpolation to the target rate, STFT, model
prediction of the upper 256 log-magnitude bins from the lower 257, then
inverse STFT using the interpolated signal's own phase.
"""

from __future__ import annotations

import numpy as np

from . import dsp
from .dsp import AudioBuffer, LogMagnitude


def upsample_buffer(audio: AudioBuffer, model_fn=None, factor: int = 2) -> AudioBuffer:
    """Upsample ``audio`` by ``factor``; ``model_fn`` of None gives the
    plain sinc-interpolation baseline."""
    interp = dsp.sinc_upsample(audio, factor)
    if model_fn is None:
        return interp
    spec = dsp.stft(interp)
    magnitude, phase = dsp.split_mag_phase(spec)
    log_mag = dsp.to_log_magnitude(magnitude)
    low = LogMagnitude(log_mag.data[:, :dsp.LOW_BINS])
    high = LogMagnitude(np.asarray(model_fn(low.data), dtype=np.float64))
    return dsp.reconstruct_full(low, high, phase, interp.sample_rate)

"""Neural audio upsampling toolkit.

Predicts the missing upper half of a magnitude spectrogram with a
transformer trained adversarially against grouped spectral
discriminators, then reconstructs the waveform by inverse STFT with the
interpolated input's phase.
"""

from .dsp import AudioBuffer
from .errors import (ConfigError, DataError, NumericError, ShapeError,
                     UpbandError, WavFormatError)
from .tensor import Tensor

__version__ = "0.1.0"
__all__ = ["AudioBuffer", "Tensor", "UpbandError", "ConfigError", "DataError",
           "NumericError", "ShapeError", "WavFormatError", "__version__"]

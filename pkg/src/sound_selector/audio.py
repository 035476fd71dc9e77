"""WAV reading/writing and polyphase resampling."""

from __future__ import annotations

import math
import warnings
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .signal import Waveform


def _to_float(data):
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise OSError(f"unsupported WAV sample format {data.dtype}")


def read_wav(path):
    """Return ``(samples, sample_rate)``; samples are float64, channels averaged."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except (ValueError, EOFError, OSError) as exc:
        raise OSError(f"cannot read WAV {path}: {exc}") from exc
    samples = _to_float(data)
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    return samples, int(rate)


def write_wav(path, samples, sample_rate):
    """Write mono 32-bit float PCM."""
    data = np.asarray(samples, dtype=np.float32)
    if data.ndim != 1:
        raise ValueError(f"expected mono samples, got shape {data.shape}")
    wavfile.write(Path(path), int(sample_rate), data)


def resample(samples, orig_rate, target_rate):
    if orig_rate == target_rate:
        return samples
    g = math.gcd(int(orig_rate), int(target_rate))
    return resample_poly(samples, target_rate // g, orig_rate // g)


def load_clip(path, target_sample_rate=8000):
    """Load a WAV file as a mono :class:`Waveform` at ``target_sample_rate``."""
    samples, rate = read_wav(path)
    if samples.size == 0:
        raise OSError(f"WAV file {path} holds no samples")
    if rate != target_sample_rate:
        samples = np.clip(resample(samples, rate, target_sample_rate), -1.0, 1.0)
    return Waveform(samples, target_sample_rate)

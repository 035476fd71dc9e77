"""Waveforms, class vectors, reference mixing, losses and SI-SDR metrics.

Metrics run in float64 numpy. The ``*_torch`` variants are the batched,
differentiable counterparts used by the trainer; they share ``EPS`` so the
two paths agree to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidArgumentError, ZeroReferenceError

EPS = 1e-8
SDR_CAP_DB = 100.0
DEFAULT_SAMPLE_RATE = 8000


@dataclass(frozen=True)
class Waveform:
    """Mono time-domain signal with its sample rate."""

    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 1 or samples.size < 1:
            raise InvalidArgumentError(f"waveform must be 1-D and non-empty, got shape {samples.shape}")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("waveform contains NaN or Inf samples")
        if self.sample_rate <= 0:
            raise InvalidArgumentError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.samples if dtype is None else self.samples.astype(dtype)

    @property
    def duration_s(self):
        return len(self) / self.sample_rate


@dataclass(frozen=True)
class StemSet:
    """Per-class reference stems, shape ``(num_classes, T)``.

    Rows for classes absent from the mixture are exact zeros.
    """

    stems: np.ndarray
    active_classes: frozenset = field(default_factory=frozenset)
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        stems = np.asarray(self.stems)
        if stems.ndim != 2:
            raise InvalidArgumentError(f"stems must be 2-D (classes, samples), got shape {stems.shape}")
        object.__setattr__(self, "stems", stems)
        object.__setattr__(self, "active_classes", frozenset(int(c) for c in self.active_classes))

    @property
    def num_classes(self):
        return self.stems.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.stems if dtype is None else self.stems.astype(dtype)


def class_vector(classes, num_classes):
    """n-hot vector (int64) with ones at the given 0-based class indices."""
    o = np.zeros(num_classes, dtype=np.int64)
    for c in classes:
        if not 0 <= int(c) < num_classes:
            raise InvalidArgumentError(f"class index {c} outside [0, {num_classes})")
        o[int(c)] = 1
    return o


def check_class_vector(o, num_classes=None, allow_empty=False):
    o = np.asarray(o)
    if o.ndim != 1:
        raise InvalidArgumentError(f"class vector must be 1-D, got shape {o.shape}")
    if num_classes is not None and o.shape[0] != num_classes:
        raise InvalidArgumentError(f"class vector has length {o.shape[0]}, expected {num_classes}")
    if not np.all((o == 0) | (o == 1)):
        raise InvalidArgumentError("class vector entries must be 0 or 1")
    if not allow_empty and not np.any(o):
        raise InvalidArgumentError("class vector selects no class")
    return o


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise InvalidArgumentError(f"length mismatch: {x.shape} vs {y.shape}")
    return x, y


def mix_reference(stems, o):
    """Sum of the stems selected by the binary class vector ``o``."""
    stems = np.asarray(stems, dtype=np.float64)
    if stems.ndim != 2:
        raise InvalidArgumentError(f"stems must be 2-D, got shape {stems.shape}")
    o = check_class_vector(o, stems.shape[0], allow_empty=True)
    out = np.zeros(stems.shape[1], dtype=np.float64)
    for n in np.flatnonzero(o):
        out = out + stems[n]
    return out


def snr_loss(x, x_hat):
    """Scale-dependent SNR in dB, ``10 log10(|x|^2 / (|x - x_hat|^2 + eps))``.

    Larger is better. Raises :class:`ZeroReferenceError` for an all-zero ``x``;
    use :func:`log_mse_loss` for those targets.
    """
    x, x_hat = _pair(x, x_hat)
    ref_energy = float(np.dot(x, x))
    if ref_energy == 0.0:
        raise ZeroReferenceError("SNR is undefined for a zero-energy reference")
    err = x - x_hat
    return float(10.0 * np.log10(ref_energy / (np.dot(err, err) + EPS)))


def negative_error_db(x, x_hat):
    """``-10 log10(|x - x_hat|^2 + eps)``: the SNR loss without its constant term."""
    x, x_hat = _pair(x, x_hat)
    err = x - x_hat
    return float(-10.0 * np.log10(np.dot(err, err) + EPS))


def log_mse_loss(x, x_hat):
    """``10 log10(mean((x - x_hat)^2) + eps)``, finite for zero targets. Lower is better."""
    x, x_hat = _pair(x, x_hat)
    err = x - x_hat
    return float(10.0 * np.log10(np.mean(err * err) + EPS))


def si_sdr_uncapped(reference, estimate):
    reference, estimate = _pair(reference, estimate)
    ref_energy = float(np.dot(reference, reference))
    if ref_energy == 0.0:
        raise ZeroReferenceError("SI-SDR is undefined for a zero-energy reference")
    alpha = float(np.dot(estimate, reference)) / ref_energy
    target = alpha * reference
    noise = estimate - target
    target_energy = float(np.dot(target, target))
    noise_energy = float(np.dot(noise, noise))
    if noise_energy == 0.0:
        return np.inf if target_energy > 0.0 else -np.inf
    if target_energy == 0.0:
        return -np.inf
    return float(10.0 * np.log10(target_energy / noise_energy))


def si_sdr(reference, estimate):
    """Scale-invariant SDR in dB, clipped to +/-100 dB."""
    return float(np.clip(si_sdr_uncapped(reference, estimate), -SDR_CAP_DB, SDR_CAP_DB))


def sdr_improvement(reference, estimate, mixture):
    return si_sdr(reference, estimate) - si_sdr(reference, mixture)


# -- differentiable batch versions (last axis is time) -----------------------

def snr_loss_torch(x, x_hat):
    """Per-example SNR in dB; ``x`` must have nonzero energy along the last axis."""
    ref_energy = (x * x).sum(-1)
    err = x - x_hat
    return 10.0 * torch.log10(ref_energy / ((err * err).sum(-1) + EPS))


def log_mse_torch(x, x_hat):
    err = x - x_hat
    return 10.0 * torch.log10((err * err).mean(-1) + EPS)

"""Short-time Fourier analysis and synthesis.

Conventions used throughout:

* Analysis frame ``t`` is the windowed DFT of ``samples[t*hop : t*hop + frame]``;
  no padding, so the frame count is ``(len - frame) // hop + 1``.
* Inversion is the least-squares overlap-add estimate: frames are windowed
  again and the sum is divided by the accumulated squared window. With this
  inverse the Griffin-Lim spectral error is non-increasing by construction.
* dB conversion is ``20*log10(|X| + 1e-10)`` clamped at a floor; the epsilon
  only guards against -inf, the clamp dominates it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .audio import AudioClip
from .errors import (
    ConfigError,
    InputTooShortError,
    ScaleMismatchError,
    ShapeMismatchError,
)

SCALE_DB = "db"
SCALE_MAGNITUDE = "magnitude"

_LOG_EPS = 1e-10


def window_samples(kind: str, frame_size: int) -> np.ndarray:
    """Analysis window of the given kind (periodic variant)."""
    if kind == "hann":
        n = np.arange(frame_size)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / frame_size)
    if kind == "rect":
        return np.ones(frame_size)
    raise ConfigError(f"unknown window kind '{kind}'")


def _overlap_add_is_constant(window: np.ndarray, hop: int) -> bool:
    # Overlap-add a stack of shifted windows and test the fully covered
    # interior for constancy.
    frame = len(window)
    shifts = frame // hop + 8
    total = np.zeros(hop * shifts + frame)
    for i in range(shifts):
        total[i * hop:i * hop + frame] += window
    interior = total[frame:hop * shifts]
    if interior.size == 0:
        return False
    mean = interior.mean()
    return mean > 0 and (interior.max() - interior.min()) <= 1e-8 * mean


@dataclass(frozen=True)
class StftConfig:
    """Analysis parameters; the window/hop pair must overlap-add to a constant."""

    frame_size: int = 2048
    hop_size: int = 512
    window: str = "hann"
    floor_db: float = -80.0

    def __post_init__(self):
        if self.frame_size < 2 or self.frame_size & (self.frame_size - 1):
            raise ConfigError(f"frame_size must be a power of two, got {self.frame_size}")
        if not 0 < self.hop_size <= self.frame_size:
            raise ConfigError(
                f"hop_size must be in (0, frame_size], got {self.hop_size}"
            )
        if not np.isfinite(self.floor_db):
            raise ConfigError("floor_db must be finite")
        w = window_samples(self.window, self.frame_size)
        if not _overlap_add_is_constant(w, self.hop_size):
            raise ConfigError(
                f"window '{self.window}' does not overlap-add to a constant "
                f"at hop {self.hop_size} (inversion would be lossy)"
            )

    @property
    def bin_count(self) -> int:
        return self.frame_size // 2 + 1


@dataclass(frozen=True)
class ComplexSpectrogram:
    """One-sided complex STFT, shape (frame_size/2 + 1, frames)."""

    values: np.ndarray
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 2:
            raise ShapeMismatchError(f"expected 2-D values, got shape {values.shape}")
        if values.shape[0] != self.config.bin_count:
            raise ShapeMismatchError(
                f"{values.shape[0]} rows inconsistent with frame_size "
                f"{self.config.frame_size} (expected {self.config.bin_count})"
            )
        if not np.all(np.isfinite(values.real)) or not np.all(np.isfinite(values.imag)):
            raise ValueError("complex spectrogram contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True)
class Spectrogram:
    """Real spectrogram in either dB or linear-magnitude scale."""

    values: np.ndarray
    scale: str
    config: StftConfig
    sample_rate: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 2:
            raise ShapeMismatchError(f"expected 2-D values, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("spectrogram contains non-finite values")
        if self.scale == SCALE_DB:
            if values.size and values.min() < self.config.floor_db:
                raise ValueError(
                    f"dB values below floor {self.config.floor_db}: min {values.min()}"
                )
        elif self.scale == SCALE_MAGNITUDE:
            if values.size and values.min() < 0:
                raise ValueError("linear magnitudes must be non-negative")
        else:
            raise ScaleMismatchError(f"unknown scale '{self.scale}'")
        object.__setattr__(self, "values", values)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def stft(clip: AudioClip, config: StftConfig) -> ComplexSpectrogram:
    """Forward STFT; frames are hop-spaced windows with no padding."""
    x = clip.samples
    frame, hop = config.frame_size, config.hop_size
    if len(x) < frame:
        raise InputTooShortError(
            f"clip of {len(x)} samples is shorter than one frame ({frame})"
        )
    values = _stft_array(x, config)
    return ComplexSpectrogram(values=values, config=config, sample_rate=clip.sample_rate)


def _stft_array(x: np.ndarray, config: StftConfig) -> np.ndarray:
    frame, hop = config.frame_size, config.hop_size
    w = window_samples(config.window, frame)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame)[::hop]
    return np.fft.rfft(frames * w, axis=1).T.copy()


def istft(spec: ComplexSpectrogram) -> AudioClip:
    """Least-squares inverse of stft; output spans (frames-1)*hop + frame samples."""
    samples = _istft_array(spec.values, spec.config)
    return AudioClip(samples=samples, sample_rate=spec.sample_rate)


def _istft_array(values: np.ndarray, config: StftConfig) -> np.ndarray:
    frame, hop = config.frame_size, config.hop_size
    w = window_samples(config.window, frame)
    wsq = w * w
    n_frames = values.shape[1]
    length = (n_frames - 1) * hop + frame
    num = np.zeros(length)
    den = np.zeros(length)
    frames_t = np.fft.irfft(values, n=frame, axis=0)
    for t in range(n_frames):
        s = t * hop
        num[s:s + frame] += w * frames_t[:, t]
        den[s:s + frame] += wsq
    covered = den > 0
    out = np.zeros(length)
    out[covered] = num[covered] / den[covered]
    return out


def magnitude_db(spec: ComplexSpectrogram, floor_db: float | None = None) -> Spectrogram:
    """Magnitude in dB, clamped at the floor (default: the config's floor)."""
    floor = spec.config.floor_db if floor_db is None else float(floor_db)
    values = np.maximum(20.0 * np.log10(np.abs(spec.values) + _LOG_EPS), floor)
    return Spectrogram(values=values, scale=SCALE_DB, config=spec.config,
                       sample_rate=spec.sample_rate)


def db_to_magnitude(spec: Spectrogram) -> Spectrogram:
    """Invert the dB mapping; cells at the floor map to 10^(floor/20)."""
    if spec.scale != SCALE_DB:
        raise ScaleMismatchError(f"expected a dB spectrogram, got scale '{spec.scale}'")
    return Spectrogram(values=10.0 ** (spec.values / 20.0), scale=SCALE_MAGNITUDE,
                       config=spec.config, sample_rate=spec.sample_rate)


def griffin_lim(
    target_magnitude: Spectrogram,
    config: StftConfig | None = None,
    iterations: int = 60,
    init_phase: ComplexSpectrogram | None = None,
    seed: int = 0,
) -> AudioClip:
    """Iterative phase retrieval for a linear-magnitude target.

    Starts from the given phase (or seed-derived random phase), then
    alternates inversion and re-analysis, replacing the magnitude with the
    target each round. The per-iteration spectral error
    ``|| |STFT(x_i)| - target ||_F`` never increases.
    """
    clip, _ = griffin_lim_trace(target_magnitude, config, iterations, init_phase, seed)
    return clip


def griffin_lim_trace(
    target_magnitude: Spectrogram,
    config: StftConfig | None = None,
    iterations: int = 60,
    init_phase: ComplexSpectrogram | None = None,
    seed: int = 0,
) -> tuple[AudioClip, np.ndarray]:
    """griffin_lim plus the spectral-error trajectory (length iterations + 1)."""
    if target_magnitude.scale != SCALE_MAGNITUDE:
        raise ScaleMismatchError(
            f"target must be linear magnitude, got scale '{target_magnitude.scale}'"
        )
    if iterations < 0:
        raise ConfigError(f"iterations must be >= 0, got {iterations}")
    cfg = target_magnitude.config if config is None else config
    target = target_magnitude.values
    if target.shape[0] != cfg.bin_count:
        raise ShapeMismatchError(
            f"target has {target.shape[0]} bins, config expects {cfg.bin_count}"
        )
    if init_phase is not None:
        if init_phase.values.shape != target.shape:
            raise ShapeMismatchError(
                f"init_phase shape {init_phase.values.shape} != target {target.shape}"
            )
        phase = np.angle(init_phase.values)
    else:
        phase = 2.0 * np.pi * rng.uniform_grid(
            seed, np.arange(target.shape[0]), np.arange(target.shape[1])
        )

    spec = target * np.exp(1j * phase)
    x = _istft_array(spec, cfg)
    analysis = _stft_array(x, cfg)
    errors = [float(np.linalg.norm(np.abs(analysis) - target))]
    for _ in range(iterations):
        spec = target * np.exp(1j * np.angle(analysis))
        x = _istft_array(spec, cfg)
        analysis = _stft_array(x, cfg)
        errors.append(float(np.linalg.norm(np.abs(analysis) - target)))
    clip = AudioClip(samples=x, sample_rate=target_magnitude.sample_rate)
    return clip, np.asarray(errors)

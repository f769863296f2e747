"""Harmonic analysis of single frames.

window -> zero-padded FFT -> log magnitude -> peak picking with parabolic
interpolation -> f0 refinement near the nominal (MIDI) pitch -> harmonic
amplitudes. The residual is not modelled.
"""

import csv
from dataclasses import dataclass
from functools import lru_cache
from typing import List, Optional, Sequence

import numpy as np
from scipy.signal import windows

from .pitch import cents

LOG_FLOOR = np.log(1e-10)
DB_PER_NEPER = 20.0 / np.log(10.0)


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class SpectralFrame:
    log_mag: np.ndarray  # N/2 + 1 bins, natural log
    fft_size: int
    sample_rate: float

    @property
    def bin_hz(self) -> float:
        return self.sample_rate / self.fft_size

    def at_freq(self, freq):
        """Log magnitude linearly interpolated at ``freq`` (Hz)."""
        k = np.asarray(freq, dtype=np.float64) / self.bin_hz
        return np.interp(k, np.arange(self.log_mag.size), self.log_mag)


@dataclass(frozen=True)
class Peak:
    freq: float
    amp_log: float
    bin: int


@dataclass(frozen=True)
class HarmonicFrame:
    f0: float
    h: np.ndarray
    freq: np.ndarray
    amp_log: np.ndarray

    @property
    def n_harmonics(self) -> int:
        return int(self.h.size)

    @property
    def amp_db(self) -> np.ndarray:
        return DB_PER_NEPER * self.amp_log


@lru_cache(maxsize=8)
def _window(name: str, n: int) -> np.ndarray:
    if name == "blackmanharris":
        w = windows.blackmanharris(n)
    elif name == "hann":
        w = windows.hann(n)
    else:
        raise AnalysisError(f"unknown window {name!r}")
    # amplitude-correct: a full-scale sinusoid reads as magnitude 1
    w = 2.0 * w / w.sum()
    w.setflags(write=False)
    return w


def analysis_window(frame_len: int = 1024, name: str = "blackmanharris") -> np.ndarray:
    return _window(name, frame_len)


def window_frame(
    frame: np.ndarray, frame_len: int = 1024, name: str = "blackmanharris"
) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape != (frame_len,):
        raise AnalysisError(f"frame length {frame.shape} != configured {frame_len}")
    return frame * _window(name, frame_len)


def magnitude_spectrum(
    windowed: np.ndarray, fft_size: int = 2048, sample_rate: float = 48000.0
) -> SpectralFrame:
    windowed = np.asarray(windowed, dtype=np.float64)
    if fft_size < windowed.size:
        raise AnalysisError(f"fft_size {fft_size} < frame length {windowed.size}")
    if fft_size & (fft_size - 1):
        raise AnalysisError(f"fft_size {fft_size} is not a power of two")
    mag = np.abs(np.fft.rfft(windowed, fft_size))
    log_mag = np.log(np.maximum(mag, 1e-10))
    return SpectralFrame(log_mag, fft_size, float(sample_rate))


def detect_peaks(spec: SpectralFrame, floor_db_rel: float = 80.0) -> List[Peak]:
    """Local maxima within ``floor_db_rel`` dB of the global maximum.

    Each maximum is refined with a parabola through the three log-magnitude
    bins around it.
    """
    x = spec.log_mag
    thresh = max(x.max() - floor_db_rel / DB_PER_NEPER, LOG_FLOOR + 1e-9)
    mid = x[1:-1]
    is_peak = (mid > x[:-2]) & (mid >= x[2:]) & (mid > thresh)
    peaks = []
    for k in np.flatnonzero(is_peak) + 1:
        a, b, g = x[k - 1], x[k], x[k + 1]
        denom = a - 2.0 * b + g
        delta = 0.5 * (a - g) / denom if denom != 0.0 else 0.0
        freq = (k + delta) * spec.bin_hz
        if 0.0 < freq < spec.sample_rate / 2:
            peaks.append(Peak(float(freq), float(b - 0.25 * (a - g) * delta), int(k)))
    return peaks


def refine_f0(
    peaks: Sequence[Peak], nominal_f0: float, search_cents: float = 100.0
) -> float:
    """Frequency of the strongest peak within ``search_cents`` of nominal.

    Falls back to ``nominal_f0`` if no peak lies in the band.
    """
    if nominal_f0 <= 0:
        raise AnalysisError("nominal_f0 must be positive")
    best = None
    for p in peaks:
        if abs(cents(p.freq, nominal_f0)) <= search_cents:
            if best is None or p.amp_log > best.amp_log:
                best = p
    return nominal_f0 if best is None else best.freq


def max_harmonic(f0: float, sample_rate: float) -> int:
    return int(np.floor((sample_rate / 2) / f0)) - 1


def extract_harmonics(
    spec: SpectralFrame,
    peaks: Sequence[Peak],
    f0: float,
    max_harmonics: Optional[int] = None,
    tolerance_ratio: float = 0.25,
) -> HarmonicFrame:
    """Harmonic amplitudes at multiples of ``f0``.

    A peak within +/- f0 * tolerance_ratio / 2 of h*f0 is taken as harmonic
    h; otherwise the spectrum is read directly at h*f0.
    """
    fs = spec.sample_rate
    if not 0 < f0 < fs / 2:
        raise AnalysisError(f"f0 {f0} outside (0, Nyquist)")
    n = max(0, max_harmonic(f0, fs))
    if max_harmonics is not None:
        n = min(n, max_harmonics)
    hs = np.arange(1, n + 1)
    freqs = hs * float(f0)
    amps = spec.at_freq(freqs)

    if peaks and n:
        pf = np.array([p.freq for p in peaks])
        pa = np.array([p.amp_log for p in peaks])
        half_band = 0.5 * f0 * tolerance_ratio
        for i, target in enumerate(hs * f0):
            d = np.abs(pf - target)
            j = int(np.argmin(d))
            if d[j] <= half_band:
                freqs[i] = pf[j]
                amps[i] = pa[j]
    return HarmonicFrame(float(f0), hs, freqs, amps)


@dataclass(frozen=True)
class AnalysisConfig:
    frame_len: int = 1024
    fft_size: int = 2048
    window: str = "blackmanharris"
    peak_floor_db: float = 80.0
    search_cents: float = 100.0
    tolerance_ratio: float = 0.25
    max_harmonics: Optional[int] = None


def analyze_frame(
    frame: np.ndarray,
    nominal_f0: float,
    sample_rate: float = 48000.0,
    config: AnalysisConfig = AnalysisConfig(),
) -> HarmonicFrame:
    """Full single-frame analysis from time samples to harmonics."""
    spec = magnitude_spectrum(
        window_frame(frame, config.frame_len, config.window), config.fft_size, sample_rate
    )
    peaks = detect_peaks(spec, config.peak_floor_db)
    f0 = refine_f0(peaks, nominal_f0, config.search_cents)
    return extract_harmonics(spec, peaks, f0, config.max_harmonics, config.tolerance_ratio)


def write_harmonics_csv(frames: Sequence[HarmonicFrame], path, frame_indices=None):
    """Debug dump, one row per (frame, harmonic), amplitudes in dB."""
    if frame_indices is None:
        frame_indices = range(len(frames))
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_index", "f0", "h", "freq", "amp_db"])
        for idx, hf in zip(frame_indices, frames):
            for h, fr, a in zip(hf.h, hf.freq, hf.amp_db):
                w.writerow([idx, f"{hf.f0:.6f}", int(h), f"{fr:.6f}", f"{a:.6f}"])

"""Additive resynthesis and pitch contours."""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class SynthFrame:
    f0: float
    amps: np.ndarray  # linear, harmonics 1..H

    def __post_init__(self):
        a = np.asarray(self.amps, dtype=np.float64)
        if self.f0 <= 0:
            raise SynthesisError("f0 must be positive")
        if np.any(a < 0) or not np.all(np.isfinite(a)):
            raise SynthesisError("harmonic amplitudes must be finite and >= 0")
        object.__setattr__(self, "amps", a)


@dataclass(frozen=True)
class PitchContour:
    f0_per_frame: np.ndarray
    hop: int = 256
    sample_rate: float = 48000.0

    def __len__(self):
        return len(self.f0_per_frame)


def synth_band(sample_rate: float):
    """(lo, hi) open f0 interval with at least one harmonic below Nyquist."""
    return 0.0, sample_rate / 4.0


def _check_frame_band(fr: SynthFrame, sample_rate: float, t: int):
    if fr.amps.size * fr.f0 >= sample_rate / 2:
        raise SynthesisError(
            f"frame {t}: {fr.amps.size} harmonics of {fr.f0:.2f} Hz reach Nyquist"
        )


def additive_synth(frames: Sequence[SynthFrame], hop: int = 256, sample_rate: float = 48000.0,
                   peak: Optional[float] = 0.9) -> np.ndarray:
    """Oscillator-bank rendering of a frame sequence.

    Frame t sits at sample t*hop; f0 and each harmonic amplitude are
    linearly interpolated across every hop, and harmonic phases accumulate
    from the interpolated instantaneous frequency (all start at zero). A
    harmonic missing from one side of a hop ramps from/to zero. The output
    covers (len(frames) - 1) * hop samples and is scaled to ``peak`` full
    scale unless ``peak`` is None.
    """
    if len(frames) < 2:
        raise SynthesisError("need at least 2 frames")
    for t, fr in enumerate(frames):
        _check_frame_band(fr, sample_rate, t)
    T = len(frames)
    n = (T - 1) * hop
    alpha = np.arange(hop) / hop

    f0 = np.array([fr.f0 for fr in frames])
    f0_s = (f0[:-1, None] + alpha[None, :] * np.diff(f0)[:, None]).ravel()
    # phase of the fundamental; harmonic h has exactly h times this phase
    step = 2.0 * np.pi * f0_s / sample_rate
    phase = np.concatenate([[0.0], np.cumsum(step[:-1])])

    H = max(fr.amps.size for fr in frames)
    A = np.zeros((T, H))
    for t, fr in enumerate(frames):
        A[t, : fr.amps.size] = fr.amps

    out = np.zeros(n)
    nyq = sample_rate / 2
    for h in range(1, H + 1):
        a = A[:, h - 1]
        if not np.any(a):
            continue
        amp_s = (a[:-1, None] + alpha[None, :] * np.diff(a)[:, None]).ravel()
        amp_s = np.where(h * f0_s < nyq, amp_s, 0.0)
        out += amp_s * np.sin(h * phase)

    if peak is not None:
        m = np.max(np.abs(out))
        if m > 0:
            out *= peak / m
    return out


def vibrato_contour(f0_center: float, rate: float = 5.5, depth: float = 40.0,
                    n_frames: int = 500, hop: int = 256, sample_rate: float = 48000.0,
                    band: Optional[tuple] = None) -> PitchContour:
    """f0[t] = f0_center * 2 ** (depth/1200 * sin(2 pi rate t hop / Fs))."""
    if rate <= 0 or depth < 0:
        raise SynthesisError("vibrato rate must be > 0 and depth >= 0")
    t = np.arange(n_frames)
    f0 = f0_center * 2.0 ** ((depth / 1200.0) * np.sin(2 * np.pi * rate * t * hop / sample_rate))
    lo, hi = band if band is not None else synth_band(sample_rate)
    if np.any(f0 <= lo) or np.any(f0 >= hi):
        raise SynthesisError(
            f"vibrato contour [{f0.min():.2f}, {f0.max():.2f}] Hz leaves band ({lo}, {hi})"
        )
    return PitchContour(f0, hop, sample_rate)


def constant_contour(f0: float, n_frames: int, hop: int = 256,
                     sample_rate: float = 48000.0) -> PitchContour:
    return PitchContour(np.full(n_frames, float(f0)), hop, sample_rate)


def synthesize_note(m, contour: PitchContour, step: float, rng: np.random.Generator,
                    band: Optional[tuple] = None, peak: Optional[float] = 0.9,
                    fft_size: int = 2048) -> np.ndarray:
    """Render a note from a trained conditional model along a pitch contour.

    Every frame decodes the next point of a latent random walk with the
    frame's own pitch condition; the envelope is sampled at that frame's
    harmonics and the frames are fed to :func:`additive_synth`.
    """
    from .experiments import decode_frames, random_walk_latents

    f0 = np.asarray(contour.f0_per_frame, dtype=np.float64)
    if band is None:
        band = generation_band(contour.sample_rate)
    lo, hi = band
    if np.any(f0 <= lo) or np.any(f0 >= hi):
        raise SynthesisError(f"contour leaves supported band ({lo:.2f}, {hi:.2f}) Hz")
    zs = random_walk_latents(len(f0), step, m.config.latent_dim, rng)
    frames = decode_frames(m, zs, f0, contour.sample_rate, fft_size)
    return additive_synth([SynthFrame(f, a) for f, a in frames], contour.hop,
                          contour.sample_rate, peak)


def generation_band(sample_rate: float = 48000.0):
    """Pitch range accepted for model-driven synthesis: one octave either
    side of the trained MIDI 60-71 octave, and below Fs/4."""
    from .pitch import midi_to_f0

    return float(midi_to_f0(48)), float(min(midi_to_f0(84), sample_rate / 4))


def f0_track(samples: np.ndarray, nominal_f0, hop: int = 256, sample_rate: float = 48000.0,
             frame_len: int = 1024, search_cents: float = 100.0) -> np.ndarray:
    """Per-frame frequency of the strongest peak near the nominal pitch.

    ``nominal_f0`` is a scalar or one value per frame. Frame t starts at
    sample t*hop.
    """
    from .analysis import detect_peaks, magnitude_spectrum, refine_f0, window_frame

    n_frames = (len(samples) - frame_len) // hop + 1
    nominal = np.broadcast_to(np.asarray(nominal_f0, dtype=np.float64), (n_frames,))
    out = np.empty(n_frames)
    for t in range(n_frames):
        fr = samples[t * hop : t * hop + frame_len]
        spec = magnitude_spectrum(window_frame(fr, frame_len), 2 * frame_len, sample_rate)
        out[t] = refine_f0(detect_peaks(spec), nominal[t], search_cents)
    return out


def boundary_click_ratio(x: np.ndarray, hop: int) -> float:
    """max |x[n]-x[n-1]| at hop boundaries over the max at interior samples."""
    d = np.abs(np.diff(x))
    # d[i] = |x[i+1] - x[i]|; boundary steps land at n = k*hop
    n = np.arange(1, len(x))
    at_boundary = (n % hop) == 0
    interior = d[~at_boundary].max()
    return float(d[at_boundary].max() / interior) if interior > 0 else 0.0

"""Synthetic violin-like note family with pitch-dependent spectral envelopes.

Used as test and acceptance data in place of recordings. The log envelope of
a frame is

    base(f; p) + sum_j w_j * ripple_j(f)

with p = (midi - 60) / 11. ``base`` carries the pitch dependence: a spectral
tilt and four formants whose centres and gains move with p, partly linearly
and partly through a term that vanishes at both octave ends and rises steeply
away from them. Each take draws its own weights w_j on a fixed bank of
cepstral ripples (cosines over frequency, one block of quefrencies per
factor), and every frame adds a small jitter to those weights.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .analysis import HarmonicFrame, max_harmonic
from .envelope import EnvelopeConfig, EnvelopeTable, fit_envelope, pad
from .pitch import midi_to_f0
from .wavio import write_wav

FORMANTS_HZ = np.array([420.0, 1150.0, 2500.0, 4300.0])
FORMANT_WIDTH_OCT = np.array([0.35, 0.45, 0.5, 0.6])


@dataclass(frozen=True)
class EnvelopeFamily:
    """Fixed random generator of envelopes; identical fields give identical data.

    Factor j owns a contiguous block of quefrencies in
    [min_quefrency, max_quefrency] with fixed random unit-norm loadings.
    """

    seed: int = 0
    n_factors: int = 12
    min_quefrency: int = 10
    max_quefrency: int = 90
    take_sd: float = 0.1
    frame_sd: float = 0.01
    level: float = -1.5
    mid_bump: float = 3.0
    bump_power: float = 0.5
    linear: float = 1.0

    def _loadings(self):
        rng = np.random.default_rng([self.seed, 7])
        q = np.arange(self.min_quefrency, self.max_quefrency + 1)
        owner = np.arange(q.size) * self.n_factors // q.size
        L = rng.standard_normal((self.n_factors, q.size))
        L = L * (owner[None, :] == np.arange(self.n_factors)[:, None])
        L /= np.sqrt((L ** 2).sum(axis=1, keepdims=True))
        return q, L

    def base(self, f, p):
        """Mean log envelope at frequencies ``f`` for normalised pitch ``p``."""
        f = np.maximum(np.asarray(f, dtype=np.float64), 1.0)
        lf = np.log2(f)
        bump = self.mid_bump * np.abs(np.sin(np.pi * p)) ** self.bump_power
        lin = self.linear * p
        out = self.level - (0.9 + 0.5 * lin) * np.log2(1.0 + f / 600.0)
        shift = 0.18 * lin + 0.12 * bump
        gains = np.array([1.2 + 0.6 * bump, 0.9 - 0.5 * lin,
                          0.8 + 0.7 * lin * lin, 0.5 + 0.4 * (1 - 2 * lin) - 0.3 * bump])
        for F, w, g in zip(FORMANTS_HZ, FORMANT_WIDTH_OCT, gains):
            out = out + g * np.exp(-0.5 * ((lf - np.log2(F) - shift) / w) ** 2)
        return out

    def variation(self, f, weights, sample_rate: float = 48000.0):
        q, L = self._loadings()
        f = np.asarray(f, dtype=np.float64)
        ripple = np.cos(2 * np.pi * np.outer(f / sample_rate, q))  # (n_f, n_q)
        return ripple @ (L.T @ np.asarray(weights, dtype=np.float64))

    def take_weights(self, midi: int, take: int):
        rng = np.random.default_rng([self.seed, 11, midi, take])
        return self.take_sd * rng.standard_normal(self.n_factors)

    def frame_log_amps(self, f, midi: float, weights, rng=None):
        p = (midi - 60.0) / 11.0
        w = np.asarray(weights, dtype=np.float64)
        if rng is not None and self.frame_sd > 0:
            w = w + self.frame_sd * rng.standard_normal(self.n_factors)
        return self.base(f, p) + self.variation(f, w)


def harmonic_frame(family: EnvelopeFamily, midi: float, weights, rng=None,
                   sample_rate: float = 48000.0) -> HarmonicFrame:
    f0 = float(midi_to_f0(midi))
    H = max_harmonic(f0, sample_rate)
    h = np.arange(1, H + 1)
    freq = h * f0
    return HarmonicFrame(f0, h, freq, family.frame_log_amps(freq, midi, weights, rng))


def envelope_dataset(family: EnvelopeFamily, midis: Sequence[int] = tuple(range(60, 72)),
                     takes_per_note: int = 25, frames_per_take: int = 16,
                     sample_rate: float = 48000.0,
                     config: EnvelopeConfig = EnvelopeConfig()) -> EnvelopeTable:
    """Padded TAE envelopes computed straight from synthetic harmonics.

    Take ids are ``m<midi>_t<take>``.
    """
    records = []
    for midi in midis:
        for t in range(takes_per_note):
            w = family.take_weights(midi, t)
            rng = np.random.default_rng([family.seed, 13, midi, t])
            take_id = f"m{midi}_t{t:02d}"
            for i in range(frames_per_take):
                hf = harmonic_frame(family, midi, w, rng, sample_rate)
                env = fit_envelope(hf, sample_rate, config)
                records.append((take_id, midi, i, pad(env, config.pad_width)))
    return EnvelopeTable.from_records(records, int(sample_rate), config.fft_size,
                                      config.pad_width)


def true_padded_ccs(family: EnvelopeFamily, midi: float, sample_rate: float = 48000.0,
                    config: EnvelopeConfig = EnvelopeConfig()) -> np.ndarray:
    """Padded CCs of the noise-free family member at ``midi``."""
    hf = harmonic_frame(family, midi, np.zeros(family.n_factors), None, sample_rate)
    return pad(fit_envelope(hf, sample_rate, config), config.pad_width).x


def render_note(family: EnvelopeFamily, midi: int, take: int, duration: float = 1.5,
                sample_rate: int = 48000, attack: float = 0.15, release: float = 0.25,
                hop: int = 256, peak: float = 0.7) -> np.ndarray:
    """Audio of one synthetic take: attack ramp, sustained body, release."""
    from .synthesis import SynthFrame, additive_synth

    n_frames = int(duration * sample_rate / hop) + 2
    w = family.take_weights(midi, take)
    rng = np.random.default_rng([family.seed, 17, midi, take])
    frames = []
    for _ in range(n_frames):
        hf = harmonic_frame(family, midi, w, rng, sample_rate)
        frames.append(SynthFrame(hf.f0, np.exp(hf.amp_log)))
    x = additive_synth(frames, hop, sample_rate, peak=None)
    n = x.size
    t = np.arange(n) / sample_rate
    gain = np.clip(t / attack, 0, 1) * np.clip((t[-1] - t) / release, 0, 1)
    x = x * gain
    return peak * x / np.max(np.abs(x))


def write_dataset(root, family: EnvelopeFamily, midis: Sequence[int] = tuple(range(60, 72)),
                  takes_per_note: int = 5, duration: float = 1.5,
                  sample_rate: int = 48000) -> Path:
    """Write a WAV corpus plus ``labels.txt`` metadata under ``root``."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = ["# take_id, midi, eligible"]
    for midi in midis:
        for t in range(takes_per_note):
            take_id = f"violin_t{t:02d}_midi{midi}"
            write_wav(render_note(family, midi, t, duration, sample_rate), sample_rate,
                      root / f"{take_id}.wav")
            lines.append(f"{take_id}, {midi}, 1")
    meta = root / "labels.txt"
    meta.write_text("\n".join(lines) + "\n")
    return meta

"""MIDI / frequency conversions (A4 = 440 Hz, equal temperament)."""

import numpy as np


def midi_to_f0(midi):
    return 440.0 * 2.0 ** ((np.asarray(midi, dtype=np.float64) - 69.0) / 12.0)


def f0_to_midi(f0):
    f0 = np.asarray(f0, dtype=np.float64)
    if np.any(f0 <= 0):
        raise ValueError("f0 must be positive")
    return 69.0 + 12.0 * np.log2(f0 / 440.0)


def cents(f, ref):
    """Interval from ``ref`` to ``f`` in cents."""
    return 1200.0 * np.log2(np.asarray(f, dtype=np.float64) / ref)

"""Cepstral spectral envelopes.

All log magnitudes are natural-log. A cepstral envelope of order K keeps the
real cepstrum coefficients c[0..K-1] (c[0] is the mean log level); the curve
it describes is ``c0 + 2 * sum_q c[q] cos(2 pi q k / N)``.
"""

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import PAD_WIDTH
from .analysis import DB_PER_NEPER, HarmonicFrame


class EnvelopeError(ValueError):
    pass


@dataclass(frozen=True)
class CepstralEnvelope:
    ccs: np.ndarray
    f0: float
    k_cc: int
    fft_size: int = 2048
    sample_rate: float = 48000.0
    iterations: int = field(default=0, compare=False)
    trace: Tuple[float, ...] = field(default=(), compare=False)

    def __post_init__(self):
        ccs = np.asarray(self.ccs, dtype=np.float64)
        if ccs.shape != (self.k_cc,):
            raise EnvelopeError(f"ccs length {ccs.shape} != k_cc {self.k_cc}")
        if not np.all(np.isfinite(ccs)):
            raise EnvelopeError("non-finite cepstral coefficients")
        object.__setattr__(self, "ccs", ccs)


@dataclass(frozen=True)
class PaddedEnvelope:
    x: np.ndarray
    f0: float
    k_cc: int


def kcc_for_pitch(f0: float, sample_rate: float = 48000.0, pad_width: int = PAD_WIDTH) -> int:
    """Cepstral order for pitch ``f0``: floor(Fs / (2 f0)), clamped to [1, pad_width]."""
    if not 0 < f0 <= sample_rate / 2:
        raise EnvelopeError(f"f0 {f0} outside (0, Fs/2]")
    k = int(np.floor(sample_rate / (2.0 * f0) * (1 + 1e-12)))
    return max(1, min(k, pad_width))


def _lifter(c: np.ndarray, K: int) -> np.ndarray:
    n = c.size
    if K < n // 2:
        c = c.copy()
        c[K : n - K + 1] = 0.0
    return c


def _check_order(K: int, n_bins: int):
    if not 1 <= K <= n_bins - 1:
        raise EnvelopeError(f"cepstral order {K} outside [1, N/2]")


def cepstral_smooth(log_mag: np.ndarray, K: int) -> np.ndarray:
    """Low-quefrency lifter of a one-sided log spectrum.

    Quefrencies K..N-K are zeroed; K = N/2 keeps the full cepstrum.
    """
    log_mag = np.asarray(log_mag, dtype=np.float64)
    _check_order(K, log_mag.size)
    n = 2 * (log_mag.size - 1)
    c = np.fft.irfft(log_mag, n)
    return np.fft.rfft(_lifter(c, K)).real


def cepstrum(log_mag: np.ndarray) -> np.ndarray:
    log_mag = np.asarray(log_mag, dtype=np.float64)
    return np.fft.irfft(log_mag, 2 * (log_mag.size - 1))


def ccs_to_logmag(ccs: np.ndarray, fft_size: int) -> np.ndarray:
    ccs = np.asarray(ccs, dtype=np.float64)
    K = ccs.size
    if K > fft_size // 2:
        raise EnvelopeError("more coefficients than N/2")
    c = np.zeros(fft_size)
    c[:K] = ccs
    if K > 1:
        c[fft_size - K + 1 :] = ccs[1:][::-1]
    return np.fft.rfft(c).real


def envelope_to_logmag(env: CepstralEnvelope, fft_size: Optional[int] = None) -> np.ndarray:
    """Render the envelope as an N/2+1-bin log magnitude curve."""
    return ccs_to_logmag(env.ccs, fft_size or env.fft_size)


def true_amplitude_envelope(
    target_log_mag: np.ndarray,
    K: int,
    tol: float = 0.023,
    max_iter: int = 100,
    f0: float = 0.0,
    sample_rate: float = 48000.0,
) -> CepstralEnvelope:
    """Iterative cepstral envelope that rides on the target's peaks.

    Starting from the plain cepstral smoothing of the target, the envelope is
    repeatedly re-smoothed from max(target, envelope) until no bin of the
    target exceeds it by ``tol`` or more (or ``max_iter`` is reached). The
    per-iteration maximum shortfall is kept in ``trace``.
    """
    target = np.asarray(target_log_mag, dtype=np.float64)
    if not np.all(np.isfinite(target)):
        raise EnvelopeError("non-finite target spectrum")
    _check_order(K, target.size)
    n = 2 * (target.size - 1)

    env = cepstral_smooth(target, K)
    trace = []
    it = 1
    while True:
        gap = float(np.max(target - env))
        trace.append(gap)
        if gap < tol or it >= max_iter:
            break
        env = cepstral_smooth(np.maximum(target, env), K)
        it += 1

    ccs = np.fft.irfft(env, n)[:K]
    return CepstralEnvelope(ccs, float(f0), K, n, float(sample_rate), it, tuple(trace))


def harmonic_target(
    frame: HarmonicFrame,
    fft_size: int = 2048,
    sample_rate: float = 48000.0,
    valley_db: float = 0.0,
) -> np.ndarray:
    """Piecewise-linear (in log amplitude) spectrum through the harmonic peaks.

    Each harmonic sits on its nearest bin; bins between neighbours are
    linearly interpolated, and the ends are extended flat.

    ``valley_db`` > 0 lowers the span between neighbouring harmonics by a
    raised-cosine dip of that depth (zero at the harmonic bins), so the TAE
    is bound by the peaks rather than by the chords joining them.
    """
    if frame.n_harmonics < 2:
        raise EnvelopeError("harmonic target needs at least 2 harmonics")
    n_bins = fft_size // 2 + 1
    bins = np.rint(np.asarray(frame.freq) * fft_size / sample_rate).astype(int)
    bins = np.clip(bins, 0, n_bins - 1)
    amps = np.asarray(frame.amp_log, dtype=np.float64)
    order = np.argsort(bins, kind="stable")
    bins, amps = bins[order], amps[order]
    # collapse harmonics landing on the same bin to their maximum
    uniq, start = np.unique(bins, return_index=True)
    amps = np.maximum.reduceat(amps, start)
    if uniq.size < 2:
        raise EnvelopeError("harmonics collapse onto a single bin")
    k = np.arange(n_bins)
    target = np.interp(k, uniq, amps)
    if valley_db > 0.0:
        pos = np.interp(k, uniq, np.arange(uniq.size))
        dip = np.sin(np.pi * (pos - np.floor(pos))) ** 2
        target -= (valley_db / DB_PER_NEPER) * dip
    return target


def sample_at_harmonics(env: CepstralEnvelope, f0: float, H: int) -> np.ndarray:
    """Linear harmonic amplitudes read off the envelope at h*f0, h=1..H."""
    if H < 1 or H * f0 >= env.sample_rate / 2:
        raise EnvelopeError(f"{H} harmonics of {f0} Hz do not fit below Nyquist")
    curve = envelope_to_logmag(env)
    k = np.arange(1, H + 1) * f0 * env.fft_size / env.sample_rate
    return np.exp(np.interp(k, np.arange(curve.size), curve))


def pad(env: CepstralEnvelope, width: int = PAD_WIDTH) -> PaddedEnvelope:
    if env.k_cc > width:
        raise EnvelopeError(f"k_cc {env.k_cc} exceeds pad width {width}")
    x = np.zeros(width)
    x[: env.k_cc] = env.ccs
    return PaddedEnvelope(x, env.f0, env.k_cc)


def unpad(p: PaddedEnvelope, fft_size: int = 2048, sample_rate: float = 48000.0) -> CepstralEnvelope:
    return CepstralEnvelope(np.array(p.x[: p.k_cc]), p.f0, p.k_cc, fft_size, sample_rate)


def logspec_mse_from_ccs(a: np.ndarray, b: np.ndarray) -> float:
    """Mean squared log-curve difference computed from cepstral coefficients.

    Over the full N-bin symmetric spectrum this is d0^2 + 2 * sum(dq^2).
    """
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(d[0] ** 2 + 2.0 * np.sum(d[1:] ** 2))


def logspec_mse(curve_a: np.ndarray, curve_b: np.ndarray) -> float:
    """Mean squared difference of two one-sided curves over the full circle."""
    d = np.asarray(curve_a) - np.asarray(curve_b)
    full = np.concatenate([d, d[-2:0:-1]])
    return float(np.mean(full**2))


# ---------------------------------------------------------------------------
# VPEN envelope stream

VPEN_MAGIC = b"VPEN"
VPEN_VERSION = 1
_VPEN_HEADER = struct.Struct("<4sIIII")
_VPEN_META = struct.Struct("<HIdH")


@dataclass
class EnvelopeTable:
    """Per-frame padded cepstral envelopes, column-oriented."""

    sample_rate: int
    fft_size: int
    take_ids: List[str]
    midi: np.ndarray
    frame_index: np.ndarray
    f0: np.ndarray
    k_cc: np.ndarray
    X: np.ndarray
    pad_width: int = PAD_WIDTH

    def __len__(self):
        return len(self.take_ids)

    @classmethod
    def empty(cls, sample_rate=48000, fft_size=2048, pad_width=PAD_WIDTH):
        return cls(sample_rate, fft_size, [], np.zeros(0, int), np.zeros(0, int),
                   np.zeros(0), np.zeros(0, int), np.zeros((0, pad_width)), pad_width)

    @classmethod
    def from_records(cls, records: Sequence[tuple], sample_rate=48000, fft_size=2048,
                     pad_width=PAD_WIDTH) -> "EnvelopeTable":
        """Build from (take_id, midi, frame_index, PaddedEnvelope) tuples."""
        if not records:
            return cls.empty(sample_rate, fft_size, pad_width)
        return cls(
            sample_rate,
            fft_size,
            [r[0] for r in records],
            np.array([r[1] for r in records], dtype=int),
            np.array([r[2] for r in records], dtype=int),
            np.array([r[3].f0 for r in records], dtype=np.float64),
            np.array([r[3].k_cc for r in records], dtype=int),
            np.stack([r[3].x for r in records]).astype(np.float64),
            pad_width,
        )

    def subset(self, mask) -> "EnvelopeTable":
        mask = np.asarray(mask)
        if mask.dtype == bool:
            idx = np.flatnonzero(mask)
        else:
            idx = mask.astype(int)
        return EnvelopeTable(
            self.sample_rate, self.fft_size, [self.take_ids[i] for i in idx],
            self.midi[idx], self.frame_index[idx], self.f0[idx], self.k_cc[idx],
            self.X[idx], self.pad_width,
        )

    def select(self, midis=None, takes=None) -> "EnvelopeTable":
        mask = np.ones(len(self), dtype=bool)
        if midis is not None:
            mask &= np.isin(self.midi, list(midis))
        if takes is not None:
            takes = set(takes)
            mask &= np.array([t in takes for t in self.take_ids], dtype=bool)
        return self.subset(mask)

    def keys(self):
        """Set of (take_id, midi) pairs present."""
        return set(zip(self.take_ids, self.midi.tolist()))


def write_envelopes(table: EnvelopeTable, path) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(_VPEN_HEADER.pack(VPEN_MAGIC, VPEN_VERSION, int(table.sample_rate),
                                  int(table.fft_size), int(table.pad_width)))
        for i, take in enumerate(table.take_ids):
            b = take.encode("utf-8")
            f.write(struct.pack("<H", len(b)) + b)
            f.write(_VPEN_META.pack(int(table.midi[i]), int(table.frame_index[i]),
                                    float(table.f0[i]), int(table.k_cc[i])))
            f.write(np.asarray(table.X[i], dtype="<f4").tobytes())
    return path


def read_envelopes(path) -> EnvelopeTable:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _VPEN_HEADER.size:
        raise EnvelopeError(f"{path}: truncated VPEN header")
    magic, version, fs, n, width = _VPEN_HEADER.unpack_from(data, 0)
    if magic != VPEN_MAGIC:
        raise EnvelopeError(f"{path}: bad magic {magic!r}, expected VPEN")
    if version != VPEN_VERSION:
        raise EnvelopeError(f"{path}: unsupported VPEN version {version}")
    pos = _VPEN_HEADER.size
    takes, midi, idx, f0, kcc, xs = [], [], [], [], [], []
    try:
        while pos < len(data):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            if pos + ln > len(data):
                raise struct.error("take_id")
            takes.append(data[pos : pos + ln].decode("utf-8"))
            pos += ln
            m, fi, f, k = _VPEN_META.unpack_from(data, pos)
            pos += _VPEN_META.size
            if pos + 4 * width > len(data):
                raise struct.error("ccs")
            xs.append(np.frombuffer(data, dtype="<f4", count=width, offset=pos))
            pos += 4 * width
            midi.append(m); idx.append(fi); f0.append(f); kcc.append(k)
    except struct.error:
        raise EnvelopeError(f"{path}: truncated record") from None
    X = np.stack(xs).astype(np.float64) if xs else np.zeros((0, width))
    return EnvelopeTable(fs, n, takes, np.array(midi, dtype=int), np.array(idx, dtype=int),
                         np.array(f0, dtype=np.float64), np.array(kcc, dtype=int), X, width)


@dataclass(frozen=True)
class EnvelopeConfig:
    fft_size: int = 2048
    tol: float = 0.023
    max_iter: int = 100
    valley_db: float = 2.0
    pad_width: int = PAD_WIDTH


def fit_envelope(frame: HarmonicFrame, sample_rate: float = 48000.0,
                 config: EnvelopeConfig = EnvelopeConfig()) -> CepstralEnvelope:
    """Harmonics -> TAE envelope of order k_cc(f0)."""
    target = harmonic_target(frame, config.fft_size, sample_rate, config.valley_db)
    K = kcc_for_pitch(frame.f0, sample_rate, config.pad_width)
    return true_amplitude_envelope(target, K, config.tol, config.max_iter,
                                   f0=frame.f0, sample_rate=sample_rate)

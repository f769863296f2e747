"""PCM WAV reading and writing.

Reading goes through :mod:`scipy.io.wavfile`, which handles 16/24/32-bit
integer and 32-bit float data. Writing is always 16-bit PCM mono through the
stdlib :mod:`wave` module so the 44-byte header layout is fixed.
"""

import io
import wave
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from scipy.io import wavfile


class WavError(ValueError):
    """Raised for unreadable, corrupt or unsupported WAV input/output."""


PathLike = Union[str, Path]


def read_wav(path: PathLike) -> Tuple[np.ndarray, int]:
    """Read a WAV file into a mono float64 array in [-1, 1].

    Stereo (or wider) files are downmixed by channel average.

    Returns
    -------
    samples, sample_rate
    """
    path = Path(path)
    if not path.exists():
        raise WavError(f"{path}: file does not exist")
    try:
        rate, data = wavfile.read(str(path))
    except (ValueError, EOFError, OSError) as exc:
        raise WavError(f"{path}: {exc}") from exc

    data = _to_float(data, path)
    if data.ndim == 2:
        data = data.mean(axis=1)
    if data.size == 0:
        raise WavError(f"{path}: no samples")
    if rate <= 0:
        raise WavError(f"{path}: invalid sample rate {rate}")
    return np.clip(data, -1.0, 1.0), int(rate)


def _to_float(data: np.ndarray, path: Path) -> np.ndarray:
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # 24-bit data comes back MSB-aligned in int32
        return data.astype(np.float64) / 2147483648.0
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise WavError(f"{path}: unsupported sample format {data.dtype}")


def quantize_pcm16(samples: np.ndarray) -> np.ndarray:
    """Scale [-1, 1] floats to int16 (x * 32768, rounded, +1.0 saturates)."""
    q = np.round(np.asarray(samples, dtype=np.float64) * 32768.0)
    return np.clip(q, -32768, 32767).astype("<i2")


def wav_bytes(samples: np.ndarray, sample_rate: int) -> bytes:
    """Encode mono samples as a complete 16-bit PCM WAV byte string."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 1:
        raise WavError("write_wav expects a mono 1-D sample array")
    if not np.all(np.isfinite(samples)):
        raise WavError("non-finite samples")
    peak = float(np.max(np.abs(samples))) if samples.size else 0.0
    if peak > 1.0:
        raise WavError(f"clipping: peak sample magnitude {peak:.4f} > 1")
    if sample_rate <= 0:
        raise WavError(f"invalid sample rate {sample_rate}")

    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(quantize_pcm16(samples).tobytes())
    return buf.getvalue()


def write_wav(samples: np.ndarray, sample_rate: int, path: PathLike) -> Path:
    """Write mono samples to ``path`` as 16-bit PCM.

    Raises :class:`WavError` when any |sample| > 1 or the path is unwritable.
    """
    payload = wav_bytes(samples, sample_rate)
    path = Path(path)
    try:
        path.write_bytes(payload)
    except OSError as exc:
        raise WavError(f"{path}: cannot write ({exc})") from exc
    return path

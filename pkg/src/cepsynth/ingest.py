"""Dataset ingest: note loading, sustain isolation, splits and framing."""

import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import wavio

FRAME_DURATION_S = 1024 / 48000  # 21.33 ms

_FILENAME_MIDI = re.compile(r"midi[_-]?(\d{1,3})", re.IGNORECASE)


class IngestError(ValueError):
    pass


class SilentClipError(IngestError):
    pass


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    midi_label: int
    take_id: str

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 1 or s.size == 0:
            raise IngestError("clip samples must be a non-empty 1-D array")
        if np.max(np.abs(s)) > 1.0:
            raise IngestError("clip samples must lie in [-1, 1]")
        if self.sample_rate <= 0:
            raise IngestError("sample_rate must be positive")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class SustainRegion:
    start_sample: int
    end_sample: int

    def __len__(self):
        return self.end_sample - self.start_sample


@dataclass(frozen=True)
class MetadataRecord:
    take_id: str
    midi: int
    eligible: bool = True


@dataclass
class DatasetSplit:
    train: List[Tuple[str, int]]
    test: List[Tuple[str, int]]
    seed: int

    def labels(self):
        return sorted({m for _, m in self.train} | {m for _, m in self.test})

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "train": [list(r) for r in self.train],
            "test": [list(r) for r in self.test],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSplit":
        return cls(
            train=[(str(t), int(m)) for t, m in d["train"]],
            test=[(str(t), int(m)) for t, m in d["test"]],
            seed=int(d["seed"]),
        )


@dataclass(frozen=True)
class Frame:
    take_id: str
    midi_label: int
    frame_index: int
    samples: np.ndarray


@dataclass
class FrameTable:
    frame_len: int
    hop: int
    sample_rate: int
    frames: List[Frame] = field(default_factory=list)

    def __len__(self):
        return len(self.frames)

    def extend(self, other: "FrameTable"):
        if (other.frame_len, other.hop, other.sample_rate) != (
            self.frame_len, self.hop, self.sample_rate
        ):
            raise IngestError("cannot merge frame tables with different framing")
        self.frames.extend(other.frames)


def frame_len_for(sample_rate: int, duration_s: float = FRAME_DURATION_S) -> int:
    """Analysis frame length in samples (1024 at 48 kHz)."""
    return int(round(duration_s * sample_rate))


# ---------------------------------------------------------------------------
# metadata + loading


def read_metadata(path) -> List[MetadataRecord]:
    """Parse a label file: one ``take_id, midi[, eligible]`` record per line.

    Fields may be separated by commas or whitespace; ``#`` starts a comment.
    The eligibility flag accepts 1/0, true/false, yes/no (default true).
    """
    records = []
    path = Path(path)
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = [p for p in re.split(r"[,\s]+", line) if p]
        if len(parts) < 2:
            raise IngestError(f"{path}:{lineno}: expected 'take_id, midi[, flag]'")
        try:
            midi = int(parts[1])
        except ValueError:
            raise IngestError(f"{path}:{lineno}: bad MIDI number {parts[1]!r}") from None
        eligible = True
        if len(parts) > 2:
            flag = parts[2].lower()
            if flag not in ("1", "0", "true", "false", "yes", "no"):
                raise IngestError(f"{path}:{lineno}: bad eligibility flag {parts[2]!r}")
            eligible = flag in ("1", "true", "yes")
        records.append(MetadataRecord(parts[0], midi, eligible))
    return records


def midi_from_filename(path) -> Optional[int]:
    m = _FILENAME_MIDI.search(Path(path).stem)
    return int(m.group(1)) if m else None


def load_wav(path, labels: Optional[Dict[str, int]] = None) -> AudioClip:
    """Load a note recording as a mono :class:`AudioClip`.

    The take id is the file stem. Its MIDI label comes from ``labels`` (the
    sidecar metadata) if present, else from a ``midi<NN>`` token in the file
    name.
    """
    path = Path(path)
    samples, rate = wavio.read_wav(path)
    take_id = path.stem
    midi = None
    if labels is not None:
        midi = labels.get(take_id)
    if midi is None:
        midi = midi_from_filename(path)
    if midi is None:
        raise IngestError(f"{path}: no MIDI label in metadata or filename")
    return AudioClip(samples, rate, int(midi), take_id)


# ---------------------------------------------------------------------------
# sustain


def window_rms(samples: np.ndarray, window: int) -> np.ndarray:
    n = samples.size // window
    blocks = samples[: n * window].reshape(n, window)
    return np.sqrt(np.mean(blocks * blocks, axis=1))


def longest_run(mask: np.ndarray) -> Tuple[int, int]:
    """(start, end) of the first longest run of True values, end exclusive."""
    best = (0, 0)
    start = None
    for i, v in enumerate(np.append(mask, False)):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start > best[1] - best[0]:
                best = (start, i)
            start = None
    return best


def extract_sustain(
    clip: AudioClip,
    window: int = 1024,
    rel_threshold_db: float = 20.0,
    margin: int = 4,
    frame_len: Optional[int] = None,
) -> SustainRegion:
    """Isolate the sustained part of a note by short-time energy.

    Non-overlapping windows whose RMS is within ``rel_threshold_db`` of the
    loudest window are kept; the longest contiguous run of them, minus
    ``margin`` windows at each end, is the sustain.
    """
    if window <= 0 or margin < 0:
        raise IngestError("window must be positive and margin non-negative")
    if len(clip) <= 3 * window:
        raise IngestError(f"{clip.take_id}: clip shorter than 3 windows")
    if frame_len is None:
        frame_len = frame_len_for(clip.sample_rate)

    rms = window_rms(clip.samples, window)
    peak = rms.max()
    if peak <= 0.0:
        raise SilentClipError(f"{clip.take_id}: silent clip")
    with np.errstate(divide="ignore"):
        level_db = 20.0 * np.log10(rms / peak)
    start, end = longest_run(level_db >= -rel_threshold_db)
    start += margin
    end -= margin
    if end <= start or (end - start) * window < frame_len:
        raise IngestError(
            f"{clip.take_id}: sustained region shorter than one analysis frame"
        )
    return SustainRegion(start * window, end * window)


# ---------------------------------------------------------------------------
# split


def split_dataset(
    records: Iterable[Tuple[str, int]], ratio: float = 0.8, seed: int = 0
) -> DatasetSplit:
    """Stratified train/test split per MIDI label.

    Each label's takes are sorted, shuffled with a label-specific seeded
    generator, and the first ceil(ratio * n) go to train (at least one take
    is always held out).
    """
    if not 0.0 < ratio < 1.0:
        raise IngestError("ratio must be in (0, 1)")
    by_label: Dict[int, List[str]] = {}
    for take_id, midi in records:
        by_label.setdefault(int(midi), []).append(str(take_id))

    train, test = [], []
    for midi in sorted(by_label):
        takes = sorted(set(by_label[midi]))
        n = len(takes)
        if n < 2:
            raise IngestError(f"MIDI {midi}: need at least 2 records, got {n}")
        rng = np.random.default_rng([seed, midi])
        order = rng.permutation(n)
        n_train = min(n - 1, math.ceil(ratio * n - 1e-9))
        for rank, idx in enumerate(order):
            (train if rank < n_train else test).append((takes[idx], midi))
    return DatasetSplit(train, test, seed)


# ---------------------------------------------------------------------------
# framing


def frame_clip(
    clip: AudioClip, region: SustainRegion, frame_len: int, hop: int
) -> FrameTable:
    """Slice the region into frames at offsets start, start+hop, ...

    Only frames that fit entirely inside the region are emitted.
    """
    if hop <= 0 or frame_len <= 0:
        raise IngestError("frame_len and hop must be positive")
    if not 0 <= region.start_sample < region.end_sample <= len(clip):
        raise IngestError(f"{clip.take_id}: region outside clip")
    n_region = len(region)
    if n_region < frame_len:
        raise IngestError(f"{clip.take_id}: region shorter than frame_len")
    count = (n_region - frame_len) // hop + 1
    table = FrameTable(frame_len, hop, clip.sample_rate)
    for i in range(count):
        a = region.start_sample + i * hop
        table.frames.append(
            Frame(clip.take_id, clip.midi_label, i, clip.samples[a : a + frame_len])
        )
    return table


# ---------------------------------------------------------------------------
# VPFT frame-table stream

VPFT_MAGIC = b"VPFT"
VPFT_VERSION = 1
_VPFT_HEADER = struct.Struct("<4sIIII")


def _write_str(f: BinaryIO, s: str):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise IngestError("take_id too long")
    f.write(struct.pack("<H", len(b)))
    f.write(b)


def _read_exact(f: BinaryIO, n: int, what: str) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise IngestError(f"truncated record ({what})")
    return b


def _read_str(f: BinaryIO) -> Optional[str]:
    head = f.read(2)
    if not head:
        return None
    if len(head) != 2:
        raise IngestError("truncated record (take_id length)")
    (n,) = struct.unpack("<H", head)
    return _read_exact(f, n, "take_id").decode("utf-8")


def write_frame_table(table: FrameTable, path) -> Path:
    path = Path(path)
    with open(path, "wb") as f:
        f.write(
            _VPFT_HEADER.pack(
                VPFT_MAGIC, VPFT_VERSION, table.frame_len, table.hop, table.sample_rate
            )
        )
        for fr in table.frames:
            _write_str(f, fr.take_id)
            f.write(struct.pack("<HI", fr.midi_label, fr.frame_index))
            f.write(np.asarray(fr.samples, dtype="<f4").tobytes())
    return path


def read_frame_table(path) -> FrameTable:
    path = Path(path)
    with open(path, "rb") as f:
        head = f.read(_VPFT_HEADER.size)
        if len(head) != _VPFT_HEADER.size:
            raise IngestError(f"{path}: truncated VPFT header")
        magic, version, frame_len, hop, rate = _VPFT_HEADER.unpack(head)
        if magic != VPFT_MAGIC:
            raise IngestError(f"{path}: bad magic {magic!r}, expected VPFT")
        if version != VPFT_VERSION:
            raise IngestError(f"{path}: unsupported VPFT version {version}")
        table = FrameTable(frame_len, hop, rate)
        try:
            while (take_id := _read_str(f)) is not None:
                midi, idx = struct.unpack("<HI", _read_exact(f, 6, "midi/index"))
                data = np.frombuffer(
                    _read_exact(f, 4 * frame_len, "samples"), dtype="<f4"
                ).astype(np.float64)
                table.frames.append(Frame(take_id, midi, idx, data))
        except IngestError as exc:
            raise IngestError(f"{path}: {exc}") from None
    return table

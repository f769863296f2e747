"""Evaluation protocols: hyperparameter sweeps, skipped-pitch and octave-
endpoint reconstruction, and latent random-walk generation."""

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .analysis import max_harmonic
from .envelope import (
    CepstralEnvelope,
    EnvelopeTable,
    kcc_for_pitch,
    sample_at_harmonics,
)
from .ingest import DatasetSplit
from .model import (
    ModelParams,
    TrainConfig,
    TrainingDivergence,
    decode,
    f0_condition,
    pitch_condition,
    reconstruct,
    train,
)
from .pitch import midi_to_f0

PROTOCOLS = ("sweep", "skip_pitch", "endpoints", "generate")
DEFAULT_BETAS = (0.01, 0.1, 1.0)
DEFAULT_DIMS = (2, 8, 32, 64)
OCTAVE = tuple(range(60, 72))
ENDPOINTS = (60, 71)


class ExperimentError(ValueError):
    pass


class ProtocolViolation(AssertionError):
    pass


@dataclass
class ExperimentSpec:
    protocol: str
    target_midi: Optional[int] = None
    betas: Sequence[float] = DEFAULT_BETAS
    latent_dims: Sequence[int] = DEFAULT_DIMS
    model_kinds: Sequence[str] = ("AE", "CVAE")
    seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ExperimentError(f"unknown protocol {self.protocol!r}")
        if self.protocol == "skip_pitch":
            if self.target_midi is None or not 63 <= self.target_midi <= 68:
                raise ExperimentError("skip_pitch needs 63 <= target_midi <= 68")
        bad = set(self.model_kinds) - {"AE", "CVAE"}
        if bad:
            raise ExperimentError(f"unknown model kinds {sorted(bad)}")


@dataclass(frozen=True)
class MseRow:
    model_kind: str
    beta: float
    latent_dim: int
    midi: Optional[int]
    mse: float

    def key(self):
        return (self.model_kind, self.beta, self.latent_dim,
                -1 if self.midi is None else self.midi)


@dataclass
class MseReport:
    rows: List[MseRow] = field(default_factory=list)
    metadata: Dict = field(default_factory=dict)

    def sorted(self) -> "MseReport":
        return MseReport(sorted(self.rows, key=MseRow.key), dict(self.metadata))

    def get(self, model_kind, beta=None, latent_dim=None, midi=None) -> List[MseRow]:
        return [
            r for r in self.rows
            if r.model_kind == model_kind
            and (beta is None or r.beta == beta)
            and (latent_dim is None or r.latent_dim == latent_dim)
            and (midi is None or r.midi == midi)
        ]

    def value(self, model_kind, beta=None, latent_dim=None, midi=None) -> float:
        rows = self.get(model_kind, beta, latent_dim, midi)
        if len(rows) != 1:
            raise KeyError(f"{len(rows)} rows match {(model_kind, beta, latent_dim, midi)}")
        return rows[0].mse

    def to_csv(self, path, config_hash: str = "") -> Path:
        path = Path(path)
        with open(path, "w", newline="") as f:
            f.write(f"# config_hash={config_hash or self.metadata.get('config_hash', '')}\n")
            w = csv.writer(f)
            w.writerow(["model_kind", "beta", "latent_dim", "midi", "mse"])
            for r in self.sorted().rows:
                w.writerow([r.model_kind, repr(float(r.beta)), r.latent_dim,
                            "" if r.midi is None else r.midi, repr(float(r.mse))])
        return path

    def write(self, csv_path, config_hash: str = "") -> Tuple[Path, Path]:
        csv_path = Path(csv_path)
        self.to_csv(csv_path, config_hash)
        meta_path = csv_path.with_suffix(".json")
        meta_path.write_text(json.dumps(self.metadata, indent=2, sort_keys=True, default=str))
        return csv_path, meta_path

    @classmethod
    def read_csv(cls, path) -> "MseReport":
        rows = []
        with open(path) as f:
            lines = [l for l in f if not l.startswith("#")]
        for rec in csv.DictReader(lines):
            rows.append(MseRow(rec["model_kind"], float(rec["beta"]), int(rec["latent_dim"]),
                               int(rec["midi"]) if rec["midi"] else None, float(rec["mse"])))
        return cls(rows)


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def cell_seed(master: int, index: int) -> int:
    """Independent per-cell seed derived from (master seed, cell index)."""
    return int(np.random.SeedSequence([master, index]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# evaluation


def model_condition(m: ModelParams, midi):
    return pitch_condition(midi, m.config.cond_encoding) if m.config.conditional else None


def reconstruct_table(m: ModelParams, frames: EnvelopeTable) -> np.ndarray:
    return reconstruct(m, frames.X, model_condition(m, frames.midi))


def evaluate_mse(m: ModelParams, frames: EnvelopeTable) -> float:
    """Mean over frames of the per-dimension squared error between each padded
    CC vector and its deterministic reconstruction."""
    if len(frames) == 0:
        raise ExperimentError("cannot evaluate on an empty frame set")
    err = (reconstruct_table(m, frames) - frames.X) ** 2
    return float(np.mean(np.mean(err, axis=1)))


def split_tables(frames: EnvelopeTable, split: DatasetSplit):
    train_takes = {t for t, _ in split.train}
    test_takes = {t for t, _ in split.test}
    return frames.select(takes=train_takes), frames.select(takes=test_takes)


def kind_config(base: TrainConfig, kind: str, beta: float, latent_dim: int, seed: int) -> TrainConfig:
    if kind == "AE":
        return replace(base, conditional=False, beta=0.0, latent_dim=latent_dim, seed=seed)
    return replace(base, conditional=True, beta=beta, latent_dim=latent_dim, seed=seed)


def train_on(frames: EnvelopeTable, config: TrainConfig) -> ModelParams:
    return train(frames.X, frames.midi if config.conditional else None, config)


def _assert_disjoint(train_frames: EnvelopeTable, eval_keys: set, what: str):
    leaked = train_frames.keys() & eval_keys
    if leaked:
        raise ProtocolViolation(f"{what}: {len(leaked)} evaluation takes in training set")


# ---------------------------------------------------------------------------
# protocols


def hyperparam_sweep(spec: ExperimentSpec, train_frames: EnvelopeTable,
                     test_frames: EnvelopeTable, base: TrainConfig) -> MseReport:
    """Train and evaluate one model per (kind, beta, latent_dim) cell.

    A cell whose training diverges is reported with MSE = NaN and a
    diagnostic in the metadata; the sweep carries on.
    """
    if spec.protocol != "sweep":
        raise ExperimentError("hyperparam_sweep needs protocol 'sweep'")
    rows, failures = [], {}
    cells = [(k, b, d) for k in spec.model_kinds for b in spec.betas for d in spec.latent_dims]
    for i, (kind, beta, dim) in enumerate(cells):
        cfg = kind_config(base, kind, beta, dim, cell_seed(spec.seed, i))
        try:
            m = train_on(train_frames, cfg)
            mse = evaluate_mse(m, test_frames)
        except TrainingDivergence as exc:
            mse = float("nan")
            failures[f"{kind}/beta={beta}/dim={dim}"] = str(exc)
        rows.append(MseRow(kind, float(beta), int(dim), None, mse))
    meta = _metadata(spec, base, extra={"divergent_cells": failures,
                                         "n_train_frames": len(train_frames),
                                         "n_test_frames": len(test_frames)})
    return MseReport(rows, meta).sorted()


def skip_window(T: int, reach: int = 3) -> List[int]:
    return [m for m in range(T - reach, T + reach + 1) if m != T]


def skip_pitch_experiment(T: int, kinds: Sequence[str], frames: EnvelopeTable,
                          split: DatasetSplit, base: TrainConfig, seed: int = 0,
                          include_seen: bool = False) -> MseReport:
    """Reconstruct an unseen pitch T from models trained on T-3..T+3 minus T.

    Evaluation uses every frame of pitch T (none was trained on). With
    ``include_seen`` the report also carries rows for the neighbouring
    pitches evaluated on their test-split frames.
    """
    spec = ExperimentSpec("skip_pitch", target_midi=T, model_kinds=tuple(kinds),
                          betas=(base.beta,), latent_dims=(base.latent_dim,), seed=seed)
    train_all, test_all = split_tables(frames, split)
    neighbours = skip_window(T)
    train_frames = train_all.select(midis=neighbours)
    target = frames.select(midis=[T])
    if len(train_frames) == 0 or len(target) == 0:
        raise ExperimentError(f"skip_pitch T={T}: missing training or target frames")
    _assert_disjoint(train_frames, target.keys(), f"skip_pitch T={T}")

    rows = []
    for i, kind in enumerate(kinds):
        cfg = kind_config(base, kind, base.beta, base.latent_dim, cell_seed(seed, 100 * T + i))
        m = train_on(train_frames, cfg)
        rows.append(MseRow(kind, cfg.beta, cfg.latent_dim, T, evaluate_mse(m, target)))
        if include_seen:
            for mid in neighbours:
                seen = test_all.select(midis=[mid])
                if len(seen):
                    rows.append(MseRow(kind, cfg.beta, cfg.latent_dim, mid, evaluate_mse(m, seen)))
    meta = _metadata(spec, base, extra={
        "split_seed": split.seed,
        "training_midis": neighbours,
        "evaluation_set": f"all frames (train+test takes) of MIDI {T}; "
                          "neighbour rows use their test-split frames",
        "mse_domain": "padded 91-dim CC vectors",
    })
    return MseReport(rows, meta).sorted()


def endpoint_experiment(kinds: Sequence[str], frames: EnvelopeTable, split: DatasetSplit,
                        base: TrainConfig, seed: int = 0) -> MseReport:
    """Train on MIDI 60 and 71 only, evaluate every pitch of the octave.

    The endpoints are scored on their test-split frames; intermediate pitches
    on all their frames.
    """
    spec = ExperimentSpec("endpoints", model_kinds=tuple(kinds), betas=(base.beta,),
                          latent_dims=(base.latent_dim,), seed=seed)
    train_all, test_all = split_tables(frames, split)
    train_frames = train_all.select(midis=ENDPOINTS)
    for e in ENDPOINTS:
        if len(train_frames.select(midis=[e])) == 0:
            raise ExperimentError(f"endpoint MIDI {e} missing from training data")
    evals = {}
    for mid in OCTAVE:
        ev = test_all.select(midis=[mid]) if mid in ENDPOINTS else frames.select(midis=[mid])
        if len(ev):
            evals[mid] = ev
            if mid not in ENDPOINTS:
                _assert_disjoint(train_frames, ev.keys(), f"endpoints MIDI {mid}")

    rows = []
    for i, kind in enumerate(kinds):
        cfg = kind_config(base, kind, base.beta, base.latent_dim, cell_seed(seed, 1000 + i))
        m = train_on(train_frames, cfg)
        for mid, ev in evals.items():
            rows.append(MseRow(kind, cfg.beta, cfg.latent_dim, mid, evaluate_mse(m, ev)))
    meta = _metadata(spec, base, extra={"split_seed": split.seed,
                                         "training_midis": list(ENDPOINTS),
                                         "mse_domain": "padded 91-dim CC vectors"})
    return MseReport(rows, meta).sorted()


def _metadata(spec: ExperimentSpec, base: TrainConfig, extra=None) -> dict:
    d = {"spec": asdict(spec), "train_config": asdict(base)}
    d["config_hash"] = config_hash(d)
    if extra:
        d.update(extra)
    return d


# ---------------------------------------------------------------------------
# generation


def random_walk_latents(n_frames: int, step: float, latent_dim: int,
                        rng: np.random.Generator) -> np.ndarray:
    """Gaussian random walk from the origin: z_0 = 0, z_{t+1} = z_t + step * n_t."""
    if n_frames < 1 or step < 0:
        raise ExperimentError("n_frames must be >= 1 and step >= 0")
    steps = step * rng.standard_normal((n_frames - 1, latent_dim))
    return np.vstack([np.zeros((1, latent_dim)), np.cumsum(steps, axis=0)])


def decode_envelopes(m: ModelParams, zs: np.ndarray, f0s, sample_rate: float = 48000.0,
                     fft_size: int = 2048) -> List[CepstralEnvelope]:
    f0s = np.broadcast_to(np.asarray(f0s, dtype=np.float64), (len(zs),))
    X = decode(m, np.atleast_2d(zs), f0_condition(f0s, m.config.cond_encoding))
    envs = []
    for x, f0 in zip(X, f0s):
        k = kcc_for_pitch(f0, sample_rate, x.size)
        envs.append(CepstralEnvelope(x[:k], float(f0), k, fft_size, sample_rate))
    return envs


def decode_frames(m: ModelParams, zs: np.ndarray, f0s, sample_rate: float = 48000.0,
                  fft_size: int = 2048) -> List[Tuple[float, np.ndarray]]:
    """Decode latent codes into (f0, linear harmonic amplitudes) frames."""
    if not m.config.conditional:
        raise ExperimentError("generation needs a conditional model")
    out = []
    for env in decode_envelopes(m, zs, f0s, sample_rate, fft_size):
        H = max_harmonic(env.f0, sample_rate)
        out.append((env.f0, sample_at_harmonics(env, env.f0, H)))
    return out


def generate_note(m: ModelParams, f0: float, n_frames: int, step: float,
                  rng: np.random.Generator, sample_rate: float = 48000.0,
                  band: Optional[tuple] = None, fft_size: int = 2048):
    """Frames of a new note at pitch ``f0`` from a latent random walk."""
    from .synthesis import generation_band

    if not m.config.conditional:
        raise ExperimentError("generation needs a conditional model")
    lo, hi = band if band is not None else generation_band(sample_rate)
    if not lo < f0 < hi:
        raise ExperimentError(f"f0 {f0:.2f} Hz outside supported band ({lo:.2f}, {hi:.2f})")
    zs = random_walk_latents(n_frames, step, m.config.latent_dim, rng)
    return decode_frames(m, zs, f0, sample_rate, fft_size)

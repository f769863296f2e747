"""Command-line pipeline: ingest -> analyze -> train -> sweep/recon -> generate/vibrato.

Every command reads a YAML config (``--config``); flags override config
keys. Artifacts live in the work directory unless ``--out`` names the main
output. Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure. Existing outputs are never replaced without ``--overwrite``.
"""

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml

log = logging.getLogger("cepsynth")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULTS = {
    "seed": 0,
    "paths": {"dataset": "data", "metadata": None, "work": "work"},
    "ingest": {"split_ratio": 0.8, "sustain_window": 1024, "rel_threshold_db": 20.0,
               "margin": 4, "frame_len": 1024, "hop": 256},
    "analysis": {"fft_size": 2048, "window": "blackmanharris", "peak_floor_db": 80.0,
                 "search_cents": 100.0, "tae_tol": 0.023, "tae_max_iter": 100,
                 "valley_db": 2.0, "frame_stride": 1},
    "model": {"beta": 0.1, "latent_dim": 32, "lr": 1e-3, "epochs": 2000, "batch_size": 512,
              "cond_encoding": "scalar"},
    "experiments": {"betas": [0.01, 0.1, 1.0], "latent_dims": [2, 8, 32, 64],
                    "kinds": ["AE", "CVAE"], "skip_targets": [63, 64, 65, 66, 67, 68]},
    "synthesis": {"walk_step": 0.05, "duration": 2.0, "vibrato_rate": 5.5,
                  "vibrato_depth": 40.0, "peak": 0.9},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if k not in out:
            raise UsageError(f"unknown config key {where + k!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise UsageError(f"config key {where + k!r} must be a mapping")
            out[k] = _merge(out[k], v, where + k + ".")
        else:
            out[k] = v
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with the YAML file at ``path`` (if any)."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise UsageError(f"{path}: invalid YAML ({exc})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: top level must be a mapping")
    cfg = _merge(DEFAULTS, raw)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    a, i, m = cfg["analysis"], cfg["ingest"], cfg["model"]
    checks = [
        (0 < i["split_ratio"] < 1, "ingest.split_ratio must be in (0, 1)"),
        (i["hop"] > 0 and i["frame_len"] > 0, "ingest.frame_len and hop must be positive"),
        (a["fft_size"] >= i["frame_len"], "analysis.fft_size must be >= frame_len"),
        (a["frame_stride"] >= 1, "analysis.frame_stride must be >= 1"),
        (m["beta"] >= 0, "model.beta must be >= 0"),
        (m["latent_dim"] >= 1 and m["epochs"] >= 1, "model.latent_dim and epochs must be >= 1"),
        (cfg["synthesis"]["walk_step"] >= 0, "synthesis.walk_step must be >= 0"),
    ]
    for ok, msg in checks:
        if not ok:
            raise UsageError(msg)


def config_digest(cfg: dict) -> str:
    from .experiments import config_hash

    return config_hash(cfg)


# ---------------------------------------------------------------------------
# helpers


def _work(cfg) -> Path:
    return Path(cfg["paths"]["work"])


def _claim(paths, overwrite: bool):
    for p in paths:
        if Path(p).exists() and not overwrite:
            raise UsageError(f"{p} exists (pass --overwrite to replace it)")
    for p in paths:
        Path(p).parent.mkdir(parents=True, exist_ok=True)


def _need(path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing {what}: {path}")
    return path


def _train_config(cfg, seed, **over):
    from .model import TrainConfig

    known = {f.name for f in fields(TrainConfig)}
    kw = {k: v for k, v in cfg["model"].items() if k in known}
    kw["seed"] = seed
    kw.update(over)
    return TrainConfig(**kw)


def _load_split(cfg, args):
    from .ingest import DatasetSplit

    path = _need(args.manifest or _work(cfg) / "manifest.json", "split manifest")
    return DatasetSplit.from_dict(json.loads(path.read_text())["split"])


def _load_envelopes(cfg, args):
    from .envelope import read_envelopes

    return read_envelopes(_need(args.envelopes or _work(cfg) / "envelopes.vpen", "envelope file"))


def _midi_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"bad MIDI list {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(cfg, args):
    from .ingest import (FrameTable, extract_sustain, frame_clip, load_wav, read_metadata,
                         split_dataset, write_frame_table)

    root = Path(args.dataset or cfg["paths"]["dataset"])
    if not root.is_dir():
        raise DataError(f"dataset directory not found: {root}")
    wavs = sorted(root.glob("*.wav"))
    if not wavs:
        raise DataError(f"no .wav files in {root}")
    meta_path = args.metadata or cfg["paths"]["metadata"]
    labels, eligible = None, None
    if meta_path:
        recs = read_metadata(_need(meta_path, "metadata file"))
        labels = {r.take_id: r.midi for r in recs}
        eligible = {r.take_id for r in recs if r.eligible}

    out = Path(args.out or _work(cfg) / "frames.vpft")
    manifest_path = out.with_name("manifest.json")
    _claim([out, manifest_path], args.overwrite)

    ic = cfg["ingest"]
    table = FrameTable(ic["frame_len"], ic["hop"], 0)
    takes = []
    for wav in wavs:
        if eligible is not None and wav.stem not in eligible:
            continue
        clip = load_wav(wav, labels)
        if table.sample_rate == 0:
            table.sample_rate = clip.sample_rate
        elif clip.sample_rate != table.sample_rate:
            raise DataError(f"{wav}: sample rate {clip.sample_rate} != {table.sample_rate}")
        region = extract_sustain(clip, ic["sustain_window"], ic["rel_threshold_db"],
                                 ic["margin"], ic["frame_len"])
        table.extend(frame_clip(clip, region, ic["frame_len"], ic["hop"]))
        takes.append((clip.take_id, clip.midi_label))
    if not takes:
        raise DataError(f"no eligible recordings in {root}")

    split = split_dataset(takes, ic["split_ratio"], args.seed)
    write_frame_table(table, out)
    counts = {}
    for _, midi in takes:
        counts[str(midi)] = counts.get(str(midi), 0) + 1
    body = {"split": split.to_dict(), "labels": split.labels(), "takes_per_label": counts,
            "n_frames": len(table), "frame_len": table.frame_len, "hop": table.hop,
            "sample_rate": table.sample_rate, "config_hash": config_digest(cfg)}
    body["split_hash"] = config_digest(split.to_dict())
    manifest_path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    log.info("ingested %d takes, %d frames -> %s", len(takes), len(table), out)
    return out


def cmd_analyze(cfg, args):
    from .analysis import AnalysisConfig, AnalysisError, analyze_frame
    from .envelope import EnvelopeConfig, EnvelopeTable, fit_envelope, pad, write_envelopes
    from .ingest import read_frame_table
    from .pitch import midi_to_f0

    src = _need(args.frames or _work(cfg) / "frames.vpft", "frame table")
    out = Path(args.out or _work(cfg) / "envelopes.vpen")
    _claim([out], args.overwrite)
    table = read_frame_table(src)

    a = cfg["analysis"]
    acfg = AnalysisConfig(frame_len=table.frame_len, fft_size=a["fft_size"], window=a["window"],
                          peak_floor_db=a["peak_floor_db"], search_cents=a["search_cents"])
    ecfg = EnvelopeConfig(fft_size=a["fft_size"], tol=a["tae_tol"], max_iter=a["tae_max_iter"],
                          valley_db=a["valley_db"])
    records, skipped = [], 0
    for fr in table.frames[:: a["frame_stride"]]:
        try:
            hf = analyze_frame(fr.samples, float(midi_to_f0(fr.midi_label)), table.sample_rate, acfg)
        except AnalysisError as exc:
            skipped += 1
            log.warning("%s frame %d skipped: %s", fr.take_id, fr.frame_index, exc)
            continue
        env = fit_envelope(hf, table.sample_rate, ecfg)
        records.append((fr.take_id, fr.midi_label, fr.frame_index, pad(env, ecfg.pad_width)))
    if not records:
        raise DataError(f"{src}: no frame could be analysed")
    write_envelopes(EnvelopeTable.from_records(records, table.sample_rate, a["fft_size"]), out)
    log.info("analysed %d frames (%d skipped) -> %s", len(records), skipped, out)
    return out


def cmd_train(cfg, args):
    from .experiments import train_on
    from .model import save_model, write_loss_csv

    env = _load_envelopes(cfg, args)
    split = _load_split(cfg, args)
    train_takes = {t for t, _ in split.train}
    midis = sorted(set(int(x) for x in env.midi))
    if args.midis:
        midis = _midi_list(args.midis)
    if args.exclude:
        drop = set(_midi_list(args.exclude))
        midis = [m for m in midis if m not in drop]
    frames = env.select(midis=midis, takes=train_takes)
    if len(frames) == 0:
        raise DataError("no training frames after split/MIDI selection")

    over = {}
    if args.kind == "AE":
        over = {"conditional": False, "beta": 0.0}
    if args.epochs:
        over["epochs"] = args.epochs
    tc = _train_config(cfg, args.seed, **over)
    out = Path(args.out or _work(cfg) / "model.vpmd")
    loss_csv = out.with_name(out.stem + "_loss.csv")
    _claim([out, loss_csv], args.overwrite)
    m = train_on(frames, tc)
    save_model(m, out)
    write_loss_csv(m, loss_csv, config_digest({"config": cfg, "midis": midis, "kind": args.kind}))
    log.info("trained %s on %d frames (MIDI %s) -> %s", tc.kind, len(frames), midis, out)
    return out


def cmd_sweep(cfg, args):
    from .experiments import ExperimentSpec, hyperparam_sweep, split_tables

    env = _load_envelopes(cfg, args)
    split = _load_split(cfg, args)
    e = cfg["experiments"]
    spec = ExperimentSpec("sweep", betas=tuple(e["betas"]), latent_dims=tuple(e["latent_dims"]),
                          model_kinds=tuple(e["kinds"]), seed=args.seed)
    out = Path(args.out or _work(cfg) / "sweep.csv")
    _claim([out, out.with_suffix(".json")], args.overwrite)
    train_frames, test_frames = split_tables(env, split)
    over = {"epochs": args.epochs} if args.epochs else {}
    rep = hyperparam_sweep(spec, train_frames, test_frames, _train_config(cfg, args.seed, **over))
    rep.write(out, config_digest(cfg))
    log.info("sweep: %d cells -> %s", len(rep.rows), out)
    return out


def cmd_recon(cfg, args):
    from .experiments import endpoint_experiment, skip_pitch_experiment

    if args.protocol == "skip":
        targets = [args.midi] if args.midi is not None else cfg["experiments"]["skip_targets"]
        bad = [t for t in targets if not 63 <= t <= 68]
        if bad:
            raise UsageError(f"--midi {bad[0]} invalid for skip protocol (needs 63..68)")
    elif args.midi is not None:
        raise UsageError("--midi is only valid with --protocol skip")
    env = _load_envelopes(cfg, args)
    split = _load_split(cfg, args)
    out = Path(args.out or _work(cfg) / f"recon_{args.protocol}.csv")
    _claim([out, out.with_suffix(".json")], args.overwrite)
    over = {"epochs": args.epochs} if args.epochs else {}
    base = _train_config(cfg, args.seed, **over)
    kinds = tuple(cfg["experiments"]["kinds"])
    if args.protocol == "skip":
        from .experiments import MseReport

        rows, meta = [], {}
        for T in targets:
            rep = skip_pitch_experiment(T, kinds, env, split, base, seed=args.seed)
            rows += rep.rows
            meta[str(T)] = rep.metadata
        rep = MseReport(rows, {"targets": meta}).sorted()
    else:
        rep = endpoint_experiment(kinds, env, split, base, seed=args.seed)
    rep.write(out, config_digest(cfg))
    log.info("recon %s: %d rows -> %s", args.protocol, len(rep.rows), out)
    return out


def _pitch(args):
    from .pitch import midi_to_f0

    if (args.midi is None) == (args.f0 is None):
        raise UsageError("give exactly one of --midi or --f0")
    return float(args.f0) if args.f0 is not None else float(midi_to_f0(args.midi))


def _load_generator(cfg, args):
    from .model import load_model

    return load_model(_need(args.model or _work(cfg) / "model.vpmd", "model file"))


def cmd_generate(cfg, args):
    import numpy as np

    from .experiments import generate_note
    from .synthesis import SynthFrame, additive_synth
    from .wavio import write_wav

    f0 = _pitch(args)
    m = _load_generator(cfg, args)
    s = cfg["synthesis"]
    rate, hop = args.sample_rate, cfg["ingest"]["hop"]
    out = Path(args.out or _work(cfg) / f"generate_{f0:.2f}Hz.wav")
    _claim([out], args.overwrite)
    n_frames = int(round(s["duration"] * rate / hop)) + 1
    step = s["walk_step"] if args.step is None else args.step
    frames = generate_note(m, f0, n_frames, step, np.random.default_rng(args.seed), rate,
                           fft_size=cfg["analysis"]["fft_size"])
    x = additive_synth([SynthFrame(f, a) for f, a in frames], hop, rate, s["peak"])
    write_wav(x, rate, out)
    log.info("generated %.2f Hz, %d frames -> %s", f0, n_frames, out)
    return out


def cmd_vibrato(cfg, args):
    import numpy as np

    from .synthesis import synthesize_note, vibrato_contour
    from .wavio import write_wav

    f0 = _pitch(args)
    m = _load_generator(cfg, args)
    s = cfg["synthesis"]
    rate, hop = args.sample_rate, cfg["ingest"]["hop"]
    rate_hz = s["vibrato_rate"] if args.rate is None else args.rate
    depth = s["vibrato_depth"] if args.depth is None else args.depth
    out = Path(args.out or _work(cfg) / f"vibrato_{f0:.2f}Hz.wav")
    _claim([out], args.overwrite)
    n_frames = int(round(s["duration"] * rate / hop)) + 1
    contour = vibrato_contour(f0, rate_hz, depth, n_frames, hop, rate)
    step = s["walk_step"] if args.step is None else args.step
    x = synthesize_note(m, contour, step, np.random.default_rng(args.seed), peak=s["peak"],
                        fft_size=cfg["analysis"]["fft_size"])
    write_wav(x, rate, out)
    log.info("vibrato %.2f Hz (%.1f Hz, %.0f cents) -> %s", f0, rate_hz, depth, out)
    return out


COMMANDS = {"ingest": cmd_ingest, "analyze": cmd_analyze, "train": cmd_train,
            "sweep": cmd_sweep, "recon": cmd_recon, "generate": cmd_generate,
            "vibrato": cmd_vibrato}


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--config", help="YAML config file")
    shared.add_argument("--seed", type=int, help="master seed (overrides config)")
    shared.add_argument("--threads", type=int, default=1,
                        help="BLAS threads; 1 is the deterministic mode")
    shared.add_argument("--out", help="main output path (default: inside paths.work)")
    shared.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="cepsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    c = sub.add_parser("ingest", parents=[shared], help="WAV corpus -> frame table + split")
    c.add_argument("--dataset")
    c.add_argument("--metadata")

    c = sub.add_parser("analyze", parents=[shared], help="frame table -> envelope table")
    c.add_argument("--frames")

    for name, hlp in (("train", "fit one AE or CVAE"), ("sweep", "beta x latent-dim grid"),
                      ("recon", "skip-pitch or endpoint reconstruction")):
        c = sub.add_parser(name, parents=[shared], help=hlp)
        c.add_argument("--envelopes")
        c.add_argument("--manifest")
        c.add_argument("--epochs", type=int)
        if name == "train":
            c.add_argument("--kind", choices=["AE", "CVAE"], default="CVAE")
            c.add_argument("--midis", help="comma-separated MIDI labels to train on")
            c.add_argument("--exclude", help="comma-separated MIDI labels to leave out")
        if name == "recon":
            c.add_argument("--protocol", choices=["skip", "endpoints"], required=True)
            c.add_argument("--midi", type=int, help="skip-pitch target (63..68)")

    for name in ("generate", "vibrato"):
        c = sub.add_parser(name, parents=[shared], help=f"render a {name} WAV from a model")
        c.add_argument("--model")
        c.add_argument("--midi", type=float)
        c.add_argument("--f0", type=float)
        c.add_argument("--step", type=float, help="latent random-walk step")
        c.add_argument("--sample-rate", type=int, default=48000)
        if name == "vibrato":
            c.add_argument("--rate", type=float, help="vibrato rate in Hz")
            c.add_argument("--depth", type=float, help="vibrato depth in cents")
    return p


def _set_threads(n: int):
    if n < 1:
        raise UsageError("--threads must be >= 1")
    # only effective before numpy loads its BLAS (i.e. when run as a script)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _set_threads(args.threads)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(message)s")
        cfg = load_config(args.config)
        if args.seed is None:
            args.seed = int(cfg["seed"])
        cfg["seed"] = args.seed
        COMMANDS[args.command](cfg, args)
        return EXIT_OK
    except UsageError as exc:
        print(f"cepsynth: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"cepsynth: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ValueError, OSError, KeyError) as exc:
        print(f"cepsynth: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()

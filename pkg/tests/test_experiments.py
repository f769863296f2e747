import json
import math

import numpy as np
import pytest

from cepsynth.envelope import EnvelopeTable, logspec_mse_from_ccs
from cepsynth.experiments import (
    ExperimentError, ExperimentSpec, MseReport, ProtocolViolation, _assert_disjoint,
    cell_seed, decode, endpoint_experiment, evaluate_mse, generate_note, hyperparam_sweep,
    kind_config, random_walk_latents, skip_pitch_experiment, skip_window, split_tables,
    train_on,
)
from cepsynth.ingest import split_dataset
from cepsynth.model import Layer, TrainConfig, ae_config, init_model, pitch_condition
from cepsynth.synthetic import EnvelopeFamily, envelope_dataset, true_padded_ccs

FAMILY = EnvelopeFamily()


@pytest.fixture(scope="module")
def data():
    tab = envelope_dataset(FAMILY, takes_per_note=5, frames_per_take=4)
    return tab, split_dataset(sorted(tab.keys()), 0.8, seed=0)


BASE = TrainConfig(epochs=3, latent_dim=4)


# windows + experiment specs

def test_skip_windows():
    assert skip_window(65) == [62, 63, 64, 66, 67, 68]
    assert skip_window(63) == [60, 61, 62, 64, 65, 66]
    for T in (62, 69):
        with pytest.raises(ExperimentError):
            ExperimentSpec("skip_pitch", target_midi=T)
    with pytest.raises(ExperimentError):
        ExperimentSpec("nonsense")
    with pytest.raises(ExperimentError):
        ExperimentSpec("sweep", model_kinds=("GAN",))


def test_skip_pitch_full_run(data):
    tab, split = data
    rows = []
    for T in range(63, 69):
        rep = skip_pitch_experiment(T, ("AE", "CVAE"), tab, split, BASE)
        assert rep.metadata["training_midis"] == skip_window(T)
        rows += rep.rows
    assert len(rows) == 12
    assert {(r.model_kind, r.midi) for r in rows} == {
        (k, T) for k in ("AE", "CVAE") for T in range(63, 69)}
    assert all(r.mse >= 0 for r in rows)


def test_protocol_hygiene(data):
    tab, split = data
    train, _ = split_tables(tab, split)
    for T in range(63, 69):
        used = train.select(midis=skip_window(T))
        assert not used.keys() & tab.select(midis=[T]).keys()
    with pytest.raises(ProtocolViolation):
        _assert_disjoint(train, train.select(midis=[65]).keys(), "test")


def test_skip_pitch_seen_rows(data):
    tab, split = data
    rep = skip_pitch_experiment(65, ("CVAE",), tab, split, BASE, include_seen=True)
    assert sorted(r.midi for r in rep.rows) == [62, 63, 64, 65, 66, 67, 68]


# evaluation

def _identity_ae(d=91):
    m = init_model(ae_config(latent_dim=d, hidden=d, standardize=False))
    shift = 10.0
    m.encoder.layers[0] = Layer(np.eye(d), np.full(d, shift))
    m.mu_head = Layer(np.eye(d), np.full(d, -shift))
    m.decoder.layers[0] = Layer(np.eye(d), np.full(d, shift))
    m.decoder.layers[1] = Layer(np.eye(d), np.full(d, -shift))
    return m


def test_evaluate_mse_closed_forms(data):
    tab, _ = data
    assert evaluate_mse(_identity_ae(), tab) < 1e-24
    m = init_model(ae_config(latent_dim=4))
    m.decoder.layers[-1].W[:] = 0.0
    m.decoder.layers[-1].b[:] = 0.0
    expect = np.mean([np.mean(x ** 2) for x in tab.X])
    assert np.isclose(evaluate_mse(m, tab), expect, rtol=1e-12)
    with pytest.raises(ExperimentError):
        evaluate_mse(m, tab.select(midis=[99]))


def test_evaluate_mse_recomputation(data):
    tab, split = data
    train, test = split_tables(tab, split)
    m = train_on(train, TrainConfig(epochs=5, latent_dim=4))
    total = 0.0
    for x, midi in zip(test.X, test.midi):
        e_mu = decode(m, _encode_mu(m, x, midi), pitch_condition(midi))
        total += float(np.mean((e_mu - x) ** 2))
    assert abs(evaluate_mse(m, test) - total / len(test)) < 1e-12


def _encode_mu(m, x, midi):
    from cepsynth.model import encode
    return encode(m, x, pitch_condition(midi)).mu


# sweep

def test_single_cell_sweep_is_composition(data):
    tab, split = data
    train, test = split_tables(tab, split)
    spec = ExperimentSpec("sweep", betas=(0.1,), latent_dims=(4,), model_kinds=("CVAE",), seed=2)
    rep = hyperparam_sweep(spec, train, test, BASE)
    direct = evaluate_mse(train_on(train, kind_config(BASE, "CVAE", 0.1, 4, cell_seed(2, 0))), test)
    assert len(rep.rows) == 1 and rep.rows[0].mse == direct


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_sweep_grid_determinism_and_divergence(data, tmp_path):
    tab, split = data
    train, test = split_tables(tab, split)
    spec = ExperimentSpec("sweep", betas=(0.01, 1.0), latent_dims=(2, 4))
    a = hyperparam_sweep(spec, train, test, BASE)
    b = hyperparam_sweep(spec, train, test, BASE)
    assert len(a.rows) == 8 and a.rows == b.rows
    csv_path, meta_path = a.write(tmp_path / "sweep.csv", "h123")
    assert csv_path.read_text().startswith("# config_hash=h123\nmodel_kind,beta,latent_dim,midi,mse")
    assert MseReport.read_csv(csv_path).rows == a.rows
    assert json.loads(meta_path.read_text())["spec"]["protocol"] == "sweep"

    wild = TrainConfig(epochs=20, latent_dim=4, lr=1e300)
    spec1 = ExperimentSpec("sweep", betas=(0.1,), latent_dims=(4,), model_kinds=("CVAE",))
    rep = hyperparam_sweep(spec1, train, test, wild)
    assert math.isnan(rep.rows[0].mse)
    assert "CVAE/beta=0.1/dim=4" in rep.metadata["divergent_cells"]


# endpoints

def test_endpoint_rows(data):
    tab, split = data
    rep = endpoint_experiment(("AE", "CVAE"), tab, split, BASE)
    for kind in ("AE", "CVAE"):
        assert sorted(r.midi for r in rep.get(kind)) == list(range(60, 72))
    with pytest.raises(ExperimentError):
        endpoint_experiment(("AE",), tab.select(midis=range(60, 71)), split, BASE)


def _mid_over_outer(family):
    tab = envelope_dataset(family, takes_per_note=6, frames_per_take=4)
    split = split_dataset(sorted(tab.keys()), 0.8, seed=0)
    rep = endpoint_experiment(("AE",), tab, split, TrainConfig(epochs=300, latent_dim=8))
    curve = {m: rep.value("AE", midi=m) for m in range(60, 72)}
    # unseen pitches only: the seen endpoints sit lower on any curve
    mid = np.mean([curve[m] for m in (64, 65, 66, 67)])
    outer = np.mean([curve[m] for m in (61, 62, 69, 70)])
    return mid / outer


def test_endpoint_flat_for_pitch_independent_family():
    assert _mid_over_outer(EnvelopeFamily(mid_bump=0.0, linear=0.0)) < 1.25
    assert _mid_over_outer(FAMILY) > 1.5


# generation

def test_random_walk():
    assert not np.any(random_walk_latents(10, 0.0, 3, np.random.default_rng(0)))
    r = np.random.default_rng(1)
    walks = np.stack([random_walk_latents(21, 0.05, 4, r) for _ in range(10000)])
    assert not np.any(walks[:, 0])
    for t in (5, 20):
        e = np.mean(np.sum(walks[:, t] ** 2, axis=1))
        assert abs(e / (t * 0.05 ** 2 * 4) - 1) < 0.05
    assert np.array_equal(random_walk_latents(5, 0.1, 2, np.random.default_rng(3)),
                          random_walk_latents(5, 0.1, 2, np.random.default_rng(3)))
    with pytest.raises(ExperimentError):
        random_walk_latents(0, 0.1, 2, r)


def test_generate_note_contract(data):
    tab, _ = data
    m = train_on(tab, TrainConfig(epochs=3, latent_dim=4))
    frames = generate_note(m, 349.23, 6, 0.0, np.random.default_rng(0))
    assert len(frames) == 6
    for f0, amps in frames:
        assert f0 == 349.23 and amps.size == math.floor(24000 / 349.23) - 1
        assert np.all(np.isfinite(amps)) and np.all(amps > 0)
        assert np.array_equal(amps, frames[0][1])
    with pytest.raises(ExperimentError):
        generate_note(m, 40.0, 4, 0.0, np.random.default_rng(0))
    with pytest.raises(ExperimentError):
        generate_note(m, 13000.0, 4, 0.0, np.random.default_rng(0))
    ae = train_on(tab, ae_config(epochs=1, latent_dim=4))
    with pytest.raises(ExperimentError):
        generate_note(ae, 349.23, 4, 0.0, np.random.default_rng(0))


def test_generated_envelope_near_true_member():
    tab = envelope_dataset(FAMILY, midis=[m for m in range(60, 72) if m != 65],
                           takes_per_note=6, frames_per_take=4)
    m = train_on(tab, TrainConfig(epochs=400, latent_dim=8))
    z = np.zeros((1, 8))
    x = decode(m, z, pitch_condition(65))[0]
    d = {mid: logspec_mse_from_ccs(x, true_padded_ccs(FAMILY, mid)) for mid in (60, 65, 71)}
    assert d[65] < d[60] and d[65] < d[71]

"""Autoencoder / conditional VAE over padded cepstral envelopes, in numpy.

Architecture (defaults): encoder ``[91 (+cond)] -> 91 -> latent`` with a
linear mean head and, for the CVAE, a parallel linear log-variance head;
decoder ``[latent (+cond)] -> 91 -> 91`` with a linear output. Hidden layers
use leaky rectifiers. Training minimises ``recon + beta * kl`` where recon is
the per-dimension mean squared error on standardised inputs.
"""

import csv
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import PAD_WIDTH
from .pitch import f0_to_midi

LOGVAR_MIN, LOGVAR_MAX = -20.0, 20.0
MIDI_LO, MIDI_HI = 60, 71


class ModelError(ValueError):
    pass


class TrainingDivergence(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    beta: float = 0.1
    latent_dim: int = 32
    lr: float = 1e-3
    epochs: int = 2000
    batch_size: int = 512
    seed: int = 0
    conditional: bool = True
    cond_encoding: str = "scalar"  # or "onehot"
    hidden: int = PAD_WIDTH
    input_dim: int = PAD_WIDTH
    leak: float = 0.01
    standardize: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ModelError("beta must be >= 0")
        if self.latent_dim < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ModelError("latent_dim, epochs and batch_size must be >= 1")
        if self.cond_encoding not in ("scalar", "onehot"):
            raise ModelError(f"unknown cond_encoding {self.cond_encoding!r}")

    @property
    def cond_dim(self) -> int:
        if not self.conditional:
            return 0
        return 1 if self.cond_encoding == "scalar" else MIDI_HI - MIDI_LO + 1

    @property
    def kind(self) -> str:
        return "CVAE" if self.conditional else "AE"


def ae_config(**kw) -> TrainConfig:
    """AE: unconditional, deterministic code, no KL term."""
    kw.setdefault("beta", 0.0)
    return TrainConfig(conditional=False, **kw)


# ---------------------------------------------------------------------------
# layers


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)

    @property
    def shape(self):
        return self.W.shape


@dataclass
class MLPParams:
    layers: List[Layer]
    leak: float = 0.01

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.W.shape[0] != b.W.shape[1]:
                raise ModelError(f"layer dims do not chain: {a.W.shape} -> {b.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].W.shape[1]


def leaky_relu(a, leak):
    return np.where(a > 0, a, leak * a)


def forward_mlp(params: MLPParams, x: np.ndarray, final_linear: bool = True):
    """Affine + leaky-rectifier per layer, last layer affine only.

    ``x`` is (batch, in) or (in,). Returns (output, cache) where cache holds
    each layer's input and pre-activation for :func:`backward_mlp`.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != params.in_dim:
        raise ModelError(f"input dim {h.shape[1]} != {params.in_dim}")
    cache = []
    n = len(params.layers)
    for i, layer in enumerate(params.layers):
        a = h @ layer.W.T + layer.b
        cache.append((h, a))
        h = a if (final_linear and i == n - 1) else leaky_relu(a, params.leak)
    return (h[0] if single else h), (cache, final_linear)


def backward_mlp(params: MLPParams, cache, grad_out: np.ndarray):
    """Gradients of a scalar loss w.r.t. every layer, given dL/d(output)."""
    layers_cache, final_linear = cache
    g = np.atleast_2d(grad_out)
    grads = [None] * len(params.layers)
    n = len(params.layers)
    for i in range(n - 1, -1, -1):
        h_in, a = layers_cache[i]
        if not (final_linear and i == n - 1):
            g = g * np.where(a > 0, 1.0, params.leak)
        grads[i] = Layer(g.T @ h_in, g.sum(axis=0))
        g = g @ params.layers[i].W
    return grads, g


def _init_layer(rng: np.random.Generator, n_in: int, n_out: int) -> Layer:
    s = np.sqrt(1.0 / n_in)
    return Layer(rng.uniform(-s, s, (n_out, n_in)), rng.uniform(-s, s, n_out))


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelParams:
    config: TrainConfig
    encoder: MLPParams        # trunk: input (+cond) -> hidden
    mu_head: Layer            # hidden -> latent (the AE code)
    logvar_head: Optional[Layer]
    decoder: MLPParams        # latent (+cond) -> hidden -> output
    x_mean: np.ndarray
    x_std: np.ndarray
    loss_history: List[Tuple[float, float]] = field(default_factory=list)

    @property
    def variational(self) -> bool:
        return self.logvar_head is not None

    def layers(self) -> List[Layer]:
        out = list(self.encoder.layers) + [self.mu_head]
        if self.logvar_head is not None:
            out.append(self.logvar_head)
        return out + list(self.decoder.layers)

    def arrays(self) -> List[np.ndarray]:
        return [a for layer in self.layers() for a in (layer.W, layer.b)]

    def n_params(self) -> int:
        return sum(a.size for a in self.arrays())

    def copy(self) -> "ModelParams":
        def cp(layer):
            return Layer(layer.W.copy(), layer.b.copy())

        return ModelParams(
            replace(self.config),
            MLPParams([cp(l) for l in self.encoder.layers], self.encoder.leak),
            cp(self.mu_head),
            cp(self.logvar_head) if self.logvar_head is not None else None,
            MLPParams([cp(l) for l in self.decoder.layers], self.decoder.leak),
            self.x_mean.copy(), self.x_std.copy(), list(self.loss_history),
        )


def init_model(config: TrainConfig, rng: Optional[np.random.Generator] = None) -> ModelParams:
    """Fan-in-scaled uniform initialisation.

    Draw order is trunk, mean head, decoder, then log-variance head, so an AE
    and a CVAE built from the same seed share every common parameter.
    """
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence(config.seed).spawn(1)[0])
    c = config.cond_dim
    enc = MLPParams([_init_layer(rng, config.input_dim + c, config.hidden)], config.leak)
    mu = _init_layer(rng, config.hidden, config.latent_dim)
    dec = MLPParams(
        [
            _init_layer(rng, config.latent_dim + c, config.hidden),
            _init_layer(rng, config.hidden, config.input_dim),
        ],
        config.leak,
    )
    lv = _init_layer(rng, config.hidden, config.latent_dim) if config.conditional else None
    return ModelParams(config, enc, mu, lv, dec,
                       np.zeros(config.input_dim), np.ones(config.input_dim))


def expected_param_count(config: TrainConfig) -> int:
    d, hdn, z, c = config.input_dim, config.hidden, config.latent_dim, config.cond_dim
    n = (d + c) * hdn + hdn + hdn * z + z
    if config.conditional:
        n += hdn * z + z
    n += (z + c) * hdn + hdn + hdn * d + d
    return n


# ---------------------------------------------------------------------------
# conditioning


def pitch_condition(midi, encoding: str = "scalar") -> np.ndarray:
    """Condition rows for (possibly fractional) MIDI pitches.

    scalar: (midi - 60) / 11, shape (n, 1). onehot: 12 columns for MIDI
    60..71, fractional pitches split linearly between neighbours.
    """
    midi = np.atleast_1d(np.asarray(midi, dtype=np.float64))
    if encoding == "scalar":
        return ((midi - MIDI_LO) / (MIDI_HI - MIDI_LO))[:, None]
    if encoding == "onehot":
        n = MIDI_HI - MIDI_LO + 1
        pos = np.clip(midi - MIDI_LO, 0, n - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, n - 1)
        frac = pos - lo
        out = np.zeros((midi.size, n))
        out[np.arange(midi.size), lo] += 1.0 - frac
        out[np.arange(midi.size), hi] += frac
        return out
    raise ModelError(f"unknown cond_encoding {encoding!r}")


def f0_condition(f0, encoding: str = "scalar") -> np.ndarray:
    return pitch_condition(f0_to_midi(f0), encoding)


def _check_cond(m: ModelParams, cond, batch: int):
    if m.config.conditional:
        if cond is None:
            raise ModelError("conditional model requires a pitch condition")
        cond = np.asarray(cond, dtype=np.float64)
        if cond.ndim == 0:
            cond = cond.reshape(1, 1)
        elif cond.ndim == 1:
            cond = cond[:, None] if m.config.cond_dim == 1 else cond[None, :]
        if cond.shape[1] != m.config.cond_dim:
            raise ModelError(f"condition width {cond.shape[1]} != {m.config.cond_dim}")
        if cond.shape[0] == 1 and batch > 1:
            cond = np.repeat(cond, batch, axis=0)
        if cond.shape[0] != batch:
            raise ModelError("condition rows do not match batch")
        return cond
    if cond is not None:
        raise ModelError("unconditional model given a condition")
    return None


def _join(a: np.ndarray, cond) -> np.ndarray:
    return a if cond is None else np.concatenate([a, cond], axis=1)


@dataclass
class EncoderOutput:
    mu: np.ndarray
    logvar: np.ndarray


def _encode_std(m: ModelParams, xs: np.ndarray, cond):
    h, enc_cache = forward_mlp(m.encoder, _join(xs, cond), final_linear=False)
    mu = h @ m.mu_head.W.T + m.mu_head.b
    if m.logvar_head is not None:
        lv_raw = h @ m.logvar_head.W.T + m.logvar_head.b
    else:
        lv_raw = np.full_like(mu, LOGVAR_MIN)
    lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
    return mu, lv, lv_raw, h, enc_cache


def encode(m: ModelParams, x: np.ndarray, cond=None) -> EncoderOutput:
    """Posterior mean/log-variance for padded CC vector(s) ``x``.

    ``cond`` is the normalised pitch condition (see :func:`pitch_condition`);
    it must be given for conditional models and omitted otherwise. The AE
    returns its code as ``mu`` and a log-variance pinned at the clamp floor.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = np.atleast_2d(x)
    cond = _check_cond(m, cond, X.shape[0])
    mu, lv, *_ = _encode_std(m, (X - m.x_mean) / m.x_std, cond)
    if single:
        return EncoderOutput(mu[0], lv[0])
    return EncoderOutput(mu, lv)


def reparameterize(e: EncoderOutput, rng: np.random.Generator) -> np.ndarray:
    """z = mu + exp(logvar / 2) * n,  n ~ N(0, I)."""
    n = rng.standard_normal(np.shape(e.mu))
    return e.mu + np.exp(0.5 * e.logvar) * n


def decode(m: ModelParams, z: np.ndarray, cond=None) -> np.ndarray:
    """Padded CC vector(s) for latent code(s) ``z`` (unstandardised)."""
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    Z = np.atleast_2d(z)
    if Z.shape[1] != m.config.latent_dim:
        raise ModelError(f"latent dim {Z.shape[1]} != {m.config.latent_dim}")
    cond = _check_cond(m, cond, Z.shape[0])
    y, _ = forward_mlp(m.decoder, _join(Z, cond))
    y = y * m.x_std + m.x_mean
    return y[0] if single else y


def reconstruct(m: ModelParams, X: np.ndarray, cond=None) -> np.ndarray:
    """Deterministic reconstruction (decode of the posterior mean / AE code)."""
    e = encode(m, X, cond)
    return decode(m, e.mu, cond)


def kl_divergence(e: EncoderOutput):
    """KL(N(mu, diag(exp(logvar))) || N(0, I)), per row."""
    mu, lv = np.asarray(e.mu), np.asarray(e.logvar)
    return -0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv), axis=-1)


def elbo_loss(x, x_hat, e: EncoderOutput, beta: float):
    """(total, recon, kl) with recon the per-dimension MSE.

    For batches all three are batch means.
    """
    x, x_hat = np.asarray(x, dtype=np.float64), np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ModelError("x and x_hat shapes differ")
    recon = float(np.mean((x_hat - x) ** 2))
    kl = float(np.mean(kl_divergence(e)))
    return recon + beta * kl, recon, kl


# ---------------------------------------------------------------------------
# loss + gradients


def loss_and_grads(m: ModelParams, xs: np.ndarray, cond, beta: float,
                   noise: Optional[np.ndarray] = None):
    """Batch loss on standardised inputs ``xs`` and its exact gradients.

    ``noise`` is the standard-normal draw used by the reparameterisation
    (ignored for the AE). Returns ((total, recon, kl), grads) with grads a
    list of arrays aligned with :meth:`ModelParams.arrays`.
    """
    B, D = xs.shape
    mu, lv, lv_raw, h, enc_cache = _encode_std(m, xs, cond)
    if m.variational:
        if noise is None:
            raise ModelError("variational loss needs a noise draw")
        sd = np.exp(0.5 * lv)
        z = mu + sd * noise
    else:
        z = mu
    y, dec_cache = forward_mlp(m.decoder, _join(z, cond))

    diff = y - xs
    recon = float(np.sum(diff * diff) / (B * D))
    if m.variational:
        kl_rows = -0.5 * np.sum(1.0 + lv - mu * mu - np.exp(lv), axis=1)
        kl = float(np.mean(kl_rows))
    else:
        kl = 0.0
    total = recon + beta * kl

    dy = 2.0 * diff / (B * D)
    dec_grads, dzc = backward_mlp(m.decoder, dec_cache, dy)
    dz = dzc[:, : m.config.latent_dim]

    if m.variational:
        dmu = dz + beta * mu / B
        dlv = dz * noise * 0.5 * sd + beta * 0.5 * (np.exp(lv) - 1.0) / B
        dlv = dlv * ((lv_raw >= LOGVAR_MIN) & (lv_raw <= LOGVAR_MAX))
    else:
        dmu = dz
    dh = dmu @ m.mu_head.W
    head_grads = [Layer(dmu.T @ h, dmu.sum(axis=0))]
    if m.variational:
        dh = dh + dlv @ m.logvar_head.W
        head_grads.append(Layer(dlv.T @ h, dlv.sum(axis=0)))
    # trunk output went through a leaky rectifier (final_linear=False)
    enc_grads, _ = backward_mlp(m.encoder, enc_cache, dh)

    layers = enc_grads + head_grads + dec_grads
    grads = [a for layer in layers for a in (layer.W, layer.b)]
    return (total, recon, kl), grads


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ModelError("params / grads / state length mismatch")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ModelError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


# ---------------------------------------------------------------------------
# training


def train(X: np.ndarray, midi, config: TrainConfig,
          init: Optional[ModelParams] = None) -> ModelParams:
    """Mini-batch ADAM training on padded CC rows ``X`` with pitch labels ``midi``.

    ``midi`` may be None for unconditional models. The per-epoch shuffle and
    the reparameterisation noise come from independent streams derived from
    ``config.seed``, so results are reproducible.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ModelError("empty training set")
    if X.shape[1] != config.input_dim:
        raise ModelError(f"input width {X.shape[1]} != {config.input_dim}")
    if not np.all(np.isfinite(X)):
        raise ModelError("non-finite training data")

    init_ss, shuffle_ss, noise_ss = np.random.SeedSequence(config.seed).spawn(3)
    m = init if init is not None else init_model(config, np.random.default_rng(init_ss))
    m = m.copy()
    m.config = replace(config)
    if config.standardize:
        m.x_mean = X.mean(axis=0)
        sd = X.std(axis=0)
        m.x_std = np.where(sd > 1e-8, sd, 1.0)
    xs_all = (X - m.x_mean) / m.x_std

    cond_all = None
    if config.conditional:
        if midi is None:
            raise ModelError("conditional training needs pitch labels")
        cond_all = pitch_condition(midi, config.cond_encoding)
        if cond_all.shape[0] != X.shape[0]:
            raise ModelError("label count does not match data rows")

    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    params = m.arrays()
    state = AdamState.zeros_like(params)
    n = X.shape[0]
    history = []
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        rec_sum = kl_sum = 0.0
        for s in range(0, n, config.batch_size):
            idx = order[s : s + config.batch_size]
            c = cond_all[idx] if cond_all is not None else None
            noise = (noise_rng.standard_normal((idx.size, config.latent_dim))
                     if m.variational else None)
            (total, rec, kl), grads = loss_and_grads(m, xs_all[idx], c, config.beta, noise)
            if not np.isfinite(total):
                raise TrainingDivergence(
                    f"non-finite loss at epoch {epoch} batch {s // config.batch_size}: "
                    f"recon={rec!r} kl={kl!r}"
                )
            adam_step(params, grads, state, config.lr)
            rec_sum += rec * idx.size
            kl_sum += kl * idx.size
        history.append((rec_sum / n, kl_sum / n))
    m.loss_history = history
    return m


# ---------------------------------------------------------------------------
# persistence

VPMD_MAGIC = b"VPMD"
VPMD_VERSION = 1


def save_model(m: ModelParams, path) -> Path:
    path = Path(path)
    meta = json.dumps(
        {"config": asdict(m.config), "variational": m.variational,
         "loss_history": [list(r) for r in m.loss_history]},
        sort_keys=True,
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<4sII", VPMD_MAGIC, VPMD_VERSION, len(meta)))
        f.write(meta)
        f.write(struct.pack("<I", m.x_mean.size))
        f.write(np.asarray(m.x_mean, "<f8").tobytes())
        f.write(np.asarray(m.x_std, "<f8").tobytes())
        layers = m.layers()
        f.write(struct.pack("<I", len(layers)))
        for layer in layers:
            out, inp = layer.W.shape
            f.write(struct.pack("<II", out, inp))
            f.write(np.ascontiguousarray(layer.W, "<f8").tobytes())
            f.write(np.asarray(layer.b, "<f8").tobytes())
    return path


def load_model(path) -> ModelParams:
    path = Path(path)
    data = path.read_bytes()
    try:
        magic, version, n_meta = struct.unpack_from("<4sII", data, 0)
        if magic != VPMD_MAGIC:
            raise ModelError(f"{path}: bad magic {magic!r}, expected VPMD")
        if version != VPMD_VERSION:
            raise ModelError(f"{path}: unsupported VPMD version {version}")
        pos = 12
        meta = json.loads(data[pos : pos + n_meta].decode("utf-8"))
        pos += n_meta
        (d,) = struct.unpack_from("<I", data, pos)
        pos += 4
        mean = np.frombuffer(data, "<f8", d, pos).copy(); pos += 8 * d
        std = np.frombuffer(data, "<f8", d, pos).copy(); pos += 8 * d
        (nl,) = struct.unpack_from("<I", data, pos)
        pos += 4
        layers = []
        for _ in range(nl):
            out, inp = struct.unpack_from("<II", data, pos)
            pos += 8
            W = np.frombuffer(data, "<f8", out * inp, pos).reshape(out, inp).copy()
            pos += 8 * out * inp
            b = np.frombuffer(data, "<f8", out, pos).copy()
            pos += 8 * out
            layers.append(Layer(W, b))
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, ModelError):
            raise
        raise ModelError(f"{path}: corrupt model file ({exc})") from None

    config = TrainConfig(**meta["config"])
    n_enc = 1
    enc = MLPParams(layers[:n_enc], config.leak)
    mu = layers[n_enc]
    k = n_enc + 1
    lv = None
    if meta["variational"]:
        lv = layers[k]
        k += 1
    dec = MLPParams(layers[k:], config.leak)
    return ModelParams(config, enc, mu, lv, dec, mean, std,
                       [tuple(r) for r in meta["loss_history"]])


def write_loss_csv(m: ModelParams, path, config_hash: str = "") -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        if config_hash:
            f.write(f"# config_hash={config_hash}\n")
        w = csv.writer(f)
        w.writerow(["epoch", "recon", "kl"])
        for i, (r, k) in enumerate(m.loss_history):
            w.writerow([i, repr(float(r)), repr(float(k))])
    return path

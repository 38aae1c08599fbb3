"""Convolutional VAE with an optional sinc filterbank front end.

Encoder: [sinc filterbank -> layer norm over time -> activation] ->
``conv_block_count`` x (conv k=3 stride 2 -> block activation) -> flatten ->
two dense heads (mu, logvar). Decoder: dense -> reshape ->
``conv_block_count`` x (nearest upsample x2 -> conv k=3 -> block activation)
-> crop to the window length -> linear output conv.
"""
from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .sinclayer import SincFilterbank
from .tensor import Tensor

VARIANTS = ("plain", "sinc")
# axes of the (batch, channel, time) sinc output that layer norm averages over
NORM_AXES = {"time": (2,), "channels": (1,), "both": (1, 2), "none": None}


@dataclass
class VaeArchitecture:
    in_channels: int
    window_len: int
    variant: str = "sinc"
    fs: float = 256.0
    filter_count: int = 8
    kernel_length: int = 31
    activation: str = "identity"
    latent_dim: int = 8
    conv_block_count: int = 2
    channels_per_block: int = 16
    block_activation: str = "relu"
    recon_reduction: str = "sum"
    norm_axes: str = "time"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if self.in_channels < 1 or self.window_len < 1:
            raise ValueError("input window shape must be positive")
        if self.conv_block_count < 0 or self.channels_per_block < 1:
            raise ValueError("invalid conv block configuration")
        if self.norm_axes not in NORM_AXES:
            raise ValueError(f"norm_axes must be one of {sorted(NORM_AXES)}, got {self.norm_axes!r}")
        if self.recon_reduction not in ("mean", "sum"):
            raise ValueError("recon_reduction must be 'mean' or 'sum'")
        T.activation(self.activation)
        T.activation(self.block_activation)
        if self.variant == "sinc":
            if self.filter_count < 1:
                raise ValueError("filter_count must be >= 1")
            if self.kernel_length < 3 or self.kernel_length % 2 == 0:
                raise ValueError("kernel_length must be odd and >= 3")
            if self.window_len < self.kernel_length:
                raise ValueError("window shorter than the sinc kernel")
            if self.fs <= 0:
                raise ValueError("fs must be positive")

    @property
    def encoded_len(self):
        n = self.window_len
        for _ in range(self.conv_block_count):
            n = -(-n // 2)
        return n

    @property
    def front_channels(self):
        if self.variant == "sinc":
            return self.in_channels * self.filter_count
        return self.in_channels

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainConfig:
    learning_rate: float = 0.0005
    batch_size: int = 128
    max_epochs: int = 1000
    patience: int = 20
    validation_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("training hyperparameters must be positive")
        if not 0.0 < self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must be in (0, 1)")


class TrainingDivergedError(FloatingPointError):
    def __init__(self, epoch, batch, detail=""):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}{': ' + detail if detail else ''}")
        self.epoch = epoch
        self.batch = batch


def _uniform(rng, shape, fan_in, fan_out, gain=1.0):
    limit = gain * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class VaeModel:
    """Parameters, architecture and training history of one VAE."""

    def __init__(self, arch: VaeArchitecture, seed=0):
        self.arch = arch
        self.seed = seed
        self.history = []
        self.params = {}
        rng = np.random.default_rng(seed)
        a = arch
        ch = a.channels_per_block
        self.sinc = None
        if a.variant == "sinc":
            self.sinc = SincFilterbank(a.filter_count, a.kernel_length, a.fs, seed=int(rng.integers(2**31)))
            self.params["sinc.cutoffs"] = self.sinc.raw
            self._add("sinc.norm.gain", np.ones(a.front_channels))
            self._add("sinc.norm.bias", np.zeros(a.front_channels))
        c_in = a.front_channels
        for i in range(a.conv_block_count):
            self._add(f"enc.{i}.w", _uniform(rng, (ch, c_in, 3), c_in * 3, ch * 3))
            self._add(f"enc.{i}.b", np.zeros(ch))
            c_in = ch
        flat = c_in * a.encoded_len
        self._add("enc.mu.w", _uniform(rng, (flat, a.latent_dim), flat, a.latent_dim))
        self._add("enc.mu.b", np.zeros(a.latent_dim))
        self._add("enc.logvar.w", _uniform(rng, (flat, a.latent_dim), flat, a.latent_dim, gain=0.1))
        self._add("enc.logvar.b", np.zeros(a.latent_dim))
        self._add("dec.fc.w", _uniform(rng, (a.latent_dim, flat), a.latent_dim, flat))
        self._add("dec.fc.b", np.zeros(flat))
        for i in range(a.conv_block_count):
            self._add(f"dec.{i}.w", _uniform(rng, (ch, c_in, 3), c_in * 3, ch * 3))
            self._add(f"dec.{i}.b", np.zeros(ch))
            c_in = ch
        self._add("dec.out.w", _uniform(rng, (a.in_channels, c_in, 3), c_in * 3, a.in_channels * 3))
        self._add("dec.out.b", np.zeros(a.in_channels))

    def _add(self, name, value):
        self.params[name] = Tensor(value, requires_grad=True, name=name)

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def state_dict(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state):
        if set(state) != set(self.params):
            raise ValueError("state dict does not match the architecture's parameters")
        for k, v in state.items():
            v = np.asarray(v)
            if v.shape != self.params[k].shape:
                raise ValueError(f"{k}: expected shape {self.params[k].shape}, got {v.shape}")
            self.params[k].data = np.ascontiguousarray(v, dtype=T.get_default_dtype())

    def band_edges(self):
        return None if self.sinc is None else self.sinc.band_edges()


# forward pieces -------------------------------------------------------------

def _check_input(x, model):
    a = model.arch
    if x.ndim != 3 or x.shape[1:] != (a.in_channels, a.window_len):
        raise T.ShapeError(
            f"input shape {tuple(x.shape)} does not match (batch, {a.in_channels}, {a.window_len})")


def encode(x, model: VaeModel):
    """Posterior parameters ``(mu, logvar)``, each (batch, latent_dim)."""
    x = T.as_tensor(x)
    _check_input(x, model)
    a, p = model.arch, model.params
    h = x
    if model.sinc is not None:
        h = model.sinc(h)
        axes = NORM_AXES[a.norm_axes]
        if axes is not None:
            h = T.layer_norm(h, axis=axes)
        h = h * p["sinc.norm.gain"].reshape(1, -1, 1) + p["sinc.norm.bias"].reshape(1, -1, 1)
        h = T.activation(a.activation)(h)
    act = T.activation(a.block_activation)
    for i in range(a.conv_block_count):
        h = act(T.conv1d(h, p[f"enc.{i}.w"], p[f"enc.{i}.b"], stride=2, padding="same"))
    h = h.reshape(h.shape[0], -1)
    mu = T.dense(h, p["enc.mu.w"], p["enc.mu.b"])
    logvar = T.dense(h, p["enc.logvar.w"], p["enc.logvar.b"])
    return mu, logvar


def reparametrize(mu, logvar, eps):
    """``z = mu + exp(logvar / 2) * eps``."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    if mu.shape != logvar.shape or np.shape(eps) != mu.shape:
        raise T.ShapeError(f"reparametrize: shapes {mu.shape}, {logvar.shape}, {np.shape(eps)} differ")
    return mu + T.exp(logvar * 0.5) * np.asarray(eps, dtype=T.get_default_dtype())


def decode(z, model: VaeModel):
    """Reconstruction with the input window shape; the output layer is linear."""
    z = T.as_tensor(z)
    a, p = model.arch, model.params
    if z.ndim != 2 or z.shape[1] != a.latent_dim:
        raise T.ShapeError(f"latent batch {z.shape} does not match latent_dim {a.latent_dim}")
    ch = a.channels_per_block if a.conv_block_count else a.front_channels
    h = T.dense(z, p["dec.fc.w"], p["dec.fc.b"]).reshape(z.shape[0], ch, a.encoded_len)
    act = T.activation(a.block_activation)
    for i in range(a.conv_block_count):
        h = act(T.conv1d(T.upsample1d(h, 2), p[f"dec.{i}.w"], p[f"dec.{i}.b"], padding="same"))
    if h.shape[2] != a.window_len:
        h = h[:, :, :a.window_len]
    return T.conv1d(h, p["dec.out.w"], p["dec.out.b"], padding="same")


def kl_divergence(mu, logvar):
    """Batch mean of KL(N(mu, exp(logvar)) || N(0, I))."""
    mu, logvar = T.as_tensor(mu), T.as_tensor(logvar)
    per = T.square(mu) + T.exp(logvar) - 1.0 - logvar
    return T.sum_(per) * (0.5 / mu.shape[0])


def elbo_loss(x, xhat, mu, logvar, reduction="mean"):
    """Negative ELBO as ``(total, recon, kl)``.

    ``recon`` is always the mean squared error. With ``reduction="mean"``
    the total is ``recon + kl``; with ``"sum"`` the squared error is summed
    over each window (the unit-variance Gaussian log-likelihood up to a
    factor) and averaged over the batch before adding ``kl``.
    """
    x, xhat = T.as_tensor(x), T.as_tensor(xhat)
    if x.shape != xhat.shape:
        raise T.ShapeError(f"elbo_loss: input {x.shape} and reconstruction {xhat.shape} differ")
    recon = T.mean(T.square(x - xhat))
    kl = kl_divergence(mu, logvar)
    if reduction == "mean":
        total = recon + kl
    elif reduction == "sum":
        per_window = x.size // x.shape[0]
        total = recon * float(per_window) + kl
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    return total, recon, kl


def forward_loss(x, model, eps):
    mu, logvar = encode(x, model)
    z = reparametrize(mu, logvar, eps)
    xhat = decode(z, model)
    return elbo_loss(x, xhat, mu, logvar, model.arch.recon_reduction)


# training -------------------------------------------------------------------

class EarlyStopping:
    """Stop once ``patience`` epochs pass without a new best validation loss."""

    def __init__(self, patience):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = -1
        self.epoch = -1

    def update(self, loss):
        self.epoch += 1
        if loss < self.best:
            self.best = loss
            self.best_epoch = self.epoch
            return False
        return self.epoch - self.best_epoch >= self.patience


def split_validation(n, fraction, rng):
    order = rng.permutation(n)
    n_val = max(1, int(round(n * fraction)))
    if n_val >= n:
        raise ValueError(f"need at least 2 windows to split off validation data, got {n}")
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def _evaluate(x, model, batch_size):
    """Deterministic (eps = 0) validation loss components."""
    totals = np.zeros(3)
    n = len(x)
    for start in range(0, n, batch_size):
        xb = x[start:start + batch_size]
        mu, logvar = encode(xb, model)
        loss = elbo_loss(xb, decode(mu, model), mu, logvar, model.arch.recon_reduction)
        totals += np.array([t.item() for t in loss]) * len(xb)
    return totals / n


def train(train_windows, config: TrainConfig, architecture: VaeArchitecture, progress=None) -> VaeModel:
    """Fit a VAE on normal-only windows with Adam and early stopping.

    The parameters from the epoch with the lowest validation loss are
    restored before returning. Everything (init, split, shuffling, noise) is
    derived from ``config.seed``.
    """
    x = np.ascontiguousarray(train_windows, dtype=T.get_default_dtype())
    if x.ndim != 3 or len(x) == 0:
        raise ValueError("train_windows must be a non-empty (count, channels, time) array")
    rng = np.random.default_rng(config.seed)
    model = VaeModel(architecture, seed=int(rng.integers(2**31)))
    train_idx, val_idx = split_validation(len(x), config.validation_fraction, rng)
    xt, xv = x[train_idx], x[val_idx]
    opt = T.Adam(model.parameters(), lr=config.learning_rate)
    stopper = EarlyStopping(config.patience)
    best_state = model.state_dict()
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(xt))
        running, seen = 0.0, 0
        for b, start in enumerate(range(0, len(xt), config.batch_size)):
            xb = xt[order[start:start + config.batch_size]]
            eps = rng.standard_normal((len(xb), architecture.latent_dim))
            try:
                total, _, _ = forward_loss(xb, model, eps)
                T.backward(total)
                opt.step()
            except FloatingPointError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            running += total.item() * len(xb)
            seen += len(xb)
        try:
            val_total, val_recon, val_kl = _evaluate(xv, model, config.batch_size)
        except FloatingPointError as exc:
            raise TrainingDivergedError(epoch, -1, str(exc)) from exc
        if not math.isfinite(val_total):
            raise TrainingDivergedError(epoch, -1, "validation loss")
        model.history.append({
            "epoch": epoch, "train_loss": running / seen, "val_loss": val_total,
            "recon": val_recon, "kl": val_kl,
        })
        if progress is not None:
            progress(model.history[-1])
        stop = stopper.update(val_total)
        if stopper.best_epoch == epoch:
            best_state = model.state_dict()
        if stop:
            break
    model.load_state_dict(best_state)
    model.best_epoch = stopper.best_epoch
    model.validation_indices = val_idx
    return model


def reconstruct_mse(x, model: VaeModel, batch_size=256, stochastic=False, seed=0):
    """Per-window mean squared reconstruction error.

    Uses the posterior mean by default; ``stochastic=True`` samples the latent
    with a generator seeded by ``seed``.
    """
    x = np.ascontiguousarray(x, dtype=T.get_default_dtype())
    if x.ndim == 2:
        x = x[:, None, :]
    rng = np.random.default_rng(seed) if stochastic else None
    out = np.empty(len(x))
    for start in range(0, len(x), batch_size):
        xb = x[start:start + batch_size]
        mu, logvar = encode(xb, model)
        z = reparametrize(mu, logvar, rng.standard_normal(mu.shape)) if stochastic else mu
        err = xb - decode(z, model).data
        out[start:start + len(xb)] = (err * err).mean(axis=(1, 2))
    return out


# persistence ----------------------------------------------------------------

MAGIC = b"SVAE"
FORMAT_VERSION = 1


def save_checkpoint(model: VaeModel, path):
    """Binary checkpoint: magic, version, JSON descriptor, named f8 blobs."""
    meta = {
        "architecture": asdict(model.arch),
        "seed": model.seed,
        "history": model.history,
        "best_epoch": getattr(model, "best_epoch", None),
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", FORMAT_VERSION, len(model.params)))
    buf.write(struct.pack("<Q", len(blob)))
    buf.write(blob)
    for name, p in model.params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}Q", *p.shape))
        buf.write(np.asarray(p.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> VaeModel:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a SVAE checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    (n,) = struct.unpack_from("<Q", data, 12)
    pos = 20
    meta = json.loads(data[pos:pos + n].decode("utf-8"))
    pos += n
    state = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + ln].decode("utf-8")
            pos += ln
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", data, pos)
            pos += 8 * ndim
            size = int(np.prod(shape)) if ndim else 1
            state[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    model = VaeModel(VaeArchitecture.from_dict(meta["architecture"]), seed=meta["seed"])
    model.load_state_dict(state)
    model.history = meta["history"]
    model.best_epoch = meta.get("best_epoch")
    return model


HISTORY_FIELDS = ("epoch", "train_loss", "val_loss", "recon", "kl")


def write_history_csv(history, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_FIELDS)
        for row in history:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])


__all__ = [
    "EarlyStopping", "TrainConfig", "TrainingDivergedError", "VaeArchitecture", "VaeModel",
    "decode", "elbo_loss", "encode", "kl_divergence", "load_checkpoint", "reconstruct_mse",
    "reparametrize", "save_checkpoint", "train", "write_history_csv",
]

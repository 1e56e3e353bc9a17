"""Convolutional VAE: encoder, decoder, lower bound and LRP score."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, Parameter, Tape, Tensor

LOG_2PI = math.log(2.0 * math.pi)
FORMAT_VERSION = 1
MAGIC = b"SCADAVAE"


@dataclass
class VaeConfig:
    channels: int = 43
    window_hours: int = 24
    conv_specs: list = field(default_factory=lambda: [(3, 32), (3, 64), (3, 128)])
    pool_size: int = 2
    dense_units: list = field(default_factory=lambda: [256, 128])
    latent_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        self.conv_specs = [tuple(int(v) for v in s) for s in self.conv_specs]
        self.dense_units = [int(u) for u in self.dense_units]
        if self.channels < 1 or self.window_hours < 1 or self.latent_dim < 1:
            raise ValueError("channels, window_hours and latent_dim must be positive")
        if self.pool_size < 1:
            raise ValueError("pool_size must be positive")
        div = self.pool_size ** len(self.conv_specs)
        if self.window_hours % div:
            raise ValueError(
                f"window_hours={self.window_hours} not divisible by pool_size^stages={div}")
        for k, n in self.conv_specs:
            if k % 2 == 0 or n < 1:
                raise ValueError(f"bad conv spec {(k, n)}: filter size must be odd, filters >= 1")

    @property
    def bottleneck_length(self):
        return self.window_hours // self.pool_size ** len(self.conv_specs)

    @property
    def flat_units(self):
        last = self.conv_specs[-1][1] if self.conv_specs else self.channels
        return last * self.bottleneck_length

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["conv_specs"] = [list(s) for s in self.conv_specs]
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown VaeConfig keys: {sorted(unknown)}")
        return cls(**d)


def _glorot(rng, shape, fan_in, fan_out):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=shape)


class VaeModel:
    """Parameters, batch-norm statistics and input normalization of one VAE.

    Layer layout (``k`` conv stages, ``d`` hidden dense layers)::

        encoder: [conv -> BN -> relu -> maxpool] * k, [dense -> BN -> relu] * d, dense head
        decoder: [dense -> BN -> relu] * (d + 1), [upscale -> conv -> BN -> relu] * k
                 (the last conv maps to input channels with identity activation)

    Layers feeding a batch norm carry no bias; BN's shift covers it.
    """

    def __init__(self, config: VaeConfig, channel_names=None, norm_mean=None, norm_std=None):
        self.config = config
        C = config.channels
        self.channel_names = list(channel_names) if channel_names is not None else [
            f"ch{i}" for i in range(C)]
        if len(self.channel_names) != C:
            raise ValueError(f"{len(self.channel_names)} channel names for {C} channels")
        self.norm_mean = np.zeros(C) if norm_mean is None else np.asarray(norm_mean, float)
        self.norm_std = np.ones(C) if norm_std is None else np.asarray(norm_std, float)
        if self.norm_mean.shape != (C,) or self.norm_std.shape != (C,):
            raise ValueError("norm stats must have one entry per channel")
        if not (self.norm_std > 0).all():
            raise ValueError("norm std must be positive for every channel")
        self.params: dict[str, Parameter] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.extra: dict = {}
        self._build(np.random.default_rng(config.seed))

    # -- construction ------------------------------------------------------

    def _add(self, name, value):
        self.params[name] = Parameter(value, name)

    def _add_bn(self, name, n):
        self._add(f"{name}.gamma", np.ones(n))
        self._add(f"{name}.beta", np.zeros(n))
        self.bn[name] = BatchNormState.fresh(n)

    def _build(self, rng):
        cfg = self.config
        ci = cfg.channels
        for i, (k, n) in enumerate(cfg.conv_specs):
            self._add(f"enc.conv{i}.w", _glorot(rng, (n, ci, k), ci * k, n * k))
            self._add_bn(f"enc.conv{i}.bn", n)
            ci = n
        units = cfg.flat_units
        for i, u in enumerate(cfg.dense_units):
            self._add(f"enc.dense{i}.w", _glorot(rng, (units, u), units, u))
            self._add_bn(f"enc.dense{i}.bn", u)
            units = u
        self._add("enc.head.w", _glorot(rng, (units, 2 * cfg.latent_dim), units, 2 * cfg.latent_dim))
        self._add("enc.head.b", np.zeros(2 * cfg.latent_dim))

        units = cfg.latent_dim
        for i, u in enumerate(list(reversed(cfg.dense_units)) + [cfg.flat_units]):
            self._add(f"dec.dense{i}.w", _glorot(rng, (units, u), units, u))
            self._add_bn(f"dec.dense{i}.bn", u)
            units = u
        stages = list(reversed(cfg.conv_specs))
        ci = stages[0][1] if stages else cfg.channels
        for i, (k, _) in enumerate(stages):
            last = i == len(stages) - 1
            co = cfg.channels if last else stages[i + 1][1]
            self._add(f"dec.conv{i}.w", _glorot(rng, (co, ci, k), ci * k, co * k))
            if last:
                self._add(f"dec.conv{i}.b", np.zeros(co))
            else:
                self._add_bn(f"dec.conv{i}.bn", co)
            ci = co
        self._add("dec.logvar", np.zeros(cfg.channels))

    # -- helpers -----------------------------------------------------------

    @property
    def output_logvar(self) -> Parameter:
        return self.params["dec.logvar"]

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def normalize(self, values):
        """z-score raw values ``[..., channels]`` (time-major) with the model's stats."""
        return (np.asarray(values, float) - self.norm_mean) / self.norm_std

    def state_arrays(self):
        """Every persisted array by name, parameters first."""
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        out["norm.mean"] = self.norm_mean
        out["norm.std"] = self.norm_std
        return out

    def fingerprint(self):
        h = hashlib.sha256()
        for name, arr in self.state_arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def copy_state(self):
        return {k: np.array(v, copy=True) for k, v in self.state_arrays().items()}

    def restore_state(self, state):
        for name, p in self.params.items():
            p.data = np.array(state[name], copy=True)
        for name, st in self.bn.items():
            st.mean = np.array(state[f"{name}.running_mean"], copy=True)
            st.var = np.array(state[f"{name}.running_var"], copy=True)


# --------------------------------------------------------------------------
# forward graph
# --------------------------------------------------------------------------

@dataclass
class GaussianLatent:
    mu: Tensor
    logvar: Tensor


@dataclass
class Reconstruction:
    mean: Tensor
    logvar: Tensor  # shape [channels, 1], broadcasts over [batch, channels, window]


def _bn(model, name, x, mode, tape, update_stats):
    p = model.params
    return dc.batchnorm_apply(x, p[f"{name}.gamma"], p[f"{name}.beta"], model.bn[name],
                              mode=mode, tape=tape, update_stats=update_stats)


def encode(model: VaeModel, window, mode="infer", tape: Tape | None = None,
           update_stats=True) -> GaussianLatent:
    cfg = model.config
    x = dc.as_tensor(window)
    expect = (cfg.channels, cfg.window_hours)
    if x.data.ndim != 3 or x.shape[1:] != expect:
        raise dc.ShapeError(f"encode: window shape {x.shape} != [batch, {expect[0]}, {expect[1]}]")
    p = model.params
    h = x
    for i in range(len(cfg.conv_specs)):
        w = p[f"enc.conv{i}.w"]
        h = dc.conv1d_apply(h, w, _zero_bias(w.shape[0]), tape)
        h = _bn(model, f"enc.conv{i}.bn", h, mode, tape, update_stats)
        h = dc.activation_apply(h, "relu", tape)
        h = dc.maxpool1d_apply(h, cfg.pool_size, tape)
    h = dc.reshape(h, (x.shape[0], cfg.flat_units), tape)
    for i in range(len(cfg.dense_units)):
        w = p[f"enc.dense{i}.w"]
        h = dc.dense_apply(h, w, _zero_bias(w.shape[1]), tape)
        h = _bn(model, f"enc.dense{i}.bn", h, mode, tape, update_stats)
        h = dc.activation_apply(h, "relu", tape)
    h = dc.dense_apply(h, p["enc.head.w"], p["enc.head.b"], tape)
    mu, logvar = dc.split_last(h, [cfg.latent_dim, cfg.latent_dim], tape)
    return GaussianLatent(mu, logvar)


def reparameterize(latent: GaussianLatent, noise, tape: Tape | None = None) -> Tensor:
    noise = np.asarray(noise, float)
    if noise.shape != latent.mu.shape:
        raise dc.ShapeError(f"noise shape {noise.shape} != latent shape {latent.mu.shape}")
    sigma = dc.exp(dc.scale(latent.logvar, 0.5, tape), tape)
    return dc.add(latent.mu, dc.mul(sigma, Tensor(noise), tape), tape)


def decode(model: VaeModel, z, mode="infer", tape: Tape | None = None,
           update_stats=True) -> Reconstruction:
    cfg = model.config
    z = dc.as_tensor(z)
    if z.data.ndim != 2 or z.shape[1] != cfg.latent_dim:
        raise dc.ShapeError(f"decode: z shape {z.shape} != [batch, {cfg.latent_dim}]")
    p = model.params
    h = z
    for i in range(len(cfg.dense_units) + 1):
        w = p[f"dec.dense{i}.w"]
        h = dc.dense_apply(h, w, _zero_bias(w.shape[1]), tape)
        h = _bn(model, f"dec.dense{i}.bn", h, mode, tape, update_stats)
        h = dc.activation_apply(h, "relu", tape)
    n_first = cfg.conv_specs[-1][1] if cfg.conv_specs else cfg.channels
    h = dc.reshape(h, (z.shape[0], n_first, cfg.bottleneck_length), tape)
    n_stages = len(cfg.conv_specs)
    for i in range(n_stages):
        h = dc.upscale1d_apply(h, cfg.pool_size, tape)
        w = p[f"dec.conv{i}.w"]
        if i == n_stages - 1:
            h = dc.conv1d_apply(h, w, p[f"dec.conv{i}.b"], tape)
        else:
            h = dc.conv1d_apply(h, w, _zero_bias(w.shape[0]), tape)
            h = _bn(model, f"dec.conv{i}.bn", h, mode, tape, update_stats)
            h = dc.activation_apply(h, "relu", tape)
    logvar = dc.reshape(model.output_logvar, (cfg.channels, 1), tape)
    return Reconstruction(h, logvar)


def _zero_bias(n):
    return Tensor(np.zeros(n))


# --------------------------------------------------------------------------
# densities and the bound
# --------------------------------------------------------------------------

def kl_diag_gaussian(latent: GaussianLatent, tape: Tape | None = None) -> Tensor:
    """KL(q || N(0, I)) per batch row."""
    if not (np.isfinite(latent.mu.data).all() and np.isfinite(latent.logvar.data).all()):
        raise FloatingPointError("kl_diag_gaussian: non-finite latent parameters")
    mu2 = dc.square(latent.mu, tape)
    ev = dc.exp(latent.logvar, tape)
    inner = dc.sub(dc.add(mu2, ev, tape), dc.add(latent.logvar, 1.0, tape), tape)
    return dc.scale(dc.sum(inner, axis=1, tape=tape), 0.5, tape)


def gaussian_log_density(x, mean, logvar, tape: Tape | None = None) -> Tensor:
    """log N(x; mean, exp(logvar)) summed over all non-batch axes."""
    x, mean, logvar = dc.as_tensor(x), dc.as_tensor(mean), dc.as_tensor(logvar)
    diff = dc.sub(x, mean, tape)
    quad = dc.mul(dc.square(diff, tape), dc.exp(dc.scale(logvar, -1.0, tape), tape), tape)
    term = dc.add(dc.add(quad, logvar, tape), LOG_2PI, tape)
    full_shape = np.broadcast_shapes(x.shape, mean.shape, logvar.shape)
    if term.shape != full_shape:
        term = dc.add(term, Tensor(np.zeros(full_shape)), tape)
    axes = tuple(range(1, len(full_shape)))
    s = dc.sum(term, axis=axes, tape=tape) if axes else term
    return dc.scale(s, -0.5, tape)


def elbo(model: VaeModel, windows, noise, tape: Tape | None = None, mode="train",
         update_stats=True, return_parts=False):
    """Mean over the batch of ``-KL + log p(x | z)`` with ``z`` reparameterized from ``noise``."""
    x = dc.as_tensor(windows)
    latent = encode(model, x, mode, tape, update_stats)
    z = reparameterize(latent, noise, tape)
    rec = decode(model, z, mode, tape, update_stats)
    recon = gaussian_log_density(x, rec.mean, rec.logvar, tape)
    kl = kl_diag_gaussian(latent, tape)
    out = dc.mean(dc.sub(recon, kl, tape), axis=0, tape=tape)
    if return_parts:
        return out, recon.data, kl.data, rec.mean.data
    return out


# --------------------------------------------------------------------------
# LRP score
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MonteCarlo:
    draws: int
    seed: int = 0

    def __post_init__(self):
        if self.draws < 1:
            raise ValueError("Monte-Carlo LRP needs at least one draw")

    def __str__(self):
        return f"mc({self.draws},{self.seed})"


def parse_sampling(text):
    """``"mode"`` or ``"mc(L,seed)"`` / ``"mc:L:seed"`` -> sampling spec."""
    if isinstance(text, MonteCarlo) or text == "mode":
        return text
    t = str(text).strip().replace(":", ",").replace("(", ",").replace(")", "")
    parts = [s for s in t.split(",") if s]
    if parts and parts[0] == "mc" and len(parts) in (2, 3):
        return MonteCarlo(int(parts[1]), int(parts[2]) if len(parts) == 3 else 0)
    raise ValueError(f"unknown sampling {text!r}; use 'mode' or 'mc(L,seed)'")


UNNORMALIZED_LIMIT = 50.0


def lrp(model: VaeModel, windows, sampling="mode", batch_size=512) -> np.ndarray:
    """Log reconstruction probability per window (already normalized input).

    ``log p(x | z) + log q(z | x)`` with ``z`` at the posterior mean, or
    averaged over ``MonteCarlo.draws`` reparameterized samples.
    """
    x = np.asarray(windows, float)
    if x.ndim == 2:
        x = x[None]
    if np.abs(x).max(initial=0.0) > UNNORMALIZED_LIMIT:
        warnings.warn("window values exceed 50 in normalized units; is the input normalized?",
                      stacklevel=2)
    sampling = parse_sampling(sampling)
    out = np.empty(x.shape[0])
    rng = np.random.default_rng(sampling.seed) if isinstance(sampling, MonteCarlo) else None
    for start in range(0, x.shape[0], batch_size):
        xb = x[start:start + batch_size]
        lat = encode(model, xb, "infer")
        mu, lv = lat.mu.data, lat.logvar.data
        if rng is None:
            rec = decode(model, mu, "infer")
            log_px = gaussian_log_density(xb, rec.mean, rec.logvar).data
            log_qz = -0.5 * (LOG_2PI + lv).sum(axis=1)
            out[start:start + len(xb)] = log_px + log_qz
        else:
            acc = np.zeros(len(xb))
            for _ in range(sampling.draws):
                eps = rng.standard_normal(mu.shape)
                z = mu + np.exp(0.5 * lv) * eps
                rec = decode(model, z, "infer")
                log_px = gaussian_log_density(xb, rec.mean, rec.logvar).data
                log_qz = -0.5 * (LOG_2PI + lv + eps * eps).sum(axis=1)
                acc += log_px + log_qz
            out[start:start + len(xb)] = acc / sampling.draws
    return out


# --------------------------------------------------------------------------
# persistence
# --------------------------------------------------------------------------

class ModelFileError(Exception):
    """Base class for model file problems."""


class UnsupportedVersion(ModelFileError):
    pass


class CorruptModelFile(ModelFileError):
    pass


class InconsistentModel(ModelFileError):
    pass


def save_model(model: VaeModel, path, extra: dict | None = None):
    """Write ``MAGIC | version | header length | JSON header | <f8 blocks | sha256``."""
    arrays = model.state_arrays()
    blocks, offset = [], 0
    for name, arr in arrays.items():
        n = int(np.asarray(arr).size)
        blocks.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "count": n})
        offset += n
    header = {
        "format": "scadavae-model",
        "version": FORMAT_VERSION,
        "config": model.config.to_dict(),
        "channel_names": model.channel_names,
        "blocks": blocks,
        "extra": extra or {},
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    payload = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + body
    Path(path).write_bytes(payload + hashlib.sha256(payload).digest())


def load_model(path) -> VaeModel:
    raw = Path(path).read_bytes()
    head = len(MAGIC) + 12
    if len(raw) < head + 32 or not raw.startswith(MAGIC):
        raise CorruptModelFile(f"{path}: not a scadavae model file or truncated header")
    version, hlen = struct.unpack("<IQ", raw[len(MAGIC):head])
    if version != FORMAT_VERSION:
        raise UnsupportedVersion(f"{path}: format version {version}, supported {FORMAT_VERSION}")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptModelFile(f"{path}: checksum mismatch (truncated or modified file)")
    try:
        header = json.loads(payload[head:head + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModelFile(f"{path}: unreadable header: {exc}") from None
    body = np.frombuffer(payload[head + hlen:], dtype="<f8")
    try:
        config = VaeConfig.from_dict(header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise InconsistentModel(f"{path}: bad config: {exc}") from None
    model = VaeModel(config, header["channel_names"])
    expected = model.state_arrays()
    seen = {}
    for blk in header["blocks"]:
        name = blk["name"]
        if name not in expected:
            raise InconsistentModel(f"{path}: unknown block {name!r}")
        shape = tuple(blk["shape"])
        if shape != np.shape(expected[name]):
            raise InconsistentModel(
                f"{path}: block {name!r} has shape {shape}, config implies {np.shape(expected[name])}")
        lo, n = blk["offset"], blk["count"]
        if n != int(np.prod(shape, dtype=np.int64)) or lo + n > body.size:
            raise InconsistentModel(f"{path}: block {name!r} extent does not match its shape")
        seen[name] = body[lo:lo + n].reshape(shape).astype(np.float64)
    missing = set(expected) - set(seen)
    if missing:
        raise InconsistentModel(f"{path}: missing blocks {sorted(missing)}")
    model.restore_state(seen)
    model.norm_mean = seen["norm.mean"]
    model.norm_std = seen["norm.std"]
    if not (model.norm_std > 0).all():
        raise InconsistentModel(f"{path}: non-positive norm std")
    model.extra = header.get("extra", {})
    return model

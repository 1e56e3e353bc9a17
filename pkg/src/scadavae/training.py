"""Adam training of the VAE by maximizing the lower bound, plus online updates."""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .vae import VaeModel, elbo

log = logging.getLogger(__name__)


class NonFiniteGradient(FloatingPointError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, report=None):
        super().__init__(msg)
        self.report = report


@dataclass
class AdamState:
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")


def adam_step(params, state: AdamState, grads=None):
    """One Adam update minimizing the quantity whose gradient is in ``p.grad``.

    ``grads`` optionally overrides ``p.grad`` (same order as ``params``).
    Refuses the whole step if any gradient is non-finite.
    """
    params = list(params)
    grads = [p.grad for p in params] if grads is None else list(grads)
    for p, g in zip(params, grads):
        if g is None or g.shape != p.data.shape:
            raise ValueError(f"gradient for {getattr(p, 'name', '?')} missing or misshapen")
        if not np.isfinite(g).all():
            raise NonFiniteGradient(f"non-finite gradient in parameter block {p.name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g in zip(params, grads):
        key = p.name or p.id
        m = state.m.get(key)
        if m is None:
            m = state.m[key] = np.zeros_like(p.data)
            state.v[key] = np.zeros_like(p.data)
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data = p.data - state.alpha * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


def clip_global_norm(params, max_norm):
    total = float(np.sqrt(sum(float((p.grad * p.grad).sum()) for p in params)))
    if max_norm and total > max_norm:
        k = max_norm / total
        for p in params:
            p.grad = p.grad * k
    return total


@dataclass
class TrainConfig:
    batch_size: int = 64
    epochs: int = 200
    learning_rate: float = 1e-3
    clip_norm: float | None = 5.0
    patience: int | None = None
    shuffle_seed: int | None = None  # None -> derived from the fit seed

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (batch normalization)")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    mean_elbo: float
    valid_elbo: float | None
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    adam: AdamState | None = None
    stopped_early: bool = False

    def table(self):
        lines = [f"{'epoch':>5}  {'mean_elbo':>14}  {'valid_elbo':>14}  {'seconds':>8}"]
        for r in self.epochs:
            ve = "" if r.valid_elbo is None else f"{r.valid_elbo:14.4f}"
            lines.append(f"{r.epoch:5d}  {r.mean_elbo:14.4f}  {ve:>14}  {r.seconds:8.2f}")
        return "\n".join(lines)

    def write_csv(self, path, comments=()):
        with open(path, "w") as fh:
            for c in comments:
                fh.write(f"# {c}\n")
            fh.write("epoch,mean_elbo,valid_elbo,seconds\n")
            for r in self.epochs:
                ve = "" if r.valid_elbo is None else repr(r.valid_elbo)
                fh.write(f"{r.epoch},{r.mean_elbo!r},{ve},{r.seconds:.3f}\n")


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    return np.array_split(order, max(1, n // batch_size))


def _step(model, x, noise, adam, clip_norm):
    model.zero_grad()
    tape = dc.Tape()
    bound = elbo(model, x, noise, tape, mode="train")
    value = float(bound.data)
    if not np.isfinite(value):
        return value
    tape.backward(dc.scale(bound, -1.0, tape))
    params = model.parameters()
    if clip_norm:
        clip_global_norm(params, clip_norm)
    adam_step(params, adam)
    return value


def evaluate_elbo(model, windows, seed=0, batch_size=256):
    """Mean lower bound in infer mode with one seeded noise draw per window."""
    rng = np.random.default_rng(seed)
    total = 0.0
    for start in range(0, len(windows), batch_size):
        xb = windows[start:start + batch_size]
        noise = rng.standard_normal((len(xb), model.config.latent_dim))
        total += float(elbo(model, xb, noise, mode="infer").data) * len(xb)
    return total / len(windows)


def finalize_batchnorm(model, windows, batch_size, rng):
    """Replace running statistics by an exact average over one training-mode pass."""
    for st in model.bn.values():
        st.mean = np.zeros_like(st.mean)
        st.var = np.zeros_like(st.var)
        st.count = 0
    for idx in _batches(len(windows), batch_size, rng):
        if len(idx) < 2:
            continue
        noise = rng.standard_normal((len(idx), model.config.latent_dim))
        elbo(model, windows[idx], noise, mode="train")
    for st in model.bn.values():
        st.count = None


def fit(model: VaeModel, train, valid=None, config: TrainConfig | None = None, seed=0,
        progress=None) -> TrainReport:
    """Train on normalized windows ``[N, channels, W]``; deterministic given ``seed``."""
    config = config or TrainConfig()
    train = np.asarray(train, float)
    if len(train) < 2:
        raise ValueError("need at least two training windows")
    ss = np.random.SeedSequence(seed)
    shuffle_ss, noise_ss, final_ss = ss.spawn(3)
    if config.shuffle_seed is not None:
        shuffle_ss = np.random.SeedSequence(config.shuffle_seed)
    shuffle_rng = np.random.default_rng(shuffle_ss)
    noise_rng = np.random.default_rng(noise_ss)
    adam = AdamState(alpha=config.learning_rate)
    report = TrainReport(adam=adam)
    good = model.copy_state()
    best_valid, best_state, since_best = -np.inf, None, 0
    for st in model.bn.values():
        st.count = None

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        values, weights = [], []
        for idx in _batches(len(train), config.batch_size, shuffle_rng):
            noise = noise_rng.standard_normal((len(idx), model.config.latent_dim))
            v = _step(model, train[idx], noise, adam, config.clip_norm)
            if not np.isfinite(v):
                model.restore_state(good)
                raise TrainingDiverged(
                    f"non-finite ELBO in epoch {epoch}; restored end-of-epoch {epoch - 1} state",
                    report)
            values.append(v)
            weights.append(len(idx))
        mean_elbo = float(np.average(values, weights=weights))
        valid_elbo = None
        if valid is not None and len(valid):
            valid_elbo = evaluate_elbo(model, valid, seed=seed)
        rec = EpochRecord(epoch, mean_elbo, valid_elbo, time.perf_counter() - t0)
        report.epochs.append(rec)
        good = model.copy_state()
        if progress:
            progress(rec)
        log.debug("epoch %d mean_elbo %.4f", epoch, mean_elbo)
        if config.patience is not None and valid_elbo is not None:
            if valid_elbo > best_valid:
                best_valid, best_state, since_best = valid_elbo, good, 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    model.restore_state(best_state)
                    report.stopped_early = True
                    break

    finalize_batchnorm(model, train, config.batch_size, np.random.default_rng(final_ss))
    return report


def online_update(model: VaeModel, windows, state: AdamState | None = None, steps=1, seed=0,
                  batch_size=64, clip_norm=5.0) -> AdamState:
    """Run ``steps`` Adam steps on new normalized windows only.

    Input normalization is left untouched; batch-norm running statistics
    track the new data with their exponential moving average.
    """
    windows = np.asarray(windows, float)
    if steps <= 0:
        return state or AdamState()
    if len(windows) < 2:
        raise ValueError("online update needs a batch of at least two windows")
    state = state or AdamState()
    rng = np.random.default_rng(seed)
    for st in model.bn.values():
        st.count = None
    bs = min(batch_size, len(windows))
    for _ in range(steps):
        idx = rng.choice(len(windows), size=bs, replace=False)
        noise = rng.standard_normal((bs, model.config.latent_dim))
        v = _step(model, windows[idx], noise, state, clip_norm)
        if not np.isfinite(v):
            raise TrainingDiverged("non-finite ELBO during online update")
    return state

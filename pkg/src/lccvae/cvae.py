"""Conditional VAE with MLP encoder/decoder, trained on the negated ELBO.

Encoder: concat(x, y) -> (mu, log_var), tanh hidden layers.
Decoder: concat(x, z) -> mean series; Gaussian likelihood with fixed
``likelihood_sigma``.  Prior on z is N(0, I).
"""
from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

log = logging.getLogger(__name__)

LOG_VAR_MIN, LOG_VAR_MAX = -10.0, 10.0
CKPT_MAGIC = b"LCCV"
CKPT_VERSION = 1

__all__ = [
    "CvaeConfig",
    "CvaeModel",
    "LatentGaussian",
    "TrainingDivergedError",
    "init_model",
    "param_count",
    "encode",
    "encode_tensors",
    "reparameterize",
    "decode",
    "decode_tensors",
    "kl_diag_gaussian_to_std_normal",
    "elbo_loss",
    "train_cvae",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, batch_ids, detail: str = ""):
        self.step = step
        self.batch_ids = list(int(i) for i in batch_ids)
        super().__init__(f"non-finite loss at step {step}, batch ids {self.batch_ids}"
                         + (f": {detail}" if detail else ""))


@dataclass(frozen=True)
class CvaeConfig:
    d_x: int = 3
    T: int = 240
    d_z: int = 3
    hidden_widths: tuple[int, ...] = (128, 128)
    likelihood_sigma: float = 0.1
    epochs: int = 300
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    n_samples: int = 1
    kl_weight: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.d_z < 1 or self.T < 2 or self.d_x < 1:
            raise ValueError(f"need d_z >= 1, T >= 2, d_x >= 1 (got {self.d_z}, {self.T}, {self.d_x})")
        if not self.hidden_widths or min(self.hidden_widths) < 1:
            raise ValueError("hidden_widths must be a non-empty list of positive widths")
        if self.likelihood_sigma <= 0:
            raise ValueError("likelihood_sigma must be positive")
        if self.batch_size < 1 or self.epochs < 0 or self.n_samples < 1:
            raise ValueError("batch_size and n_samples must be >= 1, epochs >= 0")
        if self.seed < 0 or self.lr <= 0 or self.kl_weight < 0:
            raise ValueError("seed must be >= 0, lr > 0 and kl_weight >= 0")

    @property
    def encoder_sizes(self) -> list[int]:
        return [self.d_x + self.T, *self.hidden_widths, 2 * self.d_z]

    @property
    def decoder_sizes(self) -> list[int]:
        return [self.d_x + self.d_z, *self.hidden_widths, self.T]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CvaeConfig":
        return cls(**d)


def param_count(cfg: CvaeConfig) -> int:
    total = 0
    for sizes in (cfg.encoder_sizes, cfg.decoder_sizes):
        total += sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    return total


@dataclass
class LatentGaussian:
    mu: np.ndarray
    log_var: np.ndarray

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)


@dataclass
class CvaeModel:
    config: CvaeConfig
    params: list[np.ndarray]
    realization_id: int = 0
    loss_trace: list[float] = field(default_factory=list)

    @property
    def n_encoder_params(self) -> int:
        return 2 * (len(self.config.encoder_sizes) - 1)

    def bind(self, tape: Tape | None = None) -> list[Tensor]:
        """Parameters as tape leaves (or constants when ``tape`` is None)."""
        if tape is None:
            return [Tensor(p) for p in self.params]
        return [tape.leaf(p) for p in self.params]

    def copy(self) -> "CvaeModel":
        return CvaeModel(self.config, [p.copy() for p in self.params], self.realization_id,
                         list(self.loss_trace))


def _rng(seed: int, realization_id: int, stream: int) -> np.random.Generator:
    # realization -1 (the pooled joint model) maps to entropy word 0
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, realization_id + 1, stream])))


def init_model(cfg: CvaeConfig, realization_id: int = 0) -> CvaeModel:
    """Glorot-normal weights, zero biases; deterministic in (seed, realization_id)."""
    rng = _rng(cfg.seed, realization_id, 0)
    params = []
    for sizes in (cfg.encoder_sizes, cfg.decoder_sizes):
        for a, b in zip(sizes[:-1], sizes[1:]):
            params.append(rng.normal(0.0, math.sqrt(2.0 / (a + b)), size=(a, b)))
            params.append(np.zeros(b))
    return CvaeModel(cfg, params, realization_id)


def _mlp(h: Tensor, layers: Sequence[Tensor]) -> Tensor:
    n = len(layers) // 2
    for i in range(n):
        h = ad.add_row(ad.matmul(h, layers[2 * i]), layers[2 * i + 1])
        if i < n - 1:
            h = ad.tanh(h)
    return h


def _as_batch(a, width: int, name: str) -> tuple[np.ndarray, bool]:
    a = np.asarray(a, dtype=np.float64)
    single = a.ndim == 1
    if single:
        a = a[None, :]
    if a.ndim != 2 or a.shape[1] != width:
        raise ValueError(f"{name}: expected length {width}, got shape {a.shape}")
    return a, single


def encode_tensors(model: CvaeModel, X, Y, params: Sequence[Tensor]) -> tuple[Tensor, Tensor]:
    """Batched encoder on tape tensors: returns (mu, clamped log_var), each (b, d_z)."""
    cfg = model.config
    X, _ = _as_batch(X, cfg.d_x, "x")
    Y, _ = _as_batch(Y, cfg.T, "y")
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"x and y batch sizes differ: {X.shape[0]} vs {Y.shape[0]}")
    out = _mlp(Tensor(np.concatenate([X, Y], axis=1)), params[: model.n_encoder_params])
    mu = ad.slice_cols(out, 0, cfg.d_z)
    log_var = ad.clip(ad.slice_cols(out, cfg.d_z, 2 * cfg.d_z), LOG_VAR_MIN, LOG_VAR_MAX)
    return mu, log_var


def encode(model: CvaeModel, x, y) -> LatentGaussian:
    """Posterior q(z | x, y).  Accepts a single (x, y) or a batch of rows."""
    _, single = _as_batch(x, model.config.d_x, "x")
    mu, lv = encode_tensors(model, x, y, model.bind())
    mu, lv = mu.numpy(), lv.numpy()
    if single:
        mu, lv = mu[0], lv[0]
    return LatentGaussian(mu, lv)


def reparameterize(q: LatentGaussian, rng: np.random.Generator | None = None, eps=None) -> np.ndarray:
    """z = mu + exp(log_var / 2) * eps with eps ~ N(0, I) unless given."""
    if eps is None:
        eps = rng.standard_normal(np.shape(q.mu))
    return q.mu + np.exp(0.5 * q.log_var) * eps


def decode_tensors(model: CvaeModel, X, z: Tensor, params: Sequence[Tensor]) -> Tensor:
    cfg = model.config
    X, _ = _as_batch(X, cfg.d_x, "x")
    if z.shape != (X.shape[0], cfg.d_z):
        raise ValueError(f"z: expected shape {(X.shape[0], cfg.d_z)}, got {z.shape}")
    return _mlp(ad.concat_cols(Tensor(X), z), params[model.n_encoder_params:])


def decode(model: CvaeModel, x, z, emit_noise: bool = False,
           rng: np.random.Generator | None = None) -> np.ndarray:
    """Mean series of p(y | x, z); with ``emit_noise`` add likelihood noise."""
    X, single = _as_batch(x, model.config.d_x, "x")
    Z, _ = _as_batch(z, model.config.d_z, "z")
    y = decode_tensors(model, X, Tensor(Z), model.bind()).numpy()
    if emit_noise:
        y = y + model.config.likelihood_sigma * rng.standard_normal(y.shape)
    return y[0] if single else y


def _kl_rows(mu: Tensor, log_var: Tensor) -> Tensor:
    # 0.5 * sum(exp(lv) + mu^2 - 1 - lv) per row
    inner = ad.sub(ad.add(ad.exp(log_var), ad.square(mu)), ad.add(log_var, 1.0))
    return ad.scale(ad.sum_rows(inner), 0.5)


def kl_diag_gaussian_to_std_normal(q) -> float | np.ndarray:
    """KL(N(mu, diag exp(log_var)) || N(0, I)); per row for batched input."""
    if isinstance(q, tuple):
        return _kl_rows(*q)
    mu = np.atleast_2d(np.asarray(q.mu, dtype=np.float64))
    lv = np.atleast_2d(np.asarray(q.log_var, dtype=np.float64))
    kl = _kl_rows(Tensor(mu), Tensor(lv)).numpy()
    return float(kl[0]) if np.ndim(q.mu) == 1 else kl


def elbo_loss(model: CvaeModel, X, Y, rng: np.random.Generator | None = None, eps=None,
              params: Sequence[Tensor] | None = None) -> Tensor:
    """Negated ELBO averaged over the batch (a scalar tensor).

    ``eps`` fixes the reparameterization noise, shape (b, d_z) or
    (n_samples, b, d_z); otherwise it is drawn from ``rng``.
    """
    cfg = model.config
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    Y = np.atleast_2d(np.asarray(Y, dtype=np.float64))
    b = X.shape[0]
    if b == 0:
        raise ValueError("elbo_loss: empty batch")
    if params is None:
        params = model.bind()
    mu, lv = encode_tensors(model, X, Y, params)
    if eps is None:
        eps = rng.standard_normal((cfg.n_samples, b, cfg.d_z))
    eps = np.asarray(eps, dtype=np.float64)
    if eps.ndim == 2:
        eps = eps[None]
    std = ad.exp(ad.scale(lv, 0.5))
    s2 = cfg.likelihood_sigma ** 2
    const = cfg.T * math.log(cfg.likelihood_sigma * math.sqrt(2.0 * math.pi))
    nll = None
    for e in eps:
        z = ad.add(mu, ad.mul(std, Tensor(e)))
        resid = ad.sub(decode_tensors(model, X, z, params), Tensor(Y))
        term = ad.scale(ad.sum_rows(ad.square(resid)), 0.5 / s2)
        nll = term if nll is None else ad.add(nll, term)
    nll = ad.scale(nll, 1.0 / len(eps))
    per_item = ad.add(ad.scale(_kl_rows(mu, lv), cfg.kl_weight), nll)
    return ad.add(ad.mean_all(per_item), const)


PenaltyFn = Callable[[Sequence[Tensor], np.random.Generator], Tensor]


def train_cvae(X: np.ndarray, Y: np.ndarray, cfg: CvaeConfig, realization_id: int = 0,
               penalty: PenaltyFn | None = None, init: CvaeModel | None = None,
               phase: str = "train") -> CvaeModel:
    """Adam on shuffled minibatches for ``cfg.epochs`` epochs.

    ``penalty(params, rng)`` is added to every step's loss (used by the
    latent constraint).  The returned model's ``loss_trace`` holds the mean
    step loss of each epoch.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    n = X.shape[0]
    if n < cfg.batch_size:
        raise ValueError(f"train_cvae: {n} samples is fewer than batch_size={cfg.batch_size}")
    model = init.copy() if init is not None else init_model(cfg, realization_id)
    model.realization_id = realization_id
    model.loss_trace = []
    rng = _rng(cfg.seed, realization_id, 1)
    state = ad.AdamState.zeros_like(model.params)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            tape = Tape()
            params = model.bind(tape)
            try:
                loss = elbo_loss(model, X[ids], Y[ids], rng, params=params)
                if penalty is not None:
                    loss = ad.add(loss, penalty(params, rng))
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(step, ids, str(exc)) from exc
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDivergedError(step, ids)
            grads = ad.backward(tape, loss)
            model.params, state = ad.adam_step(model.params, [grads[p] for p in params], state, lr=cfg.lr)
            total += value
            n_batches += 1
            step += 1
        model.loss_trace.append(total / n_batches)
        if epoch % 50 == 0 or epoch == cfg.epochs - 1:
            log.debug("phase=%s realization=%d epoch=%d loss=%.6g", phase, realization_id, epoch,
                      model.loss_trace[-1])
    return model


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(model: CvaeModel, path) -> None:
    """LCCV: magic, u32 version, u32-length JSON config block, i32 realization,
    u32 tensor count, then per tensor u32 ndim, u32 dims, f64 values."""
    buf = io.BytesIO()
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<iI", model.realization_id, len(model.params)))
    for p in model.params:
        buf.write(struct.pack("<I", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> CvaeModel:
    raw = Path(path).read_bytes()
    off = 0

    def take(fmt):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise ValueError(f"truncated checkpoint at offset {off}: need {size} more bytes")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r} at offset 0")
    off = 4
    version, n_cfg = take("<II")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version} at offset 4")
    if off + n_cfg > len(raw):
        raise ValueError(f"truncated checkpoint config block at offset {off}")
    cfg = CvaeConfig.from_dict(json.loads(raw[off:off + n_cfg]))
    off += n_cfg
    rid, n_tensors = take("<iI")
    params = []
    for _ in range(n_tensors):
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        count = int(np.prod(shape))
        if off + 8 * count > len(raw):
            raise ValueError(f"truncated tensor data at offset {off}")
        params.append(np.frombuffer(raw, "<f8", count, off).reshape(shape).astype(np.float64))
        off += 8 * count
    if off != len(raw):
        raise ValueError(f"{len(raw) - off} trailing bytes after offset {off}")
    model = CvaeModel(cfg, params, rid)
    expected = [tuple(s) for a, b in _layer_pairs(cfg) for s in ((a, b), (b,))]
    if [p.shape for p in params] != expected:
        raise ValueError("checkpoint tensor shapes do not match its config")
    return model


def _layer_pairs(cfg: CvaeConfig):
    for sizes in (cfg.encoder_sizes, cfg.decoder_sizes):
        yield from zip(sizes[:-1], sizes[1:])

"""Noise schedule, epsilon-prediction training, guided ancestral sampling."""
from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .backbone import NULL_ID, forward
from .errors import ArgumentError, ConfigurationError, NumericalError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiffusionSchedule:
    """Linear beta schedule. Arrays are indexed by timestep; index 0 is the
    clean-data convention (beta 0, alpha_bar 1)."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def check_t(self, t):
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ArgumentError(f"timestep out of range [1, {self.T}]: {t.min()}..{t.max()}")
        return t


def make_schedule(T=1000, beta_start=1e-4, beta_end=0.02):
    if int(T) < 1:
        raise ArgumentError(f"T must be >= 1, got {T}")
    if not 0.0 < beta_start < beta_end < 1.0:
        raise ArgumentError(f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
    T = int(T)
    betas = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T, dtype=np.float64)])
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return DiffusionSchedule(T, betas, alphas, alpha_bars)


def _per_item(values, ndim):
    return np.asarray(values, dtype=np.float64).reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0, t, eps, schedule):
    """Closed-form forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise ArgumentError(f"eps shape {eps.shape} != x0 shape {x0.shape}")
    t = schedule.check_t(t)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = _per_item(ab, x0.ndim)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    return out.astype(x0.dtype, copy=False)


def score_from_eps(eps_hat, t, schedule):
    """Score of ``p(x_t | x_0)`` implied by a noise prediction: ``-eps / sqrt(1 - ab_t)``."""
    t = schedule.check_t(t)
    eps_hat = np.asarray(eps_hat)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = _per_item(ab, eps_hat.ndim)
    return -eps_hat / np.sqrt(1.0 - ab)


def eps_from_score(score, t, schedule):
    t = schedule.check_t(t)
    score = np.asarray(score)
    ab = schedule.alpha_bars[t]
    if ab.ndim:
        ab = _per_item(ab, score.ndim)
    return -score * np.sqrt(1.0 - ab)


def cfg_combine(eps_cond, eps_uncond, omega):
    """Classifier-free guidance: ``(1 + omega) eps_cond - omega eps_uncond``."""
    if omega < 0:
        raise ArgumentError(f"guidance scale must be >= 0, got {omega}")
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise ArgumentError(f"shapes differ: {eps_cond.shape} vs {eps_uncond.shape}")
    if omega == 0:
        return eps_cond.copy()
    return (1.0 + omega) * eps_cond - omega * eps_uncond


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def caption_features(model, token_ids):
    if not model.config.vocab_size:
        raise ConfigurationError("training and sampling need a token embedder (vocab_size > 0)")
    return model.encode_text(token_ids)


def draw_training_noise(rng, batch_size, image_shape, T, cfg_drop_prob, dtype=np.float32):
    """Per-item timesteps in [1, T], noise, and the caption-drop mask, in that draw order."""
    t = rng.integers(1, T, batch_size)
    eps = rng.normal((batch_size,) + tuple(image_shape), dtype=dtype)
    drop = rng.uniform(batch_size) < cfg_drop_prob
    return t, eps, drop


def training_loss(model, batch, schedule, rng, cfg_drop_prob=0.1, forward_fn=forward):
    """Noise-prediction MSE on one batch; returns ``(loss, {name: grad})``.

    ``batch`` is ``(images [B, C, S, S], token_ids [B, L])``. Captions are
    replaced by the NULL caption with probability ``cfg_drop_prob``.
    """
    images, ids = batch
    images = np.asarray(images, dtype=model.dtype)
    ids = np.array(ids, copy=True)
    t, eps, drop = draw_training_noise(rng, images.shape[0], images.shape[1:], schedule.T,
                                       cfg_drop_prob, dtype=model.dtype)
    ids[drop] = NULL_ID
    x_t = q_sample(images, t, eps, schedule)
    model.zero_grad()
    pred = forward_fn(model, x_t, t, caption_features(model, ids))
    loss = nx.mse(pred, eps)
    if loss.requires_grad:
        loss.backward()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in model.params.items()}
    return float(loss.data), grads


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params, weight_decay=0.03, betas=(0.9, 0.9), eps=1e-8):
        self.weight_decay = weight_decay
        self.betas = tuple(betas)
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data *= 1.0 - lr * self.weight_decay
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainState:
    model: object
    optimizer: AdamW
    step: int = 0
    base_lr: float = 2e-4
    warmup: int = 5000
    batch_size: int = 256
    cfg_drop_prob: float = 0.1
    losses: list = field(default_factory=list)

    def lr_at(self, step):
        if self.warmup <= 0:
            return self.base_lr
        return self.base_lr * min(1.0, step / self.warmup)


def new_train_state(model, base_lr=2e-4, warmup=5000, weight_decay=0.03, betas=(0.9, 0.9),
                    batch_size=256, cfg_drop_prob=0.1):
    opt = AdamW(model.params, weight_decay=weight_decay, betas=betas)
    return TrainState(model, opt, 0, base_lr, warmup, batch_size, cfg_drop_prob)


def smoothed(values, window=100):
    """Trailing moving average."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, v.size + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def train_loop(state, dataset, n_steps, schedule, rng, callbacks=()):
    """Run ``n_steps`` AdamW updates with linear warmup, then constant lr.

    ``dataset`` is ``(images [N, C, S, S], token_ids [N, L])``. Each callback
    is called as ``cb(state, loss, lr)`` after every step.
    """
    images, ids = dataset
    n = len(images)
    if n == 0:
        raise ArgumentError("dataset is empty")
    model = state.model
    for _ in range(int(n_steps)):
        idx = rng.integers(0, n - 1, state.batch_size)
        batch = (images[idx], ids[idx])
        step = state.step + 1
        lr = state.lr_at(step)
        loss, grads = training_loss(model, batch, schedule, rng, state.cfg_drop_prob)
        if not math.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
            pnorm = math.sqrt(sum(float((p.data.astype(np.float64) ** 2).sum()) for p in model.parameters()))
            raise NumericalError(f"non-finite loss at step {step} (lr={lr:.3g}, loss={loss}, "
                                 f"parameter norm={pnorm:.4g})")
        state.optimizer.step(model.params, grads, lr)
        state.step = step
        state.losses.append(loss)
        for cb in callbacks:
            cb(state, loss, lr)
    return state


class MetricLog:
    """Append-only ``step,loss,lr,wall_clock`` CSV."""

    def __init__(self, path):
        self.path = path
        self._t0 = time.perf_counter()
        if not os.path.exists(path):
            with open(path, "w", newline="") as f:
                csv.writer(f, lineterminator="\n").writerow(["step", "loss", "lr", "wall_clock"])

    def __call__(self, state, loss, lr):
        with open(self.path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([state.step, f"{loss:.8g}", f"{lr:.8g}",
                                    f"{time.perf_counter() - self._t0:.3f}"])


class EveryN:
    """Call ``fn(state)`` every ``n`` steps."""

    def __init__(self, n, fn):
        self.n, self.fn = int(n), fn

    def __call__(self, state, loss, lr):
        if self.n > 0 and state.step % self.n == 0:
            self.fn(state)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sampling_timesteps(T, n_steps):
    if not 1 <= n_steps <= T:
        raise ArgumentError(f"n_steps must be in [1, {T}], got {n_steps}")
    stride = T // n_steps
    return [T - k * stride for k in range(n_steps)]


def sample(model, schedule, captions, omega=3.0, n_steps=50, rng=None, clip=True, forward_fn=forward):
    """Strided ancestral sampling with classifier-free guidance.

    ``captions`` are token ids ``[B, L]``. ``omega=None`` runs the purely
    conditional sampler (no unconditional branch). Chain ``i`` draws its noise
    from ``rng.spawn(i)``: first ``x_T``, then one draw per non-final step.
    """
    if omega is not None and omega < 0:
        raise ArgumentError(f"guidance scale must be >= 0, got {omega}")
    if rng is None:
        rng = nx.RngState(0)
    c = model.config
    captions = np.asarray(captions)
    B = captions.shape[0]
    shape = (c.img_channels, c.img_size, c.img_size)
    dtype = model.dtype
    chains = [rng.spawn(i) for i in range(B)]
    x = np.stack([r.normal(shape, dtype=dtype) for r in chains])
    ts = sampling_timesteps(schedule.T, n_steps)
    with nx.no_grad():
        text_c = caption_features(model, captions)
        text_u = caption_features(model, model.null_ids(B)) if omega else None
        for k, t in enumerate(ts):
            s = ts[k + 1] if k + 1 < len(ts) else 0
            tb = np.full(B, t, dtype=np.int64)
            eps = np.asarray(forward_fn(model, x, tb, text_c).data)
            if omega:
                eps_u = np.asarray(forward_fn(model, x, tb, text_u).data)
                eps = cfg_combine(eps, eps_u, omega)
            ab_t, ab_s = schedule.alpha_bars[t], schedule.alpha_bars[s]
            alpha = ab_t / ab_s
            beta = 1.0 - alpha
            x = ((x - (beta / math.sqrt(1.0 - ab_t)) * eps) / math.sqrt(alpha)).astype(dtype, copy=False)
            if s > 0:
                noise = np.stack([r.normal(shape, dtype=dtype) for r in chains])
                x = (x + math.sqrt(beta) * noise).astype(dtype, copy=False)
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x


def clone_rng(rng):
    return copy.deepcopy(rng)

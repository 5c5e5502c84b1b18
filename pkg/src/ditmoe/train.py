"""Training objective, optimiser, EMA and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ditmoe import autograd as ag
from ditmoe.checkpoint import Checkpoint
from ditmoe.config import ModelConfig
from ditmoe.data import ImageSource, MixedSampler
from ditmoe.model import forward, init_params, split_output
from ditmoe.moe import balance_loss_batched
from ditmoe.schedule import (
    NoiseSchedule,
    build_linear_schedule,
    model_log_variance,
    posterior_mean_variance,
    predict_x0_from_eps,
    q_sample,
    rf_interpolate,
    vlb_term,
)

log = logging.getLogger(__name__)

OBJECTIVES = ("ddpm", "rectified_flow")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    ema_decay: float = 0.9999
    label_dropout_p: float = 0.1
    batch_size: int = 32
    steps: int = 1000
    objective: str = "ddpm"
    seed: int = 0
    mix_ratio: tuple[float, float] = (1.0, 5.0)
    grad_clip: float = 1.0
    diffusion_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")
        if not 0 <= self.label_dropout_p < 1:
            raise ValueError("label_dropout_p must lie in [0, 1)")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")


# ---------------------------------------------------------------------------
# conditioning dropout
# ---------------------------------------------------------------------------


def label_dropout(c: int, p_drop: float, rng: np.random.Generator) -> int | None:
    """Return ``None`` (the null label) with probability ``p_drop``, else ``c``."""
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must lie in [0, 1)")
    return None if rng.random() < p_drop else c


def drop_labels(labels: np.ndarray, p_drop: float, rng: np.random.Generator, null_label: int) -> np.ndarray:
    if not 0 <= p_drop < 1:
        raise ValueError("p_drop must lie in [0, 1)")
    drop = rng.random(labels.shape[0]) < p_drop
    return np.where(drop, null_label, labels)


# ---------------------------------------------------------------------------
# optimiser and EMA
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(state: AdamState, params: dict, grads: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
               weight_decay: float = 0.0) -> tuple[dict, AdamState]:
    """One bias-corrected AdamW update; returns new params and state."""
    b1, b2 = betas
    k = state.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**k)
        v_hat = v / (1 - b2**k)
        upd = m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            upd = upd + weight_decay * p
        new_params[name] = (p - lr * upd).astype(p.dtype, copy=False)
        new_m[name] = m.astype(p.dtype, copy=False)
        new_v[name] = v.astype(p.dtype, copy=False)
    return new_params, AdamState(new_m, new_v, k)


def ema_update(ema: dict, params: dict, decay: float) -> dict:
    if set(ema) != set(params):
        raise KeyError("EMA and parameter key sets differ")
    return {k: (decay * ema[k] + (1 - decay) * params[k]).astype(ema[k].dtype, copy=False) for k in ema}


def clip_grad_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    total = float(np.sqrt(sum(float(np.sum(np.asarray(g, dtype=np.float64) ** 2)) for g in grads.values())))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-6)
        grads = {k: (g * scale).astype(g.dtype, copy=False) for k, g in grads.items()}
    return grads, total


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def loss_terms(params: dict, cfg: ModelConfig, schedule: NoiseSchedule, x0: np.ndarray, t, eps: np.ndarray,
               c: np.ndarray, objective: str = "ddpm") -> dict:
    """Loss terms for fixed noise draws.

    For ``ddpm`` ``t`` holds integer timesteps; for ``rectified_flow`` it holds
    continuous times in ``[0, 1]``. Returns tensors ``mse``, ``vlb``,
    ``balance``, ``total`` plus ``routings`` from the forward pass.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps, dtype=x0.dtype)
    B = x0.shape[0]
    if objective == "ddpm":
        xt = q_sample(schedule, x0, t, eps)
        model_t = np.asarray(t)
        target = eps
    elif objective == "rectified_flow":
        xt, target = rf_interpolate(x0, eps, t)
        model_t = np.asarray(t, dtype=np.float64) * (schedule.T - 1)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    fwd = forward(params, cfg, xt, model_t, c)
    pred, v_raw = split_output(fwd.out, cfg)
    mse = ((pred - target) ** 2).mean()
    zero = ag.Tensor(np.zeros((), dtype=mse.dtype))
    vlb = zero
    if objective == "ddpm" and cfg.learned_sigma:
        x0_hat = predict_x0_from_eps(schedule, xt, t, pred.data)
        mean, _ = posterior_mean_variance(schedule, x0_hat, xt, t)
        logvar = model_log_variance(schedule, t, v_raw)
        vlb = vlb_term(schedule, mean, logvar, x0, xt, t).mean()
    if fwd.routings:
        bal = None
        for _, routing in fwd.routings:
            term = balance_loss_batched(routing.probs, routing.selected, cfg.moe, B)
            bal = term if bal is None else bal + term
        balance = bal * (1.0 / len(fwd.routings))
    else:
        balance = zero
    total = mse + vlb + balance
    if not np.isfinite(total.data):
        raise FloatingPointError("non-finite training loss")
    return {"mse": mse, "vlb": vlb, "balance": balance, "total": total, "routings": fwd.routings}


def draw_noise(cfg: ModelConfig, schedule: NoiseSchedule, batch: int, rng: np.random.Generator, objective: str,
               dtype=np.float32):
    """Per-item timesteps (uniform over all steps) and standard normal noise."""
    if objective == "ddpm":
        t = rng.integers(0, schedule.T, size=batch)
    else:
        t = rng.random(batch)
    shape = (batch, cfg.in_channels, cfg.input_size, cfg.input_size)
    eps = rng.standard_normal(shape).astype(dtype)
    return t, eps


def training_loss(params: dict, cfg: ModelConfig, schedule: NoiseSchedule, batch: dict, rng: np.random.Generator,
                  objective: str = "ddpm") -> dict:
    """Sample timesteps and noise for ``batch = {"x0", "c"}`` and evaluate the loss."""
    x0 = np.asarray(batch["x0"])
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    t, eps = draw_noise(cfg, schedule, x0.shape[0], rng, objective, x0.dtype)
    return loss_terms(params, cfg, schedule, x0, t, eps, np.asarray(batch["c"]), objective)


# ---------------------------------------------------------------------------
# loop
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    mse: float
    vlb: float
    balance: float
    total: float
    expert_counts: np.ndarray  # [moe_layers, n] selections in this step


class Trainer:
    """Owns parameters, EMA, optimiser state and one seeded generator.

    All randomness (init, batch draws, flips, label dropout, timesteps,
    noise) is consumed from ``self.rng = default_rng([seed, 0])`` in a fixed
    order, so a run restored from a checkpoint continues bit-identically.
    """

    def __init__(self, cfg: ModelConfig, tcfg: TrainConfig, real: ImageSource, synthetic: ImageSource | None = None):
        self.cfg, self.tcfg = cfg, tcfg
        self.schedule = build_linear_schedule(tcfg.diffusion_steps, tcfg.beta_start, tcfg.beta_end)
        self.rng = np.random.default_rng([tcfg.seed, 0])
        self.params = init_params(cfg, self.rng)
        self.ema = {k: v.copy() for k, v in self.params.items()}
        self.opt = AdamState()
        self.step = 0
        ratio = tcfg.mix_ratio if synthetic is not None else (1.0, 0.0)
        self.sampler = MixedSampler(real, synthetic, ratio, self.rng)
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        for src in (real, synthetic):
            if src is not None and src.images.shape[1:] != expected:
                raise ValueError(f"dataset images {src.images.shape[1:]} do not match model input {expected}")
            if src is not None and (src.labels.min() < 0 or src.labels.max() >= cfg.num_classes):
                raise ValueError("dataset labels outside the configured class range")

    def train_step(self) -> StepRecord:
        cfg, tcfg = self.cfg, self.tcfg
        images, labels, _ = self.sampler.draw(tcfg.batch_size)
        labels = drop_labels(labels, tcfg.label_dropout_p, self.rng, cfg.num_classes)
        leaves = {k: ag.Tensor(v, requires_grad=True) for k, v in self.params.items()}
        terms = training_loss(leaves, cfg, self.schedule, {"x0": images, "c": labels}, self.rng, tcfg.objective)
        terms["total"].backward()
        grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}
        grads, _ = clip_grad_norm(grads, tcfg.grad_clip)
        self.params, self.opt = adamw_step(self.opt, self.params, grads, tcfg.lr)
        self.ema = ema_update(self.ema, self.params, tcfg.ema_decay)
        self.step += 1
        counts = np.stack([np.bincount(r.selected.ravel(), minlength=cfg.moe.n) for _, r in terms["routings"]]) \
            if terms["routings"] else np.zeros((0, cfg.moe.n), dtype=np.int64)
        return StepRecord(
            step=self.step,
            mse=float(np.float64(terms["mse"].data)),
            vlb=float(np.float64(terms["vlb"].data)),
            balance=float(np.float64(terms["balance"].data)),
            total=float(np.float64(terms["total"].data)),
            expert_counts=counts,
        )

    def run(self, steps: int | None = None, callback=None) -> list[StepRecord]:
        steps = self.tcfg.steps if steps is None else steps
        records = []
        for _ in range(steps):
            rec = self.train_step()
            records.append(rec)
            if callback is not None:
                callback(self, rec)
        return records

    # -- checkpointing -------------------------------------------------------
    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint(
            config=self.cfg,
            params=self.params,
            ema=self.ema,
            adam_m=self.opt.m,
            adam_v=self.opt.v,
            step=self.step,
            rng_state=self.rng.bit_generator.state,
            meta={"objective": self.tcfg.objective, "adam_step": str(self.opt.step),
                  "diffusion_steps": str(self.tcfg.diffusion_steps),
                  "beta_start": repr(self.tcfg.beta_start), "beta_end": repr(self.tcfg.beta_end)},
        )

    def restore(self, ck: Checkpoint) -> None:
        if ck.config != self.cfg:
            raise ValueError("checkpoint config does not match trainer config")
        self.params = {k: v.copy() for k, v in ck.params.items()}
        self.ema = {k: v.copy() for k, v in ck.ema.items()}
        self.opt = AdamState({k: v.copy() for k, v in ck.adam_m.items()}, {k: v.copy() for k, v in ck.adam_v.items()},
                             int(ck.meta.get("adam_step", ck.step)))
        self.step = ck.step
        self.rng.bit_generator.state = ck.rng_state


def imbalance(counts: np.ndarray) -> float:
    """Mean over layers of (max - min) expert selection frequency.

    ``counts`` is ``[..., layers, n]``; leading axes are summed first.
    """
    c = np.asarray(counts, dtype=np.float64)
    c = c.reshape(-1, c.shape[-2], c.shape[-1]).sum(axis=0)
    freq = c / c.sum(axis=-1, keepdims=True)
    return float(np.mean(freq.max(axis=-1) - freq.min(axis=-1)))

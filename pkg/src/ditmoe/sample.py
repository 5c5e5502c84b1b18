"""Ancestral DDPM sampling with classifier-free guidance and routing capture."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from ditmoe.config import ModelConfig
from ditmoe.model import cfg_forward
from ditmoe.moe import RoutingTrace
from ditmoe.pnm import chw_to_image, write_pnm
from ditmoe.schedule import (
    NoiseSchedule,
    model_log_variance,
    posterior_mean_variance,
    predict_x0_from_eps,
    respace,
    respaced_schedule,
)


@dataclass(frozen=True)
class SampleRequest:
    class_label: int
    num_steps: int = 250
    cfg_scale: float = 1.0
    seed: int = 0
    trace: bool = False
    index: int = 0
    trace_both: bool = False

    def __post_init__(self):
        if self.num_steps < 1:
            raise ValueError("num_steps must be positive")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be non-negative")


@dataclass(frozen=True)
class Respaced:
    """A respaced schedule plus the original timestep of each retained step.

    ``schedule`` and ``timesteps`` are in ascending time order; sampling
    step ordinal ``k`` uses position ``len - 1 - k``.
    """

    schedule: NoiseSchedule
    timesteps: np.ndarray

    @classmethod
    def build(cls, base: NoiseSchedule, num_steps: int) -> Respaced:
        idx = respace(base, num_steps)
        return cls(respaced_schedule(base, idx), np.sort(idx))

    def __len__(self) -> int:
        return int(self.timesteps.shape[0])


def sample_generator(seed: int, index: int) -> np.random.Generator:
    """Per-sample noise stream keyed by ``(seed, sample index)``."""
    return np.random.default_rng([int(seed), int(index)])


# model_fn(x_t, position) -> (eps_hat, v_raw or None)
ModelFn = Callable[[np.ndarray, int], tuple]


def denoise_step(model_fn: ModelFn, rs: Respaced, x_t: np.ndarray, position: int, noise: np.ndarray | None,
                 learned_sigma: bool, clip: bool = True, return_x0: bool = False):
    """One reverse step from retained position ``position`` to the one below.

    ``noise`` is the standard normal draw for this step; it is ignored at
    position 0, where the update is deterministic.
    """
    s = rs.schedule
    eps_hat, v_raw = model_fn(x_t, position)
    if not np.all(np.isfinite(eps_hat)):
        raise FloatingPointError("non-finite model prediction during sampling")
    x0_hat = predict_x0_from_eps(s, x_t, position, eps_hat)
    if clip:
        x0_hat = np.clip(x0_hat, -1.0, 1.0)
    mean, _ = posterior_mean_variance(s, x0_hat, x_t, position)
    if learned_sigma and v_raw is not None:
        logvar = model_log_variance(s, position, v_raw).data
    else:
        logvar = np.full(x_t.shape, s.posterior_log_variance_clipped[position], dtype=x_t.dtype)
    if position > 0:
        if noise is None:
            raise ValueError("noise draw required before the final step")
        x_prev = mean + np.exp(0.5 * logvar) * noise
    else:
        x_prev = np.asarray(mean)
    x_prev = np.asarray(x_prev, dtype=x_t.dtype)
    if not np.all(np.isfinite(x_prev)):
        raise FloatingPointError("non-finite sampler state")
    return (x_prev, x0_hat) if return_x0 else x_prev


def _record(trace: RoutingTrace, routings, labels: np.ndarray, tokens: int, step: int, timestep: int) -> None:
    for layer, routing in routings:
        n_rows = routing.selected.shape[0]
        positions = np.arange(n_rows) % tokens
        cls = np.repeat(labels, tokens)
        trace.append(layer, positions, timestep, cls, routing.selected, step=step)


def ddpm_sample_batch(params: dict, cfg: ModelConfig, schedule: NoiseSchedule, requests: list[SampleRequest],
                      trace: RoutingTrace | None = None) -> np.ndarray:
    """Sample every request in one batch; returns ``[B, C, H, W]``.

    All requests must share ``num_steps``, ``cfg_scale`` and trace flags.
    Each sample draws its noise from :func:`sample_generator`, so results do
    not depend on batch composition order.
    """
    if not requests:
        raise ValueError("no requests")
    head = requests[0]
    for r in requests:
        if (r.num_steps, r.cfg_scale, r.trace_both) != (head.num_steps, head.cfg_scale, head.trace_both):
            raise ValueError("batched requests must share num_steps, cfg_scale and trace flags")
        if not 0 <= r.class_label < cfg.num_classes:
            raise ValueError(f"class label {r.class_label} outside [0, {cfg.num_classes})")
    if head.num_steps > schedule.T:
        raise ValueError(f"num_steps={head.num_steps} exceeds T={schedule.T}")
    want_trace = any(r.trace for r in requests)
    if want_trace and trace is None:
        raise ValueError("tracing requested but no trace sink given")
    rs = Respaced.build(schedule, head.num_steps)
    dtype = np.asarray(params["x_embed.w"]).dtype
    shape = (cfg.in_channels, cfg.input_size, cfg.input_size)
    gens = [sample_generator(r.seed, r.index) for r in requests]
    x = np.stack([g.standard_normal(shape) for g in gens]).astype(dtype)
    labels = np.array([r.class_label for r in requests], dtype=np.int64)
    C, tokens = cfg.in_channels, cfg.num_tokens
    S = len(rs)
    for k in range(S):
        pos = S - 1 - k
        t_model = int(rs.timesteps[pos])

        def model_fn(x_t, _pos, t_model=t_model, step=k):
            guided, cond, uncond = cfg_forward(params, cfg, x_t, np.full(len(requests), t_model), labels,
                                               head.cfg_scale)
            if want_trace:
                _record(trace, cond.routings, labels, tokens, step, t_model)
                if head.trace_both and uncond is not None:
                    _record(trace, uncond.routings, np.full_like(labels, cfg.num_classes), tokens, step, t_model)
            return guided[:, :C], (guided[:, C:] if cfg.learned_sigma else None)

        noise = np.stack([g.standard_normal(shape) for g in gens]).astype(dtype) if pos > 0 else None
        x = denoise_step(model_fn, rs, x, pos, noise, cfg.learned_sigma)
    return x


def ddpm_sample(params: dict, cfg: ModelConfig, schedule: NoiseSchedule, request: SampleRequest):
    """Sample one image; returns ``(image [C, H, W], trace or None)``."""
    trace = RoutingTrace(cfg.moe.K) if request.trace else None
    img = ddpm_sample_batch(params, cfg, schedule, [request], trace)[0]
    return img, trace


def write_sample(out_dir, name: str, image: np.ndarray, request: SampleRequest) -> Path:
    """Write ``name.pgm``/``.ppm`` plus a ``name.txt`` metadata sidecar."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    img = chw_to_image(image)
    path = out_dir / f"{name}.{'ppm' if img.ndim == 3 else 'pgm'}"
    write_pnm(path, img)
    meta = (f"seed = {request.seed}\nindex = {request.index}\nclass = {request.class_label}\n"
            f"steps = {request.num_steps}\ncfg_scale = {request.cfg_scale!r}\n")
    (out_dir / f"{name}.txt").write_text(meta)
    return path

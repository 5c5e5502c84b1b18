"""Closed-form diffusion math for a discrete-time Gaussian noising process.

Timesteps are 0-based: index ``t`` in ``[0, T)`` corresponds to the 1-based
step ``t + 1`` of the usual DDPM notation. All tables are float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ditmoe import autograd as ag


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step and cumulative noise tables for ``T`` diffusion steps.

    Attributes:
        betas: per-step noise variances, ``(0, 1)``.
        alphas: ``1 - betas``.
        alpha_bars: cumulative products of ``alphas``.
        alpha_bars_prev: ``alpha_bars`` shifted right with a leading 1.
        posterior_variances: variance of ``q(x_{t-1} | x_t, x_0)``.
        posterior_log_variance_clipped: log of the above with the ``t=0``
            entry replaced by the ``t=1`` value (it is exactly zero there).
        posterior_mean_coef1, posterior_mean_coef2: posterior mean weights on
            ``x_0`` and ``x_t``.
    """

    betas: np.ndarray
    alphas: np.ndarray = field(repr=False)
    alpha_bars: np.ndarray = field(repr=False)
    alpha_bars_prev: np.ndarray = field(repr=False)
    posterior_variances: np.ndarray = field(repr=False)
    posterior_log_variance_clipped: np.ndarray = field(repr=False)
    posterior_mean_coef1: np.ndarray = field(repr=False)
    posterior_mean_coef2: np.ndarray = field(repr=False)

    @property
    def T(self) -> int:
        return int(self.betas.shape[0])

    @classmethod
    def from_betas(cls, betas) -> NoiseSchedule:
        betas = np.array(betas, dtype=np.float64)
        if betas.ndim != 1 or betas.size == 0:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ValueError("betas must lie strictly inside (0, 1)")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        alpha_bars_prev = np.concatenate([[1.0], alpha_bars[:-1]])
        post_var = betas * (1.0 - alpha_bars_prev) / (1.0 - alpha_bars)
        if betas.size > 1:
            post_log = np.log(np.concatenate([[post_var[1]], post_var[1:]]))
        else:
            post_log = np.log(betas)
        coef1 = betas * np.sqrt(alpha_bars_prev) / (1.0 - alpha_bars)
        coef2 = (1.0 - alpha_bars_prev) * np.sqrt(alphas) / (1.0 - alpha_bars)
        # exact at t=0, where the ratios above are 1 and 0 only up to rounding
        coef1[0], coef2[0] = 1.0, 0.0
        tables = [betas, alphas, alpha_bars, alpha_bars_prev, post_var, post_log, coef1, coef2]
        for arr in tables:
            arr.setflags(write=False)
        return cls(*tables)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise IndexError(f"timestep {t} outside [0, {self.T})")
        return t


def build_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> NoiseSchedule:
    """Linearly spaced betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0 < beta_start < 1 and 0 < beta_end < 1):
        raise ValueError("beta values must lie in (0, 1)")
    if beta_start > beta_end:
        raise ValueError("beta_start must not exceed beta_end")
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = beta_start + np.arange(T, dtype=np.float64) * (beta_end - beta_start) / (T - 1)
    return NoiseSchedule.from_betas(betas)


def _check_same_shape(*arrays) -> None:
    shapes = {np.shape(a) for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def _per_item(table: np.ndarray, t, ndim: int, dtype) -> np.ndarray | float:
    """Look up ``table[t]`` and shape it to broadcast against a batch."""
    t_arr = np.asarray(t)
    vals = table[t_arr]
    if t_arr.ndim == 0:
        return float(vals)
    return vals.reshape(vals.shape + (1,) * (ndim - t_arr.ndim)).astype(dtype)


def _check_t_any(s: NoiseSchedule, t) -> None:
    t_arr = np.asarray(t)
    if not np.issubdtype(t_arr.dtype, np.integer):
        if not np.all(t_arr == np.round(t_arr)):
            raise TypeError("timesteps must be integers")
    if t_arr.size and (t_arr.min() < 0 or t_arr.max() >= s.T):
        raise IndexError(f"timestep outside [0, {s.T})")


def q_sample(s: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Noise ``x0`` to step ``t``: ``sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``.

    ``t`` may be a scalar or one timestep per leading-axis item.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps)
    _check_t_any(s, t)
    ab = _per_item(s.alpha_bars, t, x0.ndim, x0.dtype)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def predict_x0_from_eps(s: NoiseSchedule, xt, t, eps_hat):
    """Invert the forward noising for ``x0`` given a noise estimate.

    Accepts arrays or autograd tensors for ``eps_hat``.
    """
    _check_t_any(s, t)
    xt_arr = xt.data if isinstance(xt, ag.Tensor) else np.asarray(xt)
    eh_arr = eps_hat.data if isinstance(eps_hat, ag.Tensor) else np.asarray(eps_hat)
    _check_same_shape(xt_arr, eh_arr)
    ab = _per_item(s.alpha_bars, t, xt_arr.ndim, xt_arr.dtype)
    recip = np.sqrt(1.0 / ab)
    recipm1 = np.sqrt(1.0 / ab - 1.0)
    if isinstance(xt, ag.Tensor) or isinstance(eps_hat, ag.Tensor):
        return ag.as_tensor(xt) * recip - ag.as_tensor(eps_hat) * recipm1
    return recip * xt_arr - recipm1 * eh_arr


def posterior_mean_variance(s: NoiseSchedule, x0_hat, xt, t):
    """Mean and variance of ``q(x_{t-1} | x_t, x_0 = x0_hat)``.

    With a scalar ``t`` the variance is a float; with per-item timesteps it
    is an array broadcastable against the batch. At ``t = 0`` this returns
    ``(x0_hat, 0)``.
    """
    _check_t_any(s, t)
    x0_arr = x0_hat.data if isinstance(x0_hat, ag.Tensor) else np.asarray(x0_hat)
    xt_arr = np.asarray(xt)
    _check_same_shape(x0_arr, xt_arr)
    c1 = _per_item(s.posterior_mean_coef1, t, xt_arr.ndim, xt_arr.dtype)
    c2 = _per_item(s.posterior_mean_coef2, t, xt_arr.ndim, xt_arr.dtype)
    var = _per_item(s.posterior_variances, t, xt_arr.ndim, np.float64)
    if isinstance(x0_hat, ag.Tensor):
        mean = x0_hat * c1 + xt_arr * c2
    else:
        mean = c1 * x0_arr + c2 * xt_arr
    return mean, var


# ---------------------------------------------------------------------------
# variational bound
# ---------------------------------------------------------------------------


def normal_kl(mean1, logvar1, mean2, logvar2):
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)) in nats."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + ag.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * ag.exp(-logvar2))


def _approx_standard_normal_cdf(x):
    return 0.5 * (1.0 + ag.tanh((x + (x**3) * 0.044715) * math.sqrt(2.0 / math.pi)))


def discretized_gaussian_log_likelihood(x, means, log_scales):
    """Log-likelihood of 8-bit data in ``[-1, 1]`` under a binned Gaussian."""
    x = np.asarray(x)
    centered = means * -1.0 + x
    inv_stdv = ag.exp(log_scales * -1.0)
    cdf_plus = _approx_standard_normal_cdf((centered + 1.0 / 255.0) * inv_stdv)
    cdf_min = _approx_standard_normal_cdf((centered - 1.0 / 255.0) * inv_stdv)
    log_cdf_plus = ag.log(ag.maximum(cdf_plus, 1e-12))
    log_one_minus_cdf_min = ag.log(ag.maximum(1.0 - cdf_min, 1e-12))
    cdf_delta = cdf_plus - cdf_min
    log_delta = ag.log(ag.maximum(cdf_delta, 1e-12))
    return ag.where(x < -0.999, log_cdf_plus, ag.where(x > 0.999, log_one_minus_cdf_min, log_delta))


def model_log_variance(s: NoiseSchedule, t, v_raw):
    """Interpolate between ``log beta~_t`` and ``log beta_t``.

    ``v_raw`` is the raw variance-head output; it maps to a fraction through
    ``(v + 1) / 2`` clamped to ``[0, 1]`` (1 selects ``log beta_t``).
    """
    v = ag.as_tensor(v_raw)
    min_log = _per_item(s.posterior_log_variance_clipped, t, v.ndim, v.dtype)
    max_log = _per_item(np.log(s.betas), t, v.ndim, v.dtype)
    frac = ag.clip((v + 1.0) * 0.5, 0.0, 1.0)
    return frac * max_log + (1.0 - frac) * min_log


def vlb_term(s: NoiseSchedule, model_mean, model_log_var, x0, xt, t):
    """Per-item variational-bound term in nats per dimension.

    KL between the true posterior and the model's Gaussian for ``t >= 1``;
    negative discretized log-likelihood of ``x0`` at ``t = 0``. The model mean
    is detached so only the variance head receives gradient. ``t`` may be a
    scalar (returns a 0-d tensor) or per leading-axis item (returns
    ``[batch]``).
    """
    _check_t_any(s, t)
    x0 = np.asarray(x0)
    xt = np.asarray(xt)
    mean_arr = model_mean.data if isinstance(model_mean, ag.Tensor) else np.asarray(model_mean)
    lv = ag.as_tensor(model_log_var)
    for arr in (mean_arr, lv.data, x0, xt):
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError("non-finite input to vlb_term")
    mean_d = ag.Tensor(mean_arr)
    true_mean, _ = posterior_mean_variance(s, x0, xt, t)
    true_logvar = _per_item(s.posterior_log_variance_clipped, t, x0.ndim, x0.dtype)
    kl = normal_kl(ag.Tensor(np.asarray(true_mean)), ag.Tensor(np.broadcast_to(true_logvar, x0.shape).astype(x0.dtype)), mean_d, lv)
    nll = discretized_gaussian_log_likelihood(x0, mean_d, lv * 0.5) * -1.0
    t_arr = np.asarray(t)
    first = (t_arr == 0).reshape(t_arr.shape + (1,) * (x0.ndim - t_arr.ndim))
    per_elem = ag.where(np.broadcast_to(first, x0.shape), nll, kl)
    if t_arr.ndim == 0:
        return per_elem.mean()
    axes = tuple(range(t_arr.ndim, x0.ndim))
    return per_elem.mean(axis=axes) if axes else per_elem


# ---------------------------------------------------------------------------
# respacing
# ---------------------------------------------------------------------------


def respace(s: NoiseSchedule, num_steps: int) -> np.ndarray:
    """Evenly strided timestep indices, largest first, keeping ``T - 1``."""
    if int(num_steps) != num_steps or num_steps < 1:
        raise ValueError(f"num_steps must be a positive integer, got {num_steps}")
    if num_steps > s.T:
        raise ValueError(f"num_steps={num_steps} exceeds T={s.T}")
    stride = s.T / num_steps
    offsets = np.floor(np.arange(num_steps) * stride + 0.5).astype(np.int64)
    return (s.T - 1) - offsets


def respaced_schedule(s: NoiseSchedule, indices) -> NoiseSchedule:
    """Schedule over the retained indices (in ascending order).

    Betas are recomputed from ratios of consecutive retained ``alpha_bars`` so
    the cumulative products at retained steps are preserved.
    """
    idx = np.sort(np.asarray(indices, dtype=np.int64))
    ab = s.alpha_bars[idx]
    prev = np.concatenate([[1.0], ab[:-1]])
    return NoiseSchedule.from_betas(1.0 - ab / prev)


# ---------------------------------------------------------------------------
# rectified flow
# ---------------------------------------------------------------------------


def rf_interpolate(x0, eps, t_cont):
    """Straight-line interpolation and its velocity target.

    ``t_cont`` is a scalar in ``[0, 1]`` or one value per leading-axis item.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_same_shape(x0, eps)
    tc = np.asarray(t_cont, dtype=np.float64)
    if np.any(tc < 0) or np.any(tc > 1) or not np.all(np.isfinite(tc)):
        raise ValueError("t_cont must lie in [0, 1]")
    if tc.ndim:
        tc = tc.reshape(tc.shape + (1,) * (x0.ndim - tc.ndim))
    tc = tc.astype(np.result_type(x0.dtype, eps.dtype), copy=False)
    xt = (1.0 - tc) * x0 + tc * eps
    return xt, eps - x0

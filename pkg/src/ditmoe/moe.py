"""Sparse mixture-of-experts layer with shared experts and balance loss.

Parameters are plain ``dict[str, array]`` maps. A layer uses the keys

    router                     [D, n]
    experts.{i}.w1 / w2 / w3   routed expert i
    shared.{s}.w1 / w2 / w3    shared expert s

where ``w1, w3`` are ``[D, H]`` and ``w2`` is ``[H, D]`` (``w3`` only exists for
the gated expert form). Every function here accepts either numpy arrays or
autograd tensors; the batched ``moe_apply`` / ``balance_loss_batched`` are the
differentiable paths the model uses, the per-token helpers are thin wrappers
over the same code.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ditmoe import _accel
from ditmoe import autograd as ag

EXPERT_FORMS = ("gated", "plain_gelu")


@dataclass(frozen=True)
class MoeConfig:
    n: int = 8
    K: int = 2
    n_s: int = 2
    alpha: float = 0.005
    routed_hidden_ratio: float = 4.0
    shared_hidden_ratio: float = 1.0
    expert_form: str = "gated"

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one routed expert")
        if not 1 <= self.K <= self.n:
            raise ValueError(f"K={self.K} must lie in [1, n={self.n}]")
        if self.n_s < 0:
            raise ValueError("n_s must be non-negative")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.routed_hidden_ratio <= 0 or self.shared_hidden_ratio <= 0:
            raise ValueError("hidden ratios must be positive")
        if self.expert_form not in EXPERT_FORMS:
            raise ValueError(f"expert_form must be one of {EXPERT_FORMS}")

    def routed_hidden(self, D: int) -> int:
        return int(round(self.routed_hidden_ratio * D))

    def shared_hidden(self, D: int) -> int:
        return int(round(self.shared_hidden_ratio * D))


@dataclass
class RouterDecision:
    """Routing outcome for one token."""

    probs: np.ndarray
    selected: np.ndarray
    weights: np.ndarray


@dataclass
class RoutingTrace:
    """Append-only sink of routing events, stored column-wise.

    Each event is one token at one MoE layer: ``(layer, token_position,
    step, timestep, class_label, selected[K])``. ``step`` is the sampling-step
    ordinal and ``timestep`` the schedule index it maps to.
    """

    K: int
    _chunks: list = field(default_factory=list, repr=False)

    def append(self, layer, token_position, timestep, class_label, selected, step=None) -> None:
        selected = np.asarray(selected, dtype=np.int64)
        if selected.ndim == 1:
            selected = selected[None, :]
        if selected.shape[1] != self.K:
            raise ValueError(f"every event needs exactly K={self.K} selections")
        rows = selected.shape[0]

        def col(v):
            return np.broadcast_to(np.asarray(v, dtype=np.int64), (rows,)).copy()

        step = timestep if step is None else step
        self._chunks.append(
            (col(layer), col(token_position), col(step), col(timestep), col(class_label), selected.copy())
        )

    def extend(self, other: RoutingTrace) -> None:
        if other.K != self.K:
            raise ValueError("cannot combine traces with different K")
        self._chunks.extend(other._chunks)

    def columns(self) -> dict[str, np.ndarray]:
        if not self._chunks:
            empty = np.zeros(0, dtype=np.int64)
            return {
                "layer": empty, "token_position": empty, "step": empty, "timestep": empty,
                "class_label": empty, "selected": np.zeros((0, self.K), dtype=np.int64),
            }
        parts = list(zip(*self._chunks))
        if len(self._chunks) > 1:
            merged = [np.concatenate(p) for p in parts]
            self._chunks = [tuple(merged)]
        layer, pos, step, ts, cls, sel = self._chunks[0]
        return {"layer": layer, "token_position": pos, "step": step, "timestep": ts, "class_label": cls, "selected": sel}

    def __len__(self) -> int:
        return sum(c[0].shape[0] for c in self._chunks)

    @property
    def events(self) -> list[dict]:
        cols = self.columns()
        keys = ("layer", "token_position", "step", "timestep", "class_label")
        return [
            {**{k: int(cols[k][i]) for k in keys}, "selected": cols["selected"][i].copy()}
            for i in range(len(cols["layer"]))
        ]


# ---------------------------------------------------------------------------
# routing
# ---------------------------------------------------------------------------


def gate(router_weights, x):
    """Softmax over ``x @ router_weights``; ``x`` is ``[..., D]``."""
    logits = ag.matmul(ag.as_tensor(np.atleast_2d(x) if not isinstance(x, ag.Tensor) else x), router_weights)
    if not np.all(np.isfinite(logits.data)):
        raise FloatingPointError("non-finite router logits")
    probs = ag.softmax(logits, axis=-1)
    if isinstance(x, ag.Tensor) or isinstance(router_weights, ag.Tensor):
        return probs
    out = probs.data
    return out[0] if np.ndim(x) == 1 else out


def top_k_select(probs, K: int) -> RouterDecision:
    """The ``K`` highest-probability experts of one token, largest first."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 1:
        raise ValueError("top_k_select expects one token's distribution")
    if K > probs.shape[0]:
        raise ValueError(f"K={K} exceeds n={probs.shape[0]}")
    selected = _accel.topk_rows(probs[None, :], K)[0]
    return RouterDecision(probs=probs, selected=selected, weights=probs[selected])


# ---------------------------------------------------------------------------
# experts
# ---------------------------------------------------------------------------


def expert_forward(params: Mapping, x, form: str = "gated"):
    """One expert MLP on ``x`` of shape ``[..., D]``.

    ``plain_gelu``: ``gelu(x W1) W2``. ``gated``: ``(gelu(x W1) * (x W3)) W2``.
    """
    numpy_in = not isinstance(x, ag.Tensor) and not any(isinstance(v, ag.Tensor) for v in params.values())
    squeeze = numpy_in and np.ndim(x) == 1
    xt = ag.as_tensor(np.atleast_2d(x) if squeeze else x)
    h = ag.gelu(ag.matmul(xt, params["w1"]))
    if form == "gated":
        h = h * ag.matmul(xt, params["w3"])
    elif form != "plain_gelu":
        raise ValueError(f"unknown expert form {form!r}")
    out = ag.matmul(h, params["w2"])
    if numpy_in:
        return out.data[0] if squeeze else out.data
    return out


def _sub(layer: Mapping, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in layer.items() if k.startswith(prefix)}


def split_layer(layer: Mapping, cfg: MoeConfig) -> tuple:
    """Return ``(router, [routed expert params], [shared expert params])``."""
    routed = [_sub(layer, f"experts.{i}.") for i in range(cfg.n)]
    shared = [_sub(layer, f"shared.{s}.") for s in range(cfg.n_s)]
    return layer["router"], routed, shared


@dataclass
class Routing:
    """Batched routing for ``N`` tokens: full probs and selected indices."""

    probs: ag.Tensor
    selected: np.ndarray

    def decisions(self) -> list[RouterDecision]:
        p = self.probs.data.astype(np.float64)
        return [RouterDecision(p[i], self.selected[i].copy(), p[i, self.selected[i]]) for i in range(p.shape[0])]


def moe_apply(layer: Mapping, x: ag.Tensor, cfg: MoeConfig) -> tuple[ag.Tensor, Routing]:
    """Differentiable MoE on ``x`` of shape ``[N, D]``.

    Each token's output is the gate-weighted sum of its top-K routed experts
    plus every shared expert at weight 1. Gate weights are the unrenormalised
    softmax entries of the selected experts.
    """
    x = ag.as_tensor(x)
    router, routed, shared = split_layer(layer, cfg)
    probs = gate(router, x)
    selected = _accel.topk_rows(probs.data, cfg.K)
    n_tok = x.shape[0]
    out = None
    for e in range(cfg.n):
        rows, _ = np.nonzero(selected == e)
        if rows.size == 0:
            continue
        ye = expert_forward(routed[e], x[rows], cfg.expert_form)
        w = probs[rows, np.full(rows.shape, e)].reshape(-1, 1)
        contrib = ag.scatter_rows(ye * w, rows, n_tok)
        out = contrib if out is None else out + contrib
    for sp in shared:
        ys = expert_forward(sp, x, cfg.expert_form)
        out = ys if out is None else out + ys
    return out, Routing(probs, selected)


def moe_forward(layer: Mapping, tokens, cfg: MoeConfig, trace: RoutingTrace | None = None, *, layer_index: int = 0,
                timestep: int = 0, class_label: int = 0):
    """MoE over one sequence ``[T_seq, D]``; returns outputs and per-token decisions.

    When ``trace`` is given one event per token is appended, keyed by the
    supplied layer index, timestep and class label.
    """
    tokens_arr = np.asarray(tokens)
    if tokens_arr.ndim != 2:
        raise ValueError("tokens must be [T_seq, D]")
    out, routing = moe_apply(layer, ag.Tensor(tokens_arr), cfg)
    if trace is not None:
        trace.append(layer_index, np.arange(tokens_arr.shape[0]), timestep, class_label, routing.selected)
    return out.data, routing.decisions()


# ---------------------------------------------------------------------------
# balance loss
# ---------------------------------------------------------------------------


def balance_loss_batched(probs: ag.Tensor, selected: np.ndarray, cfg: MoeConfig, batch: int) -> ag.Tensor:
    """Expert-level balance loss per sequence, averaged over ``batch`` sequences.

    ``probs`` is ``[batch * T_seq, n]`` and ``selected`` ``[batch * T_seq, K]``.
    Per sequence: ``alpha * sum_i f_i * Pbar_i`` with
    ``f_i = n / (K T_seq) * (#tokens selecting i)`` and ``Pbar_i`` the mean
    router probability of expert i. Gradient flows through ``Pbar`` only.
    """
    probs = ag.as_tensor(probs)
    n_rows = probs.shape[0]
    if n_rows == 0:
        raise ValueError("balance loss needs at least one token")
    if n_rows % batch:
        raise ValueError("token count not divisible by batch")
    t_seq = n_rows // batch
    groups = np.repeat(np.arange(batch), t_seq)
    counts = _accel.group_counts(selected, groups, batch, cfg.n)
    f = (cfg.n / (cfg.K * t_seq)) * counts.astype(probs.dtype)
    p_bar = probs.reshape(batch, t_seq, cfg.n).mean(axis=1)
    per_seq = (p_bar * f).sum(axis=-1)
    return per_seq.mean() * cfg.alpha


def balance_loss(decisions, cfg: MoeConfig) -> float:
    """Balance loss of one token sequence given its router decisions."""
    decisions = list(decisions)
    if not decisions:
        raise ValueError("empty decision list")
    probs = np.stack([np.asarray(d.probs, dtype=np.float64) for d in decisions])
    selected = np.stack([np.asarray(d.selected, dtype=np.int64) for d in decisions])
    return float(balance_loss_batched(ag.Tensor(probs), selected, cfg, 1).data)

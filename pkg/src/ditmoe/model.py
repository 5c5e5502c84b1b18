"""DiT-MoE network: patch tokens, adaLN-Zero blocks with MoE feed-forwards.

Parameters live in a flat ``dict[str, np.ndarray]``; weights are stored
``[in, out]`` so a linear layer is ``x @ w + b``. The forward functions accept
either arrays or autograd tensors as parameter values, which is how the
trainer obtains gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ditmoe import autograd as ag
from ditmoe.config import ModelConfig
from ditmoe.moe import MoeConfig, Routing, expert_forward, moe_apply

FREQ_DIM = 256
LN_EPS = 1e-6


# ---------------------------------------------------------------------------
# tokens
# ---------------------------------------------------------------------------


def patchify(x, p: int) -> np.ndarray:
    """``[..., C, H, W]`` -> ``[..., (H/p)(W/p), p*p*C]``, row-major patches.

    Within a patch, values are ordered (row, col, channel).
    """
    x = np.asarray(x)
    *lead, C, H, W = x.shape
    if H % p or W % p:
        raise ValueError(f"spatial size {H}x{W} not divisible by patch {p}")
    h, w = H // p, W // p
    y = x.reshape(*lead, C, h, p, w, p)
    nl = len(lead)
    axes = tuple(range(nl)) + (nl + 1, nl + 3, nl + 2, nl + 4, nl)
    return y.transpose(axes).reshape(*lead, h * w, p * p * C)


def unpatchify(tokens, p: int, C: int, H: int | None = None, W: int | None = None):
    """Inverse of :func:`patchify`; works on arrays and tensors."""
    is_t = isinstance(tokens, ag.Tensor)
    shape = tokens.shape
    *lead, n_tok, dim = shape
    if dim != p * p * C:
        raise ValueError(f"token dim {dim} != p*p*C = {p * p * C}")
    if H is None:
        h = w = int(round(math.sqrt(n_tok)))
        if h * w != n_tok:
            raise ValueError("non-square token grid needs explicit H, W")
    else:
        h, w = H // p, W // p
    nl = len(lead)
    y = tokens.reshape(*lead, h, w, p, p, C) if is_t else np.asarray(tokens).reshape(*lead, h, w, p, p, C)
    axes = tuple(range(nl)) + (nl + 4, nl, nl + 2, nl + 1, nl + 3)
    y = y.transpose(axes)
    return y.reshape(*lead, C, h * p, w * p)


def pos_embed_2d(D: int, grid: int) -> np.ndarray:
    """Fixed 2-D sin-cos embeddings ``[grid*grid, D]`` (row half, column half)."""
    if D % 4:
        raise ValueError("2-D sin-cos embeddings need D divisible by 4")
    quarter = D // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def one_axis(pos):
        a = pos.reshape(-1, 1) * omega[None, :]
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    return np.concatenate([one_axis(rows), one_axis(cols)], axis=1)


def timestep_frequencies(t, dim: int = FREQ_DIM, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_i) ..., cos(t w_i) ...]`` for each ``t``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((emb.shape[0], 1))], axis=1)
    return emb


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    z = rng.standard_normal(shape)
    bad = np.abs(z) > 2.0
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > 2.0
    return z * std


def _expert_shapes(prefix: str, D: int, hidden: int, form: str) -> dict[str, tuple]:
    shapes = {f"{prefix}w1": (D, hidden), f"{prefix}w2": (hidden, D)}
    if form == "gated":
        shapes[f"{prefix}w3"] = (D, hidden)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in a fixed order."""
    D, p, m = cfg.width, cfg.patch, cfg.moe
    s: dict[str, tuple[int, ...]] = {
        "x_embed.w": (p * p * cfg.in_channels, D),
        "x_embed.b": (D,),
        "t_embed.w1": (FREQ_DIM, D),
        "t_embed.b1": (D,),
        "t_embed.w2": (D, D),
        "t_embed.b2": (D,),
        "y_embed.table": (cfg.num_classes + 1, D),
    }
    moe_layers = set(cfg.moe_layers())
    for i in range(cfg.depth):
        b = f"blocks.{i}."
        s[b + "adaln.w"] = (D, 6 * D)
        s[b + "adaln.b"] = (6 * D,)
        s[b + "attn.qkv.w"] = (D, 3 * D)
        s[b + "attn.qkv.b"] = (3 * D,)
        s[b + "attn.proj.w"] = (D, D)
        s[b + "attn.proj.b"] = (D,)
        if i in moe_layers:
            s[b + "moe.router"] = (D, m.n)
            for e in range(m.n):
                s.update(_expert_shapes(f"{b}moe.experts.{e}.", D, m.routed_hidden(D), m.expert_form))
            for e in range(m.n_s):
                s.update(_expert_shapes(f"{b}moe.shared.{e}.", D, m.shared_hidden(D), m.expert_form))
        else:
            s.update(_expert_shapes(b + "mlp.", D, m.routed_hidden(D), m.expert_form))
    out_dim = p * p * cfg.out_channels
    s["final.adaln.w"] = (D, 2 * D)
    s["final.adaln.b"] = (2 * D,)
    s["final.linear.w"] = (D, out_dim)
    s["final.linear.b"] = (out_dim,)
    return s


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0, dtype=np.float32,
                zero_init: bool = True) -> dict[str, np.ndarray]:
    """Fresh parameters.

    Linear weights are truncated-normal(0.02), biases zero, router weights
    normal(0.006). With ``zero_init`` the adaLN modulation and final layer
    start at zero so every block is the identity and the output is zero;
    ``zero_init=False`` draws them like other linears (useful for tests).
    """
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        zero_group = name.startswith("final.") or ".adaln." in name
        if name.endswith("moe.router"):
            arr = rng.standard_normal(shape) * 0.006
        elif name == "y_embed.table":
            arr = rng.standard_normal(shape) * 0.02
        elif zero_group and zero_init:
            arr = np.zeros(shape)
        elif leaf.startswith("b"):
            arr = np.zeros(shape) if zero_init else rng.standard_normal(shape) * 0.02
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = np.ascontiguousarray(arr, dtype=dtype)
    return params


def count_elements(params: dict) -> int:
    return int(sum(np.asarray(v.data if isinstance(v, ag.Tensor) else v).size for v in params.values()))


def block_params(params: dict, i: int) -> dict:
    prefix = f"blocks.{i}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------


def _linear(x, w, b=None):
    y = ag.matmul(x, w)
    return y + b if b is not None else y


def modulate(x, shift, scale):
    return x * (scale + 1.0) + shift


def attention(x: ag.Tensor, bp: dict, heads: int) -> ag.Tensor:
    """Full multi-head self-attention on ``[B, T, D]``."""
    B, T, D = x.shape
    hd = D // heads
    qkv = _linear(x, bp["attn.qkv.w"], bp["attn.qkv.b"])
    qkv = qkv.reshape(B, T, 3, heads, hd).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(hd))
    attn = ag.softmax(scores, axis=-1)
    out = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, T, D)
    return _linear(out, bp["attn.proj.w"], bp["attn.proj.b"])


def _expert_keys(bp: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in bp.items() if k.startswith(prefix)}


def dit_block(bp: dict, x: ag.Tensor, cond: ag.Tensor, heads: int, moe_cfg: MoeConfig,
              use_moe: bool) -> tuple[ag.Tensor, Routing | None]:
    """One adaLN-Zero block on ``x`` ``[B, T, D]`` with conditioning ``[B, D]``."""
    B, T, D = x.shape
    mod = _linear(ag.silu(cond), bp["adaln.w"], bp["adaln.b"]).reshape(B, 1, 6 * D)
    shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = ag.split(mod, 6, axis=-1)
    h = modulate(ag.layer_norm(x, LN_EPS), shift_a, scale_a)
    x = x + gate_a * attention(h, bp, heads)
    h = modulate(ag.layer_norm(x, LN_EPS), shift_m, scale_m)
    routing = None
    if use_moe:
        flat, routing = moe_apply(_expert_keys(bp, "moe."), h.reshape(B * T, D), moe_cfg)
        ffn = flat.reshape(B, T, D)
    else:
        ffn = expert_forward(_expert_keys(bp, "mlp."), h, moe_cfg.expert_form)
    x = x + gate_m * ffn
    return x, routing


def dit_block_forward(block_params: dict, tokens, cond, cfg: ModelConfig, use_moe: bool = True):
    """Apply one block to ``tokens`` ``[T, D]`` (or ``[B, T, D]``) given ``cond`` ``[D]`` (or ``[B, D]``).

    Returns the updated tokens as an array.
    """
    tok = np.asarray(tokens)
    c = np.asarray(cond)
    single = tok.ndim == 2
    if single:
        tok, c = tok[None], c[None]
    bp = {k: ag.as_tensor(v) for k, v in block_params.items()}
    out, _ = dit_block(bp, ag.Tensor(tok), ag.Tensor(c), cfg.heads, cfg.moe, use_moe)
    return out.data[0] if single else out.data


def timestep_embedding(P: dict, t) -> ag.Tensor:
    freqs = timestep_frequencies(t).astype(P["t_embed.w1"].dtype)
    h = ag.silu(_linear(ag.Tensor(freqs), P["t_embed.w1"], P["t_embed.b1"]))
    return _linear(h, P["t_embed.w2"], P["t_embed.b2"])


def class_embedding(P: dict, c, num_classes: int) -> ag.Tensor:
    """Rows of the class table; label ``num_classes`` (or ``None``) is the null row."""
    labels = np.atleast_1d(np.asarray([num_classes if v is None else v for v in np.atleast_1d(c)], dtype=np.int64))
    if labels.min() < 0 or labels.max() > num_classes:
        raise IndexError(f"class label outside [0, {num_classes}]")
    return P["y_embed.table"][labels]


@dataclass
class ForwardOutput:
    out: ag.Tensor
    routings: list[tuple[int, Routing]]

    @property
    def eps(self) -> ag.Tensor:
        return self.out


def _as_param_tensors(params: dict) -> dict:
    return {k: (v if isinstance(v, ag.Tensor) else ag.Tensor(v)) for k, v in params.items()}


def forward(params: dict, cfg: ModelConfig, x_t, t, c) -> ForwardOutput:
    """Predict noise (plus the variance head) for a batch.

    ``x_t`` is ``[B, C, H, W]``, ``t`` ``[B]`` timesteps (may be fractional),
    ``c`` ``[B]`` labels with ``cfg.num_classes`` as the null label. Output is
    ``[B, out_channels, H, W]``; ``routings`` lists ``(moe_layer_ordinal,
    Routing)`` for every MoE block, tokens flattened ``b * T + position``.
    """
    P = _as_param_tensors(params)
    dtype = P["x_embed.w"].dtype
    x_t = np.asarray(x_t, dtype=dtype)
    if x_t.ndim != 4 or x_t.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ValueError(f"x_t shape {x_t.shape} does not match config")
    B = x_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (B,))
    grid = cfg.input_size // cfg.patch
    tokens = ag.Tensor(patchify(x_t, cfg.patch))
    x = _linear(tokens, P["x_embed.w"], P["x_embed.b"]) + pos_embed_2d(cfg.width, grid).astype(dtype)
    cond = timestep_embedding(P, t) + class_embedding(P, c, cfg.num_classes)
    moe_layers = cfg.moe_layers()
    routings = []
    for i in range(cfg.depth):
        use_moe = i in moe_layers
        x, routing = dit_block(block_params(P, i), x, cond, cfg.heads, cfg.moe, use_moe)
        if use_moe:
            routings.append((moe_layers.index(i), routing))
    shift, scale = ag.split(_linear(ag.silu(cond), P["final.adaln.w"], P["final.adaln.b"]).reshape(B, 1, 2 * cfg.width),
                            2, axis=-1)
    x = modulate(ag.layer_norm(x, LN_EPS), shift, scale)
    x = _linear(x, P["final.linear.w"], P["final.linear.b"])
    out = unpatchify(x, cfg.patch, cfg.out_channels)
    return ForwardOutput(out, routings)


def split_output(out: ag.Tensor | np.ndarray, cfg: ModelConfig):
    """``(eps_hat, v_raw or None)`` along the channel axis."""
    C = cfg.in_channels
    if not cfg.learned_sigma:
        return out, None
    return out[:, :C], out[:, C:]


def cfg_forward(params: dict, cfg: ModelConfig, x_t, t, c, w: float):
    """Classifier-free guided prediction.

    Returns ``(guided_output, cond_forward, uncond_forward)`` where
    ``guided_output`` holds ``w * eps_c + (1 - w) * eps_u`` in the noise
    channels and the conditional variance head. The unconditional pass is
    skipped (``None``) when ``w == 1``.
    """
    if w < 0:
        raise ValueError("guidance scale must be non-negative")
    cond = forward(params, cfg, x_t, t, c)
    out_c = cond.out.data
    if w == 1:
        return out_c, cond, None
    B = out_c.shape[0]
    uncond = forward(params, cfg, x_t, t, np.full(B, cfg.num_classes))
    out_u = uncond.out.data
    C = cfg.in_channels
    guided = out_c.copy()
    guided[:, :C] = w * out_c[:, :C] + (1.0 - w) * out_u[:, :C]
    return guided, cond, uncond

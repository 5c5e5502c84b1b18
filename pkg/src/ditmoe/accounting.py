"""Closed-form parameter and multiply-accumulate counts.

FLOP figures follow the convention of the scaling table they are compared
against: one multiply-accumulate counts as one flop, reported in units of 1e9.
"""

from __future__ import annotations

from dataclasses import dataclass

from ditmoe.config import ModelConfig

FREQ_DIM = 256
LATENT_DOWNSAMPLE = 8


@dataclass(frozen=True)
class ParamCount:
    total: int
    activated: int


def expert_size(D: int, hidden: int, form: str) -> int:
    return (3 if form == "gated" else 2) * D * hidden


def routed_expert_size(cfg: ModelConfig) -> int:
    return expert_size(cfg.width, cfg.moe.routed_hidden(cfg.width), cfg.moe.expert_form)


def shared_expert_size(cfg: ModelConfig) -> int:
    return expert_size(cfg.width, cfg.moe.shared_hidden(cfg.width), cfg.moe.expert_form)


def param_count(cfg: ModelConfig) -> ParamCount:
    D, p, m = cfg.width, cfg.patch, cfg.moe
    patch_dim = p * p * cfg.in_channels
    out_dim = p * p * cfg.out_channels
    embed = patch_dim * D + D
    embed += FREQ_DIM * D + D + D * D + D
    embed += (cfg.num_classes + 1) * D
    block = 6 * D * D + 6 * D  # adaLN modulation
    block += 3 * D * D + 3 * D + D * D + D  # qkv + output projection
    dense_ffn = routed_expert_size(cfg)
    moe_ffn = D * m.n + m.n * routed_expert_size(cfg) + m.n_s * shared_expert_size(cfg)
    n_moe = len(cfg.moe_layers())
    blocks = cfg.depth * block + n_moe * moe_ffn + (cfg.depth - n_moe) * dense_ffn
    final = 2 * D * D + 2 * D + D * out_dim + out_dim
    total = embed + blocks + final
    activated = total - (m.n - m.K) * routed_expert_size(cfg) * n_moe
    return ParamCount(total=total, activated=activated)


def tokens_for_resolution(cfg: ModelConfig, resolution: int, downsample: int = LATENT_DOWNSAMPLE) -> int:
    """Token count for a square image of side ``resolution`` pixels."""
    if resolution % downsample:
        raise ValueError(f"resolution {resolution} not divisible by downsample {downsample}")
    side = resolution // downsample
    if side % cfg.patch:
        raise ValueError(f"latent side {side} not divisible by patch {cfg.patch}")
    return (side // cfg.patch) ** 2


def core_macs_per_token_layer(D: int, K: int, n_s: int, routed_size: int, shared_size: int) -> int:
    """Linear-layer MACs of one MoE block for one token."""
    return 4 * D * D + K * routed_size + n_s * shared_size


def flop_estimate(cfg: ModelConfig, resolution: int = 256, mode: str = "core",
                  downsample: int = LATENT_DOWNSAMPLE) -> float:
    """Per-image forward cost in Gflops (MACs / 1e9).

    ``core`` counts the per-token attention projections and the activated
    feed-forward experts of every block. ``full`` adds adaLN modulation,
    attention score/value products, router logits, patch embedding, the
    final layer and the conditioning MLP.
    """
    if mode not in ("core", "full"):
        raise ValueError(f"mode must be 'core' or 'full', got {mode!r}")
    T = tokens_for_resolution(cfg, resolution, downsample)
    D, m = cfg.width, cfg.moe
    moe_layers = set(cfg.moe_layers())
    routed, shared = routed_expert_size(cfg), shared_expert_size(cfg)
    macs = 0
    for i in range(cfg.depth):
        if i in moe_layers:
            macs += T * core_macs_per_token_layer(D, m.K, m.n_s, routed, shared)
        else:
            macs += T * (4 * D * D + routed)
    if mode == "full":
        out_dim = cfg.patch * cfg.patch * cfg.out_channels
        patch_dim = cfg.patch * cfg.patch * cfg.in_channels
        macs += cfg.depth * (6 * D * D + 2 * T * T * D)
        macs += len(moe_layers) * T * D * m.n
        macs += T * (patch_dim * D + D * out_dim) + 2 * D * D
        macs += FREQ_DIM * D + D * D
    return macs / 1e9

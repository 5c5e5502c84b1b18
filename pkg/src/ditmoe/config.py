"""Model configuration, named presets and the flat ``key = value`` file format."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from ditmoe.moe import EXPERT_FORMS, MoeConfig


@dataclass(frozen=True)
class ModelConfig:
    depth: int = 12
    width: int = 384
    heads: int = 6
    patch: int = 2
    input_size: int = 32
    in_channels: int = 4
    moe: MoeConfig = field(default_factory=MoeConfig)
    placement: str = "every:1"
    learned_sigma: bool = True
    num_classes: int = 1000

    def __post_init__(self):
        for name in ("depth", "width", "heads", "patch", "input_size", "in_channels", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.width % self.heads:
            raise ValueError(f"width {self.width} not divisible by heads {self.heads}")
        if self.input_size % self.patch:
            raise ValueError(f"input_size {self.input_size} not divisible by patch {self.patch}")
        self.moe_layers()

    @property
    def out_channels(self) -> int:
        return 2 * self.in_channels if self.learned_sigma else self.in_channels

    @property
    def num_tokens(self) -> int:
        return (self.input_size // self.patch) ** 2

    def moe_layers(self) -> tuple[int, ...]:
        """Block indices carrying an MoE feed-forward, ascending."""
        return resolve_placement(self.placement, self.depth)


def resolve_placement(placement: str, depth: int) -> tuple[int, ...]:
    """Resolve a placement string to block indices.

    Accepted forms: ``every:e`` (blocks with ``i % e == 0``), ``first_half``
    (``[0, depth // 2)``), ``second_half`` (``[depth // 2, depth)``),
    ``explicit:i,j,...`` and ``none``.
    """
    p = placement.strip()
    if p.startswith("every:"):
        e = int(p.split(":", 1)[1])
        if e < 1:
            raise ValueError("every:e needs e >= 1")
        return tuple(range(0, depth, e))
    if p == "first_half":
        return tuple(range(depth // 2))
    if p == "second_half":
        return tuple(range(depth // 2, depth))
    if p == "none":
        return ()
    if p.startswith("explicit:"):
        body = p.split(":", 1)[1].strip()
        idx = sorted({int(v) for v in body.split(",") if v.strip()}) if body else []
        if any(i < 0 or i >= depth for i in idx):
            raise ValueError(f"explicit placement {idx} outside [0, {depth})")
        return tuple(idx)
    raise ValueError(f"unknown placement {placement!r}")


def _table1(depth, width, heads, n):
    return ModelConfig(depth=depth, width=width, heads=heads, patch=2, input_size=32, in_channels=4,
                       moe=MoeConfig(n=n, K=2, n_s=2), learned_sigma=True, num_classes=1000)


_PRESETS = {
    "S/2-8E2A": _table1(12, 384, 6, 8),
    "S/2-16E2A": _table1(12, 384, 6, 16),
    "B/2-8E2A": _table1(12, 768, 12, 8),
    "L/2-8E2A": _table1(24, 1024, 16, 8),
    "XL/2-8E2A": _table1(28, 1152, 16, 8),
    "G/2-16E2A": _table1(40, 1408, 16, 16),
    # desk-scale model for 8x8 single-channel toy data (16 tokens per image)
    "tiny": ModelConfig(depth=4, width=32, heads=4, patch=2, input_size=8, in_channels=1,
                        moe=MoeConfig(n=4, K=2, n_s=1), learned_sigma=True, num_classes=2),
}

# (total params, activated params, Gflops) as published for the scaling table
TABLE1_REFERENCE = {
    "S/2-8E2A": (199e6, 71e6, 15.43),
    "S/2-16E2A": (369e6, 71e6, 15.44),
    "B/2-8E2A": (795e6, 286e6, 61.68),
    "L/2-8E2A": (2.8e9, 1.0e9, 219.26),
    "XL/2-8E2A": (4.1e9, 1.5e9, 323.74),
    "G/2-16E2A": (16.5e9, 3.1e9, 690.94),
}


def presets() -> dict[str, ModelConfig]:
    return dict(_PRESETS)


def get_preset(name: str) -> ModelConfig:
    try:
        return _PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; known: {', '.join(_PRESETS)}") from None


# ---------------------------------------------------------------------------
# flat key = value serialisation
# ---------------------------------------------------------------------------

MODEL_KEYS = {
    "depth": "number of transformer blocks",
    "width": "hidden width D",
    "heads": "attention heads",
    "patch": "patch size p",
    "num_experts": "routed experts per MoE layer",
    "top_k": "routed experts activated per token",
    "num_shared": "shared experts per MoE layer",
    "alpha": "balance loss factor",
    "placement": "MoE placement: every:e | first_half | second_half | explicit:i,j | none",
    "learned_sigma": "predict the variance interpolation head (true/false)",
    "input_size": "spatial side of the input",
    "in_channels": "input channels",
    "num_classes": "class labels (one extra null row is added for guidance)",
    "expert_form": "gated | plain_gelu",
    "routed_hidden_ratio": "routed expert hidden width / D",
    "shared_hidden_ratio": "shared expert hidden width / D",
}


def parse_bool(value: str) -> bool:
    v = str(value).strip().lower()
    if v in {"1", "true", "yes", "on"}:
        return True
    if v in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def config_to_dict(cfg: ModelConfig) -> dict[str, str]:
    m = cfg.moe
    return {
        "depth": str(cfg.depth),
        "width": str(cfg.width),
        "heads": str(cfg.heads),
        "patch": str(cfg.patch),
        "num_experts": str(m.n),
        "top_k": str(m.K),
        "num_shared": str(m.n_s),
        "alpha": repr(float(m.alpha)),
        "placement": cfg.placement,
        "learned_sigma": "true" if cfg.learned_sigma else "false",
        "input_size": str(cfg.input_size),
        "in_channels": str(cfg.in_channels),
        "num_classes": str(cfg.num_classes),
        "expert_form": m.expert_form,
        "routed_hidden_ratio": repr(float(m.routed_hidden_ratio)),
        "shared_hidden_ratio": repr(float(m.shared_hidden_ratio)),
    }


def config_from_dict(values: dict[str, str], base: ModelConfig | None = None) -> ModelConfig:
    unknown = set(values) - set(MODEL_KEYS)
    if unknown:
        raise KeyError(f"unknown config keys: {', '.join(sorted(unknown))}")
    cur = config_to_dict(base or ModelConfig())
    cur.update({k: str(v) for k, v in values.items()})
    moe = MoeConfig(
        n=int(cur["num_experts"]),
        K=int(cur["top_k"]),
        n_s=int(cur["num_shared"]),
        alpha=float(cur["alpha"]),
        routed_hidden_ratio=float(cur["routed_hidden_ratio"]),
        shared_hidden_ratio=float(cur["shared_hidden_ratio"]),
        expert_form=cur["expert_form"],
    )
    if moe.expert_form not in EXPERT_FORMS:
        raise ValueError(f"expert_form must be one of {EXPERT_FORMS}")
    return ModelConfig(
        depth=int(cur["depth"]),
        width=int(cur["width"]),
        heads=int(cur["heads"]),
        patch=int(cur["patch"]),
        input_size=int(cur["input_size"]),
        in_channels=int(cur["in_channels"]),
        moe=moe,
        placement=cur["placement"],
        learned_sigma=parse_bool(cur["learned_sigma"]),
        num_classes=int(cur["num_classes"]),
    )


def parse_kv_text(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines skipped."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if key in out:
            raise ValueError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv_text(values: dict[str, str]) -> str:
    return "".join(f"{k} = {v}\n" for k, v in values.items())


def dumps_config(cfg: ModelConfig) -> str:
    return format_kv_text(config_to_dict(cfg))


def loads_config(text: str) -> ModelConfig:
    return config_from_dict(parse_kv_text(text))


def save_config(cfg: ModelConfig, path) -> None:
    Path(path).write_text(dumps_config(cfg))


def load_config(path) -> ModelConfig:
    return loads_config(Path(path).read_text())


def with_overrides(cfg: ModelConfig, **kwargs) -> ModelConfig:
    return replace(cfg, **kwargs)

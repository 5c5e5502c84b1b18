"""Expert-selection statistics from routing traces.

Traces are grouped by image class, token position or sampling step and
reduced to ``[layers x groups x experts]`` count tensors, which merge by
addition, normalise to per-row frequencies and export as CSV and PGM.

Binary trace file (little-endian)::

    b"DMTR" u16 version
    32 bytes config hash (sha256 of the serialised model config)
    u16 K, u16 num_experts, u16 num_layers
    u32 num_classes, u32 num_tokens, u32 num_steps, u64 event_count
    event_count records of u16: layer, token_position, step, timestep, class_label, selected[K]
"""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from ditmoe import _accel
from ditmoe.config import ModelConfig, dumps_config
from ditmoe.moe import RoutingTrace
from ditmoe.pnm import write_pnm

GROUP_KINDS = ("class", "position", "timestep")
_GROUP_COLUMN = {"class": "class_label", "position": "token_position", "timestep": "step"}
CSV_HEADER = ["layer", "group_kind", "group_id", "expert_id", "count", "frequency"]


@dataclass
class RoutingStats:
    group_kind: str
    counts: np.ndarray  # [layers, groups, experts] int64

    def __post_init__(self):
        if self.group_kind not in GROUP_KINDS:
            raise ValueError(f"group_kind must be one of {GROUP_KINDS}")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 3:
            raise ValueError("counts must be [layers, groups, experts]")
        if np.any(self.counts < 0):
            raise ValueError("counts must be non-negative")

    @property
    def token_selection_totals(self) -> np.ndarray:
        return self.counts.sum(axis=-1)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.counts.shape

    def empty_rows(self) -> np.ndarray:
        """``[layers, groups]`` mask of rows with no observations."""
        return self.token_selection_totals == 0

    @classmethod
    def empty(cls, group_kind: str, num_layers: int, num_groups: int, num_experts: int) -> RoutingStats:
        return cls(group_kind, np.zeros((num_layers, num_groups, num_experts), dtype=np.int64))

    def __eq__(self, other) -> bool:
        return (isinstance(other, RoutingStats) and self.group_kind == other.group_kind
                and self.counts.shape == other.counts.shape and bool(np.array_equal(self.counts, other.counts)))


def aggregate(traces: RoutingTrace | Iterable[RoutingTrace], group_kind: str, num_groups: int,
              num_layers: int | None = None, num_experts: int | None = None) -> RoutingStats:
    """Count expert selections per ``(layer, group, expert)``.

    Timestep grouping uses the sampling-step ordinal recorded in each event.
    ``num_layers`` / ``num_experts`` default to the smallest sizes that fit
    the data; pass them to get config-determined shapes.
    """
    if group_kind not in GROUP_KINDS:
        raise ValueError(f"group_kind must be one of {GROUP_KINDS}")
    if isinstance(traces, RoutingTrace):
        traces = [traces]
    traces = list(traces)
    if not traces:
        raise ValueError("no traces to aggregate")
    cols = [t.columns() for t in traces]
    if num_layers is None:
        num_layers = max((int(c["layer"].max()) + 1 for c in cols if c["layer"].size), default=0)
    if num_experts is None:
        num_experts = max((int(c["selected"].max()) + 1 for c in cols if c["selected"].size), default=0)
    counts = np.zeros((num_layers, num_groups, num_experts), dtype=np.int64)
    key = _GROUP_COLUMN[group_kind]
    for c in cols:
        groups = c[key]
        if groups.size and (groups.min() < 0 or groups.max() >= num_groups):
            raise IndexError(f"{group_kind} group index outside [0, {num_groups})")
        _accel.accumulate_counts(counts, c["layer"], groups, c["selected"])
    return RoutingStats(group_kind, counts)


def merge(a: RoutingStats, b: RoutingStats) -> RoutingStats:
    if a.group_kind != b.group_kind:
        raise ValueError(f"cannot merge {a.group_kind} stats with {b.group_kind} stats")
    if a.counts.shape != b.counts.shape:
        raise ValueError(f"shape mismatch: {a.counts.shape} vs {b.counts.shape}")
    return RoutingStats(a.group_kind, a.counts + b.counts)


def frequency_matrix(stats: RoutingStats) -> np.ndarray:
    """Counts normalised to sum to one per ``(layer, group)``; empty rows stay zero."""
    totals = stats.token_selection_totals[..., None].astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        freq = np.where(totals > 0, stats.counts / np.where(totals > 0, totals, 1.0), 0.0)
    return freq


def row_entropy(freq: np.ndarray) -> np.ndarray:
    """Shannon entropy in nats along the last axis (``0 ln 0 = 0``)."""
    f = np.asarray(freq, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(f > 0, -f * np.log(np.where(f > 0, f, 1.0)), 0.0)
    return terms.sum(axis=-1)


def entropy_summary(stats: RoutingStats, normalize: bool = False) -> dict[str, np.ndarray]:
    """Per-row entropies and their per-layer mean over observed groups.

    With ``normalize`` entropies are divided by ``ln(num_experts)``.
    """
    ent = row_entropy(frequency_matrix(stats))
    n = stats.counts.shape[-1]
    if normalize and n > 1:
        ent = ent / np.log(n)
    observed = ~stats.empty_rows()
    sums = np.where(observed, ent, 0.0).sum(axis=1)
    nobs = observed.sum(axis=1)
    layer_mean = np.where(nobs > 0, sums / np.maximum(nobs, 1), 0.0)
    return {"per_layer_mean_entropy": layer_mean, "per_group_entropy": ent}


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------


def export_csv(stats: RoutingStats, path) -> None:
    freq = frequency_matrix(stats)
    L, G, E = stats.counts.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for l in range(L):
            for g in range(G):
                for e in range(E):
                    w.writerow([l, stats.group_kind, g, e, int(stats.counts[l, g, e]), repr(float(freq[l, g, e]))])


def import_csv(path) -> tuple[RoutingStats, np.ndarray]:
    """Read an exported CSV back as ``(stats, frequency matrix)``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != CSV_HEADER:
        raise ValueError("missing or malformed CSV header")
    body = rows[1:]
    if not body:
        raise ValueError("CSV holds no data rows")
    kinds = {r[1] for r in body}
    if len(kinds) != 1:
        raise ValueError("CSV mixes group kinds")
    idx = np.array([[int(r[0]), int(r[2]), int(r[3])] for r in body])
    L, G, E = (idx.max(axis=0) + 1).tolist()
    counts = np.zeros((L, G, E), dtype=np.int64)
    freq = np.zeros((L, G, E), dtype=np.float64)
    for (l, g, e), r in zip(idx, body):
        counts[l, g, e] = int(r[4])
        freq[l, g, e] = float(r[5])
    return RoutingStats(kinds.pop(), counts), freq


def heatmap_pixels(stats: RoutingStats, layer: int) -> np.ndarray:
    """``[groups, experts]`` uint8 image: frequency ``[0, max] -> [255, 0]``."""
    f = frequency_matrix(stats)[layer]
    top = f.max()
    if top <= 0:
        return np.full(f.shape, 255, dtype=np.uint8)
    return np.round(255.0 * (1.0 - f / top)).astype(np.uint8)


def export_heatmap(stats: RoutingStats, layer: int, path) -> None:
    write_pnm(path, heatmap_pixels(stats, layer))


# ---------------------------------------------------------------------------
# binary trace files
# ---------------------------------------------------------------------------

TRACE_MAGIC = b"DMTR"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4sH32sHHHIIIQ")


def config_hash(cfg: ModelConfig) -> bytes:
    return hashlib.sha256(dumps_config(cfg).encode("utf-8")).digest()


@dataclass
class TraceFile:
    config_hash: bytes
    K: int
    num_experts: int
    num_layers: int
    num_classes: int
    num_tokens: int
    num_steps: int
    trace: RoutingTrace

    @classmethod
    def for_config(cls, cfg: ModelConfig, trace: RoutingTrace, num_steps: int) -> TraceFile:
        return cls(config_hash(cfg), cfg.moe.K, cfg.moe.n, len(cfg.moe_layers()), cfg.num_classes, cfg.num_tokens,
                   num_steps, trace)

    def compatible(self, other: TraceFile) -> bool:
        return (self.config_hash, self.K, self.num_experts, self.num_layers) == (
            other.config_hash, other.K, other.num_experts, other.num_layers)

    def num_groups(self, group_kind: str) -> int:
        return {"class": self.num_classes + 1, "position": self.num_tokens, "timestep": self.num_steps}[group_kind]


def _record_dtype(K: int) -> np.dtype:
    return np.dtype([("layer", "<u2"), ("token_position", "<u2"), ("step", "<u2"), ("timestep", "<u2"),
                     ("class_label", "<u2"), ("selected", "<u2", (K,))])


def save_trace(path, tf: TraceFile) -> None:
    cols = tf.trace.columns()
    n = cols["layer"].shape[0]
    for name in ("layer", "token_position", "step", "timestep", "class_label", "selected"):
        if n and (cols[name].min() < 0 or cols[name].max() > 0xFFFF):
            raise ValueError(f"trace column {name} does not fit in 16 bits")
    rec = np.zeros(n, dtype=_record_dtype(tf.K))
    for name in ("layer", "token_position", "step", "timestep", "class_label"):
        rec[name] = cols[name]
    rec["selected"] = cols["selected"]
    header = _HEADER.pack(TRACE_MAGIC, TRACE_VERSION, tf.config_hash, tf.K, tf.num_experts, tf.num_layers,
                          tf.num_classes, tf.num_tokens, tf.num_steps, n)
    Path(path).write_bytes(header + rec.tobytes())


def load_trace(path) -> TraceFile:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ValueError(f"{path}: truncated trace header")
    magic, version, chash, K, n_exp, n_layers, n_cls, n_tok, n_steps, count = _HEADER.unpack_from(data)
    if magic != TRACE_MAGIC:
        raise ValueError(f"{path}: not a trace file")
    if version != TRACE_VERSION:
        raise ValueError(f"{path}: unsupported trace version {version}")
    dt = _record_dtype(K)
    body = data[_HEADER.size:]
    if len(body) != count * dt.itemsize:
        raise ValueError(f"{path}: expected {count} records, found {len(body) / dt.itemsize:g}")
    rec = np.frombuffer(body, dtype=dt)
    trace = RoutingTrace(K)
    if count:
        trace.append(rec["layer"].astype(np.int64), rec["token_position"].astype(np.int64),
                     rec["timestep"].astype(np.int64), rec["class_label"].astype(np.int64),
                     rec["selected"].astype(np.int64).reshape(count, K), step=rec["step"].astype(np.int64))
    return TraceFile(chash, K, n_exp, n_layers, n_cls, n_tok, n_steps, trace)


def analyze_trace_files(files: list[TraceFile], group_kind: str) -> RoutingStats:
    """Aggregate each file separately and merge; files must share a config."""
    if not files:
        raise ValueError("need at least one trace file")
    head = files[0]
    for f in files[1:]:
        if not f.compatible(head):
            raise ValueError("incompatible traces: recorded under different model configs")
    if group_kind == "timestep":
        steps = {f.num_steps for f in files}
        if len(steps) != 1:
            raise ValueError("timestep grouping needs traces with the same number of sampling steps")
    n_groups = max(f.num_groups(group_kind) for f in files)
    stats = RoutingStats.empty(group_kind, head.num_layers, n_groups, head.num_experts)
    for f in files:
        stats = merge(stats, aggregate(f.trace, group_kind, n_groups, head.num_layers, head.num_experts))
    return stats

"""Loop-shaped routing kernels, JIT-compiled with numba when available.

Every kernel has a pure-numpy twin with identical semantics. The numba path is
used unless numba is missing or ``DITMOE_DISABLE_NUMBA`` is set to a truthy
value before import. ``use_numba(False)`` switches at runtime (tests and the
benchmark flip it to compare both paths).
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    NUMBA_AVAILABLE = False

    def njit(*args, **kwargs):
        if args and callable(args[0]):
            return args[0]

        def decorator(func):
            return func

        return decorator


def _env_disabled() -> bool:
    return os.environ.get("DITMOE_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


_USE_NUMBA = NUMBA_AVAILABLE and not _env_disabled()


def use_numba(enabled: bool) -> None:
    """Select the numba (True) or numpy (False) kernel path."""
    global _USE_NUMBA
    _USE_NUMBA = bool(enabled) and NUMBA_AVAILABLE


def numba_enabled() -> bool:
    return _USE_NUMBA


# ---------------------------------------------------------------------------
# top-K selection
# ---------------------------------------------------------------------------


@njit(cache=True)
def _topk_rows_nb(probs, k):
    n_rows, n = probs.shape
    out = np.empty((n_rows, k), dtype=np.int64)
    taken = np.zeros(n, dtype=np.bool_)
    for r in range(n_rows):
        taken[:] = False
        for j in range(k):
            best = -1
            best_val = 0.0
            for e in range(n):
                if taken[e]:
                    continue
                v = probs[r, e]
                # strict '>' keeps the lowest index on ties
                if best < 0 or v > best_val:
                    best = e
                    best_val = v
            taken[best] = True
            out[r, j] = best
    return out


def _topk_rows_np(probs: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated values keeps lower indices first among ties
    order = np.argsort(-probs, axis=1, kind="stable")
    return order[:, :k].astype(np.int64)


def topk_rows(probs: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest entries of each row, largest first.

    Ties resolve toward the lower expert index.
    """
    probs = np.ascontiguousarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {probs.shape}")
    if not 0 <= k <= probs.shape[1]:
        raise ValueError(f"k={k} outside [0, {probs.shape[1]}]")
    if _USE_NUMBA:
        return _topk_rows_nb(probs, k)
    return _topk_rows_np(probs, k)


# ---------------------------------------------------------------------------
# selection counting
# ---------------------------------------------------------------------------


@njit(cache=True)
def _group_counts_nb(selected, groups, n_groups, n_experts):
    counts = np.zeros((n_groups, n_experts), dtype=np.int64)
    for r in range(selected.shape[0]):
        g = groups[r]
        for j in range(selected.shape[1]):
            counts[g, selected[r, j]] += 1
    return counts


def _group_counts_np(selected, groups, n_groups, n_experts):
    counts = np.zeros((n_groups, n_experts), dtype=np.int64)
    rows = np.repeat(groups, selected.shape[1])
    np.add.at(counts, (rows, selected.ravel()), 1)
    return counts


def group_counts(selected: np.ndarray, groups: np.ndarray, n_groups: int, n_experts: int) -> np.ndarray:
    """Histogram of selected experts per group.

    ``selected`` is ``[rows, K]``, ``groups`` assigns each row to a group in
    ``[0, n_groups)``; returns ``[n_groups, n_experts]`` int64 counts.
    """
    selected = np.ascontiguousarray(selected, dtype=np.int64)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    if selected.ndim != 2 or groups.shape != (selected.shape[0],):
        raise ValueError("selected must be [rows, K] and groups [rows]")
    if selected.size:
        if groups.min() < 0 or groups.max() >= n_groups:
            raise ValueError("group index out of range")
        if selected.min() < 0 or selected.max() >= n_experts:
            raise ValueError("expert index out of range")
    if _USE_NUMBA:
        return _group_counts_nb(selected, groups, n_groups, n_experts)
    return _group_counts_np(selected, groups, n_groups, n_experts)


def expert_counts(selected: np.ndarray, n_experts: int) -> np.ndarray:
    """Total selections per expert over all rows of ``selected``."""
    selected = np.asarray(selected)
    return group_counts(selected, np.zeros(selected.shape[0], dtype=np.int64), 1, n_experts)[0]


@njit(cache=True)
def _accumulate_nb(counts, layers, groups, selected):
    for r in range(selected.shape[0]):
        l = layers[r]
        g = groups[r]
        for j in range(selected.shape[1]):
            counts[l, g, selected[r, j]] += 1


def _accumulate_np(counts, layers, groups, selected):
    k = selected.shape[1]
    np.add.at(counts, (np.repeat(layers, k), np.repeat(groups, k), selected.ravel()), 1)


def accumulate_counts(counts: np.ndarray, layers: np.ndarray, groups: np.ndarray, selected: np.ndarray) -> None:
    """In-place ``counts[layer, group, expert] += 1`` for every selection."""
    layers = np.ascontiguousarray(layers, dtype=np.int64)
    groups = np.ascontiguousarray(groups, dtype=np.int64)
    selected = np.ascontiguousarray(selected, dtype=np.int64)
    if selected.shape[0] == 0:
        return
    n_layers, n_groups, n_experts = counts.shape
    if layers.min() < 0 or layers.max() >= n_layers:
        raise ValueError("layer index out of range")
    if groups.min() < 0 or groups.max() >= n_groups:
        raise ValueError("group index out of range")
    if selected.min() < 0 or selected.max() >= n_experts:
        raise ValueError("expert index out of range")
    if _USE_NUMBA:
        _accumulate_nb(counts, layers, groups, selected)
    else:
        _accumulate_np(counts, layers, groups, selected)

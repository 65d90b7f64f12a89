"""Training objectives: PIT diarization BCE, attention-mask VAD loss, existence loss.

Values and gradients share a path: the best permutation / assignment is
chosen on plain arrays, then the chosen term is rebuilt on the tape.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

EPS = 1e-7
ALPHA_PROSE = 0.008
ALPHA_TABLE = 0.08


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def bce(y_true, y_pred) -> Tensor:
    """Elementwise -y log p - (1 - y) log(1 - p), with p clamped to [EPS, 1 - EPS]."""
    y = _data(y_true)
    p = nx.clip(y_pred, EPS, 1.0 - EPS)
    return -(y * nx.log(p) + (1.0 - y) * nx.log(1.0 - p))


def _bce_np(y: np.ndarray, p: np.ndarray) -> np.ndarray:
    p = np.clip(p, EPS, 1.0 - EPS)
    return -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))


def pit_diar_loss(y_true, y_pred) -> tuple[Tensor, tuple[int, ...]]:
    """Mean BCE under the best permutation of reference rows.

    Returns ``(loss, perm)`` where prediction row ``c`` is scored against
    reference row ``perm[c]``. Ties go to the lexicographically smallest perm.
    """
    y = np.asarray(y_true, dtype=np.float64)
    p = _data(y_pred)
    if y.shape != p.shape or y.ndim != 2:
        raise ValueError(f"label/prediction shapes differ: {y.shape} vs {p.shape}")
    n_spk, n_frames = y.shape
    # cost[c, r]: prediction row c against reference row r
    cost = np.array([[_bce_np(y[r], p[c]).sum() for r in range(n_spk)] for c in range(n_spk)])
    best, best_val = None, np.inf
    for perm in itertools.permutations(range(n_spk)):
        val = sum(cost[c, perm[c]] for c in range(n_spk))
        if val < best_val:
            best, best_val = perm, val
    loss = nx.sum_all(bce(y[list(best)], y_pred)) * (1.0 / (n_spk * n_frames))
    return loss, best


def target_mask(y_row) -> np.ndarray:
    y = np.asarray(y_row)
    if y.ndim != 1 or not np.isin(y, (0, 1)).all():
        raise ValueError("target mask needs a binary activity row")
    y = y.astype(np.float64)
    return np.outer(y, y)


def head_traces(weights) -> np.ndarray:
    w = np.asarray(_stack(weights))
    return np.trace(w, axis1=-2, axis2=-1)


def _stack(weights):
    if isinstance(weights, (list, tuple)):
        return np.stack([_data(w) for w in weights])
    return _data(weights)


def select_heads_by_trace(weights, k: int) -> list[tuple[int, float]]:
    """The ``k`` heads with largest attention trace (most identity-like).

    ``weights`` is H x T x T (array or list of per-head matrices). Returns
    ``(head index, trace)`` pairs, highest trace first, lower index on ties.
    """
    traces = head_traces(weights)
    if k > len(traces):
        raise ValueError(f"cannot select {k} heads out of {len(traces)}")
    order = sorted(range(len(traces)), key=lambda h: (-traces[h], h))
    return [(h, float(traces[h])) for h in order[:k]]


def vad_aux_loss(masks, heads) -> tuple[Tensor, tuple[int, ...]]:
    """Sum over speakers of the per-entry BCE between a mask and an attention head.

    Masks are matched to heads by the assignment with the lowest total loss.
    Returns ``(loss, assign)`` with mask ``c`` paired to ``heads[assign[c]]``.
    """
    if len(masks) != len(heads):
        raise ValueError(f"{len(masks)} masks for {len(heads)} selected heads")
    n = len(masks)
    masks = [np.asarray(m, dtype=np.float64) for m in masks]
    cost = np.array([[_bce_np(masks[c], _data(heads[h])).mean() for h in range(n)] for c in range(n)])
    best, best_val = None, np.inf
    for assign in itertools.permutations(range(n)):
        val = sum(cost[c, assign[c]] for c in range(n))
        if val < best_val:
            best, best_val = assign, val
    terms = [nx.mean_all(bce(masks[c], heads[best[c]])) for c in range(n)]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total, best


def existence_loss(logits, n_speakers: int) -> Tensor:
    """Mean BCE of sigmoid(logits) against [1] * n_speakers + [0]."""
    z = logits if isinstance(logits, Tensor) else Tensor(logits)
    if z.shape != (n_speakers + 1,):
        raise ValueError(f"expected {n_speakers + 1} existence logits, got {z.shape}")
    labels = np.array([1.0] * n_speakers + [0.0])
    # -log sigmoid(z) for positives, -log sigmoid(-z) for the negative
    signed = z * (2.0 * labels - 1.0)
    return -nx.mean_all(nx.log_sigmoid(signed))


@dataclass
class LossBreakdown:
    diar: Tensor
    vad: Tensor
    exist: Tensor
    total: Tensor
    alpha: float
    beta: float
    best_perm: tuple[int, ...] = ()
    selected_heads: list[tuple[int, float]] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {"diar": self.diar.item(), "vad": self.vad.item(),
                "exist": self.exist.item(), "total": self.total.item()}


def total_loss(diar, vad, exist, alpha: float, beta: float, **info) -> LossBreakdown:
    """diar + alpha * vad + beta * exist, evaluated left to right."""
    if alpha < 0 or beta < 0:
        raise ValueError("loss weights must be non-negative")
    diar, vad, exist = (x if isinstance(x, Tensor) else Tensor(x) for x in (diar, vad, exist))
    total = diar + vad * alpha + exist * beta
    return LossBreakdown(diar, vad, exist, total, alpha, beta, **info)

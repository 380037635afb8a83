"""Memory-bank contrastive loss: forward value and analytic gradient.

The loss couples the current batch of proposal embeddings with a snapshot
of the FIFO memory bank:

    total = (1/M) sum_i phi(c_i) * (L_in_i + L_cross_i)

    phi(c)      = c if c > theta else 0
    L_in_i      = -(1/M)     sum_{j != i, y_j = y_i} log softmax_batch(i, j)
    L_cross_i   = -(1/N_eff) sum_j w_ij             log softmax_bank(i, j)
    w_ij        = max(w0 - alpha * t_j, 0) if y_i = y_j else 0

where softmax denominators run over all other batch entries (in-batch) or
all bank entries (cross-batch), N_eff is the current bank occupancy, and
t_j is the record's backward step offset. Bank entries are constants: the
gradient is taken only with respect to the batch embeddings.

All arithmetic is double precision with log-sum-exp stabilization.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .membank import ProposalRecord, bank_arrays

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ContrastiveBatch:
    """Current-iteration proposals: unit-norm embeddings, labels, IoU scores."""

    embeddings: np.ndarray  # (M, D), rows unit-norm
    labels: np.ndarray  # (M,)
    consistencies: np.ndarray  # (M,) in [0, 1]

    def __post_init__(self):
        z = np.asarray(self.embeddings, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        c = np.asarray(self.consistencies, dtype=np.float64)
        if z.ndim != 2 or z.shape[0] < 1:
            raise ValueError(f"embeddings must be (M,D) with M>=1, got {z.shape}")
        if y.shape != (z.shape[0],) or c.shape != (z.shape[0],):
            raise ValueError("labels/consistencies must align with embeddings")
        norms = np.linalg.norm(z, axis=1)
        if np.any(np.abs(norms - 1.0) > _NORM_TOL):
            raise ValueError("batch embeddings must be unit-norm")
        if np.any((c < 0.0) | (c > 1.0)):
            raise ValueError("consistencies must lie in [0,1]")
        for name, arr in (("embeddings", z), ("labels", y), ("consistencies", c)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def size(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class ContrastiveConfig:
    """Loss hyperparameters (defaults follow the reference training setup)."""

    tau: float = 0.2
    theta: float = 0.5
    w0: float = 0.95
    alpha: float = 0.01
    lam: float = 0.3
    capacity: int = 8192
    dim: int = 16

    def __post_init__(self):
        if self.tau <= 0.0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.w0 <= 0.0:
            raise ValueError(f"w0 must be positive, got {self.w0}")
        if not 0.0 <= self.theta <= 1.0:
            raise ValueError(f"theta must be in [0,1], got {self.theta}")
        if self.alpha < 0.0 or self.lam < 0.0:
            raise ValueError("alpha and lam must be non-negative")


@dataclass(frozen=True)
class LossBreakdown:
    """Gated loss decomposition; total == in_batch + cross_batch and also
    equals (1/M) sum_i phi_i * L_i."""

    total: float
    in_batch: float
    cross_batch: float
    per_anchor: Tuple[Tuple[float, float], ...]  # (phi_i, L_i)


@dataclass(frozen=True)
class TotalLossInputs:
    """Scalar detection losses combined with the contrastive term."""

    cls_loss: float
    reg_loss: float
    mcl_loss: float

    def __post_init__(self):
        for name in ("cls_loss", "reg_loss", "mcl_loss"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")


def consistency_weight(c: float, theta: float) -> float:
    """Anchor gate: passes the IoU score through iff it strictly exceeds theta."""
    return c if c > theta else 0.0


def step_weight(y_i: int, y_j: int, t_j: int, w0: float, alpha: float) -> float:
    """Step-decayed positive-pair weight for bank entries, floored at 0."""
    if y_i != y_j:
        return 0.0
    return max(w0 - alpha * t_j, 0.0)


def _log_softmax_rows(scores: np.ndarray, exclude_diag: bool) -> np.ndarray:
    """Row-wise log softmax with max-subtraction; optionally excludes the
    diagonal from the denominator (self-contrast removal)."""
    s = scores.copy()
    if exclude_diag:
        np.fill_diagonal(s, -np.inf)
    m = np.max(s, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(s - m), axis=1, keepdims=True))
    return scores - lse


def in_batch_loss(batch: ContrastiveBatch, tau: float) -> Tuple[float, np.ndarray]:
    """Ungated in-batch supervised contrastive loss.

    Returns (scalar, per_anchor) where per_anchor[i] is the anchor's own
    term -(1/M) sum over its positives, and scalar = mean(per_anchor),
    i.e. the -(1/M^2) double sum. Zero when no positive pair exists.
    """
    if tau <= 0.0:
        raise ValueError("tau must be positive")
    z, y = batch.embeddings, batch.labels
    M = batch.size
    per_anchor = np.zeros(M)
    if M < 2:
        return 0.0, per_anchor
    scores = (z @ z.T) / tau
    logp = _log_softmax_rows(scores, exclude_diag=True)
    pos = (y[:, None] == y[None, :]) & ~np.eye(M, dtype=bool)
    per_anchor = -(logp * pos).sum(axis=1) / M
    return float(per_anchor.mean()), per_anchor


def _bank_weights(
    batch_labels: np.ndarray,
    bank_labels: np.ndarray,
    offsets: np.ndarray,
    config: ContrastiveConfig,
) -> np.ndarray:
    """(M, N) matrix of step weights w_ij."""
    decay = np.maximum(config.w0 - config.alpha * np.asarray(offsets, dtype=np.float64), 0.0)
    same = batch_labels[:, None] == bank_labels[None, :]
    return same * decay[None, :]


def cross_batch_loss(
    batch: ContrastiveBatch,
    bank_snapshot: Sequence[ProposalRecord],
    offsets: np.ndarray,
    config: ContrastiveConfig,
) -> Tuple[float, np.ndarray]:
    """Ungated cross-batch loss against a bank snapshot.

    per_anchor[i] = -(1/N_eff) sum_j w_ij * log softmax over the bank;
    scalar = mean(per_anchor). Zero on an empty bank.
    """
    M = batch.size
    per_anchor = np.zeros(M)
    if not bank_snapshot:
        return 0.0, per_anchor
    bz, by = bank_arrays(bank_snapshot)
    if bz.shape[1] != batch.embeddings.shape[1]:
        raise ValueError(
            f"embedding dim mismatch: batch D={batch.embeddings.shape[1]}, "
            f"bank D={bz.shape[1]}"
        )
    offsets = np.asarray(offsets)
    if offsets.shape != (len(bank_snapshot),):
        raise ValueError("offsets must align with the bank snapshot")
    n_eff = bz.shape[0]
    scores = (batch.embeddings @ bz.T) / config.tau
    logp = _log_softmax_rows(scores, exclude_diag=False)
    w = _bank_weights(batch.labels, by, offsets, config)
    per_anchor = -(w * logp).sum(axis=1) / n_eff
    return float(per_anchor.mean()), per_anchor


def contrastive_loss(
    batch: ContrastiveBatch,
    bank_snapshot: Sequence[ProposalRecord],
    offsets: np.ndarray,
    config: ContrastiveConfig,
) -> LossBreakdown:
    """Gated total loss with per-anchor breakdown."""
    _, per_in = in_batch_loss(batch, config.tau)
    _, per_cross = cross_batch_loss(batch, bank_snapshot, offsets, config)
    phi = np.array(
        [consistency_weight(c, config.theta) for c in batch.consistencies]
    )
    l_i = per_in + per_cross
    M = batch.size
    in_part = float((phi * per_in).sum() / M)
    cross_part = float((phi * per_cross).sum() / M)
    total = float((phi * l_i).sum() / M)
    return LossBreakdown(
        total=total,
        in_batch=in_part,
        cross_batch=cross_part,
        per_anchor=tuple((float(p), float(l)) for p, l in zip(phi, l_i)),
    )


def contrastive_loss_grad(
    batch: ContrastiveBatch,
    bank_snapshot: Sequence[ProposalRecord],
    offsets: np.ndarray,
    config: ContrastiveConfig,
) -> np.ndarray:
    """Analytic gradient of the gated total loss w.r.t. the batch embeddings.

    Returns an (M, D) array. Bank entries are constants and receive no
    gradient. Note each z_m picks up contributions both as an anchor and
    as a positive/negative inside other anchors' in-batch terms. Chain
    through L2 normalization with `l2_normalize_backward` to get gradients
    for pre-normalization features.
    """
    z, y = batch.embeddings, batch.labels
    M, D = z.shape
    tau = config.tau
    phi = np.array(
        [consistency_weight(c, config.theta) for c in batch.consistencies]
    )
    grad = np.zeros((M, D))

    # in-batch part
    if M >= 2:
        scores = (z @ z.T) / tau
        s = scores.copy()
        np.fill_diagonal(s, -np.inf)
        mx = np.max(s, axis=1, keepdims=True)
        expn = np.exp(s - mx)
        p = expn / expn.sum(axis=1, keepdims=True)  # (M,M), zero diagonal
        pos = ((y[:, None] == y[None, :]) & ~np.eye(M, dtype=bool)).astype(np.float64)
        npos = pos.sum(axis=1)  # positives per anchor
        a = phi / (M * M)  # anchor coefficient folding both 1/M factors
        # d/dz_i of -sum_j [s_ij - log D_i] = -(1/tau) [sum_pos z_j - npos_i * sum_k p_ik z_k]
        grad += (-a / tau)[:, None] * (pos @ z - npos[:, None] * (p @ z))
        # d/dz_m from other anchors i: -(a_i/tau) [pos_im - npos_i p_im] z_i
        coef = (-a / tau)[:, None] * (pos - npos[:, None] * p)  # (M,M) over (i,m)
        grad += coef.T @ z

    # cross-batch part
    if bank_snapshot:
        bz, by = bank_arrays(bank_snapshot)
        if bz.shape[1] != D:
            raise ValueError("embedding dim mismatch between batch and bank")
        n_eff = bz.shape[0]
        scores_b = (z @ bz.T) / tau
        mx = np.max(scores_b, axis=1, keepdims=True)
        expn = np.exp(scores_b - mx)
        q = expn / expn.sum(axis=1, keepdims=True)
        w = _bank_weights(y, by, np.asarray(offsets), config)
        b = phi / (M * n_eff)
        wsum = w.sum(axis=1)
        grad += (-b / tau)[:, None] * (w @ bz - wsum[:, None] * (q @ bz))

    return grad


def l2_normalize_backward(raw: np.ndarray, grad_z: np.ndarray) -> np.ndarray:
    """Backprop a gradient w.r.t. z = raw/|raw| to the raw vectors.

    Applies the normalization Jacobian (I - z z^T)/|raw| row-wise.
    """
    norms = np.linalg.norm(raw, axis=-1, keepdims=True)
    z = raw / norms
    radial = (grad_z * z).sum(axis=-1, keepdims=True)
    return (grad_z - radial * z) / norms


def total_loss(inputs: TotalLossInputs, lam: float) -> float:
    """Combined objective: cls + reg + lam * contrastive."""
    return inputs.cls_loss + inputs.reg_loss + lam * inputs.mcl_loss

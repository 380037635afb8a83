"""Desk-scale training demo for the memory-bank contrastive objective.

A two-layer projection head (affine -> ReLU -> affine -> L2 normalize)
with manual backpropagation, SGD with momentum, warmup + step-decay
learning rate, a synthetic Gaussian-cluster proposal generator, and
embedding compactness metrics. Everything is deterministic given seeds.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .contrastive import (
    ContrastiveBatch,
    ContrastiveConfig,
    contrastive_loss,
    contrastive_loss_grad,
    l2_normalize_backward,
)
from .membank import MemoryBank, ProposalRecord, backward_offsets

Params = Dict[str, np.ndarray]


# ---------------------------------------------------------------------------
# projection encoder


def init_encoder(input_dim: int, hidden_dim: int, embed_dim: int, seed: int) -> Params:
    """Uniform fan-in initialization of the two affine layers."""
    rng = np.random.default_rng(seed)
    lim1 = 1.0 / np.sqrt(input_dim)
    lim2 = 1.0 / np.sqrt(hidden_dim)
    return {
        "w1": rng.uniform(-lim1, lim1, size=(input_dim, hidden_dim)),
        "b1": rng.uniform(-lim1, lim1, size=(hidden_dim,)),
        "w2": rng.uniform(-lim2, lim2, size=(hidden_dim, embed_dim)),
        "b2": rng.uniform(-lim2, lim2, size=(embed_dim,)),
    }


def encoder_forward(params: Params, features: np.ndarray) -> Tuple[np.ndarray, Dict]:
    """Map features to unit-norm embeddings; cache activations for backprop."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != params["w1"].shape[0]:
        raise ValueError(
            f"feature dim {x.shape[1]} != encoder input dim {params['w1'].shape[0]}"
        )
    a = x @ params["w1"] + params["b1"]
    r = np.maximum(a, 0.0)
    u = r @ params["w2"] + params["b2"]
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("pre-normalization output is (near) zero; cannot normalize")
    z = u / norms[:, None]
    cache = {"x": x, "a": a, "r": r, "u": u, "z": z}
    return z, cache


def encoder_backward(
    params: Params, cache: Dict, grad_z: np.ndarray
) -> Tuple[Params, np.ndarray]:
    """Exact gradients of the encoder map; returns (param grads, input grads)."""
    gu = l2_normalize_backward(cache["u"], grad_z)
    grads = {
        "w2": cache["r"].T @ gu,
        "b2": gu.sum(axis=0),
    }
    gr = gu @ params["w2"].T
    ga = gr * (cache["a"] > 0.0)
    grads["w1"] = cache["x"].T @ ga
    grads["b1"] = ga.sum(axis=0)
    gx = ga @ params["w1"].T
    return grads, gx


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class SgdState:
    """Momentum buffers plus the fixed optimizer hyperparameters."""

    momentum: float = 0.9
    weight_decay: float = 1e-4
    buffers: Params = field(default_factory=dict)


def sgd_step(params: Params, grads: Params, state: SgdState, lr: float) -> Params:
    """v <- m*v + (g + wd*p); p <- p - lr*v. Returns updated params."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        buf = state.buffers.get(name)
        if buf is None:
            buf = np.zeros_like(p)
        buf = state.momentum * buf + (g + state.weight_decay * p)
        state.buffers[name] = buf
        out[name] = p - lr * buf
    return out


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup then step decay at fixed iteration milestones."""

    base_lr: float = 1e-3
    warmup_iters: int = 200
    warmup_start_fraction: float = 1.0 / 3.0
    milestones: Tuple[int, ...] = (8000,)
    decay_factor: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.decay_factor < 1.0:
            raise ValueError("decay factor must lie in (0,1)")
        if self.warmup_iters < 0:
            raise ValueError("warmup must be >= 0")


def lr_at(schedule: LrSchedule, iteration: int) -> float:
    """Learning rate at an iteration index (0-based)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    lr = schedule.base_lr
    if schedule.warmup_iters > 0 and iteration < schedule.warmup_iters:
        f = schedule.warmup_start_fraction
        lr *= f + (1.0 - f) * iteration / schedule.warmup_iters
    for m in schedule.milestones:
        if iteration >= m:
            lr *= schedule.decay_factor
    return lr


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticConfig:
    """Class-conditional Gaussian clusters standing in for proposal features."""

    n_classes: int = 5
    input_dim: int = 32
    hidden_dim: int = 64
    embed_dim: int = 16
    separation: float = 4.0
    noise: float = 1.0
    consistency_low: float = 0.3
    consistency_high: float = 1.0
    batch_size: int = 12
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        for name in ("input_dim", "hidden_dim", "embed_dim", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0.0 or self.separation < 0.0:
            raise ValueError("noise and separation must be non-negative")


def class_centers(config: SyntheticConfig) -> np.ndarray:
    """Fixed per-config cluster centers at the configured separation."""
    rng = np.random.default_rng([config.seed, 0xC17])
    c = rng.normal(size=(config.n_classes, config.input_dim))
    c /= np.linalg.norm(c, axis=1, keepdims=True)
    return c * config.separation


def generate_batch(
    config: SyntheticConfig, step: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic batch for (config, step): features, labels, consistencies."""
    rng = np.random.default_rng([config.seed, 1 + step])
    centers = class_centers(config)
    labels = rng.integers(0, config.n_classes, size=config.batch_size)
    feats = centers[labels] + config.noise * rng.normal(
        size=(config.batch_size, config.input_dim)
    )
    cons = rng.uniform(
        config.consistency_low, config.consistency_high, size=config.batch_size
    )
    return feats, labels, cons


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    encoder: Params
    history: List[Dict[str, float]]
    bank: MemoryBank
    cls_head: Optional[Params] = None


def _cls_loss_and_grad(
    head: Params, z: np.ndarray, labels: np.ndarray
) -> Tuple[float, np.ndarray, Params]:
    """Softmax cross-entropy of a linear head on z; surrogate detection
    classification loss so the combined objective is exercised end to end."""
    logits = z @ head["wc"] + head["bc"]
    m = logits.max(axis=1, keepdims=True)
    logp = logits - (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))
    M = z.shape[0]
    loss = float(-logp[np.arange(M), labels].mean())
    p = np.exp(logp)
    p[np.arange(M), labels] -= 1.0
    p /= M
    grads = {"wc": z.T @ p, "bc": p.sum(axis=0)}
    return loss, p @ head["wc"].T, grads


def train(
    config: SyntheticConfig,
    loss_config: ContrastiveConfig,
    iterations: int,
    schedule: Optional[LrSchedule] = None,
    use_cls_head: bool = False,
    enqueue_all: bool = True,
) -> TrainResult:
    """Run the fine-tuning style loop: encode, loss, update, enqueue.

    With enqueue_all=False only proposals passing the consistency gate are
    stored in the bank.
    """
    if schedule is None:
        schedule = LrSchedule()
    encoder = init_encoder(
        config.input_dim, config.hidden_dim, config.embed_dim, config.seed
    )
    head = None
    if use_cls_head:
        rng = np.random.default_rng([config.seed, 0xC15])
        lim = 1.0 / np.sqrt(config.embed_dim)
        head = {
            "wc": rng.uniform(-lim, lim, size=(config.embed_dim, config.n_classes)),
            "bc": np.zeros(config.n_classes),
        }
    bank = MemoryBank(loss_config.capacity)
    enc_state = SgdState()
    head_state = SgdState()
    history: List[Dict[str, float]] = []

    for step in range(iterations):
        feats, labels, cons = generate_batch(config, step)
        z, cache = encoder_forward(encoder, feats)
        batch = ContrastiveBatch(z, labels, cons)
        snap = bank.snapshot()
        offsets = backward_offsets(snap, step)
        breakdown = contrastive_loss(batch, snap, offsets, loss_config)

        grad_z = loss_config.lam * contrastive_loss_grad(
            batch, snap, offsets, loss_config
        )
        cls_loss = 0.0
        head_grads = None
        if head is not None:
            cls_loss, gz_cls, head_grads = _cls_loss_and_grad(head, z, labels)
            grad_z = grad_z + gz_cls

        lr = lr_at(schedule, step)
        # no objective at all (lam=0, no head): nothing to optimize, so skip
        # the step rather than let weight decay drift the parameters
        if head is not None or np.any(grad_z):
            enc_grads, _ = encoder_backward(encoder, cache, grad_z)
            encoder = sgd_step(encoder, enc_grads, enc_state, lr)
            if head is not None:
                head = sgd_step(head, head_grads, head_state, lr)

        history.append(
            {
                "iteration": float(step),
                "total": cls_loss + loss_config.lam * breakdown.total,
                "mcl": breakdown.total,
                "in_batch": breakdown.in_batch,
                "cross_batch": breakdown.cross_batch,
                "cls": cls_loss,
                "lr": lr,
            }
        )

        records = []
        for i in range(batch.size):
            if not enqueue_all and cons[i] <= loss_config.theta:
                continue
            records.append(
                ProposalRecord(z[i].copy(), int(labels[i]), float(cons[i]), step)
            )
        bank.enqueue_batch(records, step)

    return TrainResult(encoder=encoder, history=history, bank=bank, cls_head=head)


# ---------------------------------------------------------------------------
# metrics and export


def compactness_metrics(
    embeddings: np.ndarray, labels: np.ndarray
) -> Tuple[float, float, float, List[str]]:
    """Mean intra-class and inter-class cosine similarity and their margin.

    Classes with fewer than 2 samples contribute no intra pairs and are
    reported in the warnings list.
    """
    z = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(labels)
    z = z / np.linalg.norm(z, axis=1, keepdims=True)
    classes, counts = np.unique(y, return_counts=True)
    if (counts >= 2).sum() < 2 and len(classes) < 2:
        raise ValueError("need at least 2 classes")
    warnings = [
        f"class {c} has {n} sample(s); excluded from intra-class pairs"
        for c, n in zip(classes, counts)
        if n < 2
    ]
    gram = z @ z.T
    same = y[:, None] == y[None, :]
    triu = np.triu(np.ones_like(gram, dtype=bool), k=1)
    intra_mask = same & triu
    inter_mask = ~same & triu
    if not intra_mask.any() or not inter_mask.any():
        raise ValueError("need both intra-class and inter-class pairs")
    intra = float(gram[intra_mask].mean())
    inter = float(gram[inter_mask].mean())
    return intra, inter, intra - inter, warnings


def export_embeddings(embeddings: np.ndarray, labels: Sequence, path: str) -> None:
    """CSV dump: header 'label,dim0,...', full double precision."""
    z = np.asarray(embeddings, dtype=np.float64)
    if len(z) != len(labels):
        raise ValueError("embeddings and labels must have the same length")
    dim = z.shape[1] if z.ndim == 2 and len(z) else 0
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["label"] + [f"dim{i}" for i in range(dim)])
            for lab, row in zip(labels, z):
                writer.writerow([lab] + [repr(float(v)) for v in row])
    except OSError as exc:
        raise OSError(f"failed to write embeddings to {path}: {exc}") from exc


def write_loss_curve(history: List[Dict[str, float]], path: str) -> None:
    """Loss-curve CSV: iteration, total, in_batch, cross_batch (+ extras)."""
    cols = ["iteration", "total", "in_batch", "cross_batch", "mcl", "cls", "lr"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in history:
            writer.writerow([repr(row[c]) for c in cols])


# ---------------------------------------------------------------------------
# gradient checking


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def gradcheck(
    instances: int, seed: int, fd_step: float = 1e-6, corrupt: bool = False
) -> Dict:
    """Central finite-difference check of the analytic gradients.

    Each instance draws random sizes (M in 2..6, bank in 0..16, D in {4,8})
    and checks both the raw-feature gradient of the loss through L2
    normalization and the full encoder-parameter gradient. `corrupt`
    deliberately scales the analytic gradient as a negative self-test.
    """
    rng = np.random.default_rng(seed)
    max_err = 0.0
    for _ in range(instances):
        M = int(rng.integers(2, 7))
        n_bank = int(rng.integers(0, 17))
        D = int(rng.choice([4, 8]))
        cfg = ContrastiveConfig(
            tau=float(rng.uniform(0.2, 1.0)), capacity=max(n_bank, 1), dim=D
        )
        n_labels = 3
        labels = rng.integers(0, n_labels, size=M)
        cons = rng.uniform(0.0, 1.0, size=M)
        snap = []
        for j in range(n_bank):
            e = rng.normal(size=D)
            snap.append(
                ProposalRecord(
                    e / np.linalg.norm(e),
                    int(rng.integers(0, n_labels)),
                    float(rng.uniform(0, 1)),
                    int(j),
                )
            )
        current = n_bank
        offsets = backward_offsets(snap, current)

        def loss_of_z(zraw: np.ndarray) -> float:
            zn = zraw / np.linalg.norm(zraw, axis=1, keepdims=True)
            batch = ContrastiveBatch(zn, labels, cons)
            return contrastive_loss(batch, snap, offsets, cfg).total

        # raw-embedding gradient through the normalization Jacobian
        v = rng.normal(size=(M, D)) * rng.uniform(0.5, 2.0)
        zn = v / np.linalg.norm(v, axis=1, keepdims=True)
        batch = ContrastiveBatch(zn, labels, cons)
        gz = contrastive_loss_grad(batch, snap, offsets, cfg)
        gv = l2_normalize_backward(v, gz)
        if corrupt:
            gv = gv * 1.001 + 1e-4
        gv_fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            vp = v.copy()
            vp[idx] += fd_step
            vm = v.copy()
            vm[idx] -= fd_step
            gv_fd[idx] = (loss_of_z(vp) - loss_of_z(vm)) / (2 * fd_step)
        max_err = max(max_err, _rel_err(gv, gv_fd))

        # encoder-parameter gradient
        d_in, hidden = 6, 8
        enc = init_encoder(d_in, hidden, D, int(rng.integers(0, 2**31)))
        x = rng.normal(size=(M, d_in))

        def loss_of_params(p: Params) -> float:
            z, _ = encoder_forward(p, x)
            return contrastive_loss(
                ContrastiveBatch(z, labels, cons), snap, offsets, cfg
            ).total

        z, cache = encoder_forward(enc, x)
        gz = contrastive_loss_grad(
            ContrastiveBatch(z, labels, cons), snap, offsets, cfg
        )
        grads, _ = encoder_backward(enc, cache, gz)
        for name in enc:
            g = grads[name]
            if corrupt:
                g = g * 1.001 + 1e-4
            g_fd = np.zeros_like(g)
            for idx in np.ndindex(g.shape):
                pp = {k: v2.copy() for k, v2 in enc.items()}
                pp[name][idx] += fd_step
                pm = {k: v2.copy() for k, v2 in enc.items()}
                pm[name][idx] -= fd_step
                g_fd[idx] = (loss_of_params(pp) - loss_of_params(pm)) / (2 * fd_step)
            max_err = max(max_err, _rel_err(g, g_fd))

    return {
        "instances": instances,
        "max_rel_err": max_err,
        "pass": bool(max_err < 1e-5),
    }

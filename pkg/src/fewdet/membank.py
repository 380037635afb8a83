"""Fixed-capacity FIFO memory bank of proposal records.

Each record stores a unit-norm embedding, its category label, the IoU
consistency score of the proposal against its matched ground truth, and the
training step at which it was enqueued. Bank entries are treated as
constants by the loss (stop-gradient); snapshots are immutable copies.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

import numpy as np

_NORM_TOL = 1e-6


@dataclass(frozen=True)
class ProposalRecord:
    """One bank entry: (embedding, label, consistency, step)."""

    embedding: np.ndarray
    label: int
    consistency: float
    step: int

    def __post_init__(self):
        emb = np.asarray(self.embedding, dtype=np.float64)
        emb.setflags(write=False)
        object.__setattr__(self, "embedding", emb)
        if abs(float(np.linalg.norm(emb)) - 1.0) > _NORM_TOL:
            raise ValueError(
                f"embedding is not unit-norm (|z|={np.linalg.norm(emb):.8f})"
            )
        if not 0.0 <= self.consistency <= 1.0:
            raise ValueError(f"consistency must be in [0,1], got {self.consistency}")
        if self.step < 0:
            raise ValueError(f"step must be non-negative, got {self.step}")


class MemoryBank:
    """FIFO queue of ProposalRecords with strict oldest-first eviction."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError(f"capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._records: deque = deque(maxlen=capacity)
        self.current_step = 0

    def __len__(self) -> int:
        return len(self._records)

    def enqueue_batch(self, records: Iterable[ProposalRecord], step: int) -> None:
        """Append records at the given step, evicting oldest beyond capacity.

        Steps must not regress. The records' stored step field is replaced
        by `step` so one enqueue shares a single iteration index.
        """
        if step < self.current_step:
            raise ValueError(
                f"step regression: enqueue at {step} after step {self.current_step}"
            )
        for rec in records:
            self._records.append(
                ProposalRecord(rec.embedding, rec.label, rec.consistency, step)
            )
        self.current_step = step

    def snapshot(self) -> Tuple[ProposalRecord, ...]:
        """Point-in-time immutable copy, oldest first."""
        return tuple(self._records)


def backward_offsets(
    records: Sequence[ProposalRecord], current_step: int
) -> np.ndarray:
    """Per-record backward step offsets t_j = current_step - record.step."""
    steps = np.array([r.step for r in records], dtype=np.int64)
    if len(steps) and current_step < steps.max():
        raise ValueError("current_step precedes a stored record step")
    return current_step - steps


def save_bank(bank: MemoryBank, path: str) -> None:
    """Serialize bank state to a JSON checkpoint (full f64 embeddings)."""
    payload = {
        "format": "fewdet-membank-v1",
        "capacity": bank.capacity,
        "current_step": bank.current_step,
        "records": [
            {
                "embedding": [float(v) for v in r.embedding],
                "label": int(r.label),
                "consistency": float(r.consistency),
                "step": int(r.step),
            }
            for r in bank.snapshot()
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_bank(path: str) -> MemoryBank:
    """Restore a bank from a JSON checkpoint written by save_bank."""
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("format") != "fewdet-membank-v1":
        raise ValueError(f"unrecognized bank checkpoint format in {path}")
    bank = MemoryBank(payload["capacity"])
    for rec in payload["records"]:
        bank._records.append(
            ProposalRecord(
                np.array(rec["embedding"], dtype=np.float64),
                rec["label"],
                rec["consistency"],
                rec["step"],
            )
        )
    bank.current_step = payload["current_step"]
    return bank


def bank_arrays(
    records: Sequence[ProposalRecord],
) -> Tuple[np.ndarray, np.ndarray]:
    """Stack snapshot embeddings and labels into arrays ((N,D), (N,))."""
    if not records:
        return np.zeros((0, 0)), np.zeros((0,), dtype=np.int64)
    emb = np.stack([r.embedding for r in records])
    labels = np.array([r.label for r in records], dtype=np.int64)
    return emb, labels

"""Right-padded minibatches of patient records."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import PatientRecord


@dataclass
class Batch:
    ids: list[str]
    meds: np.ndarray  # B x T x M
    diags: np.ndarray  # B x T x D
    demo: np.ndarray  # B x G
    valid: np.ndarray  # B x T, True on real months
    labels: np.ndarray  # B

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)

    @property
    def demo_stream(self) -> np.ndarray:
        return np.repeat(self.demo[:, None, :], self.meds.shape[1], axis=1) * self.valid[..., None]

    def concatenated(self) -> np.ndarray:
        """Per-month [meds | diags | demo] vectors."""
        return np.concatenate([self.meds, self.diags, self.demo_stream], axis=-1)


def make_batch(records: Sequence[PatientRecord]) -> Batch:
    if not records:
        raise ValueError("empty batch")
    if min(r.T for r in records) < 1:
        raise ValueError("every patient needs at least one time step")
    B = len(records)
    T = max(r.T for r in records)
    M = records[0].meds.shape[1]
    D = records[0].diags.shape[1]
    meds = np.zeros((B, T, M))
    diags = np.zeros((B, T, D))
    valid = np.zeros((B, T), dtype=bool)
    for i, r in enumerate(records):
        meds[i, : r.T] = r.meds
        diags[i, : r.T] = r.diags
        valid[i, : r.T] = True
    return Batch(
        ids=[r.id for r in records],
        meds=meds,
        diags=diags,
        demo=np.stack([r.demo for r in records]),
        valid=valid,
        labels=np.array([r.label for r in records], dtype=np.int64),
    )


def pooling_weights(valid: np.ndarray, mode: str = "mean") -> np.ndarray:
    """B x 1 x T weights that average (or pick the last of) the valid steps."""
    valid = valid.astype(np.float64)
    if mode == "mean":
        w = valid / valid.sum(axis=1, keepdims=True)
    elif mode == "last":
        w = np.zeros_like(valid)
        w[np.arange(len(valid)), valid.sum(axis=1).astype(int) - 1] = 1.0
    else:
        raise ValueError(f"unknown pooling {mode!r}")
    return w[:, None, :]

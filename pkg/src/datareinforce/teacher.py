"""Teacher models, sparse predictions, and per-prediction metrics.

A teacher maps a uint8 image batch to rows of class probabilities.  Every
implementation routes through `Teacher.predict`, which counts invocations on
the instance and on a module-global tally; training-time code paths prove
their teacher-free claim by showing the tally never moves.

`sparsify` keeps only the top-k raw probabilities per row; `densify` expands
them back to a full row renormalized over the kept support.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# Global count of Teacher.predict invocations across all instances.  Reset
# with reset_call_count(); compared before/after teacher-free code paths.
_GLOBAL_CALLS = 0


def global_call_count() -> int:
    return _GLOBAL_CALLS


def reset_call_count() -> None:
    global _GLOBAL_CALLS
    _GLOBAL_CALLS = 0


class Teacher:
    """Base class: subclasses implement `_predict_impl`."""

    #: (height, width) the teacher expects; replay targets use this.
    input_hw: tuple[int, int]
    #: short identity string recorded in store headers.
    identity: str = "teacher"

    def __init__(self):
        self.calls = 0

    def predict(self, batch: np.ndarray) -> np.ndarray:
        """Class probabilities for a uint8 batch (B, H, W, C).

        Returns float64 rows that sum to 1 within 1e-5.
        """
        global _GLOBAL_CALLS
        if batch.ndim != 4 or batch.dtype != np.uint8:
            raise ValueError(f"expected uint8 (B, H, W, C) batch, got {batch.dtype} {batch.shape}")
        self.calls += 1
        _GLOBAL_CALLS += 1
        probs = self._predict_impl(batch)
        return np.asarray(probs, dtype=np.float64)

    def _predict_impl(self, batch: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class EnsembleTeacher(Teacher):
    """Arithmetic mean of member predictions.

    Members are invoked through their implementation hook, so one ensemble
    prediction counts as one teacher call.
    """

    def __init__(self, members: list[Teacher]):
        super().__init__()
        if not members:
            raise ValueError("ensemble needs at least one member")
        hws = {m.input_hw for m in members}
        if len(hws) != 1:
            raise ValueError(f"members disagree on input dims: {sorted(hws)}")
        self.members = list(members)
        self.input_hw = members[0].input_hw
        self.identity = "ensemble(" + ",".join(m.identity for m in members) + ")"

    def _predict_impl(self, batch: np.ndarray) -> np.ndarray:
        acc = self.members[0]._predict_impl(batch).astype(np.float64)
        for m in self.members[1:]:
            acc = acc + m._predict_impl(batch)
        return acc / len(self.members)


@dataclass(frozen=True)
class SparseProbs:
    """Top-k slice of one probability row.

    entries hold (class index, raw probability) sorted by descending
    probability with ties broken by ascending index.
    """

    indices: tuple[int, ...]
    probs: tuple[float, ...]

    @property
    def k(self) -> int:
        return len(self.indices)

    @property
    def confidence(self) -> float:
        """Largest kept probability (first entry by the sort contract)."""
        return self.probs[0]


def sparsify(row: np.ndarray, top_k: int) -> SparseProbs:
    """Keep the top_k largest probabilities of one row, raw (unnormalized).

    Ordering: descending probability, ties by ascending class index.
    """
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1:
        raise ValueError(f"expected a 1-d probability row, got shape {row.shape}")
    if not 1 <= top_k <= row.shape[0]:
        raise ValueError(f"top_k {top_k} outside [1, {row.shape[0]}]")
    # lexsort keys: last key is primary, so sort by -prob then index.
    order = np.lexsort((np.arange(row.shape[0]), -row))[:top_k]
    return SparseProbs(
        indices=tuple(int(i) for i in order),
        probs=tuple(float(row[i]) for i in order),
    )


def densify(sp: SparseProbs, num_classes: int) -> np.ndarray:
    """Expand to a full float64 row, renormalized over the kept support.

    Entries outside the support are exactly 0; support entries are scaled so
    the row sums to 1.
    """
    out = np.zeros(num_classes, dtype=np.float64)
    idx = np.asarray(sp.indices, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= num_classes):
        raise ValueError(f"class index outside [0, {num_classes})")
    vals = np.asarray(sp.probs, dtype=np.float64)
    total = vals.sum()
    if total <= 0.0:
        raise ValueError("support has zero total mass, cannot renormalize")
    out[idx] = vals / total
    return out


def confidence_metric(probs: np.ndarray) -> float:
    """Largest probability of a dense row."""
    return float(np.max(probs))


def entropy_metric(probs: np.ndarray) -> float:
    """Shannon entropy in nats; zero entries contribute zero."""
    p = np.asarray(probs, dtype=np.float64)
    nz = p[p > 0.0]
    return float(-(nz * np.log(nz)).sum())


def loss_metric(probs: np.ndarray, label: int) -> float:
    """Negative log probability of the label; +inf when the mass is zero."""
    p = float(probs[label])
    if p <= 0.0:
        return math.inf
    return -math.log(p)

"""Element marking: greedy Doerfler bulk criterion and absolute thresholding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .estimator import EstimatorField

__all__ = ["MarkingRule", "Marking", "mark"]


@dataclass(frozen=True)
class MarkingRule:
    """Either Doerfler bulk marking (theta) or local thresholding (tau)."""

    kind: str
    theta: Optional[float] = None
    tau: Optional[float] = None

    def __post_init__(self):
        if self.kind == "dorfler":
            if self.tau is not None:
                raise ValueError("dorfler marking takes theta, not tau")
            if self.theta is None or not 0.0 < self.theta <= 1.0:
                raise ValueError(f"theta must lie in (0, 1], got {self.theta}")
        elif self.kind == "threshold":
            if self.theta is not None:
                raise ValueError("threshold marking takes tau, not theta")
            if self.tau is None or self.tau <= 0.0:
                raise ValueError(f"tau must be positive, got {self.tau}")
        else:
            raise ValueError(f"unknown marking kind {self.kind!r}")

    @classmethod
    def dorfler(cls, theta: float = 0.5) -> "MarkingRule":
        return cls("dorfler", theta=theta)

    @classmethod
    def threshold(cls, tau: float) -> "MarkingRule":
        return cls("threshold", tau=tau)


@dataclass(frozen=True)
class Marking:
    """Marked triangle ids plus the aligned 0-1 vector over the leaves."""

    triangle_ids: frozenset[int]
    mask: np.ndarray  # uint8, leaf-triangle order

    def mask_bytes(self) -> bytes:
        return np.asarray(self.mask, dtype=np.uint8).tobytes()


def mark(eta: EstimatorField, rule: MarkingRule) -> Marking:
    """Select triangles for refinement.

    Doerfler: sort eta_T^2 descending (ties by ascending triangle id) and
    take the shortest prefix whose sum reaches theta * total.  Threshold:
    every triangle with eta_T^2 > tau^2.
    """
    eta_sq = eta.eta_sq
    leaf_ids = np.asarray(eta.mesh.leaf_ids())
    if eta_sq.size == 0:
        raise ValueError("cannot mark on an empty estimator field")
    mask = np.zeros(eta_sq.size, dtype=np.uint8)
    if rule.kind == "threshold":
        sel = eta_sq > rule.tau ** 2
        mask[sel] = 1
        return Marking(frozenset(leaf_ids[sel].tolist()), mask)
    # greedy Doerfler prefix
    order = np.lexsort((leaf_ids, -eta_sq))
    csum = np.cumsum(eta_sq[order])
    total = csum[-1]
    if total == 0.0:
        return Marking(frozenset(), mask)
    target = rule.theta * total
    k = int(np.searchsorted(csum, target, side="left"))
    k = min(k, eta_sq.size - 1)
    chosen = order[: k + 1]
    mask[chosen] = 1
    return Marking(frozenset(leaf_ids[chosen].tolist()), mask)

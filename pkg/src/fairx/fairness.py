"""Equalized-odds metrics and a differentiable surrogate for training."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .autodiff import SMOOTH_ABS_DELTA, Node, Tape

log = logging.getLogger(__name__)


class MetricError(ValueError):
    """A metric is undefined for the given data (e.g. an empty cell)."""


@dataclass
class GroupRates:
    """Confusion counts per group g in {0, 1}; rates are None when undefined."""

    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray

    def tpr(self, g: int) -> float | None:
        pos = self.tp[g] + self.fn[g]
        return None if pos == 0 else self.tp[g] / pos

    def fpr(self, g: int) -> float | None:
        neg = self.fp[g] + self.tn[g]
        return None if neg == 0 else self.fp[g] / neg

    @property
    def undefined(self) -> list[str]:
        out = []
        for g in (0, 1):
            if self.tpr(g) is None:
                out.append(f"TPR_{g}")
            if self.fpr(g) is None:
                out.append(f"FPR_{g}")
        return out

    def to_dict(self) -> dict:
        return {
            "tpr": [self.tpr(0), self.tpr(1)],
            "fpr": [self.fpr(0), self.fpr(1)],
            "tp": self.tp.tolist(), "fp": self.fp.tolist(),
            "tn": self.tn.tolist(), "fn": self.fn.tolist(),
        }


def _binary(name, v):
    v = np.asarray(v)
    if v.size and not np.isin(v, (0, 1)).all():
        raise ValueError(f"{name} must be binary")
    return v.astype(np.int64)


def group_rates(predictions, y, a) -> GroupRates:
    pred, y, a = _binary("predictions", predictions), _binary("y", y), _binary("a", a)
    if not (len(pred) == len(y) == len(a)):
        raise ValueError("predictions, y and a must have equal length")
    counts = {k: np.zeros(2, dtype=np.int64) for k in ("tp", "fp", "tn", "fn")}
    for g in (0, 1):
        m = a == g
        counts["tp"][g] = np.sum(m & (y == 1) & (pred == 1))
        counts["fn"][g] = np.sum(m & (y == 1) & (pred == 0))
        counts["fp"][g] = np.sum(m & (y == 0) & (pred == 1))
        counts["tn"][g] = np.sum(m & (y == 0) & (pred == 0))
    return GroupRates(**counts)


def eo_gap(predictions, y, a) -> float:
    """|TPR_0 - TPR_1| + |FPR_0 - FPR_1|; raises MetricError on an empty cell."""
    r = group_rates(predictions, y, a)
    if r.undefined:
        raise MetricError(f"undefined rates: {', '.join(r.undefined)}")
    return abs(r.tpr(0) - r.tpr(1)) + abs(r.fpr(0) - r.fpr(1))


def soft_eo_loss(logits, y, a, delta: float = SMOOTH_ABS_DELTA) -> float:
    """Sigmoid-relaxed EO gap on numpy arrays (mirrors :func:`build_soft_eo`)."""
    s = expit(np.asarray(logits, dtype=np.float64))
    y, a = np.asarray(y), np.asarray(a)
    total = 0.0
    for label in (1, 0):
        m0, m1 = (y == label) & (a == 0), (y == label) & (a == 1)
        if not (m0.any() and m1.any()):
            log.debug("label %d lacks a group in this batch; EO term skipped", label)
            continue
        u = s[m0].mean() - s[m1].mean()
        total += np.sqrt(u * u + delta * delta)
    return float(total)


@dataclass
class SoftEoInputs:
    """Per-instance cell weights (lanes like the logit) and per-label gates."""

    weights: dict[tuple[int, int], Node]
    gates: dict[int, Node]

    @staticmethod
    def create(tape: Tape) -> "SoftEoInputs":
        weights = {(y, g): tape.input(f"eo_w{y}{g}") for y in (0, 1) for g in (0, 1)}
        gates = {y: tape.input(f"eo_gate{y}") for y in (0, 1)}
        return SoftEoInputs(weights, gates)

    @staticmethod
    def bind(y, a, lane_shape=None) -> dict:
        y, a = np.asarray(y), np.asarray(a)
        shape = lane_shape or (len(y), 1, 1)
        out = {}
        for label in (0, 1):
            present = True
            for g in (0, 1):
                m = ((y == label) & (a == g)).astype(np.float64)
                n = m.sum()
                present &= n > 0
                out[f"eo_w{label}{g}"] = (m / n if n else m).reshape(shape)
            out[f"eo_gate{label}"] = 1.0 if present else 0.0
        return out


def build_soft_eo(tape: Tape, z: Node, slots: SoftEoInputs,
                  delta: float = SMOOTH_ABS_DELTA) -> Node:
    """smooth|sTPR_0 - sTPR_1| + smooth|sFPR_0 - sFPR_1| over a batch of logits ``z``.

    Soft rates are cell means of sigmoid(z); a label whose batch lacks
    either group is gated to zero.
    """
    s = tape.sigmoid(z)
    terms = []
    for label in (1, 0):
        r0 = tape.lane_sum(tape.mul(s, slots.weights[(label, 0)]))
        r1 = tape.lane_sum(tape.mul(s, slots.weights[(label, 1)]))
        terms.append(tape.mul(slots.gates[label], tape.abs_smooth(tape.sub(r0, r1), delta)))
    return tape.sum(terms)

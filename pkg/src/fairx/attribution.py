"""Integrated Gradients, group-conditional baselines and explanation disparity.

Numeric functions (numpy) serve evaluation; the ``build_*`` functions emit
the same quantities as graph nodes so training can differentiate through
them.  Baselines always enter graphs as bound inputs, never as parameters,
so no gradient reaches them.

Graph lane layout used by :func:`build_disparity`:
axis 0 indexes instances, axis 1 the group baseline (g = 0, 1) and
axis 2 the integration step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Node, Tape
from .model import MlpParams, ParamNodes, build_logit, input_gradient, logit

# smoothing inside graph norms so their derivative stays finite at 0
NORM_DELTA = 1e-12
DEFAULT_EPS = 1e-8


@dataclass
class BaselineState:
    """EMA estimates of b_{y,g}; ``baselines[y, g]`` is a length-p vector."""

    baselines: np.ndarray
    gamma: float = 0.1
    counts: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))

    def __post_init__(self):
        self.baselines = np.asarray(self.baselines, dtype=np.float64)
        if self.baselines.ndim != 3 or self.baselines.shape[:2] != (2, 2):
            raise ValueError("baselines must have shape (2, 2, p)")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not np.all(np.isfinite(self.baselines)):
            raise ValueError("baselines must be finite")
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(2, 2)

    @property
    def dim(self) -> int:
        return self.baselines.shape[2]

    def get(self, y: int, g: int) -> np.ndarray:
        return self.baselines[y, g]

    def copy(self) -> "BaselineState":
        return BaselineState(self.baselines.copy(), self.gamma, self.counts.copy())

    def to_dict(self) -> dict:
        d = {f"baseline_y{y}_g{g}": self.baselines[y, g].tolist()
             for y in (0, 1) for g in (0, 1)}
        d["gamma"] = self.gamma
        d["update_counts"] = self.counts.tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BaselineState":
        b = np.array([[d[f"baseline_y{y}_g{g}"] for g in (0, 1)] for y in (0, 1)],
                     dtype=np.float64)
        counts = d.get("update_counts", np.zeros((2, 2)))
        return cls(b, float(d["gamma"]), np.asarray(counts))


def init_baselines(X, y, a, indices=None, gamma: float = 0.1) -> BaselineState:
    """Per-(y, g) feature means over ``indices`` (all rows if None)."""
    X, y, a = np.asarray(X, dtype=np.float64), np.asarray(y), np.asarray(a)
    if indices is not None:
        idx = np.asarray(indices)
        X, y, a = X[idx], y[idx], a[idx]
    b = np.empty((2, 2, X.shape[1]))
    for yy in (0, 1):
        for g in (0, 1):
            cell = (y == yy) & (a == g)
            if not cell.any():
                raise ValueError(f"cell (y={yy}, a={g}) is empty")
            b[yy, g] = X[cell].mean(axis=0)
    return BaselineState(b, gamma)


def update_baselines(state: BaselineState, X, y, a, gamma: float | None = None) -> BaselineState:
    """One EMA step b <- (1-gamma) b + gamma * mean(batch cell); empty cells kept."""
    gamma = state.gamma if gamma is None else gamma
    if not 0.0 < gamma < 1.0:
        raise ValueError("gamma must lie in (0, 1)")
    X, y, a = np.asarray(X, dtype=np.float64), np.asarray(y), np.asarray(a)
    new = state.copy()
    for yy in (0, 1):
        for g in (0, 1):
            cell = (y == yy) & (a == g)
            if cell.any():
                new.baselines[yy, g] = (1.0 - gamma) * state.baselines[yy, g] + gamma * X[cell].mean(axis=0)
                new.counts[yy, g] += 1
    return new


def integrated_gradients(params: MlpParams, x, baseline, T: int = 16) -> np.ndarray:
    """Right-endpoint Riemann IG on the logit: (x - x') * mean_t grad f(x' + t/T (x - x')).

    ``x`` and ``baseline`` broadcast against each other; rows are instances.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    baseline = np.asarray(baseline, dtype=np.float64)
    if x.shape[-1] != baseline.shape[-1] or x.shape[-1] != params.n_inputs:
        raise ValueError("dimension mismatch between input, baseline and model")
    x, baseline = np.broadcast_arrays(x, baseline)
    squeeze = x.ndim == 1
    x, baseline = np.atleast_2d(x), np.atleast_2d(baseline)
    diff = x - baseline
    alphas = np.arange(1, T + 1) / T
    total = np.zeros_like(x)
    # chunk rows to bound memory at roughly 2**20 points per gradient call
    rows = max(1, (1 << 20) // (T * x.shape[1] + 1))
    for s in range(0, x.shape[0], rows):
        d = diff[s:s + rows]
        pts = baseline[s:s + rows, None, :] + alphas[None, :, None] * d[:, None, :]
        g = input_gradient(params, pts.reshape(-1, x.shape[1])).reshape(pts.shape)
        total[s:s + rows] = g.mean(axis=1)
    ig = diff * total
    return ig[0] if squeeze else ig


def completeness_gap(params: MlpParams, x, baseline, T: int = 16):
    """sum_j IG_j - (f(x) - f(x'))."""
    ig = integrated_gradients(params, x, baseline, T)
    return ig.sum(axis=-1) - (logit(params, x) - logit(params, baseline))


def normalize_attribution(ig, q: float = 2, eps: float = DEFAULT_EPS) -> np.ndarray:
    """ig / (||ig||_q + eps) along the last axis."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    ig = np.asarray(ig, dtype=np.float64)
    norm = np.linalg.norm(ig, ord=q, axis=-1, keepdims=True)
    return ig / (norm + eps)


def disparity(params: MlpParams, x, y, state: BaselineState, T: int = 16,
              q: float = 2, eps: float = DEFAULT_EPS):
    """V(x; y) = || IG~(x; b_{y,0}) - IG~(x; b_{y,1}) ||_2 for one row or a batch."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != state.dim:
        raise ValueError("dimension mismatch between input and baselines")
    y = np.asarray(y, dtype=np.int64)
    b0 = state.baselines[y, 0]
    b1 = state.baselines[y, 1]
    n0 = normalize_attribution(integrated_gradients(params, x, b0, T), q, eps)
    n1 = normalize_attribution(integrated_gradients(params, x, b1, T), q, eps)
    v = np.linalg.norm(n0 - n1, axis=-1)
    return float(v) if np.ndim(v) == 0 else v


@dataclass
class Attribution:
    """IG of one input against the baseline b_{y,g}, raw and normalized."""

    raw: np.ndarray
    normalized: np.ndarray
    baseline_id: tuple[int, int]
    steps: int
    completeness_gap: float


def attribute(params: MlpParams, x, state: BaselineState, y: int, g: int, T: int = 16,
              q: float = 2, eps: float = DEFAULT_EPS) -> Attribution:
    b = state.get(y, g)
    raw = integrated_gradients(params, x, b, T)
    gap = float(raw.sum() - (logit(params, x) - logit(params, b)))
    return Attribution(raw, normalize_attribution(raw, q, eps), (y, g), T, gap)


def pair_distance(u, v) -> float:
    """Euclidean distance between two normalized attribution vectors."""
    return float(np.linalg.norm(np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64)))


# -- graph builders ---------------------------------------------------------


def build_integrated_gradients(tape: Tape, pn: ParamNodes, x: Sequence, baseline: Sequence,
                               alpha: Node, T: int, step_axis: int) -> list[Node]:
    """IG nodes; ``alpha`` holds t/T laid out along lane axis ``step_axis``.

    The result is reduced over the step axis (kept with size 1).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if len(x) != len(baseline) or len(x) != pn.sizes[0]:
        raise ValueError("dimension mismatch between input, baseline and model")
    diff = [tape.sub(xi, bi) for xi, bi in zip(x, baseline)]
    path = [tape.add(bi, tape.mul(alpha, di)) for bi, di in zip(baseline, diff)]
    f = build_logit(tape, pn, path)
    grads = tape.gradient(f, path)
    inv_t = 1.0 / T
    return [tape.mul(di, tape.mul(tape.lane_sum(g, step_axis), inv_t))
            for di, g in zip(diff, grads)]


def build_norm(tape: Tape, v: Sequence[Node], q: float = 2) -> Node:
    """Smoothed l_q norm over a list of nodes (exact up to NORM_DELTA)."""
    if q == 2:
        return tape.power(tape.sum([tape.mul(u, u) for u in v] + [NORM_DELTA ** 2]), 0.5)
    terms = [tape.abs_smooth(u, NORM_DELTA) for u in v]
    if q == 1:
        return tape.sum(terms)
    return tape.power(tape.sum([tape.power(t, q) for t in terms]), 1.0 / q)


def build_normalize(tape: Tape, ig: Sequence[Node], q: float = 2,
                    eps: float = DEFAULT_EPS) -> list[Node]:
    if eps <= 0:
        raise ValueError("eps must be positive")
    denom = tape.add(build_norm(tape, ig, q), eps)
    return [tape.div(u, denom) for u in ig]


def build_distance(tape: Tape, d: Sequence[Node]) -> Node:
    """sqrt(sum d^2 + delta^2) - delta: zero at d = 0 with a finite derivative."""
    return tape.sub(tape.power(tape.sum([tape.mul(u, u) for u in d] + [NORM_DELTA ** 2]), 0.5),
                    NORM_DELTA)


@dataclass
class DisparityInputs:
    """Input slots feeding :func:`build_disparity`."""

    x: list[Node]           # lanes (B, 1, 1)
    base: list[Node]        # lanes (B, 2, 1): b_{y_i, 0} and b_{y_i, 1}
    alpha: Node             # lanes (1, 1, T)
    group_sign: Node        # lanes (1, 2, 1): (+1, -1)

    @staticmethod
    def create(tape: Tape, p: int, x: list[Node] | None = None) -> "DisparityInputs":
        if x is None:
            x = [tape.input(f"x{j}") for j in range(p)]
        base = [tape.input(f"base{j}") for j in range(p)]
        return DisparityInputs(x, base, tape.input("alpha"), tape.input("group_sign"))

    @staticmethod
    def bind(X, y, state: BaselineState, T: int, x_prefix: str = "x") -> dict:
        """Lane arrays for a batch; keys match the slot names from ``create``."""
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        n, p = X.shape
        base = state.baselines[y]  # (n, 2, p)
        out = {f"{x_prefix}{j}": X[:, j].reshape(n, 1, 1) for j in range(p)}
        for j in range(p):
            out[f"base{j}"] = base[:, :, j].reshape(n, 2, 1)
        out["alpha"] = (np.arange(1, T + 1) / T).reshape(1, 1, T)
        out["group_sign"] = np.array([1.0, -1.0]).reshape(1, 2, 1)
        return out


def build_disparity(tape: Tape, pn: ParamNodes, slots: DisparityInputs, T: int,
                    q: float = 2, eps: float = DEFAULT_EPS) -> Node:
    """Per-instance V(x; y) with lanes (B, 1, 1).

    Both group baselines share one forward/backward pass through the
    group lane axis.
    """
    ig = build_integrated_gradients(tape, pn, slots.x, slots.base, slots.alpha, T, step_axis=2)
    normed = build_normalize(tape, ig, q, eps)
    diff = [tape.lane_sum(tape.mul(u, slots.group_sign), 1) for u in normed]
    return build_distance(tape, diff)

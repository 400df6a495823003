"""MLP binary classifier exposing a real-valued logit.

Two forward paths share one parameter layout: ``logit`` runs on numpy
(used for prediction and evaluation) and ``build_logit`` emits graph nodes
on a :class:`~fairx.autodiff.Tape` (used wherever derivatives are needed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit

from .autodiff import Node, Tape

ACTIVATIONS = ("tanh", "sigmoid", "softplus")


def _act(name: str, u):
    if name == "tanh":
        return np.tanh(u)
    if name == "sigmoid":
        return expit(u)
    return np.logaddexp(0.0, u)


def _act_grad(name: str, h, u):
    # h = act(u)
    if name == "tanh":
        return 1.0 - h * h
    if name == "sigmoid":
        return h * (1.0 - h)
    return expit(u)


@dataclass
class MlpParams:
    sizes: list[int]
    activation: str
    weights: list[np.ndarray]  # weights[l] has shape (sizes[l], sizes[l+1])
    biases: list[np.ndarray]
    seed: int | None = None

    def __post_init__(self):
        check_sizes(self.sizes, self.activation)
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[l], self.sizes[l + 1]) or b.shape != (self.sizes[l + 1],):
                raise ValueError(f"layer {l} has shapes {w.shape}/{b.shape}")

    @property
    def n_params(self) -> int:
        return count_params(self.sizes)

    @property
    def n_inputs(self) -> int:
        return self.sizes[0]

    def flat(self) -> np.ndarray:
        """Parameters as one vector: per layer, W row-major then b."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel())
            parts.append(b)
        return np.concatenate(parts)

    def with_flat(self, theta: np.ndarray) -> "MlpParams":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        weights, biases, k = [], [], 0
        for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:]):
            weights.append(theta[k:k + n_in * n_out].reshape(n_in, n_out).copy())
            k += n_in * n_out
            biases.append(theta[k:k + n_out].copy())
            k += n_out
        return MlpParams(list(self.sizes), self.activation, weights, biases, self.seed)

    def to_dict(self) -> dict:
        return {
            "sizes": list(self.sizes),
            "activation": self.activation,
            "seed": self.seed,
            "weights": self.flat().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MlpParams":
        sizes = [int(s) for s in d["sizes"]]
        shell = init_params(sizes, d["activation"], seed=0)
        params = shell.with_flat(np.asarray(d["weights"], dtype=np.float64))
        params.seed = d.get("seed")
        return params


def check_sizes(sizes: Sequence[int], activation: str) -> None:
    if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
        raise ValueError(f"invalid layer sizes {list(sizes)}")
    if sizes[-1] != 1:
        raise ValueError("the last layer must output exactly one logit")
    if activation not in ACTIVATIONS:
        # relu is rejected on purpose: its second derivative vanishes, which
        # silently zeroes the gradient of attribution-based penalties
        raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")


def count_params(sizes: Sequence[int]) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def init_params(sizes: Sequence[int], activation: str = "tanh", seed: int = 0) -> MlpParams:
    """Glorot-uniform weights, zero biases."""
    sizes = [int(s) for s in sizes]
    check_sizes(sizes, activation)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        s = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-s, s, size=(n_in, n_out)))
        biases.append(np.zeros(n_out))
    return MlpParams(sizes, activation, weights, biases, seed)


def _check_x(params: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.n_inputs:
        raise ValueError(f"input has {x.shape[-1]} features, model expects {params.n_inputs}")
    return x


def logit(params: MlpParams, x) -> np.ndarray | float:
    """f(x) for one input (returns float) or a batch of rows (returns array)."""
    x = _check_x(params, x)
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w + b
        if l < last:
            h = _act(params.activation, h)
    out = h[..., 0]
    return float(out) if out.ndim == 0 else out


def input_gradient(params: MlpParams, x) -> np.ndarray:
    """d f / d x for a batch of rows (manual backprop, numpy)."""
    x = _check_x(params, x)
    squeeze = x.ndim == 1
    x = np.atleast_2d(x)
    pre, post = [], [x]
    h = x
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        u = h @ w + b
        if l < last:
            pre.append(u)
            h = _act(params.activation, u)
            post.append(h)
    g = np.broadcast_to(params.weights[-1][:, 0], (x.shape[0], params.weights[-1].shape[0]))
    for l in range(last - 1, -1, -1):
        g = g * _act_grad(params.activation, post[l + 1], pre[l])
        g = g @ params.weights[l].T
    return g[0] if squeeze else g


def predict(params: MlpParams, x, threshold: float = 0.5):
    """1 iff sigmoid(logit) >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    z = logit(params, x)
    # compare on the logit scale so the boundary is exact
    cut = np.log(threshold) - np.log1p(-threshold)
    out = (np.asarray(z) >= cut).astype(np.int64)
    return int(out) if out.ndim == 0 else out


@dataclass
class ParamNodes:
    """Graph parameter slots laid out like :class:`MlpParams`."""

    sizes: list[int]
    activation: str
    weights: list[list[list[Node]]] = field(default_factory=list)
    biases: list[list[Node]] = field(default_factory=list)

    @property
    def flat(self) -> list[Node]:
        out = []
        for w, b in zip(self.weights, self.biases):
            for row in w:
                out.extend(row)
            out.extend(b)
        return out


def param_nodes(tape: Tape, sizes: Sequence[int], activation: str = "tanh",
                prefix: str = "") -> ParamNodes:
    """Create parameter slots in the same order as ``MlpParams.flat``."""
    sizes = [int(s) for s in sizes]
    check_sizes(sizes, activation)
    pn = ParamNodes(sizes, activation)
    for l, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        pn.weights.append([[tape.param(f"{prefix}W{l}_{i}_{j}") for j in range(n_out)]
                           for i in range(n_in)])
        pn.biases.append([tape.param(f"{prefix}b{l}_{j}") for j in range(n_out)])
    return pn


def build_logit(tape: Tape, pn: ParamNodes, x: Sequence[Node]) -> Node:
    """Emit the forward pass for inputs ``x`` (one node per feature)."""
    if len(x) != pn.sizes[0]:
        raise ValueError(f"input has {len(x)} features, model expects {pn.sizes[0]}")
    act = getattr(tape, pn.activation)
    h = list(x)
    last = len(pn.weights) - 1
    for l, (w, b) in enumerate(zip(pn.weights, pn.biases)):
        out = []
        for j in range(len(b)):
            s = tape.sum([w[i][j] * h[i] for i in range(len(h))] + [b[j]])
            out.append(act(s) if l < last else s)
        h = out
    return h[0]

"""FairX training: BCE + lambda_ig * GCIG disparity + lambda_fair * soft EO gap."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .attribution import (
    DEFAULT_EPS,
    BaselineState,
    DisparityInputs,
    build_disparity,
    disparity,
    init_baselines,
    update_baselines,
)
from .autodiff import Node, NonFiniteError, Tape
from .data import Dataset, minibatches
from .fairness import SoftEoInputs, build_soft_eo
from .model import MlpParams, build_logit, init_params, param_nodes

log = logging.getLogger(__name__)

LABEL_WEIGHTINGS = ("algorithm1-sum", "equal", "empirical")


class ConfigError(ValueError):
    pass


class TrainingDivergence(FloatingPointError):
    def __init__(self, epoch: int, batch: int, what: str = "loss"):
        super().__init__(
            f"non-finite {what} at epoch {epoch}, batch {batch}; "
            "consider setting grad_clip (e.g. 10) or a lower learning rate"
        )
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    hidden_sizes: list[int] = field(default_factory=lambda: [64, 32])
    activation: str = "tanh"
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    ig_steps: int = 16
    ema_rate: float = 0.1
    lambda_ig: float = 1.0
    lambda_fair: float = 1.0
    norm_q: float = 2.0
    norm_eps: float = DEFAULT_EPS
    seed: int = 0
    use_pred: bool = True
    use_gcig: bool = True
    use_fair: bool = True
    label_weighting: str = "algorithm1-sum"
    grad_clip: float | None = None

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.lambda_ig < 0 or self.lambda_fair < 0:
            raise ConfigError("lambda_ig and lambda_fair must be >= 0")
        if self.ig_steps < 1:
            raise ConfigError("ig_steps must be >= 1")
        if not 0.0 < self.ema_rate < 1.0:
            raise ConfigError("ema_rate must lie in (0, 1)")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.label_weighting not in LABEL_WEIGHTINGS:
            raise ConfigError(f"label_weighting must be one of {LABEL_WEIGHTINGS}")
        if self.norm_q < 1 or self.norm_eps <= 0:
            raise ConfigError("norm_q must be >= 1 and norm_eps > 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ConfigError("grad_clip must be positive")
        if any(int(h) < 1 for h in self.hidden_sizes):
            raise ConfigError("hidden sizes must be positive")

    @property
    def gcig_on(self) -> bool:
        return self.use_gcig and self.lambda_ig > 0

    @property
    def fair_on(self) -> bool:
        return self.use_fair and self.lambda_fair > 0

    def layer_sizes(self, p: int) -> list[int]:
        return [p, *[int(h) for h in self.hidden_sizes], 1]

    def replace(self, **changes) -> "TrainConfig":
        d = self.to_dict()
        d.update(changes)
        return TrainConfig.from_dict(d)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config key(s): {unknown}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def load(cls, path) -> "TrainConfig":
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_dict(d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, key: str) -> list[float]:
        return [r[key] for r in self.records]

    def write_jsonl(self, path, mode: str = "w") -> None:
        with open(path, mode) as fh:
            for r in self.records:
                fh.write(json.dumps(r, sort_keys=True) + "\n")


# -- numeric references ------------------------------------------------------


def bce_loss(logits, y) -> float:
    """Mean binary cross-entropy on logits, in the softplus(z) - y z form."""
    z = np.asarray(logits, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty batch")
    return float(np.mean(np.logaddexp(0.0, z) - y * z))


def gcig_batch_loss(params: MlpParams, X, y, state: BaselineState, T: int = 16,
                    q: float = 2, eps: float = DEFAULT_EPS) -> float:
    """sum over labels present of the mean disparity within that label."""
    y = np.asarray(y)
    v = np.atleast_1d(disparity(params, X, y, state, T, q, eps))
    return float(sum(v[y == label].mean() for label in (0, 1) if np.any(y == label)))


# -- graph -------------------------------------------------------------------


def build_bce(tape: Tape, z: Node, y: Node, weight: Node) -> Node:
    """sum_i weight_i * (softplus(z_i) - y_i z_i); weight = 1/B gives the mean."""
    per = tape.sub(tape.softplus(z), tape.mul(y, z))
    return tape.lane_sum(tape.mul(per, weight))


class LossGraph:
    """The total loss and its parameter gradient, built once per run.

    Each minibatch only rebinds inputs.  Disabled terms add no nodes.
    """

    def __init__(self, config: TrainConfig, p: int):
        self.config = config
        self.p = p
        self.sizes = config.layer_sizes(p)
        tape = self.tape = Tape()
        self.pn = param_nodes(tape, self.sizes, config.activation)
        self.x = [tape.input(f"x{j}") for j in range(p)]
        self.terms: dict[str, Node] = {}
        weighted = []
        z = None
        if config.use_pred or config.fair_on:
            z = build_logit(tape, self.pn, self.x)
        if config.use_pred:
            self.terms["pred"] = build_bce(tape, z, tape.input("y"), tape.input("w_pred"))
            weighted.append(self.terms["pred"])
        if config.gcig_on:
            self.gcig_slots = DisparityInputs.create(tape, p, self.x)
            v = build_disparity(tape, self.pn, self.gcig_slots, config.ig_steps,
                                config.norm_q, config.norm_eps)
            self.terms["gcig"] = tape.lane_sum(tape.mul(v, tape.input("w_gcig")))
            weighted.append(tape.mul(config.lambda_ig, self.terms["gcig"]))
        if config.fair_on:
            self.terms["fair"] = build_soft_eo(tape, z, SoftEoInputs.create(tape))
            weighted.append(tape.mul(config.lambda_fair, self.terms["fair"]))
        self.total = tape.sum(weighted)
        self.grads = tape.gradient(self.total, self.pn.flat)
        self.names = list(self.terms)
        self.program = tape.compile([self.total] + [self.terms[k] for k in self.names] + self.grads)

    def bind(self, X, y, a, state: BaselineState | None, label_prior=None) -> dict:
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        n = len(y)
        b: dict = {f"x{j}": X[:, j].reshape(n, 1, 1) for j in range(self.p)}
        if "pred" in self.terms:
            b["y"] = y.astype(np.float64).reshape(n, 1, 1)
            b["w_pred"] = 1.0 / n
        if "gcig" in self.terms:
            b.update(DisparityInputs.bind(X, y, state, self.config.ig_steps))
            w = np.zeros(n)
            for label in (0, 1):
                m = y == label
                if m.any():
                    prior = 1.0 if label_prior is None else label_prior[label]
                    w[m] = prior / m.sum()
            b["w_gcig"] = w.reshape(n, 1, 1)
        if "fair" in self.terms:
            b.update(SoftEoInputs.bind(y, a))
        return b

    def evaluate(self, theta: np.ndarray, X, y, a, state=None, label_prior=None):
        """(total, {term: value}, gradient vector)."""
        out = self.program.run(self.bind(X, y, a, state, label_prior), theta, check="output")
        k = len(self.names)
        terms = {name: float(v) for name, v in zip(self.names, out[1:1 + k])}
        grad = np.array([float(g) for g in out[1 + k:]])
        return float(out[0]), terms, grad


def total_loss(params: MlpParams, X, y, a, state: BaselineState | None,
               config: TrainConfig) -> tuple[float, dict, np.ndarray]:
    """Evaluate the configured objective and its gradient at ``params``."""
    graph = LossGraph(config, params.n_inputs)
    return graph.evaluate(params.flat(), X, y, a, state)


# -- optimisation -------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """Bias-corrected Adam; updates ``state`` in place and returns new parameters."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != theta.shape:
        raise ValueError("gradient and parameter shapes differ")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("non-finite gradient")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = state.m / (1.0 - beta1 ** state.t)
    v_hat = state.v / (1.0 - beta2 ** state.t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps)


def _label_prior(config: TrainConfig, y) -> dict | None:
    if config.label_weighting == "algorithm1-sum":
        return None
    if config.label_weighting == "equal":
        return {0: 0.5, 1: 0.5}
    freq = float(np.mean(y))
    return {0: 1.0 - freq, 1: freq}


def fairx_train(config: TrainConfig, dataset: Dataset, train_indices=None,
                graph: LossGraph | None = None):
    """Run FairX training; returns (params, baselines, history).

    Per minibatch: EMA baseline update, loss construction, gradient through
    the attribution path, optimizer step.
    """
    idx = np.arange(dataset.n) if train_indices is None else np.asarray(train_indices)
    X, y, a = dataset.X, dataset.y, dataset.a
    state = init_baselines(X, y, a, idx, gamma=config.ema_rate)
    params = init_params(config.layer_sizes(dataset.p), config.activation, config.seed)
    graph = graph or LossGraph(config, dataset.p)
    theta = params.flat()
    adam = AdamState.zeros(theta.size)
    prior = _label_prior(config, y[idx])
    history = TrainHistory()

    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        sums = {k: 0.0 for k in ("total", *graph.names)}
        seen = np.zeros((2, 2), dtype=np.int64)
        batches = minibatches(idx, config.batch_size, [config.seed, epoch])
        for b, bi in enumerate(batches):
            xb, yb, ab = X[bi], y[bi], a[bi]
            state = update_baselines(state, xb, yb, ab)
            for yy in (0, 1):
                for g in (0, 1):
                    seen[yy, g] += np.sum((yb == yy) & (ab == g))
            try:
                total, terms, grad = graph.evaluate(theta, xb, yb, ab, state, prior)
            except NonFiniteError as e:
                raise TrainingDivergence(epoch, b) from e
            if not np.all(np.isfinite(grad)):
                raise TrainingDivergence(epoch, b, "gradient")
            if config.grad_clip is not None:
                norm = float(np.linalg.norm(grad))
                if norm > config.grad_clip:
                    grad = grad * (config.grad_clip / norm)
            if config.optimizer == "adam":
                theta = adam_step(adam, theta, grad, config.learning_rate)
            else:
                theta = theta - config.learning_rate * grad
            sums["total"] += total
            for k, v in terms.items():
                sums[k] += v
        if (seen == 0).any():
            log.warning("epoch %d: some (y, a) cell never appeared in a batch", epoch)
        nb = len(batches)
        history.records.append({
            "epoch": epoch,
            "loss_total": sums["total"] / nb,
            "loss_pred": sums.get("pred", 0.0) / nb,
            "loss_gcig": sums.get("gcig", 0.0) / nb,
            "loss_fair": sums.get("fair", 0.0) / nb,
            "wall_seconds": time.perf_counter() - t0,
        })
    return params.with_flat(theta), state, history

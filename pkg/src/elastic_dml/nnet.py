"""Small feedforward regression learners.

Affine-ReLU stacks with configurable output activations: softplus for
positive outcomes (demand), identity for unconstrained targets (discount),
negative softplus for strictly negative outputs (elasticities). Multi-head
nets attach one activation per output component. Training is mini-batch
adaptive-moment descent with decoupled weight decay, a per-step learning-rate
schedule, and inverted dropout on hidden layers; everything is deterministic
under the configured seeds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

ACTIVATIONS = ("identity", "softplus", "negative_softplus")
LOSSES = ("l1", "l2")
SCHEDULES = ("exponential", "inverse_sqrt")

SERIAL_FORMAT = "elastic-dml-network"
SERIAL_VERSION = 1


class SpecError(ValueError):
    """Invalid network or training specification."""


class DimensionError(ValueError):
    """Input does not match the network's input dimension."""


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, lr: float, recent_losses: list[float]):
        self.step = step
        self.lr = lr
        self.recent_losses = recent_losses
        super().__init__(
            f"non-finite loss at step {step} (lr={lr:.3g}); recent losses: {recent_losses}"
        )


def softplus(z: np.ndarray) -> np.ndarray:
    """ln(1 + e^z), overflow-safe."""
    return np.logaddexp(0.0, z)


def softplus_inverse(y: float) -> float:
    """z with softplus(z) = y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus inverse needs a positive value")
    # ln(e^y - 1) = y + ln(1 - e^-y)
    return y + np.log(-np.expm1(-y))


def _apply_activation(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "softplus":
        return softplus(z)
    if kind == "negative_softplus":
        return -softplus(z)
    raise SpecError(f"unknown activation {kind!r}")


def _activation_grad(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return np.ones_like(z)
    if kind == "softplus":
        return expit(z)
    if kind == "negative_softplus":
        return -expit(z)
    raise SpecError(f"unknown activation {kind!r}")


@dataclass
class NetworkSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 64)
    hidden_activation: str = "relu"
    output_activation: str | tuple[str, ...] = "identity"
    dropout_rate: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if isinstance(self.output_activation, (list, tuple)):
            self.output_activation = tuple(self.output_activation)
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims):
            raise SpecError("all layer dimensions must be >= 1")
        if self.hidden_activation != "relu":
            raise SpecError("only relu hidden activations are supported")
        for act in self.output_activations:
            if act not in ACTIVATIONS:
                raise SpecError(f"unknown output activation {act!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise SpecError("dropout_rate must lie in [0, 1)")

    @property
    def output_activations(self) -> tuple[str, ...]:
        if isinstance(self.output_activation, tuple):
            return self.output_activation
        return (self.output_activation,)

    @property
    def output_dim(self) -> int:
        return len(self.output_activations)


@dataclass
class TrainConfig:
    loss: str = "l2"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 128
    weight_decay: float = 0.0
    lr_schedule: str = "exponential"
    lr_gamma: float = 1.0          # per-step decay for the exponential schedule
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self) -> None:
        if self.loss not in LOSSES:
            raise SpecError(f"loss must be one of {LOSSES}")
        if self.lr_schedule not in SCHEDULES:
            raise SpecError(f"lr_schedule must be one of {SCHEDULES}")
        if not 0.0 < self.lr_gamma <= 1.0:
            raise SpecError("lr_gamma must lie in (0, 1]")
        if self.batch_size < 1:
            raise SpecError("batch_size must be >= 1")
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise SpecError("learning_rate and weight_decay must be >= 0")
        if self.epochs < 1:
            raise SpecError("epochs must be >= 1")

    def lr_at(self, step: int) -> float:
        if self.lr_schedule == "exponential":
            return self.learning_rate * self.lr_gamma**step
        return self.learning_rate / np.sqrt(step + 1.0)


@dataclass
class Dataset:
    """Feature rows with targets and non-negative weights."""

    X: np.ndarray
    y: np.ndarray
    weight: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.ndim != 2 or self.X.shape[0] != self.y.shape[0]:
            raise SpecError("X must be (n, d) with one target per row")
        if self.weight is None:
            self.weight = np.ones_like(self.y)
        else:
            self.weight = np.asarray(self.weight, dtype=float).reshape(-1)
            if self.weight.shape != self.y.shape or (self.weight < 0).any():
                raise SpecError("weights must be non-negative, one per row")
        if not (np.isfinite(self.X).all() and np.isfinite(self.y).all()):
            raise SpecError("dataset contains non-finite values")

    def __len__(self) -> int:
        return self.X.shape[0]


class Network:
    """Feedforward net; immutable after training, thread-safe for inference."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(spec.seed)))
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            scale = np.sqrt(2.0 / fan_in)
            self.weights.append(rng.standard_normal((fan_in, fan_out)) * scale)
            self.biases.append(np.zeros(fan_out))
        # final layer gets a smaller init so raw outputs start near the bias
        self.weights[-1] *= 0.1
        # optional input standardization, set once before training
        self.input_mean: np.ndarray | None = None
        self.input_scale: np.ndarray | None = None
        # optional per-component output scaling (applied after the activation)
        # so heads with large natural units can learn in O(1) space
        self.output_scale: np.ndarray | None = None

    # -- structure ---------------------------------------------------------

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def set_input_normalization(self, mean: np.ndarray, scale: np.ndarray) -> None:
        scale = np.where(np.asarray(scale) > 1e-12, scale, 1.0)
        self.input_mean = np.asarray(mean, dtype=float)
        self.input_scale = np.asarray(scale, dtype=float)

    def set_output_bias(self, values) -> None:
        """Pin the raw output bias, e.g. to the target mean before training."""
        self.biases[-1] = np.broadcast_to(np.asarray(values, dtype=float), self.biases[-1].shape).copy()

    def set_output_scale(self, scale) -> None:
        scale = np.broadcast_to(np.asarray(scale, dtype=float), (self.spec.output_dim,)).copy()
        if (scale <= 0).any():
            raise SpecError("output scale must be positive")
        self.output_scale = scale

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    # -- forward / backward -------------------------------------------------

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        if self.input_mean is None:
            return X
        return (X - self.input_mean) / self.input_scale

    def _forward(self, X: np.ndarray, dropout_rng: np.random.Generator | None = None):
        """Forward pass keeping pre-activations for backprop.

        dropout_rng enables training-mode dropout; inference is always
        deterministic.
        """
        h = self._normalize(X)
        pre: list[np.ndarray] = []
        acts: list[np.ndarray] = [h]
        masks: list[np.ndarray | None] = []
        p = self.spec.dropout_rate
        for layer in range(self.n_layers - 1):
            z = h @ self.weights[layer] + self.biases[layer]
            pre.append(z)
            h = np.maximum(z, 0.0)
            if dropout_rng is not None and p > 0.0:
                mask = (dropout_rng.random(h.shape) >= p) / (1.0 - p)
                h = h * mask
                masks.append(mask)
            else:
                masks.append(None)
            acts.append(h)
        z_out = h @ self.weights[-1] + self.biases[-1]
        pre.append(z_out)
        out = np.column_stack(
            [_apply_activation(act, z_out[:, k]) for k, act in enumerate(self.spec.output_activations)]
        )
        if self.output_scale is not None:
            out = out * self.output_scale
        return out, pre, acts, masks

    def predict(self, X: np.ndarray) -> np.ndarray:
        """Deterministic batch inference, shape (n, output_dim)."""
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.spec.input_dim:
            raise DimensionError(f"expected (n, {self.spec.input_dim}) inputs, got {X.shape}")
        out, *_ = self._forward(X)
        return out

    def forward(self, x) -> float | np.ndarray:
        """Single-row inference; returns a scalar for single-output nets."""
        x = np.asarray(x, dtype=float).reshape(1, -1)
        if x.shape[1] != self.spec.input_dim:
            raise DimensionError(f"expected {self.spec.input_dim} features, got {x.shape[1]}")
        out = self.predict(x)[0]
        return float(out[0]) if self.spec.output_dim == 1 else out

    def _backward(self, grad_out: np.ndarray, pre, acts, masks):
        """Parameter gradients given dLoss/dOutput (post-activation)."""
        z_out = pre[-1]
        act_grads = np.column_stack(
            [_activation_grad(act, z_out[:, k]) for k, act in enumerate(self.spec.output_activations)]
        )
        if self.output_scale is not None:
            grad_out = grad_out * self.output_scale
        delta = grad_out * act_grads
        grads_w = [np.empty(0)] * self.n_layers
        grads_b = [np.empty(0)] * self.n_layers
        for layer in range(self.n_layers - 1, -1, -1):
            grads_w[layer] = acts[layer].T @ delta
            grads_b[layer] = delta.sum(axis=0)
            if layer > 0:
                delta = delta @ self.weights[layer].T
                if masks[layer - 1] is not None:
                    delta = delta * masks[layer - 1]
                delta = delta * (pre[layer - 1] > 0.0)
        return grads_w, grads_b

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": SERIAL_FORMAT,
            "version": SERIAL_VERSION,
            "spec": {
                "input_dim": self.spec.input_dim,
                "hidden_dims": list(self.spec.hidden_dims),
                "hidden_activation": self.spec.hidden_activation,
                "output_activation": list(self.spec.output_activations),
                "dropout_rate": self.spec.dropout_rate,
                "seed": self.spec.seed,
            },
            "input_mean": None if self.input_mean is None else self.input_mean.tolist(),
            "input_scale": None if self.input_scale is None else self.input_scale.tolist(),
            "output_scale": None if self.output_scale is None else self.output_scale.tolist(),
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Network":
        if payload.get("format") != SERIAL_FORMAT:
            raise SpecError("not a serialized network")
        if payload.get("version") != SERIAL_VERSION:
            raise SpecError(f"unsupported network version {payload.get('version')}")
        spec_d = dict(payload["spec"])
        spec_d["hidden_dims"] = tuple(spec_d["hidden_dims"])
        spec_d["output_activation"] = tuple(spec_d["output_activation"])
        net = cls(NetworkSpec(**spec_d))
        net.weights = [np.array(w, dtype=float) for w in payload["weights"]]
        net.biases = [np.array(b, dtype=float) for b in payload["biases"]]
        if payload.get("input_mean") is not None:
            net.input_mean = np.array(payload["input_mean"], dtype=float)
            net.input_scale = np.array(payload["input_scale"], dtype=float)
        if payload.get("output_scale") is not None:
            net.output_scale = np.array(payload["output_scale"], dtype=float)
        return net

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _loss_and_grad(loss: str, pred: np.ndarray, y: np.ndarray, w: np.ndarray):
    """Mean weighted loss over a batch and its gradient wrt predictions."""
    err = pred - y
    n = pred.shape[0]
    if loss == "l1":
        return float(np.mean(w * np.abs(err))), (w * np.sign(err)) / n
    return float(np.mean(w * err**2)), (2.0 * w * err) / n


@dataclass
class TrainResult:
    network: Network
    final_loss: float
    loss_history: list[float] = field(default_factory=list)


LossAdapter = Callable[[np.ndarray, dict], tuple[float, np.ndarray]]


def train_with_adapter(
    net: Network,
    X: np.ndarray,
    aux: dict[str, np.ndarray],
    adapter: LossAdapter,
    cfg: TrainConfig,
) -> TrainResult:
    """Shared optimizer loop; the adapter maps net outputs to (loss, dL/dout).

    Used directly by the effect-model and joint-head training stages whose
    losses compose the network output with a demand head.
    """
    n = X.shape[0]
    if n == 0:
        raise SpecError("empty training set")
    shuffle_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,))))
    dropout_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,))))

    m_w = [np.zeros_like(w) for w in net.weights]
    v_w = [np.zeros_like(w) for w in net.weights]
    m_b = [np.zeros_like(b) for b in net.biases]
    v_b = [np.zeros_like(b) for b in net.biases]
    eps = 1e-8
    step = 0
    history: list[float] = []
    recent: list[float] = []
    final_loss = np.nan

    for _ in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch_aux = {k: v[idx] for k, v in aux.items()}
            use_dropout = dropout_rng if net.spec.dropout_rate > 0.0 else None
            out, pre, acts, masks = net._forward(X[idx], dropout_rng=use_dropout)
            loss, grad_out = adapter(out, batch_aux)
            lr = cfg.lr_at(step)
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, lr, recent[-5:])
            grads_w, grads_b = net._backward(grad_out, pre, acts, masks)
            step += 1
            b1c = 1.0 - cfg.beta1**step
            b2c = 1.0 - cfg.beta2**step
            for layer in range(net.n_layers):
                for param, grad, m, v in (
                    (net.weights[layer], grads_w[layer], m_w[layer], v_w[layer]),
                    (net.biases[layer], grads_b[layer], m_b[layer], v_b[layer]),
                ):
                    m *= cfg.beta1
                    m += (1.0 - cfg.beta1) * grad
                    v *= cfg.beta2
                    v += (1.0 - cfg.beta2) * grad**2
                    param -= lr * (m / b1c) / (np.sqrt(v / b2c) + eps)
                if cfg.weight_decay > 0.0:
                    net.weights[layer] -= lr * cfg.weight_decay * net.weights[layer]
            epoch_loss += loss * len(idx)
            recent.append(loss)
            final_loss = loss
        history.append(epoch_loss / n)
    return TrainResult(network=net, final_loss=final_loss, loss_history=history)


def train(net: Network, data: Dataset, cfg: TrainConfig) -> TrainResult:
    """Fit a single-output net to the dataset with the configured loss."""
    if net.spec.output_dim != 1:
        raise SpecError("train() expects a single-output network")
    if data.X.shape[1] != net.spec.input_dim:
        raise DimensionError("dataset feature width does not match the network")

    def adapter(out: np.ndarray, batch_aux: dict) -> tuple[float, np.ndarray]:
        loss, grad = _loss_and_grad(cfg.loss, out[:, 0], batch_aux["y"], batch_aux["w"])
        return loss, grad[:, None]

    return train_with_adapter(net, data.X, {"y": data.y, "w": data.weight}, adapter, cfg)


def loss_gradients(net: Network, x, y: float, loss: str):
    """Analytic parameter gradients of one sample's loss (no dropout)."""
    X = np.asarray(x, dtype=float).reshape(1, -1)
    out, pre, acts, masks = net._forward(X)
    _, grad_out = _loss_and_grad(loss, out[:, 0], np.array([y]), np.ones(1))
    return net._backward(grad_out[:, None], pre, acts, masks)


def gradient_check(net: Network, x, y: float, loss_kind: str = "l2", epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    if not 0.0 < epsilon <= 1e-3:
        raise SpecError("epsilon must lie in (0, 1e-3]")
    X = np.asarray(x, dtype=float).reshape(1, -1)
    if X.shape[1] != net.spec.input_dim:
        raise DimensionError("probe input width does not match the network")
    grads_w, grads_b = loss_gradients(net, x, y, loss_kind)
    analytic = grads_w + grads_b

    def loss_at() -> float:
        out = net.predict(X)
        val, _ = _loss_and_grad(loss_kind, out[:, 0], np.array([y]), np.ones(1))
        return val

    max_rel = 0.0
    for param, grad in zip(net.parameters(), analytic):
        flat = param.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = loss_at()
            flat[i] = orig - epsilon
            down = loss_at()
            flat[i] = orig
            numeric = (up - down) / (2.0 * epsilon)
            denom = max(abs(gflat[i]) + abs(numeric), 1e-8)
            max_rel = max(max_rel, abs(gflat[i] - numeric) / denom)
    return max_rel

"""Dense ReLU/sigmoid network trained with Adam on binary cross-entropy.

Everything is plain numpy in float64. Weights are stored as (out, in)
matrices, one per consecutive pair of layer widths.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

FORMAT_VERSION = 1
LOSS_EPS = 1e-7


class TrainingDivergence(FloatingPointError):
    """Raised when a loss or gradient becomes non-finite during training."""


class ModelFormatError(ValueError):
    pass


class SchemaVersionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class MlpArchitecture:
    layer_widths: tuple[int, ...]
    hidden_activation: str = "relu"
    output_activation: str = "sigmoid"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        if widths[-1] != 1:
            raise ValueError("output width must be 1 for binary classification")
        if self.hidden_activation != "relu" or self.output_activation != "sigmoid":
            raise ValueError("only relu hidden / sigmoid output activations are supported")

    @property
    def n_inputs(self) -> int:
        return self.layer_widths[0]


@dataclass
class MlpModel:
    architecture: MlpArchitecture
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    schema_version: int = 1

    def parameters(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpModel":
        return MlpModel(self.architecture, [w.copy() for w in self.weights],
                        [b.copy() for b in self.biases], self.schema_version)


def param_count(architecture: MlpArchitecture) -> int:
    w = architecture.layer_widths
    return sum((n_in + 1) * n_out for n_in, n_out in zip(w[:-1], w[1:]))


def init_parameters(architecture: MlpArchitecture, seed: int, schema_version: int = 1) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    w = architecture.layer_widths
    for n_in, n_out in zip(w[:-1], w[1:]):
        limit = math.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    return MlpModel(architecture, weights, biases, schema_version)


def _check_arity(model: MlpModel, X: np.ndarray):
    if X.shape[-1] != model.architecture.n_inputs:
        raise ValueError(f"input has {X.shape[-1]} features, model expects {model.architecture.n_inputs}")


def sigmoid(z):
    # split by sign so exp never overflows
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _forward_cache(model: MlpModel, X: np.ndarray):
    """Pre-activations and activations for a batch (rows are samples)."""
    acts = [X]
    pres = []
    h = X
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ W.T + b
        pres.append(z)
        h = z if i == last else np.maximum(z, 0.0)
        acts.append(h)
    return pres, acts


def logits(model: MlpModel, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_arity(model, X)
    pres, _ = _forward_cache(model, X)
    return pres[-1][:, 0]


def predict_proba(model: MlpModel, X) -> np.ndarray:
    return sigmoid(logits(model, X))


def forward(model: MlpModel, x) -> float:
    """Probability of the positive class for a single input vector."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError("forward expects a single 1-d input vector")
    return float(predict_proba(model, x[None, :])[0])


def bce_loss(p, y):
    p = np.clip(np.asarray(p, dtype=float), LOSS_EPS, 1.0 - LOSS_EPS)
    y = np.asarray(y, dtype=float)
    out = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(out) if out.ndim == 0 else out


def mean_loss(model: MlpModel, X, y, l2_coefficient: float = 0.0) -> float:
    """Mean BCE over the batch plus the L2 penalty on weights (biases excluded)."""
    loss = float(np.mean(bce_loss(predict_proba(model, X), y)))
    if l2_coefficient:
        loss += 0.5 * l2_coefficient * sum(float(np.sum(W * W)) for W in model.weights)
    return loss


def backward(model: MlpModel, X, y, l2_coefficient: float = 0.0):
    """Exact mean gradient of BCE (+ L2) with respect to weights and biases.

    Returns ``(grad_weights, grad_biases)`` shaped like the model parameters.
    The output delta uses the fused sigmoid/BCE form ``p - y``.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    _check_arity(model, X)
    if len(X) == 0:
        raise ValueError("empty batch")
    n = len(X)
    pres, acts = _forward_cache(model, X)
    delta = (sigmoid(pres[-1][:, 0]) - y)[:, None] / n
    gW = [None] * len(model.weights)
    gb = [None] * len(model.weights)
    for i in range(len(model.weights) - 1, -1, -1):
        gW[i] = delta.T @ acts[i]
        gb[i] = delta.sum(axis=0)
        if l2_coefficient:
            gW[i] = gW[i] + l2_coefficient * model.weights[i]
        if i > 0:
            delta = (delta @ model.weights[i]) * (pres[i - 1] > 0)
    return gW, gb


def input_gradient(model: MlpModel, X) -> np.ndarray:
    """d logit / d x for every row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    _check_arity(model, X)
    pres, _ = _forward_cache(model, X)
    delta = np.ones((len(X), 1))
    for i in range(len(model.weights) - 1, -1, -1):
        delta = delta @ model.weights[i]
        if i > 0:
            delta = delta * (pres[i - 1] > 0)
    return delta


# -- optimisation ------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "AdamState":
        params = model.parameters()
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(model: MlpModel, gradients, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-7):
    """One in-place Adam update; returns ``(model, state)`` for chaining.

    ``gradients`` is ``(grad_weights, grad_biases)`` as produced by ``backward``.
    """
    grads = [*gradients[0], *gradients[1]]
    params = model.parameters()
    if len(grads) != len(params) or len(state.m) != len(params):
        raise ValueError("gradient/state structure does not match model")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise TrainingDivergence(f"non-finite gradient at optimizer step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ValueError("gradient shape does not match parameter shape")
        with np.errstate(over="ignore", invalid="ignore"):
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + epsilon)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(p))):
            raise TrainingDivergence(f"optimizer state overflowed at step {state.t}")
    return model, state


@dataclass(frozen=True)
class LrPolicy:
    kind: str = "exponential"
    rate: float = 0.995
    factor: float = 0.5
    every: int = 100

    def __post_init__(self):
        if self.kind not in ("exponential", "step", "constant"):
            raise ValueError(f"unknown lr policy {self.kind!r}")
        if not 0 < self.rate <= 1 or not 0 < self.factor <= 1 or self.every < 1:
            raise ValueError("lr policy parameters must describe a non-increasing schedule")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    initial_lr: float = 0.001
    lr_policy: LrPolicy = field(default_factory=LrPolicy)
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    l2_coefficient: float = 0.0
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.epochs < 1 or self.initial_lr <= 0 or self.batch_size < 1:
            raise ValueError("epochs, initial_lr and batch_size must be positive")
        if self.l2_coefficient < 0 or not 0 < self.threshold < 1:
            raise ValueError("l2_coefficient must be >= 0 and threshold in (0, 1)")


def lr_at(config: TrainConfig, epoch: int) -> float:
    pol = config.lr_policy
    if pol.kind == "exponential":
        return config.initial_lr * pol.rate ** epoch
    if pol.kind == "step":
        return config.initial_lr * pol.factor ** (epoch // pol.every)
    return config.initial_lr


def train(X, y, architecture: MlpArchitecture, config: TrainConfig, schema_version: int = 1,
          callback=None):
    """Minibatch Adam for ``config.epochs`` epochs; returns the final-epoch model.

    History rows are ``(epoch, lr, mean_loss, train_accuracy)``; the loss is the
    sample-weighted mean of the minibatch losses seen during the epoch.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[1] != architecture.n_inputs:
        raise ValueError(f"data has shape {X.shape}, architecture expects {architecture.n_inputs} inputs")
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    model = init_parameters(architecture, config.seed, schema_version)
    state = AdamState.zeros_like(model)
    shuffle_rng = np.random.default_rng([config.seed, 1])
    n = len(X)
    history = []
    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = shuffle_rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            Xb, yb = X[idx], y[idx]
            # divergence is detected explicitly below and in adam_step
            with np.errstate(over="ignore", invalid="ignore"):
                total += mean_loss(model, Xb, yb, config.l2_coefficient) * len(idx)
                grads = backward(model, Xb, yb, config.l2_coefficient)
            adam_step(model, grads, state, lr, config.beta1, config.beta2, config.epsilon)
        loss = total / n
        if not math.isfinite(loss):
            raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
        acc = float(np.mean((predict_proba(model, X) >= config.threshold) == (y == 1)))
        history.append((epoch, lr, loss, acc))
        if callback is not None:
            callback(epoch, lr, loss, acc)
    return model, history


def history_csv(history) -> str:
    lines = ["epoch,lr,loss,train_accuracy"]
    lines += [f"{e},{lr!r},{loss!r},{acc!r}" for e, lr, loss, acc in history]
    return "\n".join(lines) + "\n"


# -- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    threshold: float

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @property
    def sensitivity(self) -> float | None:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def specificity(self) -> float | None:
        return self.tn / (self.tn + self.fp) if self.tn + self.fp else None

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.n

    def to_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
                "threshold": self.threshold, "sensitivity": self.sensitivity,
                "specificity": self.specificity, "accuracy": self.accuracy}


def confusion_report(y_true, y_pred, threshold: float = 0.5) -> EvalReport:
    y_true = np.asarray(y_true, dtype=int)
    y_pred = np.asarray(y_pred, dtype=int)
    if len(y_true) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    return EvalReport(tp=int(np.sum((y_pred == 1) & (y_true == 1))),
                      fp=int(np.sum((y_pred == 1) & (y_true == 0))),
                      tn=int(np.sum((y_pred == 0) & (y_true == 0))),
                      fn=int(np.sum((y_pred == 0) & (y_true == 1))),
                      threshold=threshold)


def evaluate(model: MlpModel, X, y, threshold: float = 0.5) -> EvalReport:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = (predict_proba(model, X) >= threshold).astype(int)
    return confusion_report(y, pred, threshold)


# -- persistence -------------------------------------------------------------

def save_model(model: MlpModel) -> bytes:
    for p in model.parameters():
        if not np.all(np.isfinite(p)):
            raise ValueError("refusing to save a model with non-finite parameters")
    doc = {
        "format_version": FORMAT_VERSION,
        "layer_widths": list(model.architecture.layer_widths),
        "hidden_activation": model.architecture.hidden_activation,
        "output_activation": model.architecture.output_activation,
        "schema_version": model.schema_version,
        # float repr is shortest round-trip, so the JSON text is exact
        "weights": [W.tolist() for W in model.weights],
        "biases": [b.tolist() for b in model.biases],
    }
    return (json.dumps(doc, separators=(",", ":")) + "\n").encode()


def load_model(data: bytes, expected_schema_version: int | None = None) -> MlpModel:
    try:
        doc = json.loads(data.decode() if isinstance(data, (bytes, bytearray)) else data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ModelFormatError(f"corrupted model stream: {exc}") from None
    if not isinstance(doc, dict) or doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("unsupported or missing model format version")
    try:
        arch = MlpArchitecture(tuple(doc["layer_widths"]), doc["hidden_activation"],
                               doc["output_activation"])
        weights = [np.array(W, dtype=float) for W in doc["weights"]]
        biases = [np.array(b, dtype=float) for b in doc["biases"]]
        schema_version = int(doc["schema_version"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model document: {exc}") from None
    w = arch.layer_widths
    shapes = list(zip(w[1:], w[:-1]))
    if (len(weights) != len(shapes) or len(biases) != len(shapes)
            or any(W.shape != s for W, s in zip(weights, shapes))
            or any(b.shape != (s[0],) for b, s in zip(biases, shapes))):
        raise ModelFormatError("parameter shapes inconsistent with architecture")
    if not all(np.all(np.isfinite(p)) for p in weights + biases):
        raise ModelFormatError("non-finite parameters in model stream")
    if expected_schema_version is not None and schema_version != expected_schema_version:
        raise SchemaVersionMismatch(
            f"model trained on schema v{schema_version}, data uses schema v{expected_schema_version}")
    return MlpModel(arch, weights, biases, schema_version)


# -- estimator ---------------------------------------------------------------

class ICUNetClassifier(ClassifierMixin, BaseEstimator):
    """Scikit-learn wrapper around the from-scratch network.

    Parameters mirror :class:`TrainConfig`; ``hidden_layer_sizes`` gives the
    widths between the input and the single sigmoid output unit. Labels must
    be 0/1.
    """

    def __init__(self, hidden_layer_sizes=(220, 100, 5), epochs=1000, initial_lr=0.001,
                 lr_policy="exponential", lr_decay_rate=0.995, lr_step_factor=0.5,
                 lr_step_every=100, batch_size=32, beta1=0.9, beta2=0.999, epsilon=1e-7,
                 l2_coefficient=0.0, random_state=0, threshold=0.5, schema_version=1):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.initial_lr = initial_lr
        self.lr_policy = lr_policy
        self.lr_decay_rate = lr_decay_rate
        self.lr_step_factor = lr_step_factor
        self.lr_step_every = lr_step_every
        self.batch_size = batch_size
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.l2_coefficient = l2_coefficient
        self.random_state = random_state
        self.threshold = threshold
        self.schema_version = schema_version

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs, initial_lr=self.initial_lr,
            lr_policy=LrPolicy(self.lr_policy, self.lr_decay_rate, self.lr_step_factor,
                               self.lr_step_every),
            batch_size=self.batch_size, beta1=self.beta1, beta2=self.beta2,
            epsilon=self.epsilon, l2_coefficient=self.l2_coefficient,
            seed=int(self.random_state), threshold=self.threshold)

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = unique_labels(y)
        if not set(self.classes_.tolist()) <= {0, 1}:
            raise ValueError("labels must be 0/1")
        self.classes_ = np.array([0, 1])
        arch = MlpArchitecture((X.shape[1], *self.hidden_layer_sizes, 1))
        self.model_, self.history_ = train(X, y, arch, self.train_config(), self.schema_version)
        self.n_features_in_ = X.shape[1]
        return self

    @classmethod
    def from_model(cls, model: MlpModel, **params) -> "ICUNetClassifier":
        """Wrap an already trained network without refitting."""
        est = cls(hidden_layer_sizes=tuple(model.architecture.layer_widths[1:-1]),
                  schema_version=model.schema_version, **params)
        est.model_ = model
        est.history_ = []
        est.classes_ = np.array([0, 1])
        est.n_features_in_ = model.architecture.n_inputs
        return est

    def _validate(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def decision_function(self, X):
        X = self._validate(X)
        return logits(self.model_, X)

    def predict_proba(self, X):
        X = self._validate(X)
        p = predict_proba(self.model_, X)
        return np.column_stack([1.0 - p, p])

    def predict(self, X):
        return (self.predict_proba(X)[:, 1] >= self.threshold).astype(int)

    def evaluate(self, X, y) -> EvalReport:
        return evaluate(self.model_, self._validate(X), y, self.threshold)

"""
Fully connected regression network mapping model outputs to singular values.

Plain numpy: forward pass, backpropagation, Adam, inverted dropout and early
stopping. Inputs are standardized per feature. The output layer works in
standardized target units: its affine output ``z`` is mapped to
``relu(target_shift + target_scale * z)``, so predictions are non-negative
singular values. Both transforms are stored with the weights.

With ``level_scaling`` on, an input row ``x`` is first divided by its RMS
``c`` and the output multiplied by ``c**2``. Scaling a conductivity by ``t``
scales the voltages by ``1/t`` and the singular values by ``1/t**2``, so the
network only has to learn the shape dependence. Normalizers and the loss then
live in these level-free units.

Loss convention: squared error divided by ``target_scale``, averaged over the
batch *and* over output entries, plus ``kappa * sum ||W||^2`` over weight
matrices. Biases are not penalized. ``TrainingConfig.l2_kappa`` is quoted per
sample for the error summed over output entries; ``train`` divides it by the
output width to match the per-entry mean.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

LEAKY_RELU = "leaky_relu"
RELU = "relu"
MAGIC = b"NNQN"
FORMAT_VERSION = 1


class TrainingError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


class WeightFileError(ValueError):
    pass


def _act(z, kind, alpha):
    if kind == LEAKY_RELU:
        return np.where(z > 0, z, alpha * z)
    if kind == RELU:
        return np.maximum(z, 0.0)
    raise ValueError(kind)


def _act_grad(z, kind, alpha):
    if kind == LEAKY_RELU:
        return np.where(z > 0, 1.0, alpha)
    return (z > 0).astype(float)


@dataclass
class TrainingConfig:
    initial_lr: float = 1e-5
    l2_kappa: float = 1e-3
    dropout_rate: float = 0.2
    batch_size: int = 64
    max_epochs: int = 500
    early_stop_tol: float = 1e-2
    early_stop_patience: int = 3
    lr_patience: int = 5
    lr_factor: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")
        if not self.initial_lr > 0:
            raise ValueError("initial_lr must be positive")
        if self.l2_kappa < 0:
            raise ValueError("l2_kappa must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


class MLP:
    """``m -> 300 -> 300 -> 300 -> m`` with LeakyReLU, LeakyReLU, ReLU and a ReLU output."""

    def __init__(self, layer_dims, activations=None, alpha: float = 0.1, seed: int = 0,
                 level_scaling: bool = False):
        self.level_scaling = bool(level_scaling)
        self.layer_dims = [int(d) for d in layer_dims]
        n_layers = len(self.layer_dims) - 1
        if activations is None:
            hidden = [LEAKY_RELU] * (n_layers - 2) + [RELU]
            activations = hidden[: n_layers - 1] + [RELU]
        if len(activations) != n_layers:
            raise ValueError("need one activation per layer")
        self.activations = list(activations)
        self.alpha = float(alpha)
        rng = np.random.default_rng(seed)
        self.weights = []
        self.biases = []
        for fan_in, fan_out in zip(self.layer_dims[:-1], self.layer_dims[1:]):
            limit = np.sqrt(6.0 / fan_in)
            self.weights.append(rng.uniform(-limit, limit, (fan_in, fan_out)))
            self.biases.append(np.zeros(fan_out))
        self.input_shift = np.zeros(self.layer_dims[0])
        self.input_scale = np.ones(self.layer_dims[0])
        self.target_shift = np.zeros(self.layer_dims[-1])
        self.target_scale = np.ones(self.layer_dims[-1])

    @classmethod
    def for_measurements(cls, m: int, hidden: int = 300, seed: int = 0) -> "MLP":
        return cls([m, hidden, hidden, hidden, m], seed=seed, level_scaling=True)

    @property
    def n_inputs(self) -> int:
        return self.layer_dims[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_dims[-1]

    def parameters(self):
        return self.weights + self.biases

    def level(self, inputs) -> np.ndarray:
        """Per-row RMS used by level scaling (ones when disabled), shape ``(..., 1)``."""
        x = np.asarray(inputs, dtype=float)
        if not self.level_scaling:
            return np.ones(x.shape[:-1] + (1,))
        c = np.sqrt(np.mean(x * x, axis=-1, keepdims=True))
        if np.any(c <= 0) or not np.all(np.isfinite(c)):
            raise ValueError("level scaling needs non-zero finite input rows")
        return c

    def _level_free(self, inputs, targets=None):
        c = self.level(inputs)
        x = np.asarray(inputs, dtype=float) / c
        if targets is None:
            return x, None
        return x, np.asarray(targets, dtype=float) / c**2

    def fit_normalizer(self, inputs: np.ndarray, targets: np.ndarray | None = None) -> None:
        inputs, targets = self._level_free(inputs, targets)
        self.input_shift = inputs.mean(axis=0)
        std = inputs.std(axis=0)
        self.input_scale = np.where(std > 1e-12 * max(std.max(), 1e-300), std, 1.0)
        if targets is not None:
            self.target_shift = targets.mean(axis=0)
            tstd = targets.std(axis=0)
            floor = 1e-6 * tstd.max() if tstd.max() > 0 else 1.0
            self.target_scale = np.maximum(tstd, floor)

    def _check(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.n_inputs:
            raise ValueError(f"expected inputs of length {self.n_inputs}, got {x.shape[-1]}")
        return x

    def _forward(self, x, dropout_rate=0.0, rng=None):
        a = (x - self.input_shift) / self.input_scale
        cache = [(None, a, None)]
        last = len(self.weights) - 1
        for i, (W, b, kind) in enumerate(zip(self.weights, self.biases, self.activations)):
            z = a @ W + b
            if i == last:
                z = self.target_shift + self.target_scale * z
            a = _act(z, kind, self.alpha)
            mask = None
            if i < last and dropout_rate > 0:
                keep = 1.0 - dropout_rate
                mask = (rng.random(a.shape) < keep) / keep
                a = a * mask
            cache.append((z, a, mask))
        return a, cache

    def forward(self, x, dropout: bool = False, rng: np.random.Generator | None = None,
                dropout_rate: float = 0.2) -> np.ndarray:
        """Predicted singular values for one input vector or a batch of rows."""
        x = self._check(x)
        if dropout and rng is None:
            raise ValueError("dropout needs a random stream")
        c = self.level(x)
        out, _ = self._forward(x / c, dropout_rate if dropout else 0.0, rng)
        return out * c**2

    __call__ = forward

    def weight_penalty(self) -> float:
        return float(sum((W * W).sum() for W in self.weights))

    def loss(self, inputs, targets, kappa: float = 0.0) -> float:
        x, y = self._level_free(self._check(inputs), targets)
        pred, _ = self._forward(x)
        diff = (pred - y) / self.target_scale
        return float(np.mean(diff**2)) + kappa * self.weight_penalty()

    def loss_and_gradients(self, inputs, targets, kappa=0.0, dropout_rate=0.0, rng=None):
        """Loss and its gradients, ordered as ``weights + biases``."""
        x, y = self._level_free(np.atleast_2d(self._check(inputs)), np.atleast_2d(targets))
        out, cache = self._forward(x, dropout_rate, rng)
        diff = (out - y) / self.target_scale
        loss = float(np.mean(diff**2)) + kappa * self.weight_penalty()
        delta = 2.0 * diff / (diff.size * self.target_scale)
        last = len(self.weights) - 1
        gW = [None] * len(self.weights)
        gb = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            z, _, mask = cache[i + 1]
            if mask is not None:
                delta = delta * mask
            delta = delta * _act_grad(z, self.activations[i], self.alpha)
            if i == last:
                delta = delta * self.target_scale
            a_prev = cache[i][1]
            gW[i] = a_prev.T @ delta + 2.0 * kappa * self.weights[i]
            gb[i] = delta.sum(axis=0)
            if i:
                delta = delta @ self.weights[i].T
        return loss, gW + gb

    def copy(self) -> "MLP":
        other = MLP(self.layer_dims, self.activations, self.alpha,
                    level_scaling=self.level_scaling)
        other.weights = [W.copy() for W in self.weights]
        other.biases = [b.copy() for b in self.biases]
        other.input_shift = self.input_shift.copy()
        other.input_scale = self.input_scale.copy()
        other.target_shift = self.target_shift.copy()
        other.target_scale = self.target_scale.copy()
        return other


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainingResult:
    model: MLP
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def train(model: MLP, data, config: TrainingConfig, normalize: bool = True,
          callback=None) -> TrainingResult:
    """Mini-batch Adam on the training split with early stopping on the validation split.

    Training stops once the relative change of the validation loss stays
    below ``early_stop_tol`` for ``early_stop_patience`` consecutive epochs.
    The returned model carries the weights of the best validation epoch.
    """
    X, Y = data.train()
    Xv, Yv = data.validation()
    if len(X) == 0:
        raise ValueError("empty training split")
    model = model.copy()
    if normalize:
        model.fit_normalizer(X, Y)
    kappa = config.l2_kappa / model.n_outputs
    rng = np.random.default_rng(config.rng_seed)
    opt = Adam(model.parameters(), config.initial_lr)
    history: list[EpochRecord] = []
    best_val, best_model, best_epoch = np.inf, model.copy(), 0
    since_best = 0
    calm = 0
    stopped = False

    def data_loss(inp, tgt):
        return model.loss(inp, tgt, 0.0)

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(X))
        for start in range(0, len(X), config.batch_size):
            idx = order[start:start + config.batch_size]
            _, grads = model.loss_and_gradients(X[idx], Y[idx], kappa,
                                                config.dropout_rate, rng)
            opt.step(model.parameters(), grads)
        train_loss = data_loss(X, Y) + kappa * model.weight_penalty()
        val_loss = data_loss(Xv, Yv) if len(Xv) else train_loss
        history.append(EpochRecord(epoch, train_loss, val_loss, opt.lr))
        if callback is not None:
            callback(history[-1])
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(f"loss became non-finite at epoch {epoch}", history)

        if val_loss < best_val:
            best_val, best_model, best_epoch = val_loss, model.copy(), epoch
            since_best = 0
        else:
            since_best += 1
            if since_best >= config.lr_patience:
                opt.lr *= config.lr_factor
                since_best = 0

        if len(history) > 1:
            prev = history[-2].val_loss
            change = abs(val_loss - prev) / max(prev, 1e-300)
            calm = calm + 1 if change < config.early_stop_tol else 0
            if calm >= config.early_stop_patience:
                stopped = True
                break
    logger.info("training finished after %d epochs (best %d, val %.3e)",
                len(history), best_epoch, best_val)
    return TrainingResult(best_model, history, best_epoch, stopped)


def predict_singular_values(model: MLP, model_output) -> np.ndarray:
    return model.forward(model_output)


def save_weights(path, model: MLP, training_config: TrainingConfig | None = None) -> None:
    header = {
        "layer_dims": model.layer_dims,
        "activations": model.activations,
        "alpha": model.alpha,
        "level_scaling": model.level_scaling,
        "loss_convention": "mean over batch and output entries of squared scaled error "
                           "+ (l2_kappa / outputs) * sum of squared weights",
        "training_config": asdict(training_config) if training_config else None,
    }
    blob = json.dumps(header).encode()
    arrays = model.weights + model.biases + [model.input_shift, model.input_scale,
                                             model.target_shift, model.target_scale]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_weights(path) -> MLP:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != MAGIC:
        raise WeightFileError(f"{path}: not a weight file")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != FORMAT_VERSION:
        raise WeightFileError(f"{path}: unsupported version {version}")
    try:
        header = json.loads(raw[16:16 + hlen])
        dims = [int(d) for d in header["layer_dims"]]
        activations = header["activations"]
        alpha = float(header["alpha"])
        level_scaling = bool(header.get("level_scaling", False))
    except (ValueError, KeyError, TypeError) as exc:
        raise WeightFileError(f"{path}: corrupt header") from exc
    shapes = [(a, b) for a, b in zip(dims[:-1], dims[1:])] + [(b,) for b in dims[1:]]
    shapes += [(dims[0],), (dims[0],), (dims[-1],), (dims[-1],)]
    n_values = sum(int(np.prod(s)) for s in shapes)
    payload = raw[16 + hlen:]
    if len(payload) != 8 * n_values:
        raise WeightFileError(
            f"{path}: payload holds {len(payload)} bytes, header dims need {8 * n_values}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, pos = [], 0
    for s in shapes:
        size = int(np.prod(s))
        arrays.append(flat[pos:pos + size].reshape(s).astype(float))
        pos += size
    n_layers = len(dims) - 1
    model = MLP(dims, activations, alpha, level_scaling=level_scaling)
    model.weights = arrays[:n_layers]
    model.biases = arrays[n_layers:2 * n_layers]
    (model.input_shift, model.input_scale,
     model.target_shift, model.target_scale) = arrays[2 * n_layers:]
    return model


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for h in history:
            w.writerow([h.epoch, repr(h.train_loss), repr(h.val_loss), repr(h.lr)])

"""Small multilayer perceptrons in float64 numpy: init, inference, backprop,
plain and differentially private training, and the binary model format.

Randomness: every run derives its generators from ``numpy.random.PCG64``
seeded through ``SeedSequence([seed, epoch, stream])``; shuffling uses
stream 0 and DP noise stream 1, so a run is a pure function of its inputs.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    ArchitectureError,
    BadMagicError,
    ChecksumError,
    ConfigError,
    DataError,
    DivergenceError,
    LabelError,
    NumericInputError,
    ShapeError,
    ShapeInconsistencyError,
    TruncatedError,
    VersionMismatchError,
)

ACTIVATIONS = ("relu", "tanh")
PROB_CLAMP = 1e-12
LOSS_CEILING = -math.log(PROB_CLAMP)  # 27.631..., largest value ce_loss can return

MAGIC = b"VDIP"
FORMAT_VERSION = 1

_SHUFFLE_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True, eq=False)
class MlpModel:
    """Immutable MLP. ``weights[i]`` has shape (fan_in, fan_out)."""

    layer_dims: tuple
    weights: tuple
    biases: tuple
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        _check_dims(self.layer_dims)
        if self.activation not in ACTIVATIONS:
            raise ArchitectureError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.layer_dims) - 1 or len(self.biases) != len(self.weights):
            raise ArchitectureError("parameter count does not match layer_dims")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            shape = (self.layer_dims[i], self.layer_dims[i + 1])
            if w.shape != shape or b.shape != (shape[1],):
                raise ArchitectureError(f"layer {i} has shapes {w.shape}/{b.shape}, expected {shape}")
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise NumericInputError(f"layer {i} has non-finite parameters")
            w.flags.writeable = False
            b.flags.writeable = False

    @property
    def n_classes(self) -> int:
        return self.layer_dims[-1]

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    def with_params(self, weights, biases) -> "MlpModel":
        return MlpModel(
            self.layer_dims,
            tuple(np.array(w, dtype=np.float64) for w in weights),
            tuple(np.array(b, dtype=np.float64) for b in biases),
            self.activation,
            self.seed,
        )

    def params_equal(self, other: "MlpModel") -> bool:
        return (
            self.layer_dims == other.layer_dims
            and self.activation == other.activation
            and all(np.array_equal(a, b) for a, b in zip(self.weights, other.weights))
            and all(np.array_equal(a, b) for a, b in zip(self.biases, other.biases))
        )


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    lr_schedule: Optional[tuple] = None  # ((epoch, multiplier), ...), 1-based epochs
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        # lr == 0 is allowed: a zero step size is a useful identity run
        if not (self.learning_rate >= 0 and math.isfinite(self.learning_rate)):
            raise ConfigError("learning_rate must be a finite non-negative number")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr_schedule:
            epochs = [e for e, _ in self.lr_schedule]
            if any(b <= a for a, b in zip(epochs, epochs[1:])):
                raise ConfigError("lr_schedule epochs must be strictly increasing")
            if any(m < 0 for _, m in self.lr_schedule):
                raise ConfigError("lr_schedule multipliers must be non-negative")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for a 1-based epoch."""
        mult = 1.0
        for start, m in self.lr_schedule or ():
            if epoch >= start:
                mult = m
        return self.learning_rate * mult


@dataclass(frozen=True)
class DpConfig:
    clip_threshold: float = 1.0
    noise_multiplier: float = 1.0
    target_delta: float = 1e-5
    epochs: int = 10
    batch_size: int = 32
    learning_rate: float = 0.05
    optimizer: str = "sgd"
    seed: int = 0

    def __post_init__(self):
        if not self.clip_threshold > 0:
            raise ConfigError("clip_threshold must be > 0")
        if not self.noise_multiplier > 0:
            raise ConfigError("noise_multiplier must be > 0")
        if not 0 < self.target_delta < 1:
            raise ConfigError("target_delta must lie in (0, 1)")
        TrainConfig(self.optimizer, self.learning_rate, self.epochs, self.batch_size, None, self.seed)

    @property
    def noise_std(self) -> float:
        return self.noise_multiplier * self.clip_threshold

    def sampling_rate(self, n: int) -> float:
        return min(1.0, self.batch_size / n)


@dataclass(frozen=True)
class DistillSpec:
    """Soft-target objective: hard_weight * CE(student, y) + soft_weight *
    CE(softmax(logits / T), softmax(log(teacher) / T))."""

    teacher_probs: np.ndarray
    hard_weight: float = 0.0
    soft_weight: float = 1.0
    temperature: float = 1.0

    def __post_init__(self):
        if self.hard_weight < 0 or self.soft_weight < 0 or self.hard_weight + self.soft_weight <= 0:
            raise ConfigError("distillation weights must be non-negative with a positive sum")
        if not self.temperature > 0:
            raise ConfigError("temperature must be > 0")


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    train_acc: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    test_acc: list = field(default_factory=list)


def _check_dims(layer_dims: Sequence[int]) -> None:
    if len(layer_dims) < 2:
        raise ArchitectureError(f"need at least input and output widths, got {list(layer_dims)}")
    if any(int(d) != d or d < 1 for d in layer_dims):
        raise ArchitectureError(f"layer widths must be positive integers, got {list(layer_dims)}")
    if layer_dims[-1] < 2:
        raise ArchitectureError("class count must be >= 2")


def run_rng(seed: int, epoch: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(epoch), int(stream)])))


def mlp_init(layer_dims: Sequence[int], activation: str = "relu", seed: int = 0) -> MlpModel:
    """Xavier-uniform weights in +-sqrt(6 / (fan_in + fan_out)), zero biases."""
    _check_dims(layer_dims)
    dims = tuple(int(d) for d in layer_dims)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed)])))
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(dims, tuple(weights), tuple(biases), activation, int(seed))


def _check_features(model: MlpModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"expected feature rows of width {model.input_dim}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericInputError("features contain NaN or Inf")
    return x


def _check_labels(labels, n: int, k: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if y.size and (not np.issubdtype(y.dtype, np.integer) or y.min() < 0 or y.max() >= k):
        raise LabelError(f"labels must be integers in [0, {k})")
    return y.astype(np.int64)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _activate(model: MlpModel, h: np.ndarray) -> np.ndarray:
    return np.maximum(h, 0.0) if model.activation == "relu" else np.tanh(h)


def _forward(model: MlpModel, x: np.ndarray):
    """Returns (logits, layer inputs) for backprop."""
    inputs = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(a)
        a = a @ w + b
        if i < last:
            a = _activate(model, a)
    return a, inputs


def forward_logits(model: MlpModel, features) -> np.ndarray:
    return _forward(model, _check_features(model, features))[0]


def forward_proba(model: MlpModel, features) -> np.ndarray:
    return softmax(forward_logits(model, features))


def ce_loss(probs, labels) -> np.ndarray:
    """Per-example cross entropy with probabilities clamped to [1e-12, 1]."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ShapeError(f"expected a 2-D probability batch, got shape {p.shape}")
    y = _check_labels(labels, p.shape[0], p.shape[1])
    picked = p[np.arange(p.shape[0]), y]
    return -np.log(np.clip(picked, PROB_CLAMP, 1.0))


def _backward(model: MlpModel, x: np.ndarray, inputs, logits_grad: np.ndarray, per_example: bool):
    """Backpropagate per-example dloss/dlogits.

    Returns (weight_grads, bias_grads). Batch mode averages over rows; per-example
    mode keeps a leading batch axis.
    """
    n = x.shape[0]
    wg, bg = [None] * len(model.weights), [None] * len(model.weights)
    delta = logits_grad
    for i in range(len(model.weights) - 1, -1, -1):
        a = inputs[i]
        if per_example:
            wg[i] = np.einsum("ni,nj->nij", a, delta)
            bg[i] = delta.copy()
        else:
            wg[i] = a.T @ delta / n
            bg[i] = delta.sum(axis=0) / n
        if i > 0:
            back = delta @ model.weights[i].T
            if model.activation == "relu":
                delta = back * (a > 0)
            else:
                delta = back * (1.0 - a * a)
    return wg, bg


def grad(model: MlpModel, features, labels, per_example: bool = False):
    """Gradient of mean softmax cross entropy w.r.t. every weight and bias.

    The clamp inside ``ce_loss`` is ignored here; this is the gradient of
    -log softmax(logits)[y].
    """
    x = _check_features(model, features)
    y = _check_labels(labels, x.shape[0], model.n_classes)
    logits, inputs = _forward(model, x)
    dlogits = softmax(logits)
    dlogits[np.arange(len(y)), y] -= 1.0
    return _backward(model, x, inputs, dlogits, per_example)


def _objective(logits, onehot, target, hard_w, soft_w, tau):
    """Per-example losses and dloss/dlogits for one minibatch."""
    probs = softmax(logits)
    loss = np.zeros(len(logits))
    dlogits = np.zeros_like(logits)
    if hard_w != 0.0:
        loss += hard_w * -np.log(np.clip((probs * onehot).sum(axis=1), PROB_CLAMP, 1.0))
        dlogits += hard_w * (probs - onehot)
    if soft_w != 0.0:
        soft = probs if tau == 1.0 else softmax(logits / tau)
        loss += soft_w * -(target * np.log(np.clip(soft, PROB_CLAMP, 1.0))).sum(axis=1)
        dlogits += soft_w * (soft - target) / tau
    return loss, dlogits


def _soft_targets(teacher_probs: np.ndarray, tau: float) -> np.ndarray:
    if tau == 1.0:
        return teacher_probs
    # logits recovered as log-probabilities; the softmax shift cancels
    return softmax(np.log(np.clip(teacher_probs, PROB_CLAMP, 1.0)) / tau)


class _Optimizer:
    def __init__(self, kind: str, params):
        self.kind = kind
        self.t = 0
        if kind == "adam":
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]

    def step(self, params, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
        if self.kind == "sgd":
            for p, g in zip(params, grads):
                p -= lr * g
            return
        self.t += 1
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def batch_order(n: int, batch_size: int, seed: int, epoch: int) -> list:
    """Minibatch index arrays for one (0-based) epoch."""
    perm = run_rng(seed, epoch, _SHUFFLE_STREAM).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def _evaluate(model, x, y):
    probs = forward_proba(model, x)
    return float(ce_loss(probs, y).mean()), float((probs.argmax(axis=1) == y).mean())


def train(
    model: MlpModel,
    dataset,
    config: TrainConfig,
    distill: Optional[DistillSpec] = None,
    eval_data=None,
):
    """Minibatch training on ``dataset`` (anything with ``features``/``labels``).

    With ``distill`` the objective mixes hard labels and teacher soft targets;
    otherwise it is plain cross entropy. Returns ``(model, History)``.
    """
    x = _check_features(model, dataset.features)
    if len(x) == 0:
        raise DataError("cannot train on an empty dataset")
    y = _check_labels(dataset.labels, len(x), model.n_classes)
    onehot = np.eye(model.n_classes)[y]
    if distill is None:
        hard_w, soft_w, tau, targets = 1.0, 0.0, 1.0, None
    else:
        hard_w, soft_w, tau = distill.hard_weight, distill.soft_weight, distill.temperature
        teacher = np.asarray(distill.teacher_probs, dtype=np.float64)
        if teacher.shape != onehot.shape:
            raise ShapeError(f"teacher_probs shape {teacher.shape} does not match {onehot.shape}")
        targets = _soft_targets(teacher, tau)

    params = [np.array(w) for w in model.weights] + [np.array(b) for b in model.biases]
    n_layers = len(model.weights)
    opt = _Optimizer(config.optimizer, params)
    history = History()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch + 1)
        current = model.with_params(params[:n_layers], params[n_layers:])
        for idx in batch_order(len(x), config.batch_size, config.seed, epoch):
            xb = x[idx]
            logits, inputs = _forward(current, xb)
            loss, dlogits = _objective(
                logits, onehot[idx], None if targets is None else targets[idx], hard_w, soft_w, tau
            )
            if not np.all(np.isfinite(loss)):
                raise DivergenceError(epoch + 1)
            wg, bg = _backward(current, xb, inputs, dlogits, per_example=False)
            opt.step(params, wg + bg, lr)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(epoch + 1)
        current = model.with_params(params[:n_layers], params[n_layers:])
        tl, ta = _evaluate(current, x, y)
        if not math.isfinite(tl):
            raise DivergenceError(epoch + 1)
        history.train_loss.append(tl)
        history.train_acc.append(ta)
        if eval_data is not None:
            el, ea = _evaluate(current, eval_data.features, eval_data.labels)
            history.test_loss.append(el)
            history.test_acc.append(ea)
    return model.with_params(params[:n_layers], params[n_layers:]), history


def clip_factors(norms: np.ndarray, clip: float) -> np.ndarray:
    # the 1e-6 slack keeps post-clip norms strictly below the threshold
    return np.minimum(1.0, clip / (norms + 1e-6))


def dp_train(
    model: MlpModel,
    dataset,
    config: DpConfig,
    orders=None,
    on_step: Optional[Callable[[dict], None]] = None,
):
    """DP-SGD: per-example clipping to L2 norm C, Gaussian noise of std z*C on
    the clipped sum, divided by the batch size. Returns ``(model, epsilon)``.
    """
    from . import accountant

    x = _check_features(model, dataset.features)
    if len(x) == 0:
        raise DataError("cannot train on an empty dataset")
    y = _check_labels(dataset.labels, len(x), model.n_classes)
    params = [np.array(w) for w in model.weights] + [np.array(b) for b in model.biases]
    n_layers = len(model.weights)
    opt = _Optimizer(config.optimizer, params)
    noise_rng = run_rng(config.seed, 0, _NOISE_STREAM)
    steps = 0
    for epoch in range(config.epochs):
        for idx in batch_order(len(x), config.batch_size, config.seed, epoch):
            current = model.with_params(params[:n_layers], params[n_layers:])
            wg, bg = grad(current, x[idx], y[idx], per_example=True)
            per_ex = wg + bg
            flat = np.concatenate([g.reshape(len(idx), -1) for g in per_ex], axis=1)
            norms = np.linalg.norm(flat, axis=1)
            factors = clip_factors(norms, config.clip_threshold)
            if on_step is not None:
                on_step({"epoch": epoch + 1, "step": steps, "clipped_norms": norms * factors})
            update = []
            for g in per_ex:
                clipped_sum = np.tensordot(factors, g, axes=1)
                noise = noise_rng.normal(0.0, config.noise_std, size=clipped_sum.shape)
                update.append((clipped_sum + noise) / config.batch_size)
            opt.step(params, update, config.learning_rate)
            if not all(np.all(np.isfinite(p)) for p in params):
                raise DivergenceError(epoch + 1)
            steps += 1
    profile = accountant.rdp_subsampled_gaussian(
        config.sampling_rate(len(x)), config.noise_multiplier, steps, orders
    )
    eps, _ = accountant.rdp_to_epsilon(profile, config.target_delta)
    return model.with_params(params[:n_layers], params[n_layers:]), eps


# -- binary model format -----------------------------------------------------

_HEADER = struct.Struct("<4sHBH")


def serialize(model: MlpModel) -> bytes:
    """magic | u16 version | u8 activation | u16 dim count | u32 dims | f64 params | crc32."""
    parts = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, ACTIVATIONS.index(model.activation), len(model.layer_dims)),
        struct.pack(f"<{len(model.layer_dims)}I", *model.layer_dims),
    ]
    for w, b in zip(model.weights, model.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def deserialize(data: bytes) -> MlpModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a veridip model file (bad magic)")
    if len(data) < _HEADER.size:
        raise TruncatedError("file ends inside the header")
    _, version, act, n_dims = _HEADER.unpack_from(data)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    off = _HEADER.size
    if len(data) < off + 4 * n_dims:
        raise TruncatedError("file ends inside layer_dims")
    dims = struct.unpack_from(f"<{n_dims}I", data, off)
    off += 4 * n_dims
    n_params = sum(a * b + b for a, b in zip(dims, dims[1:]))
    expected = off + 8 * n_params + 4
    if len(data) < expected:
        raise TruncatedError(f"expected {expected} bytes, got {len(data)}")
    if len(data) > expected:
        raise ShapeInconsistencyError(f"{len(data) - expected} trailing bytes after the parameters")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc != zlib.crc32(data[:-4]):
        raise ChecksumError("CRC32 mismatch")
    if act >= len(ACTIVATIONS):
        raise ShapeInconsistencyError(f"unknown activation tag {act}")
    weights, biases = [], []
    for fan_in, fan_out in zip(dims, dims[1:]):
        w = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=off).reshape(fan_in, fan_out)
        off += 8 * fan_in * fan_out
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=off)
        off += 8 * fan_out
        weights.append(w.astype(np.float64))
        biases.append(b.astype(np.float64))
    try:
        return MlpModel(tuple(dims), tuple(weights), tuple(biases), ACTIVATIONS[act])
    except (ArchitectureError, NumericInputError) as exc:
        raise ShapeInconsistencyError(str(exc)) from exc


def save_model(model: MlpModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(model))


def load_model(path) -> MlpModel:
    with open(path, "rb") as fh:
        return deserialize(fh.read())

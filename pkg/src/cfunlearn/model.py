"""Dense feed-forward classifier with hand-written reverse-mode gradients.

Hidden layers use a rectifier, the output layer is linear.  Weights follow the
``x @ W + b`` convention, so a layer mapping ``a`` inputs to ``b`` outputs has a
weight of shape ``(a, b)``.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "ModelParams",
    "TrainConfig",
    "TrainingDiverged",
    "CheckpointError",
    "Adam",
    "SGD",
    "init_model",
    "forward",
    "forward_batch",
    "embed",
    "predict",
    "softmax",
    "log_softmax",
    "kl_divergence",
    "cross_entropy",
    "forward_cache",
    "backward",
    "input_gradient",
    "train_baseline",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_VERSION",
]

CHECKPOINT_MAGIC = b"CFUL"
CHECKPOINT_VERSION = 1
KL_EPS = 1e-12


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch}: loss={loss!r}")
        self.epoch = epoch
        self.loss = loss


class CheckpointError(ValueError):
    pass


@dataclass
class ModelParams:
    """Weights and biases of a rectifier MLP.

    ``weights[i]`` has shape ``(fan_in, fan_out)``; the last layer emits logits.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix and at least one layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(
                    f"layer {i} expects {w.shape[0]} inputs but layer {i - 1} emits "
                    f"{self.weights[i - 1].shape[1]}"
                )
            if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
                raise ValueError(f"layer {i} has non-finite parameters")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def num_classes(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def embedding_dim(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def hidden_widths(self) -> list[int]:
        return [w.shape[1] for w in self.weights[:-1]]

    @property
    def num_parameters(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self) -> list[np.ndarray]:
        """Flat parameter list, interleaved ``[W0, b0, W1, b1, ...]``."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality of every parameter."""
        mine, theirs = self.params(), other.params()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and a.tobytes() == b.tobytes() for a, b in zip(mine, theirs)
        )


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0 < self.learning_rate < 1:
            raise ValueError(f"learning_rate must lie in (0, 1), got {self.learning_rate}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}; use 'adam' or 'sgd'")


class SGD:
    def __init__(self, params: list[np.ndarray], lr: float):
        self.params = params
        self.lr = lr

    def step(self, grads: list[np.ndarray]) -> None:
        for p, g in zip(self.params, grads):
            p -= self.lr * g


class Adam:
    """Adaptive-moment optimizer updating the given arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float, b1=0.9, b2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_optimizer(name: str, params: list[np.ndarray], lr: float):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


def init_model(input_dim: int, hidden_widths, num_classes: int, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights and zero biases, deterministic in ``seed``."""
    dims = [int(input_dim), *[int(h) for h in hidden_widths], int(num_classes)]
    if any(d <= 0 for d in dims):
        raise ValueError(f"all layer widths must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelParams(weights, biases)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - np.max(logits, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def _as_batch(model: ModelParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs with {model.input_dim} features, got shape {x.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs must be finite")
    return X, single


@dataclass
class ForwardCache:
    """Per-layer activations kept for the backward pass."""

    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    logits: np.ndarray | None = None

    @property
    def embedding(self) -> np.ndarray:
        return self.post[-1] if self.post else self.inputs


def forward_cache(model: ModelParams, X: np.ndarray) -> ForwardCache:
    cache = ForwardCache(inputs=X)
    a = X
    for w, b in zip(model.weights[:-1], model.biases[:-1]):
        h = a @ w + b
        a = np.maximum(h, 0.0)
        cache.pre.append(h)
        cache.post.append(a)
    cache.logits = a @ model.weights[-1] + model.biases[-1]
    return cache


def backward(
    model: ModelParams,
    cache: ForwardCache,
    grad_logits: np.ndarray | None = None,
    grad_embedding: np.ndarray | None = None,
    need_input: bool = False,
):
    """Back-propagate upstream gradients to every parameter.

    Returns ``(param_grads, input_grad)`` where ``param_grads`` is ordered like
    :meth:`ModelParams.params` and ``input_grad`` is ``None`` unless requested.
    """
    n_layers = len(model.weights)
    grads: list[np.ndarray] = [None] * (2 * n_layers)  # type: ignore[list-item]
    emb = cache.embedding
    if grad_logits is None:
        grad_logits = np.zeros_like(cache.logits)
    grads[-2] = emb.T @ grad_logits
    grads[-1] = grad_logits.sum(axis=0)
    g = grad_logits @ model.weights[-1].T
    if grad_embedding is not None:
        g = g + grad_embedding
    for i in range(n_layers - 2, -1, -1):
        g = g * (cache.pre[i] > 0)
        below = cache.post[i - 1] if i > 0 else cache.inputs
        grads[2 * i] = below.T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        if i > 0 or need_input:
            g = g @ model.weights[i].T
    return grads, (g if need_input else None)


def forward_batch(model: ModelParams, X) -> tuple[np.ndarray, np.ndarray]:
    X, _ = _as_batch(model, X)
    logits = forward_cache(model, X).logits
    return logits, softmax(logits)


def forward(model: ModelParams, x) -> tuple[np.ndarray, np.ndarray]:
    """Logits and class probabilities for one input or a batch of rows."""
    X, single = _as_batch(model, x)
    logits = forward_cache(model, X).logits
    probs = softmax(logits)
    if single:
        return logits[0], probs[0]
    return logits, probs


def predict(model: ModelParams, X) -> np.ndarray:
    X, single = _as_batch(model, X)
    out = np.argmax(forward_cache(model, X).logits, axis=1)
    return out[0] if single else out


def embed(model: ModelParams, x) -> np.ndarray:
    """Penultimate-layer activations (after the rectifier), unnormalized."""
    X, single = _as_batch(model, x)
    e = forward_cache(model, X).embedding
    return e[0] if single else e


def kl_divergence(p, q) -> float | np.ndarray:
    """``sum p log(p/q)`` with ``0 log 0 = 0`` and ``q`` clamped at 1e-12.

    Works row-wise on 2-D input, returning one value per row.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    qc = np.maximum(q, KL_EPS)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(np.where(p > 0, p, 1.0)) - np.log(qc)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Per-row cross-entropy of integer targets."""
    lp = log_softmax(np.atleast_2d(logits))
    return -lp[np.arange(lp.shape[0]), np.asarray(y).reshape(-1)]


def _onehot(y: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def input_gradient(model: ModelParams, x, y) -> np.ndarray:
    """Gradient of the cross-entropy loss with respect to the input.

    Accepts a single row with an integer label or a batch with a label vector.
    """
    X, single = _as_batch(model, x)
    Y = np.atleast_1d(np.asarray(y, dtype=int))
    if Y.shape[0] != X.shape[0] or np.any((Y < 0) | (Y >= model.num_classes)):
        raise ValueError("labels must be valid class indices, one per row")
    cache = forward_cache(model, X)
    g_logits = softmax(cache.logits) - _onehot(Y, model.num_classes)
    _, g_in = backward(model, cache, grad_logits=g_logits, need_input=True)
    return g_in[0] if single else g_in


def ce_loss_and_grads(model: ModelParams, X: np.ndarray, y: np.ndarray):
    cache = forward_cache(model, X)
    probs = softmax(cache.logits)
    loss = float(np.mean(cross_entropy(cache.logits, y)))
    g = (probs - _onehot(y, model.num_classes)) / X.shape[0]
    grads, _ = backward(model, cache, grad_logits=g)
    return loss, grads


def train_baseline(
    model: ModelParams,
    dataset,
    config: TrainConfig,
    indices=None,
    labels=None,
    history: list | None = None,
) -> ModelParams:
    """Minibatch cross-entropy training on a copy of ``model``.

    ``indices`` restricts training to a subset of rows; ``labels`` overrides
    the dataset labels (aligned with the selected rows).  Per-epoch mean loss
    is appended to ``history`` when given.
    """
    X = dataset.features if indices is None else dataset.features[np.asarray(indices)]
    if labels is None:
        y = dataset.labels if indices is None else dataset.labels[np.asarray(indices)]
    else:
        y = np.asarray(labels, dtype=int)
    if len(X) == 0:
        raise ValueError("cannot train on an empty dataset")
    if X.shape[1] != model.input_dim:
        raise ValueError(f"model expects {model.input_dim} features, data has {X.shape[1]}")
    trained = model.copy()
    if config.epochs == 0:
        return trained
    rng = np.random.default_rng(config.seed)
    opt = make_optimizer(config.optimizer, trained.params(), config.learning_rate)
    bs = min(config.batch_size, len(X))
    for epoch in range(config.epochs):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), bs):
            idx = order[start:start + bs]
            loss, grads = ce_loss_and_grads(trained, X[idx], y[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, loss)
            opt.step(grads)
            total += loss * len(idx)
        mean = total / len(X)
        if not np.isfinite(mean) or not all(np.all(np.isfinite(p)) for p in trained.params()):
            raise TrainingDiverged(epoch, mean)
        if history is not None:
            history.append(mean)
    return trained


# Checkpoint layout (all integers little-endian):
#   4 bytes magic "CFUL" | u32 version | u32 header length | UTF-8 JSON header
#   | float64 payload (W0, b0, W1, b1, ... in C order) | u32 CRC32 of everything before it
def save_checkpoint(model: ModelParams, path) -> Path:
    path = Path(path)
    header = json.dumps(
        {
            "input_dim": model.input_dim,
            "num_classes": model.num_classes,
            "embedding_dim": model.embedding_dim,
            "layers": [list(w.shape) for w in model.weights],
            "dtype": "<f8",
        },
        sort_keys=True,
    ).encode()
    payload = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params())
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header)) + header + payload
    blob = body + struct.pack("<I", zlib.crc32(body))
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if len(blob) < 16 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
        )
    try:
        header = json.loads(blob[12:12 + hlen].decode())
        shapes = [tuple(s) for s in header["layers"]]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    n_floats = sum(a * b + b for a, b in shapes)
    expected = 12 + hlen + 8 * n_floats + 4
    if len(blob) != expected:
        raise CheckpointError(f"{path}: size {len(blob)} bytes, expected {expected} (truncated?)")
    (crc,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != crc:
        raise CheckpointError(f"{path}: checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8", count=n_floats, offset=12 + hlen).astype(float)
    weights, biases, pos = [], [], 0
    for a, b in shapes:
        weights.append(flat[pos:pos + a * b].reshape(a, b).copy())
        pos += a * b
        biases.append(flat[pos:pos + b].copy())
        pos += b
    return ModelParams(weights, biases)

"""Fully connected ReLU network with softmax output, trained with Adam.

Backpropagation is written out by hand in float64 numpy. Parameters are kept
as a flat list ``[W0, b0, W1, b1, ...]``; gradients use the same layout.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

CHECKPOINT_MAGIC = b"ESPFNN01"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class FnnArchitecture:
    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (1000, 500, 300)

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if min((self.input_dim, self.output_dim) + self.hidden) < 1:
            raise ValueError("all layer widths must be >= 1")

    @classmethod
    def for_qubits(cls, n_qubits: int, hidden: Sequence[int] = (1000, 500, 300)) -> "FnnArchitecture":
        return cls(2 * n_qubits, 3**n_qubits, tuple(hidden))

    @property
    def widths(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    shuffle_seed: int = 0
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


@dataclass
class FnnModel:
    arch: FnnArchitecture
    params: list[np.ndarray]
    history: dict[str, list[float]] = field(default_factory=lambda: {"train_loss": [], "val_loss": []})
    adam_m: list[np.ndarray] | None = None
    adam_v: list[np.ndarray] | None = None
    steps: int = 0
    fit_wall_time: float = 0.0

    @property
    def weights(self) -> list[np.ndarray]:
        return self.params[0::2]

    @property
    def biases(self) -> list[np.ndarray]:
        return self.params[1::2]


def init(arch: FnnArchitecture, seed: int = 0) -> FnnModel:
    """He-normal weights (variance 2 / fan_in), zero biases."""
    rng = np.random.default_rng(seed)
    params = []
    w = arch.widths
    for fan_in, fan_out in zip(w[:-1], w[1:]):
        params.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return FnnModel(arch, params)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_batch(model: FnnModel, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != model.arch.input_dim:
        raise ValueError(f"expected batch of shape (B, {model.arch.input_dim}), got {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite inputs")
    return X


def _forward_cache(model: FnnModel, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray]:
    acts = [X]
    h = X
    n_layers = len(model.params) // 2
    for layer in range(n_layers):
        W, b = model.params[2 * layer], model.params[2 * layer + 1]
        z = h @ W + b
        if layer < n_layers - 1:
            h = np.maximum(z, 0.0)
            acts.append(h)
        else:
            return acts, z
    raise AssertionError("unreachable")


def forward(model: FnnModel, X: np.ndarray) -> np.ndarray:
    X = _check_batch(model, X)
    if not all(np.all(np.isfinite(p)) for p in model.params):
        raise ValueError("non-finite parameters")
    _, logits = _forward_cache(model, X)
    return softmax(logits)


def loss_and_grad(model: FnnModel, X: np.ndarray, targets: np.ndarray) -> tuple[float, list[np.ndarray]]:
    """Mean categorical cross-entropy over the batch and its parameter gradient."""
    X = _check_batch(model, X)
    Y = np.asarray(targets, dtype=np.float64)
    if Y.shape != (len(X), model.arch.output_dim):
        raise ValueError("targets must be one-hot rows matching the output width")
    acts, logits = _forward_cache(model, X)
    if not np.all(np.isfinite(logits)):
        raise TrainingDivergedError("non-finite activations in forward pass")
    z = logits - logits.max(axis=1, keepdims=True)
    log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    B = len(X)
    loss = float(-(Y * log_p).sum() / B)

    grads: list[np.ndarray] = [None] * len(model.params)  # type: ignore[list-item]
    delta = (np.exp(log_p) - Y) / B
    for layer in range(len(model.params) // 2 - 1, -1, -1):
        a = acts[layer]
        grads[2 * layer] = a.T @ delta
        grads[2 * layer + 1] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ model.params[2 * layer].T) * (a > 0)
    return loss, grads


def adam_step(model: FnnModel, grads: Sequence[np.ndarray], step_count: int, config: TrainConfig) -> FnnModel:
    """One in-place Adam update at step ``step_count`` (1-based)."""
    if step_count < 1:
        raise ValueError("step_count starts at 1")
    if model.adam_m is None or model.adam_v is None:
        model.adam_m = [np.zeros_like(p) for p in model.params]
        model.adam_v = [np.zeros_like(p) for p in model.params]
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**step_count
    c2 = 1.0 - b2**step_count
    for p, g, m, v in zip(model.params, grads, model.adam_m, model.adam_v):
        if g.shape != p.shape:
            raise ValueError("gradient shape mismatch")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    model.steps = step_count
    return model


def _mean_loss(model: FnnModel, X: np.ndarray, y: np.ndarray, chunk: int = 8192) -> float:
    total = 0.0
    for lo in range(0, len(X), chunk):
        _, z = _forward_cache(model, X[lo : lo + chunk])
        z = z - z.max(axis=1, keepdims=True)
        log_p = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        total += -log_p[np.arange(len(z)), y[lo : lo + chunk]].sum()
    return total / len(X)


def train(
    model: FnnModel,
    X_train: np.ndarray,
    y_train: np.ndarray,
    X_val: np.ndarray | None,
    y_val: np.ndarray | None,
    config: TrainConfig,
) -> FnnModel:
    """Fixed-epoch mini-batch training; no early stopping."""
    X_train = _check_batch(model, X_train)
    y_train = np.asarray(y_train, dtype=np.int64)
    K = model.arch.output_dim
    if y_train.min() < 0 or y_train.max() >= K:
        raise ValueError(f"labels must lie in [0, {K})")
    rng = np.random.default_rng(config.shuffle_seed)
    eye = np.eye(K)
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        order = rng.permutation(len(X_train))
        running = 0.0
        for lo in range(0, len(order), config.batch_size):
            idx = order[lo : lo + config.batch_size]
            loss, grads = loss_and_grad(model, X_train[idx], eye[y_train[idx]])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, step {model.steps + 1}")
            adam_step(model, grads, model.steps + 1, config)
            running += loss * len(idx)
        model.history["train_loss"].append(running / len(X_train))
        if X_val is not None and len(X_val):
            model.history["val_loss"].append(_mean_loss(model, np.asarray(X_val, np.float64), np.asarray(y_val)))
    model.fit_wall_time = time.perf_counter() - t0
    return model


def predict(model: FnnModel, X: np.ndarray, chunk: int = 8192) -> np.ndarray:
    X = _check_batch(model, X)
    out = np.empty(len(X), dtype=np.int64)
    for lo in range(0, len(X), chunk):
        out[lo : lo + chunk] = np.argmax(forward(model, X[lo : lo + chunk]), axis=1)
    return out


# Checkpoint layout (all integers little-endian):
#   bytes 0..7    magic b"ESPFNN01"
#   bytes 8..11   uint32 H, length of the header
#   next H bytes  UTF-8 JSON header, keys sorted, separators (",", ":"):
#                 {"arrays": [[name, [shape...]], ...], "history": {...},
#                  "hidden": [...], "input_dim": D, "output_dim": K, "version": 1}
#   remainder     arrays in header order as little-endian float64, C order
# Optimizer state and wall time are not stored.

def dumps_checkpoint(model: FnnModel) -> bytes:
    names = [f"{'W' if i % 2 == 0 else 'b'}{i // 2}" for i in range(len(model.params))]
    header = {
        "version": CHECKPOINT_VERSION,
        "input_dim": model.arch.input_dim,
        "output_dim": model.arch.output_dim,
        "hidden": list(model.arch.hidden),
        "history": model.history,
        "arrays": [[n, list(p.shape)] for n, p in zip(names, model.params)],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.params)
    return CHECKPOINT_MAGIC + struct.pack("<I", len(hb)) + hb + body


def loads_checkpoint(data: bytes) -> FnnModel:
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not an FNN checkpoint")
    (hlen,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12 : 12 + hlen])
    if header["version"] != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header['version']}")
    arch = FnnArchitecture(header["input_dim"], header["output_dim"], tuple(header["hidden"]))
    offset = 12 + hlen
    params = []
    for _, shape in header["arrays"]:
        n = int(np.prod(shape))
        params.append(np.frombuffer(data, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += 8 * n
    if offset != len(data):
        raise ValueError("checkpoint length mismatch")
    return FnnModel(arch, params, history=header["history"])


def save_checkpoint(model: FnnModel, path: str | Path) -> None:
    Path(path).write_bytes(dumps_checkpoint(model))


def load_checkpoint(path: str | Path) -> FnnModel:
    return loads_checkpoint(Path(path).read_bytes())

"""Base-3 state labels and one-hot vectors.

A ket ``|q_0 q_1 ... q_{N-1}>`` is written left to right and the rightmost
digit is the least significant, so ``|22102>`` encodes to 227.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np


class LabelError(ValueError):
    pass


def encode_label(digits: Sequence[int]) -> int:
    value = 0
    for d in digits:
        d = int(d)
        if d not in (0, 1, 2):
            raise LabelError(f"invalid base-3 digit {d!r}")
        value = value * 3 + d
    return value


def decode_label(label: int, n_qubits: int) -> list[int]:
    label = int(label)
    if n_qubits < 1:
        raise LabelError("n_qubits must be positive")
    if not 0 <= label < 3**n_qubits:
        raise LabelError(f"label {label} out of range for {n_qubits} qubits")
    digits = [0] * n_qubits
    for pos in range(n_qubits - 1, -1, -1):
        label, digits[pos] = divmod(label, 3)
    return digits


def decode_labels(labels: np.ndarray, n_qubits: int) -> np.ndarray:
    """Vectorized decode: returns an ``(M, n_qubits)`` array of digits."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= 3**n_qubits):
        raise LabelError(f"labels out of range for {n_qubits} qubits")
    powers = 3 ** np.arange(n_qubits - 1, -1, -1, dtype=np.int64)
    return (labels[:, None] // powers[None, :]) % 3


def one_hot(label: int | np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot encode a label (or a 1-D array of labels, giving a matrix)."""
    labels = np.asarray(label, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelError(f"label out of range for {num_classes} classes")
    out = np.zeros(labels.shape + (num_classes,), dtype=np.float64)
    if labels.ndim == 0:
        out[int(labels)] = 1.0
    else:
        out[np.arange(labels.size), labels] = 1.0
    return out

"""Assignment fidelity, geometric-mean system fidelity, cross-fidelity, timing."""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .labels import decode_labels

REPORT_FORMAT_VERSION = 1
FLAT_CONFUSION_MAX_CLASSES = 81


class CoverageError(ValueError):
    """Evaluation set lacks the prepared states a metric needs."""


def _pair(prepared, predicted, n_qubits):
    prepared = np.asarray(prepared, dtype=np.int64)
    predicted = np.asarray(predicted, dtype=np.int64)
    if prepared.shape != predicted.shape or prepared.ndim != 1:
        raise ValueError("prepared and predicted must be 1-D and of equal length")
    return decode_labels(prepared, n_qubits), decode_labels(predicted, n_qubits)


def qubit_confusion(prepared, predicted, n_qubits: int) -> np.ndarray:
    """Per-qubit 3x3 count matrices, ``out[i, s, t]`` = shots with qubit ``i``
    prepared in ``s`` and assigned ``t``."""
    pd, qd = _pair(prepared, predicted, n_qubits)
    out = np.zeros((n_qubits, 3, 3), dtype=np.int64)
    for i in range(n_qubits):
        np.add.at(out[i], (pd[:, i], qd[:, i]), 1)
    return out


def normalize_rows(conf: np.ndarray) -> np.ndarray:
    conf = np.asarray(conf, dtype=np.float64)
    rows = conf.sum(axis=-1, keepdims=True)
    if np.any(rows == 0):
        raise CoverageError("a prepared state has no evaluation shots")
    return conf / rows


def qubit_fidelity(conf: np.ndarray) -> float:
    """One minus the mean of the six off-diagonal conditional probabilities."""
    p = normalize_rows(conf)
    off = p.sum() - np.trace(p)
    return float(1.0 - off / 6.0)


def system_fidelity(fidelities: Sequence[float]) -> float:
    f = [float(x) for x in fidelities]
    if not f:
        raise ValueError("need at least one fidelity")
    if any(x < 0 or x > 1 for x in f):
        raise ValueError("fidelities must lie in [0, 1]")
    return math.prod(f) ** (1.0 / len(f))


def _corr(a: np.ndarray, b: np.ndarray) -> float:
    da = a - a.mean()
    db = b - b.mean()
    va = float(da @ da)
    vb = float(db @ db)
    if va == 0.0:
        return 0.0
    return float(da @ db) / math.sqrt(va * vb)


def cross_fidelity(prepared, predicted, n_qubits: int, fidelities: Sequence[float] | None = None) -> np.ndarray:
    """Signed crosstalk matrix.

    Off-diagonal ``[i, j]`` is minus the Pearson correlation between qubit
    ``i``'s misassignment indicator and qubit ``j``'s prepared level; it is 0
    when qubit ``i`` makes no (or only) errors. The diagonal holds the
    per-qubit fidelities, computed here unless given.
    """
    pd, qd = _pair(prepared, predicted, n_qubits)
    err = (pd != qd).astype(np.float64)
    level = pd.astype(np.float64)
    for j in range(n_qubits):
        if n_qubits > 1 and np.all(level[:, j] == level[0, j]):
            raise CoverageError(f"qubit {j} is prepared in a single state only")
    if fidelities is None:
        conf = qubit_confusion(prepared, predicted, n_qubits)
        fidelities = [qubit_fidelity(c) for c in conf]
    out = np.empty((n_qubits, n_qubits))
    for i in range(n_qubits):
        for j in range(n_qubits):
            out[i, j] = fidelities[i] if i == j else -_corr(err[:, i], level[:, j])
    return out


def timing_ratios(fit_times: Mapping[str, float], baseline: str = "gnb") -> dict[str, float]:
    if baseline not in fit_times:
        raise KeyError(f"missing {baseline} baseline")
    t0 = float(fit_times[baseline])
    if not t0 > 0:
        raise ValueError("baseline time must be positive")
    return {name: (0.0 if name == baseline else math.log10(float(t) / t0)) for name, t in fit_times.items()}


@dataclass
class FidelityReport:
    model: str
    n_qubits: int
    mode: str
    n_shots: int
    qubit_fidelities: list[float]
    system_fidelity: float
    cross_fidelity: np.ndarray
    confusion: np.ndarray  # (N, 3, 3) row-normalized
    confusion_counts: np.ndarray
    flat_confusion: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "format": "espreadout-fidelity-report",
            "version": REPORT_FORMAT_VERSION,
            "model": self.model,
            "n_qubits": self.n_qubits,
            "mode": self.mode,
            "n_shots": self.n_shots,
            "qubit_fidelities": list(self.qubit_fidelities),
            "system_fidelity": self.system_fidelity,
            "cross_fidelity": self.cross_fidelity.tolist(),
            "confusion": self.confusion.tolist(),
            "confusion_counts": self.confusion_counts.tolist(),
        }
        if self.flat_confusion is not None:
            d["flat_confusion"] = self.flat_confusion.tolist()
        d.update(self.extra)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def fidelity_report(prepared, predicted, n_qubits: int, model: str = "", mode: str = "multi") -> FidelityReport:
    counts = qubit_confusion(prepared, predicted, n_qubits)
    fids = [qubit_fidelity(c) for c in counts]
    cf = cross_fidelity(prepared, predicted, n_qubits, fids)
    flat = None
    n_cls = 3**n_qubits
    if n_cls <= FLAT_CONFUSION_MAX_CLASSES:
        flat = np.zeros((n_cls, n_cls), dtype=np.int64)
        np.add.at(flat, (np.asarray(prepared), np.asarray(predicted)), 1)
    return FidelityReport(
        model, n_qubits, mode, len(prepared), fids, system_fidelity(fids), cf,
        normalize_rows(counts), counts, flat,
    )


def comparison_table(reports: Sequence[FidelityReport], timing: Mapping[str, float] | None = None) -> str:
    """CSV laid out with rows F_1..F_N, F_GM (and optionally log10 T/T_GNB),
    one column per model."""
    buf = io.StringIO()
    buf.write("metric," + ",".join(r.model for r in reports) + "\n")
    n = reports[0].n_qubits if reports else 0
    for i in range(n):
        buf.write(f"F_{i + 1}," + ",".join(f"{r.qubit_fidelities[i]:.6f}" for r in reports) + "\n")
    buf.write("F_GM," + ",".join(f"{r.system_fidelity:.6f}" for r in reports) + "\n")
    if timing is not None:
        buf.write("log10(T/T_GNB)," + ",".join(
            f"{timing[r.model]:.3f}" if r.model in timing else "" for r in reports) + "\n")
    return buf.getvalue()


def matrix_csv(mat: np.ndarray, fmt: str = "%.9f") -> str:
    buf = io.StringIO()
    np.savetxt(buf, np.atleast_2d(mat), fmt=fmt, delimiter=",")
    return buf.getvalue()

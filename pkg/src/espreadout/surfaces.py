"""Grid predictions over the IQ plane and per-component IQ histograms.

Both produce plain CSV for external plotting tools.
"""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .labels import decode_labels
from .sim import Dataset

GRID_FORMAT_VERSION = 1
HIST_FORMAT_VERSION = 1


@dataclass(frozen=True)
class GridSpec:
    i_min: float
    i_max: float
    q_min: float
    q_max: float
    nx: int = 100
    ny: int = 100

    def __post_init__(self) -> None:
        if not (self.i_max > self.i_min and self.q_max > self.q_min):
            raise ValueError("grid must have non-zero extent on both axes")
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")

    @property
    def cell_size(self) -> tuple[float, float]:
        return (self.i_max - self.i_min) / self.nx, (self.q_max - self.q_min) / self.ny

    def centres(self) -> tuple[np.ndarray, np.ndarray]:
        dx, dy = self.cell_size
        return (self.i_min + dx * (np.arange(self.nx) + 0.5),
                self.q_min + dy * (np.arange(self.ny) + 0.5))


def decision_surface(predict, n_features: int, qubit: int, grid: GridSpec, n_qubits: int | None = None):
    """Predict a label for every cell centre of ``grid``.

    ``predict`` maps an ``(M, n_features)`` array to labels. With two
    features the grid feeds the model directly. Otherwise the grid sweeps
    qubit ``qubit``'s (I, Q) columns with every other feature held at 0, the
    training mean in scaled coordinates, and the qubit's own digit is decoded
    from the flat label.

    Returns ``(I, Q, label, qubit_state)`` arrays of length ``nx * ny`` in
    row-major order (Q outer, I inner).
    """
    ci, cq = grid.centres()
    gi, gq = np.meshgrid(ci, cq)
    gi, gq = gi.ravel(), gq.ravel()
    if n_features == 2:
        X = np.column_stack([gi, gq])
    else:
        if n_features % 2 or not 0 <= qubit < n_features // 2:
            raise ValueError(f"qubit {qubit} not addressable in a {n_features}-feature model")
        X = np.zeros((len(gi), n_features))
        X[:, 2 * qubit] = gi
        X[:, 2 * qubit + 1] = gq
    labels = np.asarray(predict(X), dtype=np.int64)
    if n_features == 2:
        state = labels.copy()
    else:
        state = decode_labels(labels, n_qubits or n_features // 2)[:, qubit]
    return gi, gq, labels, state


def surface_csv(gi, gq, labels, state, grid: GridSpec, qubit: int) -> str:
    buf = io.StringIO()
    buf.write(
        f"# espreadout-grid version={GRID_FORMAT_VERSION} qubit={qubit} nx={grid.nx} ny={grid.ny} "
        f"i_min={float(grid.i_min)!r} i_max={float(grid.i_max)!r} q_min={float(grid.q_min)!r} q_max={float(grid.q_max)!r}\n"
    )
    buf.write("I,Q,label,qubit_state\n")
    for a, b, c, d in zip(gi, gq, labels, state):
        buf.write(f"{float(a)!r},{float(b)!r},{int(c)},{int(d)}\n")
    return buf.getvalue()


def iq_histogram(dataset: Dataset, qubit: int, state: int, bins: int = 100) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Histogram counts and bin edges of the I and Q marginals for shots with
    ``qubit`` prepared in ``state``."""
    digits = decode_labels(dataset.labels, dataset.n_qubits)
    rows = digits[:, qubit] == state
    if not np.any(rows):
        raise ValueError(f"no shots with qubit {qubit} prepared in state {state}")
    out = {}
    for comp, col in (("I", 2 * qubit), ("Q", 2 * qubit + 1)):
        counts, edges = np.histogram(dataset.features[rows, col], bins=bins)
        out[comp] = (counts, edges)
    return out


def histogram_mean(counts: np.ndarray, edges: np.ndarray) -> float:
    centres = 0.5 * (edges[:-1] + edges[1:])
    return float((counts * centres).sum() / counts.sum())


def histogram_csv(hist: dict[str, tuple[np.ndarray, np.ndarray]], qubit: int, state: int) -> str:
    buf = io.StringIO()
    buf.write(f"# espreadout-histogram version={HIST_FORMAT_VERSION} qubit={qubit} state={state}\n")
    buf.write("component,bin_left,bin_right,count,density\n")
    for comp, (counts, edges) in hist.items():
        width = np.diff(edges)
        density = counts / (counts.sum() * width)
        for k in range(len(counts)):
            buf.write(f"{comp},{float(edges[k])!r},{float(edges[k + 1])!r},{int(counts[k])},{float(density[k])!r}\n")
    return buf.getvalue()

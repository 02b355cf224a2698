"""Synthetic IQ shot generation for multi-qubit three-level readout.

Each qubit's three states sit at fixed points of the IQ plane. A shot for
prepared state ``s`` of qubit ``i`` is drawn as follows:

1. with probability ``decay[i, s, t]`` (``t < s``) the qubit relaxes during
   integration and the emitted centre is ``lam * mean[i, t] + (1 - lam) *
   mean[i, s]`` with ``lam ~ U[0, 1)``; otherwise the centre is ``mean[i, s]``;
2. the centre is shifted by ``sum_j crosstalk[i, j] * s_j`` on both I and Q;
3. Gaussian noise with covariance ``cov[i, s]`` is added.

Randomness is counter based: the stream for ``(seed, label, qubit)`` is a
Philox generator whose counter block ``k`` holds the four uniforms of shot
``k``. Any shot can therefore be regenerated on its own and batch generation
is independent of ordering or thread count.
"""
from __future__ import annotations

import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Sequence

import numpy as np

from .labels import LabelError, decode_label, encode_label

N_STATES = 3
DATASET_FORMAT_VERSION = 1
DEFAULT_MAX_RECORDS = 20_000_000
_DRAWS_PER_SHOT = 4  # decay choice, relaxation point, two Box-Muller uniforms


class DeviceConfigError(ValueError):
    """Invalid device configuration; the message starts with the key path."""


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class DeviceModel:
    """Ground truth of a simulated readout chain.

    Attributes
    ----------
    means : (N, 3, 2) array
        Cluster centre of each (qubit, state) in the IQ plane.
    covs : (N, 3, 2, 2) array
        Noise covariance of each cluster. An all-zero matrix means noiseless.
    decay : (N, 3, 3) array
        ``decay[i, s, t]`` is the probability that qubit ``i`` prepared in
        ``s`` relaxes to ``t < s`` during readout. Entries with ``t >= s``
        are zero.
    crosstalk : (N, N) array
        Mean shift of qubit ``i``'s signal per excitation level of qubit ``j``.
    """

    n_qubits: int
    means: np.ndarray
    covs: np.ndarray
    decay: np.ndarray
    crosstalk: np.ndarray
    seed: int = 0
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        n = self.n_qubits
        for name, shape in (
            ("means", (n, N_STATES, 2)),
            ("covs", (n, N_STATES, 2, 2)),
            ("decay", (n, N_STATES, N_STATES)),
            ("crosstalk", (n, n)),
        ):
            arr = np.array(getattr(self, name), dtype=np.float64)
            if arr.shape != shape:
                raise DeviceConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise DeviceConfigError(f"{name}: non-finite values")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not 0 <= int(self.seed) < 2**64:
            raise DeviceConfigError("seed: must be an unsigned 64-bit integer")
        object.__setattr__(self, "seed", int(self.seed))

        chol = np.zeros_like(self.covs)
        for i in range(n):
            for s in range(N_STATES):
                chol[i, s] = _cov_factor(self.covs[i, s], f"qubits[{i}].covs[{s}]")
        chol.setflags(write=False)
        object.__setattr__(self, "_chol", chol)

        for i in range(n):
            for s in range(N_STATES):
                row = self.decay[i, s]
                if np.any(row < 0) or np.any(row > 1):
                    raise DeviceConfigError(f"qubits[{i}].decay: probabilities must lie in [0, 1]")
                if np.any(row[s:] != 0):
                    raise DeviceConfigError(f"qubits[{i}].decay: only downward transitions allowed")
                if row.sum() > 1 + 1e-12:
                    raise DeviceConfigError(
                        f"qubits[{i}].decay: probabilities from state {s} sum above 1"
                    )
        if np.any(np.diag(self.crosstalk) != 0):
            raise DeviceConfigError("crosstalk: diagonal must be exactly zero")

    @property
    def n_labels(self) -> int:
        return N_STATES**self.n_qubits

    def to_config(self) -> dict[str, Any]:
        qubits = []
        for i in range(self.n_qubits):
            decay = {
                f"{s}->{t}": float(self.decay[i, s, t])
                for s in range(1, N_STATES)
                for t in range(s)
            }
            qubits.append(
                {
                    "means": self.means[i].tolist(),
                    "covs": self.covs[i].tolist(),
                    "decay": decay,
                }
            )
        return {
            "n_qubits": self.n_qubits,
            "seed": self.seed,
            "qubits": qubits,
            "crosstalk": self.crosstalk.tolist(),
        }


def _cov_factor(cov: np.ndarray, path: str) -> np.ndarray:
    if not np.array_equal(cov, cov.T):
        raise DeviceConfigError(f"{path}: covariance not symmetric")
    if not np.any(cov):
        return np.zeros((2, 2))
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise DeviceConfigError(f"{path}: covariance not positive definite")
    return np.linalg.cholesky(cov)


def build_device_model(config: Mapping[str, Any]) -> DeviceModel:
    """Validate a device config document and build a :class:`DeviceModel`.

    Required keys are ``n_qubits`` and ``qubits[i].means`` (three IQ points per
    qubit). Covariances default to ``default_variance * I`` (default 0.01);
    decay and crosstalk default to zero; ``seed`` defaults to 0.
    """
    if not isinstance(config, Mapping):
        raise DeviceConfigError("<root>: expected an object")
    n = config.get("n_qubits")
    if n is None:
        raise DeviceConfigError("n_qubits: missing required key")
    if not isinstance(n, int) or isinstance(n, bool) or n < 1:
        raise DeviceConfigError("n_qubits: must be a positive integer")
    qubits = config.get("qubits")
    if qubits is None:
        raise DeviceConfigError("qubits: missing required key")
    if not isinstance(qubits, Sequence) or len(qubits) != n:
        raise DeviceConfigError(f"qubits: expected a list of {n} entries")
    default_var = float(config.get("default_variance", 0.01))
    if not default_var >= 0:
        raise DeviceConfigError("default_variance: must be non-negative")

    means = np.zeros((n, N_STATES, 2))
    covs = np.zeros((n, N_STATES, 2, 2))
    decay = np.zeros((n, N_STATES, N_STATES))
    for i, q in enumerate(qubits):
        path = f"qubits[{i}]"
        if not isinstance(q, Mapping) or "means" not in q:
            raise DeviceConfigError(f"{path}.means: missing required key")
        m = np.asarray(q["means"], dtype=np.float64)
        if m.shape != (N_STATES, 2):
            raise DeviceConfigError(f"{path}.means: expected three [I, Q] pairs")
        means[i] = m
        qc = q.get("covs")
        for s in range(N_STATES):
            c = None if qc is None else qc[s]
            if c is None:
                covs[i, s] = default_var * np.eye(2)
            else:
                c = np.asarray(c, dtype=np.float64)
                if c.shape != (2, 2):
                    raise DeviceConfigError(f"{path}.covs[{s}]: expected a 2x2 matrix")
                covs[i, s] = c
        for key, p in (q.get("decay") or {}).items():
            try:
                src, dst = (int(x) for x in str(key).split("->"))
            except ValueError:
                raise DeviceConfigError(f"{path}.decay.{key}: expected 's->t'") from None
            if not (0 <= dst < src < N_STATES):
                raise DeviceConfigError(f"{path}.decay.{key}: need 0 <= t < s <= 2")
            decay[i, src, dst] = float(p)

    xt = config.get("crosstalk")
    if xt is None:
        crosstalk = np.zeros((n, n))
    else:
        crosstalk = np.asarray(xt, dtype=np.float64)
        if crosstalk.shape != (n, n):
            raise DeviceConfigError(f"crosstalk: expected a {n}x{n} matrix")
    return DeviceModel(n, means, covs, decay, crosstalk, seed=int(config.get("seed", 0)))


def load_device_config(path: str | Path) -> DeviceModel:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DeviceConfigError(f"<root>: invalid JSON ({exc})") from None
    return build_device_model(doc)


@dataclass(frozen=True)
class ShotRecord:
    features: np.ndarray
    prepared_label: int


def _stream_key(seed: int, label: int, qubit: int) -> np.ndarray:
    return np.random.SeedSequence([seed, label, qubit]).generate_state(2, np.uint64)


def _uniforms(seed: int, label: int, qubit: int, start: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=_stream_key(seed, label, qubit))
    if start:
        bitgen.advance(start)
    return np.random.Generator(bitgen).random((count, _DRAWS_PER_SHOT))


def _emit(device: DeviceModel, digits: Sequence[int], qubit: int, u: np.ndarray) -> np.ndarray:
    s = digits[qubit]
    mean = device.means[qubit]
    centre = np.broadcast_to(mean[s], (len(u), 2)).copy()
    if s > 0:
        cum = np.cumsum(device.decay[qubit, s, :s])
        target = np.searchsorted(cum, u[:, 0], side="right")  # == s means no decay
        lam = u[:, 1]
        for t in range(s):
            hit = target == t
            if np.any(hit):
                centre[hit] += lam[hit, None] * (mean[t] - mean[s])
    shift = float(np.dot(device.crosstalk[qubit], digits))
    centre += shift
    r = np.sqrt(-2.0 * np.log1p(-u[:, 2]))
    z = np.stack([r * np.cos(2 * np.pi * u[:, 3]), r * np.sin(2 * np.pi * u[:, 3])], axis=1)
    return centre + z @ device._chol[qubit, s].T


def _check_digits(device: DeviceModel, digits: Sequence[int]) -> list[int]:
    digits = [int(d) for d in digits]
    if len(digits) != device.n_qubits:
        raise LabelError(f"expected {device.n_qubits} digits, got {len(digits)}")
    for d in digits:
        if d not in (0, 1, 2):
            raise LabelError(f"invalid base-3 digit {d!r}")
    return digits


def simulate_shot(device: DeviceModel, prepared_digits: Sequence[int], shot_index: int) -> ShotRecord:
    digits = _check_digits(device, prepared_digits)
    if shot_index < 0:
        raise ValueError("shot_index must be non-negative")
    label = encode_label(digits)
    feats = np.empty(2 * device.n_qubits)
    for q in range(device.n_qubits):
        u = _uniforms(device.seed, label, q, shot_index, 1)
        feats[2 * q : 2 * q + 2] = _emit(device, digits, q, u)[0]
    return ShotRecord(feats, label)


def simulate_label_block(device: DeviceModel, label: int, n_shots: int, start: int = 0) -> np.ndarray:
    """Features of shots ``start .. start + n_shots - 1`` for one prepared label."""
    digits = decode_label(label, device.n_qubits)
    out = np.empty((n_shots, 2 * device.n_qubits))
    for q in range(device.n_qubits):
        u = _uniforms(device.seed, label, q, start, n_shots)
        out[:, 2 * q : 2 * q + 2] = _emit(device, digits, q, u)
    return out


@dataclass
class Dataset:
    """Label-major collection of shots.

    ``features`` is ``(M, 2N)`` ordered ``I_0, Q_0, ..., I_{N-1}, Q_{N-1}``;
    ``labels`` holds the prepared flat label of each row.
    """

    n_qubits: int
    shots_per_state: int
    features: np.ndarray
    labels: np.ndarray
    seed: int = 0
    provenance: str = ""

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64).reshape(-1, 2 * self.n_qubits)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.labels) != len(self.features):
            raise ValueError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_complete(self) -> bool:
        return len(self) == N_STATES**self.n_qubits * self.shots_per_state

    @property
    def records(self) -> Iterator[ShotRecord]:
        for x, y in zip(self.features, self.labels):
            yield ShotRecord(x, int(y))

    def subset(self, index: np.ndarray, provenance: str | None = None) -> "Dataset":
        return Dataset(
            self.n_qubits,
            self.shots_per_state,
            self.features[index],
            self.labels[index],
            seed=self.seed,
            provenance=self.provenance if provenance is None else provenance,
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(dumps_dataset(self))

    @classmethod
    def load(cls, path: str | Path) -> "Dataset":
        return loads_dataset(Path(path).read_bytes())


def simulate_dataset(
    device: DeviceModel,
    shots_per_state: int,
    *,
    max_records: int = DEFAULT_MAX_RECORDS,
    workers: int = 1,
) -> Dataset:
    if shots_per_state < 1:
        raise ValueError("shots_per_state must be at least 1")
    n_labels = device.n_labels
    if n_labels * shots_per_state > max_records:
        raise ValueError(
            f"{n_labels} labels x {shots_per_state} shots exceeds max_records={max_records}"
        )
    labels = range(n_labels)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            blocks = list(pool.map(lambda lab: simulate_label_block(device, lab, shots_per_state), labels))
    else:
        blocks = [simulate_label_block(device, lab, shots_per_state) for lab in labels]
    return Dataset(
        device.n_qubits,
        shots_per_state,
        np.concatenate(blocks),
        np.repeat(np.arange(n_labels, dtype=np.int64), shots_per_state),
        seed=device.seed,
        provenance="simulated",
    )


# Dataset file, version 1 (UTF-8, LF line endings):
#   line 1: "# espreadout-dataset version=1 n_qubits=<N> shots_per_state=<S> seed=<u64> records=<M>"
#   line 2: "# provenance: <free text, no newlines>"
#   then M lines "<label>,<I_0>,<Q_0>,...,<I_{N-1}>,<Q_{N-1}>"
# Floats are written with 17 significant digits ("%.17g"), which round-trips float64.

def dumps_dataset(ds: Dataset) -> bytes:
    buf = io.StringIO()
    buf.write(
        f"# espreadout-dataset version={DATASET_FORMAT_VERSION} n_qubits={ds.n_qubits} "
        f"shots_per_state={ds.shots_per_state} seed={ds.seed} records={len(ds)}\n"
    )
    buf.write("# provenance: " + ds.provenance.replace("\n", " ") + "\n")
    if len(ds):
        table = np.column_stack([ds.labels.astype(np.float64), ds.features])
        fmt = ["%d"] + ["%.17g"] * ds.features.shape[1]
        np.savetxt(buf, table, fmt=fmt, delimiter=",")
    return buf.getvalue().encode()


def loads_dataset(data: bytes) -> Dataset:
    text = data.decode()
    lines = text.split("\n", 2)
    if len(lines) < 2 or not lines[0].startswith("# espreadout-dataset "):
        raise DatasetFormatError("missing dataset header")
    meta = dict(tok.split("=", 1) for tok in lines[0][2:].split()[1:])
    if int(meta.get("version", -1)) != DATASET_FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {meta.get('version')}")
    if not lines[1].startswith("# provenance: "):
        raise DatasetFormatError("missing provenance line")
    n = int(meta["n_qubits"])
    m = int(meta["records"])
    body = lines[2] if len(lines) > 2 else ""
    if m:
        table = np.loadtxt(io.StringIO(body), delimiter=",", ndmin=2)
    else:
        table = np.zeros((0, 2 * n + 1))
    if table.shape != (m, 2 * n + 1):
        raise DatasetFormatError(f"expected {m} records of {2 * n + 1} fields, got {table.shape}")
    return Dataset(
        n,
        int(meta["shots_per_state"]),
        table[:, 1:],
        table[:, 0].astype(np.int64),
        seed=int(meta["seed"]),
        provenance=lines[1][len("# provenance: "):],
    )

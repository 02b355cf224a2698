"""Data preparation: robust outlier removal, standardization, stratified splits."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .labels import decode_label, decode_labels, encode_label, one_hot  # noqa: F401
from .sim import N_STATES, Dataset

EPS_STD = 1e-12
SCALER_FORMAT_VERSION = 1
_MCD_MAX_ITER = 30


class DegenerateCovarianceError(ValueError):
    """Robust covariance fit collapsed (e.g. collinear points)."""


# --- outliers ----------------------------------------------------------------

def _n_flagged(contamination: float, m: int) -> int:
    # tolerance keeps products like 0.07 * 100 = 7.000000000000001 at 7
    return int(math.ceil(contamination * m - 1e-9))


def _mahalanobis_sq(points: np.ndarray, center: np.ndarray, cov: np.ndarray) -> np.ndarray:
    diff = points - center
    sol = np.linalg.solve(cov, diff.T).T
    return np.einsum("ij,ij->i", diff, sol)


def _fit_subset(points: np.ndarray, idx: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    sub = points[idx]
    center = sub.mean(axis=0)
    cov = np.atleast_2d(np.cov(sub, rowvar=False, bias=True))
    return center, cov, float(np.linalg.det(cov))


def robust_location_covariance(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-covariance-determinant style estimate via concentration steps.

    Starts from the half-sample nearest the coordinate-wise median (scaled by
    MAD) and repeatedly refits on the half-sample with the smallest
    Mahalanobis distances until the determinant stops decreasing.
    """
    points = np.asarray(points, dtype=np.float64)
    m, d = points.shape
    h = (m + d + 1) // 2
    med = np.median(points, axis=0)
    mad = np.median(np.abs(points - med), axis=0)
    mad[mad == 0] = 1.0
    start = np.sum(((points - med) / mad) ** 2, axis=1)
    idx = np.argsort(start, kind="stable")[:h]
    center, cov, det = _fit_subset(points, idx)
    if not det > 0:
        raise DegenerateCovarianceError("covariance degenerate on initial half-sample")
    for _ in range(_MCD_MAX_ITER):
        dist = _mahalanobis_sq(points, center, cov)
        new_idx = np.argsort(dist, kind="stable")[:h]
        new_center, new_cov, new_det = _fit_subset(points, new_idx)
        if not new_det > 0:
            raise DegenerateCovarianceError("covariance degenerate after concentration step")
        if new_det >= det:
            break
        center, cov, det = new_center, new_cov, new_det
    return center, cov


def remove_outliers(points: np.ndarray, contamination: float = 0.01) -> np.ndarray:
    """Return a keep-mask flagging the ``ceil(contamination * M)`` points with the
    largest robust Mahalanobis distance. Distance ties go to the lower index
    being kept."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be an (M, d) array")
    m = len(points)
    if not 0 <= contamination < 0.5:
        raise ValueError("contamination must lie in [0, 0.5)")
    keep = np.ones(m, dtype=bool)
    if contamination == 0:
        return keep
    if m < 10:
        raise ValueError("need at least 10 points for outlier removal")
    center, cov = robust_location_covariance(points)
    dist = _mahalanobis_sq(points, center, cov)
    n_out = _n_flagged(contamination, m)
    order = np.lexsort((np.arange(m), -dist))  # largest distance first, then lowest index
    keep[order[:n_out]] = False
    return keep


def outlier_mask(dataset: Dataset, contamination: float = 0.01) -> tuple[np.ndarray, dict]:
    """Apply :func:`remove_outliers` per (qubit, prepared single-qubit state) group.

    A shot is dropped if it is flagged in any of its groups. Returns the keep
    mask and a report ``{"q<i>": {"s<s>": n_flagged | "skipped: ..."}}``.
    """
    keep = np.ones(len(dataset), dtype=bool)
    digits = decode_labels(dataset.labels, dataset.n_qubits)
    report: dict[str, dict[str, int | str]] = {}
    for q in range(dataset.n_qubits):
        report[f"q{q}"] = {}
        for s in range(N_STATES):
            rows = np.flatnonzero(digits[:, q] == s)
            if len(rows) == 0:
                report[f"q{q}"][f"s{s}"] = 0
                continue
            pts = dataset.features[rows, 2 * q : 2 * q + 2]
            try:
                mask = remove_outliers(pts, contamination) if contamination else np.ones(len(rows), bool)
            except (DegenerateCovarianceError, ValueError) as exc:
                report[f"q{q}"][f"s{s}"] = f"skipped: {exc}"
                continue
            keep[rows[~mask]] = False
            report[f"q{q}"][f"s{s}"] = int((~mask).sum())
    return keep, report


# --- scaling -----------------------------------------------------------------

@dataclass(frozen=True)
class ScalerParams:
    mean: np.ndarray
    std: np.ndarray

    def to_json(self) -> str:
        return json.dumps(
            {"format": "espreadout-scaler", "version": SCALER_FORMAT_VERSION,
             "mean": self.mean.tolist(), "std": self.std.tolist()},
            indent=1,
        )

    @classmethod
    def from_json(cls, text: str) -> "ScalerParams":
        doc = json.loads(text)
        if doc.get("format") != "espreadout-scaler" or doc.get("version") != SCALER_FORMAT_VERSION:
            raise ValueError("not a version-1 scaler document")
        return cls(np.asarray(doc["mean"], dtype=np.float64), np.asarray(doc["std"], dtype=np.float64))


def fit_scaler(features: np.ndarray) -> ScalerParams:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise ValueError("need an (M, D) matrix with M >= 2")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    # near-constant columns: centring alone sends them to zero
    std = np.where(std > EPS_STD, std, 1.0)
    return ScalerParams(mean, std)


def apply_scaler(params: ScalerParams, features: np.ndarray) -> np.ndarray:
    return (np.asarray(features, dtype=np.float64) - params.mean) / params.std


def invert_scaler(params: ScalerParams, scaled: np.ndarray) -> np.ndarray:
    return np.asarray(scaled) * params.std + params.mean


# --- splitting -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Fractions for (train, test, validation) plus the shuffle seed."""

    fractions: tuple[float, float, float] = (0.5, 0.3, 0.2)
    seed: int = 0
    allow_zero: bool = False

    def __post_init__(self) -> None:
        f = tuple(float(x) for x in self.fractions)
        object.__setattr__(self, "fractions", f)
        if len(f) != 3:
            raise ValueError("need exactly three fractions")
        lo_ok = (lambda x: x >= 0) if self.allow_zero else (lambda x: x > 0)
        if not all(lo_ok(x) and x <= 1 for x in f):
            raise ValueError(f"fractions out of range: {f}")
        if abs(sum(f) - 1.0) > 1e-9:
            raise ValueError(f"fractions must sum to 1, got {sum(f)!r}")


def largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    """Integer part sizes summing to ``n``; leftover units go to the largest
    fractional remainders, earlier parts first on ties."""
    quotas = [f * n for f in fractions]
    counts = [int(math.floor(q + 1e-9)) for q in quotas]
    rema = [q - c for q, c in zip(quotas, counts)]
    order = sorted(range(len(fractions)), key=lambda k: (-rema[k], k))
    for k in order[: n - sum(counts)]:
        counts[k] += 1
    return counts


def split(dataset: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Stratified split into (train, test, validation).

    Within each prepared label the shots are permuted with a generator seeded
    by ``(spec.seed, label)`` and cut by :func:`largest_remainder`. Each part
    keeps the input's relative row order.
    """
    parts: list[list[np.ndarray]] = [[], [], []]
    for label in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == label)
        rng = np.random.default_rng([spec.seed, int(label)])
        perm = rows[rng.permutation(len(rows))]
        counts = largest_remainder(len(rows), spec.fractions)
        start = 0
        for k, c in enumerate(counts):
            parts[k].append(perm[start : start + c])
            start += c
    names = ("train", "test", "validation")
    out = []
    for k in range(3):
        idx = np.sort(np.concatenate(parts[k])) if parts[k] else np.zeros(0, dtype=np.int64)
        out.append(dataset.subset(idx, provenance=f"{dataset.provenance}; split={names[k]}"))
    return tuple(out)  # type: ignore[return-value]


@dataclass
class PreparedData:
    train: Dataset
    test: Dataset
    validation: Dataset
    scaler: ScalerParams
    outliers: dict
    n_removed: int


def prepare(dataset: Dataset, contamination: float = 0.01, spec: SplitSpec = SplitSpec()) -> PreparedData:
    """Outlier removal, split, then a scaler fit on the training part only and
    applied to every part."""
    keep, report = outlier_mask(dataset, contamination)
    cleaned = dataset.subset(np.flatnonzero(keep))
    train, test, val = split(cleaned, spec)
    scaler = fit_scaler(train.features)
    scaled = []
    for part in (train, test, val):
        scaled.append(
            Dataset(part.n_qubits, part.shots_per_state, apply_scaler(scaler, part.features),
                    part.labels, seed=part.seed, provenance=part.provenance + "; scaled")
        )
    return PreparedData(*scaled, scaler=scaler, outliers=report, n_removed=int((~keep).sum()))

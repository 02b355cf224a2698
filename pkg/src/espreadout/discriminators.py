"""KNN, decision tree, Gaussian naive Bayes, LDA and QDA classifiers.

All models share one contract: ``fit(spec, X, y) -> TrainedModel``,
``predict(model, X)`` and, for the Gaussian models, ``predict_proba``.
Ties always resolve to the smallest class label; KNN distance ties resolve to
the lowest training index.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import logsumexp

MODEL_FORMAT_VERSION = 1
KINDS = ("knn", "dtc", "gnb", "lda", "qda")
_LOG_2PI = np.log(2 * np.pi)


class UnsupportedOperation(TypeError):
    pass


@dataclass(frozen=True)
class ClassifierSpec:
    kind: str
    k: int = 50
    max_depth: int = 20
    min_samples_split: int = 2
    var_floor: float = 1e-9

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown classifier kind {self.kind!r}")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if not self.var_floor > 0:
            raise ValueError("var_floor must be positive")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"kind": self.kind}
        if self.kind == "knn":
            d["k"] = self.k
        elif self.kind == "dtc":
            d.update(max_depth=self.max_depth, min_samples_split=self.min_samples_split)
        else:
            d["var_floor"] = self.var_floor
        return d


@dataclass
class TrainedModel:
    spec: ClassifierSpec
    classes: np.ndarray
    n_features: int
    params: dict[str, np.ndarray] = field(default_factory=dict)
    fit_wall_time: float = 0.0

    @property
    def kind(self) -> str:
        return self.spec.kind


def _check_X(X: np.ndarray, n_features: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] == 0:
        raise ValueError("features must be an (M, D) matrix with D >= 1")
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"expected {n_features} features, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("non-finite feature values")
    return X


def fit(spec: ClassifierSpec, X: np.ndarray, y: np.ndarray) -> TrainedModel:
    X = _check_X(X)
    y = np.asarray(y, dtype=np.int64)
    if len(y) != len(X) or len(y) == 0:
        raise ValueError("features and labels must be non-empty and of equal length")
    t0 = time.perf_counter()
    classes, y_idx = np.unique(y, return_inverse=True)
    model = TrainedModel(spec, classes, X.shape[1])
    model.params = _FITTERS[spec.kind](spec, X, y_idx, len(classes))
    model.fit_wall_time = time.perf_counter() - t0
    return model


def predict(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    X = _check_X(X, model.n_features)
    if model.kind == "knn":
        idx = _knn_predict(model, X)
    elif model.kind == "dtc":
        idx = _tree_predict(model.params, X)
    else:
        idx = np.argmax(_log_joint(model, X), axis=1)
    return model.classes[idx]


def predict_proba(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    if model.kind not in ("gnb", "lda", "qda"):
        raise UnsupportedOperation(f"predict_proba is not defined for {model.kind}")
    X = _check_X(X, model.n_features)
    scores = _log_joint(model, X)
    return np.exp(scores - logsumexp(scores, axis=1, keepdims=True))


# --- k nearest neighbours ------------------------------------------------------

def _fit_knn(spec, X, y_idx, n_classes):
    return {"X": X.copy(), "y": y_idx.copy()}


def _knn_predict(model: TrainedModel, Q: np.ndarray, chunk_cells: int = 4_000_000) -> np.ndarray:
    Xt, yt = model.params["X"], model.params["y"]
    n = len(Xt)
    k = min(model.spec.k, n)
    onehot = np.zeros((n, len(model.classes)))
    onehot[np.arange(n), yt] = 1.0
    out = np.empty(len(Q), dtype=np.int64)
    step = max(1, chunk_cells // max(n * Xt.shape[1], 1))
    for lo in range(0, len(Q), step):
        q = Q[lo : lo + step]
        dist = np.abs(q[:, None, :] - Xt[None, :, :]).sum(axis=2)
        kth = np.partition(dist, k - 1, axis=1)[:, k - 1 : k]
        closer = dist < kth
        tied = dist == kth
        # fill the remaining slots with the lowest-index points at the k-th distance
        need = k - closer.sum(axis=1, keepdims=True)
        chosen = closer | (tied & (np.cumsum(tied, axis=1) <= need))
        votes = chosen.astype(np.float64) @ onehot
        out[lo : lo + step] = np.argmax(votes, axis=1)
    return out


# --- decision tree -------------------------------------------------------------

def _entropy_from_counts(counts: np.ndarray) -> np.ndarray:
    """Entropy in bits of count vectors along the last axis (0 for empty)."""
    counts = np.asarray(counts, dtype=np.float64)
    tot = counts.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = counts / tot[..., None]
        terms = np.where(counts > 0, p * np.log2(np.where(p > 0, p, 1.0)), 0.0)
    return np.where(tot > 0, -terms.sum(axis=-1), 0.0)


def entropy(probs) -> float:
    p = np.asarray(probs, dtype=np.float64)
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def information_gain(parent_counts, left_counts, right_counts) -> float:
    parent = np.asarray(parent_counts, dtype=np.float64)
    left = np.asarray(left_counts, dtype=np.float64)
    right = np.asarray(right_counts, dtype=np.float64)
    n, nl, nr = parent.sum(), left.sum(), right.sum()
    return float(
        _entropy_from_counts(parent)
        - (nl / n) * _entropy_from_counts(left)
        - (nr / n) * _entropy_from_counts(right)
    )


def _best_split(X: np.ndarray, y: np.ndarray, n_classes: int):
    """Return (feature, threshold) maximizing information gain, or None.

    Gain is maximized through the equivalent minimization of
    ``n_l * H_l + n_r * H_r``; ties keep the first (feature, threshold) in
    lexicographic order.
    """
    n = len(y)
    best = None
    best_score = -np.inf
    for f in range(X.shape[1]):
        order = np.argsort(X[:, f], kind="stable")
        xs = X[order, f]
        valid = np.flatnonzero(xs[1:] > xs[:-1])  # boundary after position i
        if len(valid) == 0:
            continue
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), y[order]] = 1.0
        left = np.cumsum(onehot, axis=0)[valid]
        total = onehot.sum(axis=0)
        right = total - left
        nl = (valid + 1).astype(np.float64)
        nr = n - nl
        # n_l * H_l + n_r * H_r  (in nats, up to the common factor)
        with np.errstate(divide="ignore", invalid="ignore"):
            wl = nl * np.log(nl) - np.where(left > 0, left * np.log(np.where(left > 0, left, 1)), 0).sum(1)
            wr = nr * np.log(nr) - np.where(right > 0, right * np.log(np.where(right > 0, right, 1)), 0).sum(1)
        score = -(wl + wr)
        j = int(np.argmax(score))
        if score[j] > best_score:
            best_score = score[j]
            i = valid[j]
            best = (f, 0.5 * (xs[i] + xs[i + 1]))
    return best


def _fit_dtc(spec: ClassifierSpec, X, y_idx, n_classes):
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node() -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(0)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y_idx)), 0)]
    while stack:
        node, rows, depth = stack.pop()
        counts = np.bincount(y_idx[rows], minlength=n_classes)
        value[node] = int(np.argmax(counts))
        if depth >= spec.max_depth or len(rows) < spec.min_samples_split or np.count_nonzero(counts) <= 1:
            continue
        found = _best_split(X[rows], y_idx[rows], n_classes)
        if found is None:
            continue
        f, t = found
        go_left = X[rows, f] <= t
        feature[node], threshold[node] = f, t
        left[node], right[node] = new_node(), new_node()
        stack.append((right[node], rows[~go_left], depth + 1))
        stack.append((left[node], rows[go_left], depth + 1))
    return {
        "feature": np.asarray(feature, dtype=np.int64),
        "threshold": np.asarray(threshold, dtype=np.float64),
        "left": np.asarray(left, dtype=np.int64),
        "right": np.asarray(right, dtype=np.int64),
        "value": np.asarray(value, dtype=np.int64),
    }


def _tree_predict(p: dict[str, np.ndarray], X: np.ndarray) -> np.ndarray:
    node = np.zeros(len(X), dtype=np.int64)
    active = p["feature"][node] >= 0
    while np.any(active):
        rows = np.flatnonzero(active)
        nd = node[rows]
        go_left = X[rows, p["feature"][nd]] <= p["threshold"][nd]
        node[rows] = np.where(go_left, p["left"][nd], p["right"][nd])
        active = p["feature"][node] >= 0
    return p["value"][node]


def tree_depth(model: TrainedModel) -> int:
    p = model.params
    depth = {0: 0}
    for n in range(len(p["feature"])):
        if p["feature"][n] >= 0:
            depth[p["left"][n]] = depth[p["right"][n]] = depth[n] + 1
    return max(depth.values())


# --- Gaussian models -------------------------------------------------------------

def _floor_cov(cov: np.ndarray, eps: float) -> np.ndarray:
    """Add ``eps`` to the diagonal until the matrix is positive definite."""
    cov = 0.5 * (cov + cov.T)
    bump = eps
    while np.linalg.eigvalsh(cov).min() <= 0:
        cov = cov + bump * np.eye(len(cov))
        bump *= 10
    return cov


def _class_stats(X, y_idx, n_classes):
    counts = np.bincount(y_idx, minlength=n_classes).astype(np.float64)
    means = np.zeros((n_classes, X.shape[1]))
    np.add.at(means, y_idx, X)
    means /= counts[:, None]
    return counts, means


def _fit_gnb(spec, X, y_idx, n_classes):
    counts, means = _class_stats(X, y_idx, n_classes)
    var = np.zeros_like(means)
    np.add.at(var, y_idx, (X - means[y_idx]) ** 2)
    var = np.maximum(var / counts[:, None], spec.var_floor)
    return {"log_prior": np.log(counts / counts.sum()), "means": means, "var": var}


def _fit_lda(spec, X, y_idx, n_classes):
    counts, means = _class_stats(X, y_idx, n_classes)
    centred = X - means[y_idx]
    cov = _floor_cov(centred.T @ centred / len(X), spec.var_floor)
    return {"log_prior": np.log(counts / counts.sum()), "means": means, "cov": cov}


def _fit_qda(spec, X, y_idx, n_classes):
    counts, means = _class_stats(X, y_idx, n_classes)
    covs = np.empty((n_classes, X.shape[1], X.shape[1]))
    for c in range(n_classes):
        d = X[y_idx == c] - means[c]
        covs[c] = _floor_cov(d.T @ d / counts[c], spec.var_floor)
    return {"log_prior": np.log(counts / counts.sum()), "means": means, "covs": covs}


def _gauss_logpdf(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    L = np.linalg.cholesky(cov)
    z = np.linalg.solve(L, (X - mean).T)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    return -0.5 * ((z**2).sum(axis=0) + logdet + X.shape[1] * _LOG_2PI)


def _log_joint(model: TrainedModel, X: np.ndarray) -> np.ndarray:
    p = model.params
    K = len(model.classes)
    out = np.empty((len(X), K))
    if model.kind == "gnb":
        for c in range(K):
            v = p["var"][c]
            out[:, c] = -0.5 * (((X - p["means"][c]) ** 2 / v).sum(1) + np.log(v).sum() + X.shape[1] * _LOG_2PI)
    elif model.kind == "lda":
        for c in range(K):
            out[:, c] = _gauss_logpdf(X, p["means"][c], p["cov"])
    elif model.kind == "qda":
        for c in range(K):
            out[:, c] = _gauss_logpdf(X, p["means"][c], p["covs"][c])
    else:
        raise UnsupportedOperation(f"no likelihood for {model.kind}")
    return out + p["log_prior"]


_FITTERS = {"knn": _fit_knn, "dtc": _fit_dtc, "gnb": _fit_gnb, "lda": _fit_lda, "qda": _fit_qda}


# --- serialization ---------------------------------------------------------------
# JSON document: {"format": "espreadout-model", "version": 1, "spec": {...},
#                 "classes": [...], "n_features": D, "params": {name: {"dtype", "shape", "data"}}}
# Fit wall time is kept out of the document so refits with equal seeds hash-equal.

def model_to_json(model: TrainedModel) -> str:
    params = {
        name: {"dtype": str(arr.dtype), "shape": list(arr.shape), "data": arr.ravel().tolist()}
        for name, arr in sorted(model.params.items())
    }
    doc = {
        "format": "espreadout-model",
        "version": MODEL_FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "classes": model.classes.tolist(),
        "n_features": model.n_features,
        "params": params,
    }
    return json.dumps(doc, separators=(",", ":"))


def model_from_json(text: str) -> TrainedModel:
    doc = json.loads(text)
    if doc.get("format") != "espreadout-model" or doc.get("version") != MODEL_FORMAT_VERSION:
        raise ValueError("not a version-1 model document")
    params = {
        name: np.asarray(p["data"], dtype=p["dtype"]).reshape(p["shape"])
        for name, p in doc["params"].items()
    }
    return TrainedModel(
        ClassifierSpec(**doc["spec"]),
        np.asarray(doc["classes"], dtype=np.int64),
        int(doc["n_features"]),
        params,
    )

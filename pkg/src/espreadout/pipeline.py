"""Experiment manifest and the simulate -> prep -> train -> evaluate stages.

Output directory layout::

    dataset.csv                      raw simulated shots
    prep/{train,test,validation}.csv scaled splits (dataset format)
    prep/scaler.json, prep/prep.json scaler parameters, outlier counts, split sizes
    models/<name>.json | <name>.fnn  fitted models (no wall time inside)
    models/timing.json               fit wall times (varies run to run)
    reports/<name>.json              fidelity report per model
    reports/<name>_crossfid.csv      cross-fidelity matrix
    reports/<name>_confusion.csv     per-qubit 3x3 normalized confusion, stacked
    reports/comparison.csv           F_i / F_GM table, one column per model
    summary.csv                      comparison table plus fit-time ratios (varies)

Everything under ``reports/`` is a pure function of the manifest and seed.
"""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import discriminators as disc
from . import neural
from .dataprep import SplitSpec, prepare
from .labels import decode_labels
from .metrics import FidelityReport, comparison_table, fidelity_report, matrix_csv, timing_ratios
from .sim import Dataset, DeviceModel, build_device_model, dumps_dataset, simulate_dataset

log = logging.getLogger(__name__)

OUT_ENV = "ESPREADOUT_OUT"
DEFAULT_OUT = "espreadout-out"
SPLIT_NAMES = ("train", "test", "validation")


class ManifestError(ValueError):
    pass


class FitFailure(RuntimeError):
    def __init__(self, failures: dict[str, str]):
        super().__init__("; ".join(f"{k}: {v}" for k, v in failures.items()))
        self.failures = failures


@dataclass
class ModelEntry:
    name: str
    kind: str
    options: dict[str, Any] = field(default_factory=dict)


@dataclass
class Manifest:
    device: dict[str, Any]
    shots_per_state: int = 2048
    seed: int | None = None
    contamination: float = 0.01
    fractions: tuple[float, float, float] = (0.5, 0.3, 0.2)
    models: list[ModelEntry] = field(default_factory=list)
    mode: str = "multi"
    eval_split: str = "test"
    out: str | None = None
    max_records: int = 20_000_000

    @property
    def master_seed(self) -> int:
        return int(self.device.get("seed", 0)) if self.seed is None else int(self.seed)

    def device_model(self) -> DeviceModel:
        cfg = dict(self.device)
        if self.seed is not None:
            cfg["seed"] = int(self.seed)
        return build_device_model(cfg)

    def resolve_out(self, flag: str | None = None) -> Path:
        return Path(flag or self.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


_MODEL_KINDS = set(disc.KINDS) | {"fnn"}


def parse_manifest(doc: dict[str, Any], base_dir: Path | None = None) -> Manifest:
    """Parse a manifest document; ``device`` may be an inline object or a path
    relative to ``base_dir``."""
    if not isinstance(doc, dict):
        raise ManifestError("<root>: expected an object")
    dev = doc.get("device")
    if dev is None:
        raise ManifestError("device: missing required key")
    if isinstance(dev, str):
        path = Path(dev) if base_dir is None else base_dir / dev
        if not path.exists():
            raise ManifestError(f"device: file not found: {path}")
        try:
            dev = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"device: invalid JSON in {path} ({exc})") from None
    prep = doc.get("prep", {})
    models = []
    for k, m in enumerate(doc.get("models", [])):
        if "kind" not in m:
            raise ManifestError(f"models[{k}].kind: missing required key")
        if m["kind"] not in _MODEL_KINDS:
            raise ManifestError(f"models[{k}].kind: unknown kind {m['kind']!r}")
        opts = {key: v for key, v in m.items() if key not in ("name", "kind")}
        models.append(ModelEntry(m.get("name", m["kind"]), m["kind"], opts))
    if not models:
        raise ManifestError("models: at least one model is required")
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ManifestError("models: names must be unique")
    mode = doc.get("mode", "multi")
    if mode not in ("single", "multi"):
        raise ManifestError("mode: must be 'single' or 'multi'")
    eval_split = doc.get("eval_split", "test")
    if eval_split not in SPLIT_NAMES:
        raise ManifestError(f"eval_split: must be one of {SPLIT_NAMES}")
    try:
        return Manifest(
            device=dev,
            shots_per_state=int(doc.get("shots_per_state", 2048)),
            seed=doc.get("seed"),
            contamination=float(prep.get("contamination", 0.01)),
            fractions=tuple(prep.get("fractions", (0.5, 0.3, 0.2))),
            models=models,
            mode=mode,
            eval_split=eval_split,
            out=doc.get("out"),
            max_records=int(doc.get("max_records", 20_000_000)),
        )
    except (TypeError, ValueError) as exc:
        raise ManifestError(f"<root>: {exc}") from None


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ManifestError(f"<root>: invalid JSON ({exc})") from None
    return parse_manifest(doc, path.parent)


def write_atomic(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# --- stages -------------------------------------------------------------------

def run_simulate(manifest: Manifest, out: Path) -> Path:
    device = manifest.device_model()
    ds = simulate_dataset(device, manifest.shots_per_state, max_records=manifest.max_records)
    ds.provenance = f"simulated n_qubits={device.n_qubits} seed={device.seed}"
    path = out / "dataset.csv"
    write_atomic(path, dumps_dataset(ds))
    return path


def run_prep(manifest: Manifest, out: Path, dataset: Dataset | None = None) -> dict[str, Any]:
    if dataset is None:
        dataset = Dataset.load(out / "dataset.csv")
    spec = SplitSpec(manifest.fractions, seed=manifest.master_seed)
    prepared = prepare(dataset, manifest.contamination, spec)
    parts = dict(zip(SPLIT_NAMES, (prepared.train, prepared.test, prepared.validation)))
    for name, part in parts.items():
        write_atomic(out / "prep" / f"{name}.csv", dumps_dataset(part))
    write_atomic(out / "prep" / "scaler.json", prepared.scaler.to_json())
    summary = {
        "outliers": prepared.outliers,
        "n_removed": prepared.n_removed,
        "split_sizes": {k: len(v) for k, v in parts.items()},
        "contamination": manifest.contamination,
        "fractions": list(manifest.fractions),
        "seed": manifest.master_seed,
    }
    write_atomic(out / "prep" / "prep.json", json.dumps(summary, indent=1, sort_keys=True))
    return summary


def load_split(out: Path, name: str) -> Dataset:
    return Dataset.load(out / "prep" / f"{name}.csv")


def _fnn_configs(entry: ModelEntry, n_qubits: int, seed: int):
    o = entry.options
    arch = neural.FnnArchitecture.for_qubits(n_qubits, o.get("hidden", (1000, 500, 300)))
    cfg = neural.TrainConfig(
        epochs=int(o.get("epochs", 30)),
        batch_size=int(o.get("batch_size", 256)),
        learning_rate=float(o.get("learning_rate", 1e-3)),
        shuffle_seed=int(o.get("shuffle_seed", seed)),
        init_seed=int(o.get("init_seed", seed)),
    )
    return arch, cfg


def fit_entry(entry: ModelEntry, train: Dataset, validation: Dataset | None, seed: int):
    """Fit one manifest model; returns a TrainedModel or FnnModel."""
    if entry.kind == "fnn":
        arch, cfg = _fnn_configs(entry, train.n_qubits, seed)
        model = neural.init(arch, cfg.init_seed)
        vx = validation.features if validation is not None else None
        vy = validation.labels if validation is not None else None
        return neural.train(model, train.features, train.labels, vx, vy, cfg)
    spec = disc.ClassifierSpec(entry.kind, **entry.options)
    return disc.fit(spec, train.features, train.labels)


def model_path(out: Path, entry: ModelEntry) -> Path:
    return out / "models" / (f"{entry.name}.fnn" if entry.kind == "fnn" else f"{entry.name}.json")


def save_model(model, path: Path) -> None:
    if isinstance(model, neural.FnnModel):
        write_atomic(path, neural.dumps_checkpoint(model))
    else:
        write_atomic(path, disc.model_to_json(model))


def load_model(path: Path):
    if not path.exists():
        raise FileNotFoundError(f"missing model artifact {path}")
    if path.suffix == ".fnn":
        return neural.load_checkpoint(path)
    return disc.model_from_json(path.read_text())


def predict_labels(model, X: np.ndarray) -> np.ndarray:
    if isinstance(model, neural.FnnModel):
        return neural.predict(model, X)
    return disc.predict(model, X)


def run_train(manifest: Manifest, out: Path, only: list[str] | None = None) -> dict[str, float]:
    train = load_split(out, "train")
    validation = load_split(out, "validation")
    times: dict[str, float] = {}
    failures: dict[str, str] = {}
    for entry in manifest.models:
        if only and entry.name not in only:
            continue
        try:
            model = fit_entry(entry, train, validation, manifest.master_seed)
        except Exception as exc:  # isolate per-model failures
            log.error("fit of %s failed: %s", entry.name, exc)
            failures[entry.name] = f"{type(exc).__name__}: {exc}"
            continue
        save_model(model, model_path(out, entry))
        times[entry.name] = model.fit_wall_time
    timing_file = out / "models" / "timing.json"
    prior = json.loads(timing_file.read_text()) if timing_file.exists() else {}
    prior.update(times)
    write_atomic(timing_file, json.dumps(prior, indent=1, sort_keys=True))
    if failures:
        raise FitFailure(failures)
    return times


def single_qubit_mask(labels: np.ndarray, n_qubits: int) -> np.ndarray:
    """Shots where at most one qubit is excited (others in |0>)."""
    return np.count_nonzero(decode_labels(labels, n_qubits), axis=1) <= 1


def run_evaluate(manifest: Manifest, out: Path, only: list[str] | None = None, mode: str | None = None) -> list[FidelityReport]:
    mode = mode or manifest.mode
    split = load_split(out, manifest.eval_split)
    if mode == "single":
        split = split.subset(np.flatnonzero(single_qubit_mask(split.labels, split.n_qubits)))
    reports = []
    for entry in manifest.models:
        if only and entry.name not in only:
            continue
        model = load_model(model_path(out, entry))
        pred = predict_labels(model, split.features)
        rep = fidelity_report(split.labels, pred, split.n_qubits, model=entry.name, mode=mode)
        write_atomic(out / "reports" / f"{entry.name}.json", rep.to_json())
        write_atomic(out / "reports" / f"{entry.name}_crossfid.csv", matrix_csv(rep.cross_fidelity))
        write_atomic(
            out / "reports" / f"{entry.name}_confusion.csv",
            matrix_csv(rep.confusion.reshape(-1, 3)),
        )
        reports.append(rep)
    write_atomic(out / "reports" / "comparison.csv", comparison_table(reports))
    return reports


def run_report(out: Path) -> str:
    """Combined table from stored reports plus fit-time ratios vs GNB."""
    comparison = out / "reports" / "comparison.csv"
    if not comparison.exists():
        raise FileNotFoundError(f"no evaluation results in {out / 'reports'}")
    names = comparison.read_text().splitlines()[0].split(",")[1:]
    reps = []
    for name in names:
        d = json.loads((out / "reports" / f"{name}.json").read_text())
        if d.get("format") != "espreadout-fidelity-report":
            continue
        reps.append(
            FidelityReport(d["model"], d["n_qubits"], d["mode"], d["n_shots"], d["qubit_fidelities"],
                           d["system_fidelity"], np.asarray(d["cross_fidelity"]),
                           np.asarray(d["confusion"]), np.asarray(d["confusion_counts"]))
        )
    timing_file = out / "models" / "timing.json"
    ratios = None
    if timing_file.exists():
        times = json.loads(timing_file.read_text())
        if "gnb" in times:
            ratios = timing_ratios(times)
    table = comparison_table(reps, ratios)
    write_atomic(out / "summary.csv", table)
    return table

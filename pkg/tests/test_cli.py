import hashlib
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from espreadout import cli, pipeline
from espreadout.dataprep import largest_remainder
from espreadout.discriminators import ClassifierSpec, fit, model_to_json
from espreadout.sim import Dataset
from espreadout.surfaces import GridSpec, decision_surface, histogram_mean, iq_histogram

SMALL_FNN = {"name": "fnn", "kind": "fnn", "hidden": [16, 16], "epochs": 3, "batch_size": 64}
ALL_MODELS = [{"name": k, "kind": k} for k in ("knn", "dtc", "gnb", "qda", "lda")] + [SMALL_FNN]


def _device(n, variance=0.02, spread=1.0, seed=3, crosstalk=0.0):
    q = {"means": [[0.0, 0.0], [spread, 0.0], [0.0, spread]], "decay": {"1->0": 0.0}}
    xt = [[0.0 if i == j else crosstalk for j in range(n)] for i in range(n)]
    return {"n_qubits": n, "seed": seed, "default_variance": variance, "qubits": [q] * n, "crosstalk": xt}


def _write_manifest(tmp_path, device, models, shots=40, **extra):
    (tmp_path / "device.json").write_text(json.dumps(device))
    doc = {"device": "device.json", "shots_per_state": shots, "models": models,
           "prep": {"contamination": 0.01, "fractions": [0.5, 0.3, 0.2]}, "seed": 5}
    doc.update(extra)
    path = tmp_path / "manifest.json"
    path.write_text(json.dumps(doc))
    return path


def _sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_simulate_small_and_deterministic(tmp_path, capsys):
    m = _write_manifest(tmp_path, _device(1), [{"kind": "gnb"}], shots=1)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out)]) == 0
    assert "records=3" in capsys.readouterr().out
    ds = Dataset.load(out / "dataset.csv")
    assert len(ds) == 3
    h = _sha(out / "dataset.csv")
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out)]) == 0
    assert _sha(out / "dataset.csv") == h
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out), "--seed", "77"]) == 0
    assert _sha(out / "dataset.csv") != h


def test_simulate_full_five_qubit_record_count(tmp_path):
    dev = json.loads((pipeline.Path(__file__).resolve().parents[1] / "configs" / "device_5q.json").read_text())
    m = _write_manifest(tmp_path, dev, [{"kind": "gnb"}], shots=2048)
    out = tmp_path / "out"
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(out)]) == 0
    with open(out / "dataset.csv") as fh:
        header = fh.readline()
        n_lines = sum(1 for _ in fh) - 1
    assert "records=497664" in header
    assert n_lines == 497_664


def test_config_errors_exit_2(tmp_path, capsys):
    bad = _device(1)
    bad["qubits"] = [{"means": [[0, 0], [1, 0], [2, 0]], "covs": [[[1, 0], [0, 0]], None, None]}]
    m = _write_manifest(tmp_path, bad, [{"kind": "gnb"}])
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(tmp_path / "o")]) == 2
    assert "qubits[0].covs[0]" in capsys.readouterr().err
    m = _write_manifest(tmp_path, _device(1), [{"kind": "svm"}])
    assert cli.main(["simulate", "--manifest", str(m)]) == 2
    assert cli.main(["simulate", "--manifest", str(tmp_path / "missing.json")]) == 2


def test_prep_reports_and_split_sizes(tmp_path, capsys):
    m = _write_manifest(tmp_path, _device(2), [{"kind": "gnb"}], shots=20,
                        prep={"contamination": 0.0, "fractions": [0.5, 0.3, 0.2]})
    out = tmp_path / "out"
    cli.main(["simulate", "--manifest", str(m), "--out", str(out)])
    assert cli.main(["prep", "--manifest", str(m), "--out", str(out)]) == 0
    summary = json.loads((out / "prep" / "prep.json").read_text())
    assert summary["n_removed"] == 0
    assert all(v == 0 for g in summary["outliers"].values() for v in g.values())
    per_label = largest_remainder(20, (0.5, 0.3, 0.2))
    assert summary["split_sizes"] == {k: 9 * c for k, c in zip(("train", "test", "validation"), per_label)}
    train = Dataset.load(out / "prep" / "train.csv")
    assert np.all(np.abs(train.features.mean(axis=0)) < 1e-9)


def test_default_prep_split_sizes(tmp_path):
    m = _write_manifest(tmp_path, _device(2), [{"kind": "gnb"}], shots=50)
    out = tmp_path / "out"
    cli.main(["simulate", "--manifest", str(m), "--out", str(out)])
    cli.main(["prep", "--manifest", str(m), "--out", str(out)])
    ds = Dataset.load(out / "dataset.csv")
    kept = sum(len(Dataset.load(out / "prep" / f"{p}.csv")) for p in ("train", "test", "validation"))
    counts = {p: np.bincount(Dataset.load(out / "prep" / f"{p}.csv").labels, minlength=9)
              for p in ("train", "test", "validation")}
    total = counts["train"] + counts["test"] + counts["validation"]
    assert kept == total.sum() and kept < len(ds)
    for lab in range(9):
        expected = largest_remainder(int(total[lab]), (0.5, 0.3, 0.2))
        assert [counts[p][lab] for p in ("train", "test", "validation")] == expected


def _run_through_train(tmp_path, device, models, shots=40, **extra):
    m = _write_manifest(tmp_path, device, models, shots=shots, **extra)
    out = tmp_path / "out"
    for verb in ("simulate", "prep"):
        assert cli.main([verb, "--manifest", str(m), "--out", str(out)]) == 0
    return m, out


def test_train_only_gnb(tmp_path):
    m, out = _run_through_train(tmp_path, _device(1), [{"kind": "gnb"}])
    assert cli.main(["train", "--manifest", str(m), "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "models").iterdir()) == ["gnb.json", "timing.json"]
    assert "gnb" in json.loads((out / "models" / "timing.json").read_text())


def test_train_all_models_and_rerun_identical(tmp_path, capsys):
    m, out = _run_through_train(tmp_path, _device(2), ALL_MODELS)
    assert cli.main(["train", "--manifest", str(m), "--out", str(out)]) == 0
    files = sorted((out / "models").glob("*.*"))
    artifacts = [p for p in files if p.name != "timing.json"]
    assert len(artifacts) == 6
    hashes = {p.name: _sha(p) for p in artifacts}
    assert cli.main(["train", "--manifest", str(m), "--out", str(out)]) == 0
    assert {p.name: _sha(p) for p in artifacts} == hashes
    assert cli.main(["evaluate", "--manifest", str(m), "--out", str(out)]) == 0
    capsys.readouterr()
    assert cli.main(["report", "--out", str(out)]) == 0
    table = capsys.readouterr().out.splitlines()
    ratios = dict(zip(table[0].split(",")[1:], table[-1].split(",")[1:]))
    assert table[-1].startswith("log10(T/T_GNB)") and float(ratios["gnb"]) == 0.0


def test_fit_failure_isolated(tmp_path, capsys):
    models = [{"kind": "gnb"}, {"name": "broken", "kind": "knn", "k": 0}, {"kind": "lda"}]
    m, out = _run_through_train(tmp_path, _device(1), models)
    assert cli.main(["train", "--manifest", str(m), "--out", str(out)]) == 4
    assert (out / "models" / "gnb.json").exists() and (out / "models" / "lda.json").exists()
    assert "broken" in capsys.readouterr().err


def test_evaluate_perfect_device(tmp_path):
    dev = _device(2, variance=1e-4, spread=10.0)
    models = [{"kind": "knn", "k": 5}] + ALL_MODELS[1:]
    m, out = _run_through_train(tmp_path, dev, models, shots=30)
    cli.main(["train", "--manifest", str(m), "--out", str(out)])
    assert cli.main(["evaluate", "--manifest", str(m), "--out", str(out)]) == 0
    for name in ("knn", "dtc", "gnb", "qda", "lda"):
        rep = json.loads((out / "reports" / f"{name}.json").read_text())
        assert rep["qubit_fidelities"] == [1.0, 1.0]


def test_evaluate_five_qubits_shapes_and_isolation(tmp_path):
    models = [{"kind": "gnb"}, {"kind": "lda"}]
    m, out = _run_through_train(tmp_path, _device(5, variance=0.05, crosstalk=0.02), models, shots=8)
    cli.main(["train", "--manifest", str(m), "--out", str(out)])
    (out / "dataset.csv").unlink()  # evaluation must only read prepared splits
    assert cli.main(["evaluate", "--manifest", str(m), "--out", str(out)]) == 0
    rep = json.loads((out / "reports" / "gnb.json").read_text())
    assert len(rep["qubit_fidelities"]) == 5
    assert isinstance(rep["system_fidelity"], float)
    assert np.asarray(rep["cross_fidelity"]).shape == (5, 5)
    lines = (out / "reports" / "comparison.csv").read_text().splitlines()
    cols = list(zip(*[l.split(",")[1:] for l in lines[1:]]))
    for col in cols:
        fs = [float(v) for v in col[:5]]
        assert abs(math.prod(fs) ** 0.2 - float(col[5])) < 1e-3


def test_single_qubit_mode_filters_states(tmp_path):
    m, out = _run_through_train(tmp_path, _device(3, variance=0.05), [{"kind": "gnb"}], shots=20,
                                  prep={"contamination": 0.0})
    cli.main(["train", "--manifest", str(m), "--out", str(out)])
    assert cli.main(["evaluate", "--manifest", str(m), "--out", str(out), "--mode", "single"]) == 0
    rep = json.loads((out / "reports" / "gnb.json").read_text())
    assert rep["mode"] == "single"
    # 7 states with at most one excited qubit, 6 test shots each
    assert rep["n_shots"] == 7 * 6


def test_evaluate_missing_artifact(tmp_path):
    m, out = _run_through_train(tmp_path, _device(1), [{"kind": "gnb"}])
    assert cli.main(["evaluate", "--manifest", str(m), "--out", str(out)]) == 5


def test_output_dir_precedence(tmp_path, monkeypatch):
    m = _write_manifest(tmp_path, _device(1), [{"kind": "gnb"}], shots=1)
    monkeypatch.setenv(pipeline.OUT_ENV, str(tmp_path / "from_env"))
    assert cli.main(["simulate", "--manifest", str(m)]) == 0
    assert (tmp_path / "from_env" / "dataset.csv").exists()
    m = _write_manifest(tmp_path, _device(1), [{"kind": "gnb"}], shots=1, out=str(tmp_path / "from_manifest"))
    assert cli.main(["simulate", "--manifest", str(m)]) == 0
    assert (tmp_path / "from_manifest" / "dataset.csv").exists()
    assert cli.main(["simulate", "--manifest", str(m), "--out", str(tmp_path / "flag")]) == 0
    assert (tmp_path / "flag" / "dataset.csv").exists()


def _save(tmp_path, model, name="m.json"):
    path = tmp_path / name
    path.write_text(model_to_json(model))
    return path


def _read_grid(path):
    rows = path.read_text().splitlines()[2:]
    return np.array([[float(v) for v in r.split(",")] for r in rows])


def test_decision_surface_lda_boundary_is_straight(tmp_path, rng):
    X = np.vstack([rng.normal([-1, -0.5], 0.4, (200, 2)), rng.normal([1, 0.7], 0.4, (200, 2))])
    y = np.repeat([0, 1], 200)
    path = _save(tmp_path, fit(ClassifierSpec("lda"), X, y))
    grid_out = tmp_path / "grid.csv"
    args = ["decision-surface", "--model", str(path), "--i-range", "-3", "3", "--q-range", "-3", "3",
            "--nx", "80", "--ny", "80", "--output", str(grid_out)]
    assert cli.main(args) == 0
    g = _read_grid(grid_out)
    lab = g[:, 2].reshape(80, 80)  # rows: Q, columns: I
    # first label change along I in each Q row marks the boundary
    pts = []
    for r in range(80):
        change = np.flatnonzero(np.diff(lab[r]) != 0)
        if len(change) == 1:
            c = change[0]
            pts.append((0.5 * (g[r * 80 + c, 0] + g[r * 80 + c + 1, 0]), g[r * 80, 1]))
    pts = np.array(pts)
    assert len(pts) > 10
    coef = np.polyfit(pts[:, 1], pts[:, 0], 1)
    resid = pts[:, 0] - np.polyval(coef, pts[:, 1])
    assert np.max(np.abs(resid)) < 6 / 80


def test_decision_surface_single_cell_and_zero_extent(tmp_path):
    path = _save(tmp_path, fit(ClassifierSpec("gnb"), [[0.0, 0.0], [1.0, 1.0], [0.1, 0.0], [1.1, 1.0]], [0, 1, 0, 1]))
    out = tmp_path / "g.csv"
    assert cli.main(["decision-surface", "--model", str(path), "--nx", "1", "--ny", "1", "--output", str(out)]) == 0
    assert len(_read_grid(out)) == 1
    assert cli.main(["decision-surface", "--model", str(path), "--i-range", "1", "1", "--output", str(out)]) == 3


def test_decision_surface_knn_cluster_centres(rng):
    centres = np.array([[-2.0, 0.0], [2.0, 0.0], [0.0, 2.5]])
    X = np.vstack([rng.normal(c, 0.3, (100, 2)) for c in centres])
    model = fit(ClassifierSpec("knn", k=50), X, np.repeat([0, 1, 2], 100))
    grid = GridSpec(-4, 4, -4, 4, 80, 80)
    gi, gq, labels, _ = decision_surface(lambda Q: __import__("espreadout").discriminators.predict(model, Q), 2, 0, grid)
    dx, dy = grid.cell_size
    for lab, (ci, cq) in enumerate(centres):
        cell = np.flatnonzero((np.abs(gi - ci) <= dx / 2) & (np.abs(gq - cq) <= dy / 2))
        assert len(cell) >= 1 and np.all(labels[cell] == lab)


def test_decision_surface_slices_multi_qubit_model(rng):
    X = rng.normal(size=(900, 4))
    y = np.repeat(np.arange(9), 100)
    X[:, 0] += (y // 3) * 3  # qubit 0 digit shifts I_0
    model = fit(ClassifierSpec("gnb"), X, y)
    grid = GridSpec(-1, 7, -1, 1, 3, 1)
    _, _, _, state = decision_surface(lambda Q: __import__("espreadout").discriminators.predict(model, Q), 4, 0, grid)
    assert state.tolist() == [0, 1, 2]


def _hist_dataset(tmp_path, variance, shots):
    m = _write_manifest(tmp_path, _device(1, variance=variance, spread=1.0), [{"kind": "gnb"}], shots=shots)
    out = tmp_path / "out"
    cli.main(["simulate", "--manifest", str(m), "--out", str(out)])
    return out / "dataset.csv"


def test_histogram_zero_noise(tmp_path):
    path = _hist_dataset(tmp_path, 0.0, 50)
    hist = iq_histogram(Dataset.load(path), 0, 1, bins=20)
    for counts, _ in hist.values():
        assert np.count_nonzero(counts) == 1


def test_histogram_gaussian_mean_and_coverage(tmp_path):
    path = _hist_dataset(tmp_path, 0.04, 100_000)
    ds = Dataset.load(path)
    out = tmp_path / "h.csv"
    assert cli.main(["histogram", "--dataset", str(path), "--qubit", "0", "--state", "1",
                     "--bins", "200", "--output", str(out)]) == 0
    assert out.read_text().startswith("# espreadout-histogram version=1")
    hist = iq_histogram(ds, 0, 1, bins=200)
    for comp, (counts, edges), expected in zip("IQ", hist.values(), (1.0, 0.0)):
        assert abs(histogram_mean(counts, edges) - expected) < 4 * 0.2 / math.sqrt(100_000)
        data = ds.features[ds.labels == 1, 0 if comp == "I" else 1]
        width = edges[1] - edges[0]
        assert len(counts) * width == pytest.approx(data.max() - data.min(), rel=1e-12)
        assert counts.sum() == 100_000


def test_histogram_empty_group(tmp_path):
    m = _write_manifest(tmp_path, _device(1), [{"kind": "gnb"}], shots=5)
    out = tmp_path / "out"
    cli.main(["simulate", "--manifest", str(m), "--out", str(out)])
    ds = Dataset.load(out / "dataset.csv")
    part = ds.subset(ds.labels == 0)
    part.save(tmp_path / "only0.csv")
    assert cli.main(["histogram", "--dataset", str(tmp_path / "only0.csv"), "--state", "2"]) == 3


def test_console_entry_point(tmp_path):
    m = _write_manifest(tmp_path, _device(1), [{"kind": "gnb"}], shots=2)
    res = subprocess.run([sys.executable, "-m", "espreadout.cli", "simulate", "--manifest", str(m),
                          "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    assert "records=6" in res.stdout

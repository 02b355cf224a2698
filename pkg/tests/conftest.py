import json
from pathlib import Path

import numpy as np
import pytest

from espreadout.sim import build_device_model

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def line_device(n_qubits=1, variance=0.0, decay=None, crosstalk=None, seed=11):
    """Means of every qubit at (0,0), (1,0), (2,0)."""
    qubits = []
    for _ in range(n_qubits):
        q = {"means": [[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]]}
        if decay:
            q["decay"] = decay
        qubits.append(q)
    cfg = {"n_qubits": n_qubits, "seed": seed, "default_variance": variance, "qubits": qubits}
    if crosstalk is not None:
        cfg["crosstalk"] = crosstalk
    return build_device_model(cfg)


@pytest.fixture
def device_3q_config():
    return json.loads((CONFIGS / "device_3q.json").read_text())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)

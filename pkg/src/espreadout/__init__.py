"""Machine-learning state discrimination for three-level (ESP) qubit readout."""
from .labels import decode_label, encode_label, one_hot
from .sim import Dataset, DeviceModel, build_device_model, simulate_dataset, simulate_shot

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "DeviceModel",
    "build_device_model",
    "decode_label",
    "encode_label",
    "one_hot",
    "simulate_dataset",
    "simulate_shot",
]

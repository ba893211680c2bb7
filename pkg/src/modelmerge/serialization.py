"""JSON documents for models and merge coefficients.

Floats are written with Python's shortest round-trip representation (at most
17 significant digits), so a save/load cycle reproduces every bit.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .merge_core import MergeCoefficients
from .nn import LayerParams, ModelParams

FORMAT_VERSION = 1


def _tensor_doc(t: np.ndarray) -> dict:
    return {"shape": list(t.shape), "data": [float(x) for x in t.ravel()]}


def _tensor_from(doc: dict) -> np.ndarray:
    shape = tuple(int(s) for s in doc["shape"])
    data = np.array(doc["data"], dtype=np.float64)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"tensor data has {data.size} entries, shape {shape} needs {np.prod(shape)}")
    return data.reshape(shape)


def _layers_doc(layers) -> list:
    return [{"name": name, "tensors": {r: _tensor_doc(t) for r, t in tensors.items()}} for name, tensors in layers]


def model_to_dict(model: ModelParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "architecture_id": model.architecture_id,
        "layers": _layers_doc((layer.name, layer.tensors) for layer in model.layers),
    }


def model_from_dict(doc: dict) -> ModelParams:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    layers = tuple(
        LayerParams(layer["name"], {r: _tensor_from(t) for r, t in layer["tensors"].items()})
        for layer in doc["layers"]
    )
    return ModelParams(layers, doc["architecture_id"])


def coeffs_to_dict(coeffs: MergeCoefficients, template: ModelParams) -> dict:
    """Residuals as a model-shaped document plus ``theta`` and ``rho`` fields."""
    doc = {
        "format_version": FORMAT_VERSION,
        "architecture_id": template.architecture_id,
        "layers": _layers_doc((layer.name, d) for layer, d in zip(template.layers, coeffs.delta)),
        "theta": coeffs.theta.tolist(),
        "rho": None if math.isinf(coeffs.rho) else coeffs.rho,
    }
    return doc


def coeffs_from_dict(doc: dict) -> MergeCoefficients:
    if doc.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported format_version {doc.get('format_version')!r}")
    delta = tuple({r: _tensor_from(t) for r, t in layer["tensors"].items()} for layer in doc["layers"])
    rho = math.inf if doc.get("rho") is None else float(doc["rho"])
    return MergeCoefficients(np.array(doc["theta"], dtype=np.float64), delta, rho)


def dump_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, allow_nan=False) + "\n")


def load_json(path) -> dict:
    return json.loads(Path(path).read_text())


def save_model(model: ModelParams, path) -> None:
    dump_json(model_to_dict(model), path)


def load_model(path) -> ModelParams:
    return model_from_dict(load_json(path))


def save_coeffs(coeffs: MergeCoefficients, template: ModelParams, path) -> None:
    dump_json(coeffs_to_dict(coeffs, template), path)


def load_coeffs(path) -> MergeCoefficients:
    return coeffs_from_dict(load_json(path))

"""JSON file formats for networks, bound caches and input points.

Float arrays are stored as ``{"dtype": "f64le", "shape": [...], "data": <base64>}``
so that a save/load round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
from math import prod
from pathlib import Path

import numpy as np

from .model import (
    Affine,
    Bias,
    CircularConv,
    Crop,
    Downsample,
    Layer,
    Network,
    Pad,
    PostProcess,
    ReLU,
    ShapeError,
)

__all__ = [
    "FormatError",
    "DecodeError",
    "encode_array",
    "decode_array",
    "network_to_dict",
    "network_from_dict",
    "save_network",
    "load_network",
    "save_bounds",
    "load_bounds",
    "load_array_file",
]


class FormatError(ValueError):
    """Malformed JSON or an unknown layer description."""


class DecodeError(FormatError):
    """An encoded array whose payload does not match its declared shape."""


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {
        "dtype": "f64le",
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(obj) -> np.ndarray:
    if isinstance(obj, list):
        return np.asarray(obj, dtype=np.float64)
    try:
        if obj["dtype"] != "f64le":
            raise DecodeError(f"unsupported dtype {obj['dtype']!r}")
        shape = tuple(int(d) for d in obj["shape"])
        raw = base64.b64decode(obj["data"], validate=True)
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, DecodeError):
            raise
        raise DecodeError(f"bad array encoding: {exc}") from exc
    if len(raw) != 8 * prod(shape):
        raise DecodeError(
            f"payload holds {len(raw) // 8} values, shape {list(shape)} needs {prod(shape)}"
        )
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)


def _layer_params(layer: Layer) -> dict:
    if isinstance(layer, Affine):
        return {"W": encode_array(layer.W), "b": encode_array(layer.b)}
    if isinstance(layer, CircularConv):
        return {"kernels": encode_array(layer.kernels)}
    if isinstance(layer, Pad):
        return {"margins": [list(m) for m in layer.margins]}
    if isinstance(layer, Crop):
        return {"window": [list(w) for w in layer.window]}
    if isinstance(layer, Downsample):
        return {"stride": list(layer.stride)}
    if isinstance(layer, Bias):
        return {"b": encode_array(layer.b)}
    if isinstance(layer, PostProcess):
        out = {"indices": layer.indices.tolist()}
        if layer.offset is not None:
            out["bias"] = encode_array(layer.offset)
        return out
    if isinstance(layer, ReLU):
        return {}
    raise FormatError(f"cannot serialise layer {layer!r}")


def _layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    shape_in = tuple(d["shape_in"])
    shape_out = tuple(d["shape_out"])
    p = d.get("params", {})
    if kind == "affine":
        W = decode_array(p["W"])
        b = decode_array(p["b"]) if "b" in p else None
        layer = Affine(W, b, shape_in=shape_in, shape_out=shape_out)
    elif kind == "circ_conv":
        layer = CircularConv(decode_array(p["kernels"]), shape_in)
    elif kind == "pad":
        layer = Pad(shape_in, p["margins"])
    elif kind == "crop":
        layer = Crop(shape_in, p["window"])
    elif kind == "downsample":
        layer = Downsample(shape_in, p["stride"])
    elif kind == "bias":
        layer = Bias(decode_array(p["b"]), shape_in)
    elif kind == "post":
        bias = decode_array(p["bias"]) if "bias" in p else None
        layer = PostProcess(shape_in, shape_out, p["indices"], bias)
    elif kind == "relu":
        layer = ReLU(shape_in)
    else:
        raise FormatError(f"unknown layer kind {kind!r}")
    if layer.shape_out != shape_out:
        raise ShapeError(f"{kind}: declared output {shape_out}, computed {layer.shape_out}")
    return layer


def network_to_dict(net: Network) -> dict:
    net.validate()
    return {
        "input_shape": list(net.input_shape),
        "layers": [
            {
                "kind": layer.kind,
                "shape_in": list(layer.shape_in),
                "shape_out": list(layer.shape_out),
                "params": _layer_params(layer),
            }
            for layer in net.layers
        ],
    }


def network_from_dict(d: dict) -> Network:
    try:
        layers = [_layer_from_dict(item) for item in d["layers"]]
        input_shape = tuple(d["input_shape"])
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed network description: {exc!r}") from exc
    return Network(layers, input_shape)


def _read_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_network(net: Network, path) -> None:
    if not isinstance(net, Network) or not net.layers:
        raise ShapeError("refusing to save an invalid network")
    payload = network_to_dict(net)
    Path(path).write_text(json.dumps(payload, indent=1))


def load_network(path) -> Network:
    return network_from_dict(_read_json(path))


def save_bounds(bounds, path) -> None:
    payload = {
        "lower": [encode_array(a) for a in bounds.lower],
        "upper": [encode_array(a) for a in bounds.upper],
    }
    Path(path).write_text(json.dumps(payload, indent=1))


def load_bounds(path):
    from .relax import BoundsCache

    d = _read_json(path)
    return BoundsCache([decode_array(a) for a in d["lower"]], [decode_array(a) for a in d["upper"]])


def load_array_file(path):
    """Read an input file: an encoded array, a nested list, or ``{"x": ...}``.

    A file of the form ``{"lower": ..., "upper": ...}`` is returned as a
    ``(lower, upper)`` tuple.
    """
    d = _read_json(path)
    if isinstance(d, dict) and "lower" in d and "upper" in d:
        return decode_array(d["lower"]), decode_array(d["upper"])
    if isinstance(d, dict) and "x" in d:
        d = d["x"]
    return decode_array(d)

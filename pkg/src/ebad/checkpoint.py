"""Binary checkpoint persistence for the energy network.

Layout (all little-endian):
    8 bytes   magic "EBMCKPT1"
    u32       layer count
    f64       elu alpha
    per layer: u32 kh, kw, stride, padding, f_in, f_out, activation code
               (0 = none, 1 = elu)
    per layer, in order: f64 weight array (f_out, f_in, kh, kw) C-order,
               then f64 bias array (f_out,)
"""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

from .errors import EbadError
from .network import ConvLayerSpec, ModelParams, NetworkTopology

MAGIC = b"EBMCKPT1"
_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")
_ACT_CODE = {"none": 0, "elu": 1}
_ACT_NAME = {v: k for k, v in _ACT_CODE.items()}


class CheckpointError(EbadError):
    """Checkpoint file is missing, truncated, or structurally invalid."""


def save_checkpoint(path, params: ModelParams) -> None:
    path = Path(path)
    topo = params.topology
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.asarray([len(topo.layers)], dtype=_U32).tobytes())
        fh.write(np.asarray([topo.elu_alpha], dtype=_F64).tobytes())
        for layer in topo.layers:
            fields = [layer.kernel[0], layer.kernel[1], layer.stride, layer.padding,
                      layer.f_in, layer.f_out, _ACT_CODE[layer.activation]]
            fh.write(np.asarray(fields, dtype=_U32).tobytes())
        for w, b in zip(params.weights, params.biases):
            fh.write(np.ascontiguousarray(w, dtype=_F64).tobytes())
            fh.write(np.ascontiguousarray(b, dtype=_F64).tobytes())


def load_checkpoint(path) -> ModelParams:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {data[:8]!r}, expected {MAGIC!r}")
    offset = 8

    def take(dtype, count):
        nonlocal offset
        nbytes = dtype.itemsize * count
        if offset + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        out = np.frombuffer(data, dtype=dtype, count=count, offset=offset)
        offset += nbytes
        return out

    n_layers = int(take(_U32, 1)[0])
    alpha = float(take(_F64, 1)[0])
    layers = []
    for i in range(n_layers):
        kh, kw, stride, padding, f_in, f_out, act = (int(v) for v in take(_U32, 7))
        if act not in _ACT_NAME:
            raise CheckpointError(f"{path}: layer {i} has unknown activation code {act}")
        layers.append(ConvLayerSpec((kh, kw), stride, padding, f_in, f_out, _ACT_NAME[act]))
    try:
        topo = NetworkTopology(tuple(layers), elu_alpha=alpha)
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid topology: {exc}") from exc

    weights, biases = [], []
    for layer in layers:
        kh, kw = layer.kernel
        w = take(_F64, layer.f_out * layer.f_in * kh * kw)
        weights.append(w.reshape(layer.f_out, layer.f_in, kh, kw).copy())
        biases.append(take(_F64, layer.f_out).copy())
    if offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - offset} trailing bytes")
    return ModelParams(topo, weights, biases)


def atomic_save_checkpoint(path, params: ModelParams) -> None:
    """Write to a temp file then rename, so readers never see partial files."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_checkpoint(tmp, params)
    os.replace(tmp, path)

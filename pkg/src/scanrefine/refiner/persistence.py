"""Binary model files.

Layout (little-endian)::

    b"P2NM" | u32 version | u32 q | u32 K | u32 L | u32 sizes[L]
    | u32 epochs_trained | i64 seed (-1 = none)
    | per layer: f32 W[out*in], f32 b[out]
    |            and for hidden layers f32 gamma, beta, running_mean, running_var
"""

from __future__ import annotations

import struct

import numpy as np

from .._atomic import atomic_write_bytes
from ..errors import IncompatibleModelError, NotFoundError, ShapeError
from .network import MlpModel

MAGIC = b"P2NM"
VERSION = 1


def dumps(model: MlpModel) -> bytes:
    sizes = model.sizes
    seed = -1 if model.seed is None else int(model.seed)
    parts = [MAGIC, struct.pack("<4I", VERSION, model.q, model.k, len(sizes)),
             struct.pack(f"<{len(sizes)}I", *sizes),
             struct.pack("<Iq", model.epochs_trained, seed)]
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        arrays = [w, b]
        if i < model.n_hidden:
            arrays += [model.gamma[i], model.beta[i], model.running_mean[i], model.running_var[i]]
        parts += [np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays]
    return b"".join(parts)


def loads(data: bytes) -> MlpModel:
    try:
        if data[:4] != MAGIC:
            raise IncompatibleModelError("not a model file (bad magic)")
        version, q, k, n_sizes = struct.unpack_from("<4I", data, 4)
        if version != VERSION:
            raise IncompatibleModelError(f"unsupported model version {version}")
        off = 20
        sizes = struct.unpack_from(f"<{n_sizes}I", data, off)
        off += 4 * n_sizes
        epochs, seed = struct.unpack_from("<Iq", data, off)
        off += 12
    except struct.error as exc:
        raise IncompatibleModelError(f"truncated model header: {exc}") from None
    if n_sizes < 2:
        raise IncompatibleModelError("model needs at least two layer sizes")

    def take(count, shape):
        nonlocal off
        end = off + 4 * count
        if end > len(data):
            raise IncompatibleModelError("truncated model payload")
        a = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
        off = end
        return a.reshape(shape)

    weights, biases, gamma, beta, rmean, rvar = [], [], [], [], [], []
    n_layers = n_sizes - 1
    for i in range(n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        weights.append(take(fan_in * fan_out, (fan_out, fan_in)))
        biases.append(take(fan_out, (fan_out,)))
        if i < n_layers - 1:
            gamma.append(take(fan_out, (fan_out,)))
            beta.append(take(fan_out, (fan_out,)))
            rmean.append(take(fan_out, (fan_out,)))
            rvar.append(take(fan_out, (fan_out,)))
    if off != len(data):
        raise IncompatibleModelError(f"{len(data) - off} trailing bytes after model payload")
    model = MlpModel(weights, biases, gamma, beta, rmean, rvar, q, k, epochs,
                     None if seed < 0 else seed)
    try:
        model.check()
    except ShapeError as exc:
        raise IncompatibleModelError(str(exc)) from None
    return model


def save_model(model: MlpModel, path) -> None:
    atomic_write_bytes(path, dumps(model))


def load_model(path) -> MlpModel:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError as exc:
        raise NotFoundError(f"no such model file: {path}") from exc
    return loads(data)

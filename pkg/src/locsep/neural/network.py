"""Sequential layer composition, checkpoints and gradient verification."""

import json
import struct

import numpy as np

from ..errors import ConfigError
from .layers import layer_from_spec

CHECKPOINT_MAGIC = b"LSNN"


class Sequential:
    """Fixed chain of layers sharing the forward/backward protocol."""

    def __init__(self, layers=()):
        self.layers = list(layers)

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, gout):
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout

    def params(self):
        """Flat name -> array view of every parameter, in layer order."""
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.params.items():
                out[f"{idx}.{name}"] = arr
        return out

    def grads(self):
        out = {}
        for idx, layer in enumerate(self.layers):
            for name, arr in layer.grads.items():
                out[f"{idx}.{name}"] = arr
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def specs(self):
        return [layer.spec() for layer in self.layers]

    def set_params(self, flat):
        for name, arr in self.params().items():
            arr[...] = flat[name]

    def copy_params(self):
        return {k: v.copy() for k, v in self.params().items()}


def save_checkpoint(path, specs, params, seed=0, step=0, extra=None):
    """Write a flat-binary checkpoint: magic, JSON header, float64 payload.

    The header records layer specs, parameter names/shapes in payload order,
    the construction seed and the training step.
    """
    names = sorted(params)
    header = {
        "layers": specs,
        "params": [{"name": n, "shape": list(params[n].shape)} for n in names],
        "seed": seed,
        "step": step,
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(params[n], dtype=np.float64).tobytes())


def load_checkpoint(path):
    """Return (header dict, name -> array)."""
    import os

    if not os.path.exists(path):
        raise ConfigError(f"checkpoint {path} does not exist")
    with open(path, "rb") as f:
        if f.read(4) != CHECKPOINT_MAGIC:
            raise ConfigError(f"{path} is not a checkpoint file")
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        raw = f.read()
    params = {}
    offset = 0
    for entry in header["params"]:
        size = int(np.prod(entry["shape"])) if entry["shape"] else 1
        chunk = np.frombuffer(raw, dtype=np.float64, count=size, offset=offset)
        params[entry["name"]] = chunk.reshape(entry["shape"]).copy()
        offset += size * 8
    return header, params


def sequential_from_checkpoint(path, rng=None):
    header, params = load_checkpoint(path)
    net = Sequential([layer_from_spec(s, rng=rng) for s in header["layers"]])
    net.set_params(params)
    return net, header


def gradient_check(loss_fn, params, grads, h=1e-5, max_entries=None, rng=None):
    """Central finite differences against analytic gradients.

    loss_fn() re-evaluates the scalar loss with the current parameter
    values; params/grads map names to arrays (grads already populated by
    a backward pass). A subset of entries per array can be sampled via
    max_entries. Returns the worst relative error.
    """
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for name, p in params.items():
        flat = p.reshape(-1)
        gflat = grads[name].reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn()
            flat[i] = orig - h
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(gflat[i]), 1e-8)
            worst = max(worst, abs(numeric - gflat[i]) / denom)
    return worst

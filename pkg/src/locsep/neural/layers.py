"""Differentiable layers with hand-written backward rules.

No autograd graph: every layer caches what its own backward needs during
forward and exposes params/grads dicts. Array conventions:
    conv domain:      (planes, frames, bins)
    recurrent domain: (frames, features)
Weights initialize uniform +-1/sqrt(fan_in), biases zero.
"""

import numpy as np

from ..errors import DimensionError, StateError


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _uniform_init(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(self):
        self.params = {}
        self.grads = {}
        self._cache = None

    def forward(self, x, train=False):
        raise NotImplementedError

    def backward(self, gout):
        raise NotImplementedError

    def zero_grads(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def spec(self):
        raise NotImplementedError

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        return self._cache


class Linear(Layer):
    """Per-frame affine map: (T, in) -> (T, out)."""

    def __init__(self, in_dim, out_dim, rng=None):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = rng or np.random.default_rng(0)
        self.params = {
            "W": _uniform_init(rng, (in_dim, out_dim), in_dim),
            "b": np.zeros(out_dim),
        }
        self.zero_grads()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"Linear expects (T, {self.in_dim}), got {x.shape}")
        self._cache = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, gout):
        x = self._need_cache()
        self.grads["W"] += x.T @ gout
        self.grads["b"] += gout.sum(axis=0)
        return gout @ self.params["W"].T

    def spec(self):
        return {"kind": "linear", "in_dim": self.in_dim, "out_dim": self.out_dim}


class Sigmoid(Layer):
    def forward(self, x, train=False):
        out = _sigmoid(x)
        self._cache = out
        return out

    def backward(self, gout):
        out = self._need_cache()
        return gout * out * (1.0 - out)

    def spec(self):
        return {"kind": "sigmoid"}


class ReLU(Layer):
    def forward(self, x, train=False):
        self._cache = x > 0
        return np.where(self._cache, x, 0.0)

    def backward(self, gout):
        return gout * self._need_cache()

    def spec(self):
        return {"kind": "relu"}


class Dropout(Layer):
    """Inverted dropout; identity in eval mode."""

    def __init__(self, p=0.3, rng=None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise DimensionError(f"dropout p must be in [0, 1), got {p}")
        self.p = p
        self.rng = rng or np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train or self.p == 0.0:
            self._cache = None
            return x
        keep = self.rng.random(x.shape) >= self.p
        self._cache = keep / (1.0 - self.p)
        return x * self._cache

    def backward(self, gout):
        return gout if self._cache is None else gout * self._cache

    def spec(self):
        return {"kind": "dropout", "p": self.p}


class Conv2D(Layer):
    """Same-padded stride-1 2-D convolution over (planes, frames, bins)."""

    def __init__(self, in_planes, out_planes, kh, kw, rng=None):
        super().__init__()
        if kh % 2 == 0 or kw % 2 == 0:
            raise DimensionError("kernel sides must be odd for same padding")
        self.in_planes, self.out_planes = in_planes, out_planes
        self.kh, self.kw = kh, kw
        rng = rng or np.random.default_rng(0)
        fan_in = in_planes * kh * kw
        self.params = {
            "W": _uniform_init(rng, (out_planes, in_planes, kh, kw), fan_in),
            "b": np.zeros(out_planes),
        }
        self.zero_grads()

    def _patches(self, x):
        ph, pw = self.kh // 2, self.kw // 2
        padded = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
        win = np.lib.stride_tricks.sliding_window_view(padded, (self.kh, self.kw), axis=(1, 2))
        # (Cin, T, F, kh, kw) -> (T, F, Cin*kh*kw)
        t, f = x.shape[1], x.shape[2]
        return win.transpose(1, 2, 0, 3, 4).reshape(t, f, -1)

    def forward(self, x, train=False):
        if x.ndim != 3 or x.shape[0] != self.in_planes:
            raise DimensionError(
                f"Conv2D expects ({self.in_planes}, T, F), got {x.shape}"
            )
        patches = self._patches(x)
        self._cache = (patches, x.shape)
        wmat = self.params["W"].reshape(self.out_planes, -1).T
        out = patches @ wmat + self.params["b"]
        return out.transpose(2, 0, 1)

    def backward(self, gout):
        patches, x_shape = self._need_cache()
        t, f = x_shape[1], x_shape[2]
        g2 = gout.transpose(1, 2, 0).reshape(-1, self.out_planes)
        flat_patches = patches.reshape(-1, patches.shape[-1])
        self.grads["W"] += (flat_patches.T @ g2).T.reshape(self.params["W"].shape)
        self.grads["b"] += g2.sum(axis=0)
        gpatches = (g2 @ self.params["W"].reshape(self.out_planes, -1)).reshape(
            t, f, self.in_planes, self.kh, self.kw
        )
        ph, pw = self.kh // 2, self.kw // 2
        gpad = np.zeros((self.in_planes, t + 2 * ph, f + 2 * pw))
        for u in range(self.kh):
            for v in range(self.kw):
                gpad[:, u : u + t, v : v + f] += gpatches[:, :, :, u, v].transpose(2, 0, 1)
        return gpad[:, ph : ph + t, pw : pw + f]

    def spec(self):
        return {
            "kind": "conv2d",
            "in_planes": self.in_planes,
            "out_planes": self.out_planes,
            "kh": self.kh,
            "kw": self.kw,
        }


class MaxPoolFreq(Layer):
    """Max pooling along the bin axis, kernel k stride k; trailing bins that
    do not fill a window are dropped."""

    def __init__(self, k=2):
        super().__init__()
        self.k = k

    def forward(self, x, train=False):
        if x.ndim != 3:
            raise DimensionError("MaxPoolFreq expects (planes, frames, bins)")
        c, t, f = x.shape
        f2 = f // self.k
        blocks = x[:, :, : f2 * self.k].reshape(c, t, f2, self.k)
        arg = blocks.argmax(axis=-1)
        self._cache = (arg, x.shape)
        return blocks.max(axis=-1)

    def backward(self, gout):
        arg, x_shape = self._need_cache()
        c, t, f = x_shape
        f2 = f // self.k
        gx = np.zeros((c, t, f2, self.k))
        ci, ti, fi = np.meshgrid(np.arange(c), np.arange(t), np.arange(f2), indexing="ij")
        gx[ci, ti, fi, arg] = gout
        out = np.zeros(x_shape)
        out[:, :, : f2 * self.k] = gx.reshape(c, t, f2 * self.k)
        return out

    def spec(self):
        return {"kind": "maxpool_freq", "k": self.k}


class _LSTMCell:
    """Unidirectional LSTM over a (T, D) sequence; gate order i, f, g, o."""

    def __init__(self, in_dim, hidden, rng, prefix):
        self.in_dim, self.hidden = in_dim, hidden
        self.prefix = prefix
        self.params = {
            f"{prefix}W": _uniform_init(rng, (4 * hidden, in_dim), in_dim),
            f"{prefix}U": _uniform_init(rng, (4 * hidden, hidden), hidden),
            f"{prefix}b": np.zeros(4 * hidden),
        }

    def forward(self, x):
        h_dim = self.hidden
        w, u, b = (self.params[self.prefix + k] for k in ("W", "U", "b"))
        t_len = x.shape[0]
        xw = x @ w.T  # (T, 4H)
        h = np.zeros(h_dim)
        c = np.zeros(h_dim)
        hs = np.zeros((t_len, h_dim))
        cache = []
        for t in range(t_len):
            z = xw[t] + u @ h + b
            i = _sigmoid(z[:h_dim])
            f = _sigmoid(z[h_dim : 2 * h_dim])
            g = np.tanh(z[2 * h_dim : 3 * h_dim])
            o = _sigmoid(z[3 * h_dim :])
            c_new = f * c + i * g
            tc = np.tanh(c_new)
            cache.append((h.copy(), c.copy(), i, f, g, o, tc))
            c = c_new
            h = o * tc
            hs[t] = h
        self._cache = (x, cache)
        return hs

    def backward(self, ghs, grads):
        x, cache = self._cache
        h_dim = self.hidden
        w, u = self.params[self.prefix + "W"], self.params[self.prefix + "U"]
        gw = np.zeros_like(w)
        gu = np.zeros_like(u)
        gb = np.zeros(4 * h_dim)
        gx = np.zeros_like(x)
        gh_next = np.zeros(h_dim)
        gc_next = np.zeros(h_dim)
        for t in range(x.shape[0] - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = cache[t]
            gh = ghs[t] + gh_next
            go = gh * tc
            gc = gh * o * (1.0 - tc**2) + gc_next
            gi = gc * g
            gf = gc * c_prev
            gg = gc * i
            gz = np.concatenate([
                gi * i * (1.0 - i),
                gf * f * (1.0 - f),
                gg * (1.0 - g**2),
                go * o * (1.0 - o),
            ])
            gw += np.outer(gz, x[t])
            gu += np.outer(gz, h_prev)
            gb += gz
            gx[t] = w.T @ gz
            gh_next = u.T @ gz
            gc_next = gc * f
        grads[self.prefix + "W"] += gw
        grads[self.prefix + "U"] += gu
        grads[self.prefix + "b"] += gb
        return gx


class BiLSTM(Layer):
    """Bidirectional LSTM: (T, in) -> (T, 2*hidden), forward stream first."""

    def __init__(self, in_dim, hidden, rng=None):
        super().__init__()
        self.in_dim, self.hidden = in_dim, hidden
        rng = rng or np.random.default_rng(0)
        self.fwd = _LSTMCell(in_dim, hidden, rng, "fwd_")
        self.bwd = _LSTMCell(in_dim, hidden, rng, "bwd_")
        self.params = {**self.fwd.params, **self.bwd.params}
        self.fwd.params = self.params
        self.bwd.params = self.params
        self.zero_grads()

    def forward(self, x, train=False):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"BiLSTM expects (T, {self.in_dim}), got {x.shape}")
        hf = self.fwd.forward(x)
        hb = self.bwd.forward(x[::-1])[::-1]
        self._cache = True
        return np.concatenate([hf, hb], axis=1)

    def backward(self, gout):
        self._need_cache()
        gf = gout[:, : self.hidden]
        gb = gout[:, self.hidden :]
        gx_f = self.fwd.backward(gf, self.grads)
        gx_b = self.bwd.backward(gb[::-1], self.grads)[::-1]
        return gx_f + gx_b

    def spec(self):
        return {"kind": "bilstm", "in_dim": self.in_dim, "hidden": self.hidden}


_LAYER_KINDS = {
    "linear": lambda s, rng: Linear(s["in_dim"], s["out_dim"], rng=rng),
    "sigmoid": lambda s, rng: Sigmoid(),
    "relu": lambda s, rng: ReLU(),
    "dropout": lambda s, rng: Dropout(s["p"], rng=rng),
    "conv2d": lambda s, rng: Conv2D(s["in_planes"], s["out_planes"], s["kh"], s["kw"], rng=rng),
    "maxpool_freq": lambda s, rng: MaxPoolFreq(s["k"]),
    "bilstm": lambda s, rng: BiLSTM(s["in_dim"], s["hidden"], rng=rng),
}


def layer_from_spec(spec, rng=None):
    kind = spec.get("kind")
    if kind not in _LAYER_KINDS:
        raise DimensionError(f"unknown layer kind {kind!r}")
    return _LAYER_KINDS[kind](spec, rng or np.random.default_rng(0))

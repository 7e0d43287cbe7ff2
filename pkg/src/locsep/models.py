"""The four-network stack: two DOA classifiers and two mask estimators.

A DOA net projects the 12 phase-difference planes and the channel-1
magnitude through separate 5x5 conv branches (ReLU, dropout, frequency
max-pool), concatenates the projections per frame, and runs a BiLSTM into
a sigmoid layer over 181 angle classes + 1 non-speech class. A mask net is
a 2-layer BiLSTM over [beamformed magnitude, beamformed phase-difference
pair, DOA posterior] emitting one sigmoid mask bin per frequency.

Magnitude inputs are log(1+x) compressed at assembly time, after any
source-removal masking; masks and targets stay linear.
"""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .features import Mask
from .localization import DoaPosterior
from .neural import Sequential, load_checkpoint, save_checkpoint
from .neural.layers import BiLSTM, Conv2D, Dropout, Linear, MaxPoolFreq, ReLU, Sigmoid


@dataclass(frozen=True)
class DoaNetConfig:
    bins: int = 801
    phase_planes: int = 12
    conv_kernel: int = 5
    pool: int = 2
    hidden: int = 32
    classes: int = 182
    dropout_p: float = 0.3
    seed: int = 0


@dataclass(frozen=True)
class MaskNetConfig:
    bins: int = 801
    posterior_classes: int = 182
    hidden: int = 32
    layers: int = 2
    seed: int = 0

    @property
    def input_dim(self):
        return 3 * self.bins + self.posterior_classes


class DoaNet:
    """Two conv branches (phase, magnitude) merged into a recurrent head."""

    kind = "doa"

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0xD0A])
        k = cfg.conv_kernel
        self.phase_branch = Sequential([
            Conv2D(cfg.phase_planes, 1, k, k, rng=rng),
            ReLU(),
            Dropout(cfg.dropout_p, rng=rng),
            MaxPoolFreq(cfg.pool),
        ])
        self.mag_branch = Sequential([
            Conv2D(1, 1, k, k, rng=rng),
            ReLU(),
            Dropout(cfg.dropout_p, rng=rng),
            MaxPoolFreq(cfg.pool),
        ])
        pooled = cfg.bins // cfg.pool
        self.head = Sequential([
            BiLSTM(2 * pooled, cfg.hidden, rng=rng),
            Linear(2 * cfg.hidden, cfg.classes, rng=rng),
            Sigmoid(),
        ])
        self._pooled = pooled

    def forward(self, csipd_planes, mag_plane, train=False):
        if csipd_planes.shape[0] != self.cfg.phase_planes:
            raise DimensionError(
                f"expected {self.cfg.phase_planes} phase planes, got {csipd_planes.shape[0]}"
            )
        if mag_plane.shape != (1,) + csipd_planes.shape[1:]:
            raise DimensionError("magnitude plane geometry mismatch")
        a = self.phase_branch.forward(csipd_planes, train=train)[0]  # (T, F')
        b = self.mag_branch.forward(mag_plane, train=train)[0]
        z = np.concatenate([a, b], axis=1)
        return self.head.forward(z, train=train)

    def backward(self, gout):
        gz = self.head.backward(gout)
        ga = gz[:, : self._pooled][None]
        gb = gz[:, self._pooled :][None]
        self.phase_branch.backward(ga)
        self.mag_branch.backward(gb)

    def _parts(self):
        return [("phase", self.phase_branch), ("mag", self.mag_branch),
                ("head", self.head)]

    def params(self):
        return {f"{tag}.{k}": v for tag, part in self._parts()
                for k, v in part.params().items()}

    def grads(self):
        return {f"{tag}.{k}": v for tag, part in self._parts()
                for k, v in part.grads().items()}

    def zero_grads(self):
        for _, part in self._parts():
            part.zero_grads()

    def set_params(self, flat):
        for tag, part in self._parts():
            part.set_params({k[len(tag) + 1 :]: v for k, v in flat.items()
                             if k.startswith(tag + ".")})

    def copy_params(self):
        return {k: v.copy() for k, v in self.params().items()}


class MaskNet:
    """Stacked BiLSTMs into a per-bin sigmoid mask."""

    kind = "mask"

    def __init__(self, cfg):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0x3A5C])
        layers = []
        in_dim = cfg.input_dim
        for _ in range(cfg.layers):
            layers.append(BiLSTM(in_dim, cfg.hidden, rng=rng))
            in_dim = 2 * cfg.hidden
        layers += [Linear(in_dim, cfg.bins, rng=rng), Sigmoid()]
        self.net = Sequential(layers)

    def forward(self, x, train=False):
        return self.net.forward(x, train=train)

    def backward(self, gout):
        return self.net.backward(gout)

    def params(self):
        return self.net.params()

    def grads(self):
        return self.net.grads()

    def zero_grads(self):
        self.net.zero_grads()

    def set_params(self, flat):
        self.net.set_params(flat)

    def copy_params(self):
        return self.net.copy_params()


def assemble_doa_inputs(csipd_stack, mag_stack):
    """Network inputs from raw feature stacks: phase planes as-is, the
    magnitude plane log-compressed. Masked stacks go through unchanged
    (compression after masking)."""
    return csipd_stack.planes, np.log1p(np.maximum(mag_stack.planes[:1], 0.0))


def assemble_mask_inputs(bf_stack, posterior):
    """Per-frame mask-net input rows [log1p(mag_ds), cos, sin, posterior]."""
    probs = posterior.probs if isinstance(posterior, DoaPosterior) else np.asarray(posterior)
    if probs.shape[0] != bf_stack.frame_count:
        raise DimensionError("posterior frame count mismatch")
    mag = np.log1p(np.maximum(bf_stack.planes[0], 0.0))
    return np.concatenate([mag, bf_stack.planes[1], bf_stack.planes[2], probs], axis=1)


def doa_net_forward(net, csipd_stack, mag_stack):
    """Frame-level DOA posterior from mixture features."""
    phase, mag = assemble_doa_inputs(csipd_stack, mag_stack)
    return DoaPosterior(probs=net.forward(phase, mag, train=False))


def mask_net_forward(net, bf_stack, posterior):
    """Time-frequency mask from beamformed features and a DOA posterior."""
    x = assemble_mask_inputs(bf_stack, posterior)
    return Mask(values=net.forward(x, train=False))


_NET_KINDS = {"doa": (DoaNet, DoaNetConfig), "mask": (MaskNet, MaskNetConfig)}


def save_net(path, net, step=0):
    specs = {"net": net.kind, "config": asdict(net.cfg)}
    save_checkpoint(path, specs, net.params(), seed=net.cfg.seed, step=step)


def load_net(path):
    header, params = load_checkpoint(path)
    layer_info = header["layers"]
    if not isinstance(layer_info, dict) or layer_info.get("net") not in _NET_KINDS:
        raise ConfigError(f"{path} is not a model checkpoint")
    cls, cfg_cls = _NET_KINDS[layer_info["net"]]
    net = cls(cfg_cls(**layer_info["config"]))
    net.set_params(params)
    return net, header

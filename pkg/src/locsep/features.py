"""Phase-difference and magnitude features, and mask arithmetic on them.

The mic-pair cosine/sine phase-difference planes (4 mics -> 6 pairs -> 12
planes) are the main spatial cue; a beamformed signal contributes one
magnitude plane and a cos/sin pair against channel 1. Removing a source
means multiplying every plane by the remainder mask, shrinking the removed
regions toward zero (this intentionally breaks cos^2+sin^2=1 there).
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .beamforming import delay_and_sum
from .errors import DimensionError, ValidationError

PHASE_EPS = 1e-12


@dataclass
class Mask:
    """Real time-frequency weighting in [0, 1], indexed (frame, bin)."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DimensionError("mask must be (frames, bins)")

    def clamped(self):
        return Mask(np.clip(self.values, 0.0, 1.0))

    def remainder(self):
        return Mask(1.0 - self.values)

    @property
    def shape(self):
        return self.values.shape


@dataclass
class FeatureStack:
    """Labelled real feature planes indexed (plane, frame, bin)."""

    planes: np.ndarray
    labels: list = field(default_factory=list)

    def __post_init__(self):
        self.planes = np.asarray(self.planes, dtype=np.float64)
        if self.planes.ndim != 3:
            raise DimensionError("feature planes must be (plane, frame, bin)")
        if self.labels and len(self.labels) != self.planes.shape[0]:
            raise DimensionError("one label per plane required")

    @property
    def plane_count(self):
        return self.planes.shape[0]

    @property
    def frame_count(self):
        return self.planes.shape[1]

    @property
    def bin_count(self):
        return self.planes.shape[2]

    def plane(self, label):
        return self.planes[self.labels.index(label)]


def _normalized_phase_diff(a, b, eps=PHASE_EPS):
    """cos/sin of angle(a) - angle(b); (1, 0) where either input vanishes."""
    d = a * np.conj(b)
    mag = np.abs(d)
    cos = np.where(mag > eps, d.real / np.maximum(mag, eps), 1.0)
    sin = np.where(mag > eps, d.imag / np.maximum(mag, eps), 0.0)
    return cos, sin


def csipd(spec):
    """Cosine-sine inter-channel phase differences of all mic pairs.

    Pairs are ordered lexicographically (0,1),(0,2)...; the difference is
    angle(X_i) - angle(X_j) with i < j. Returns 2*C(I,2) planes.
    """
    n_ch = spec.channel_count
    if n_ch < 2:
        raise DimensionError("phase differences need >= 2 channels")
    planes, labels = [], []
    for i in range(n_ch):
        for j in range(i + 1, n_ch):
            cos, sin = _normalized_phase_diff(spec.data[i], spec.data[j])
            planes += [cos, sin]
            labels += [f"csipd_cos_{i}_{j}", f"csipd_sin_{i}_{j}"]
    return FeatureStack(planes=np.stack(planes), labels=labels)


def magnitude(spec, channel=0, compress=False):
    """Magnitude plane of one channel; compress=True applies log(1+x)."""
    if not 0 <= channel < spec.channel_count:
        raise DimensionError(f"channel {channel} out of range")
    mag = np.abs(spec.data[channel])
    if compress:
        return FeatureStack(planes=np.log1p(mag)[None], labels=["log_magnitude"])
    return FeatureStack(planes=mag[None], labels=["magnitude"])


def beamformed_features(spec, doa_deg, geometry, compress=False):
    """Magnitude of the steered delay-and-sum signal plus its phase
    difference against channel 1.

    Return: FeatureStack [mag_ds, csipd_ds_cos, csipd_ds_sin]
    """
    if not 0.0 <= doa_deg <= 180.0:
        raise ValidationError(f"DOA {doa_deg} outside [0, 180]")
    y = delay_and_sum(spec, doa_deg, geometry).data[0]
    mag = np.log1p(np.abs(y)) if compress else np.abs(y)
    cos, sin = _normalized_phase_diff(y, spec.data[0])
    return FeatureStack(
        planes=np.stack([mag, cos, sin]),
        labels=["mag_ds", "csipd_ds_cos", "csipd_ds_sin"],
    )


def mask_features(stack, mask):
    """Multiply every plane elementwise by a mask (source removal)."""
    values = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    if values.shape != (stack.frame_count, stack.bin_count):
        raise DimensionError(
            f"mask shape {values.shape} != {(stack.frame_count, stack.bin_count)}"
        )
    return FeatureStack(planes=stack.planes * values[None], labels=list(stack.labels))


def concat_stacks(*stacks):
    """Stack feature planes from several stacks (shared frame/bin geometry)."""
    shapes = {(s.frame_count, s.bin_count) for s in stacks}
    if len(shapes) != 1:
        raise DimensionError(f"incompatible stack geometries {shapes}")
    return FeatureStack(
        planes=np.concatenate([s.planes for s in stacks], axis=0),
        labels=[l for s in stacks for l in s.labels],
    )


def dump_features(stack, path):
    """Debug dump: 4-byte little-endian header length, JSON header, raw
    float64 plane data."""
    header = json.dumps({
        "planes": stack.plane_count,
        "frames": stack.frame_count,
        "bins": stack.bin_count,
        "labels": list(stack.labels),
        "dtype": "float64",
    }).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(np.ascontiguousarray(stack.planes).tobytes())


def load_features(path):
    with open(path, "rb") as f:
        (hlen,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(hlen).decode())
        raw = np.frombuffer(f.read(), dtype=header["dtype"])
    planes = raw.reshape(header["planes"], header["frames"], header["bins"])
    return FeatureStack(planes=planes.copy(), labels=header["labels"])

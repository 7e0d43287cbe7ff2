"""Shoebox room impulse responses via the image-source method.

Walls share one frequency-flat reflection coefficient derived from the
requested reverberation time (Sabine). Image contributions are placed with
sub-sample accuracy using a Hann-windowed sinc low-pass, quantized to a
fine polyphase bank so the whole image cloud can be scattered with numpy
and convolved once per phase.
"""

from dataclasses import dataclass

import numpy as np
from scipy.signal import lfilter

from .errors import ValidationError
from .localization import SPEED_OF_SOUND

SABINE_COEFF = 0.161


@dataclass(frozen=True)
class RoomSpec:
    """Rectangular room dimensions (m), target RT60 (s) and sound speed."""

    dimensions: tuple
    rt60: float
    speed_of_sound: float = SPEED_OF_SOUND

    def __post_init__(self):
        dims = tuple(float(d) for d in self.dimensions)
        object.__setattr__(self, "dimensions", dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValidationError(f"room dimensions must be 3 positive lengths, got {dims}")
        if self.rt60 <= 0:
            raise ValidationError("rt60 must be positive")

    @property
    def volume(self):
        dx, dy, dz = self.dimensions
        return dx * dy * dz

    @property
    def surface(self):
        dx, dy, dz = self.dimensions
        return 2.0 * (dx * dy + dx * dz + dy * dz)


@dataclass(frozen=True)
class ArrayGeometry:
    """Microphone positions (meters) relative to the array center."""

    mic_positions: tuple

    def __post_init__(self):
        pos = np.asarray(self.mic_positions, dtype=np.float64)
        if pos.ndim != 2 or pos.shape[1] != 3 or pos.shape[0] < 2:
            raise ValidationError("need >= 2 mics with 3-D positions")
        object.__setattr__(self, "mic_positions", tuple(map(tuple, pos)))

    @property
    def positions(self):
        return np.asarray(self.mic_positions, dtype=np.float64)

    @property
    def mic_count(self):
        return len(self.mic_positions)

    @classmethod
    def linear(cls, spacings_m):
        """Linear array along x, centered on its centroid."""
        offs = np.asarray(spacings_m, dtype=np.float64)
        xs = offs - offs.mean()
        return cls(mic_positions=tuple((x, 0.0, 0.0) for x in xs))

    @classmethod
    def kinect_like(cls):
        """4-mic linear array, spacings 0/40/80/113 mm from the first mic."""
        return cls.linear([0.0, 0.040, 0.080, 0.113])


def _sphere_directions(n_per_axis=24):
    """Deterministic quadrature grid over one octant (|u| components >= 0)."""
    # midpoint rule in (cos-elevation, azimuth); octant suffices by symmetry
    z = (np.arange(n_per_axis) + 0.5) / n_per_axis  # cos(theta) in (0, 1)
    phi = (np.arange(n_per_axis) + 0.5) * (np.pi / 2.0) / n_per_axis
    zz, pp = np.meshgrid(z, phi, indexing="ij")
    s = np.sqrt(1.0 - zz**2)
    return np.stack([s * np.cos(pp), s * np.sin(pp), zz], axis=-1).reshape(-1, 3)


def _edc_crossing_time(alpha, dims, c, drop_db=60.0):
    """Predicted -drop_db Schroeder crossing of the image-source field.

    Energy arriving from direction u decays like (1-alpha)^(c t g(u)) with
    g(u) = sum_a |u_a|/L_a wall crossings per meter; integrating the arrival
    flux over directions gives the decay curve, which is not a single
    exponential (near-axial directions decay slowest).
    """
    dirs = _sphere_directions()
    g = np.abs(dirs) @ (1.0 / np.asarray(dims))
    gamma = c * (-np.log1p(-alpha))
    norm = np.sum(1.0 / g)
    target = 10.0 ** (-drop_db / 10.0)

    def remaining(t):
        return np.sum(np.exp(-gamma * g * t) / g) / norm

    lo, hi = 0.0, 1.0
    while remaining(hi) > target:
        hi *= 2.0
        if hi > 1e4:
            return np.inf
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if remaining(mid) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def wall_absorption(room):
    """Uniform wall absorption whose simulated -60 dB decay hits the RT60.

    Feasibility is gated by Sabine's formula (absorption above 1 means the
    room cannot decay that fast even fully absorbent); at the Sabine limit
    exactly the walls are fully absorbent and the response reduces to the
    direct path. Otherwise the absorption is solved from the direction-
    resolved decay model so the Schroeder crossing lands on the request.
    """
    sabine = SABINE_COEFF * room.volume / (room.surface * room.rt60)
    if sabine > 1.0 + 1e-12:
        raise ValidationError(
            f"rt60={room.rt60}s infeasible for this room: Sabine absorption {sabine:.3f} > 1"
        )
    if sabine >= 1.0 - 1e-12:
        return 1.0
    lo, hi = 1e-6, 1.0 - 1e-9
    for _ in range(50):
        mid = 0.5 * (lo + hi)
        if _edc_crossing_time(mid, room.dimensions, room.speed_of_sound) > room.rt60:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def anechoic_rt60(dimensions):
    """The RT60 at which absorption hits exactly 1 (direct path only)."""
    room = RoomSpec(dimensions=tuple(dimensions), rt60=1.0)
    return SABINE_COEFF * room.volume / room.surface


def _sinc_kernel_bank(n_phases, half_len, cutoff):
    """Hann-windowed sinc interpolation kernels for fractional offsets q/n_phases."""
    taps = np.arange(-half_len, half_len + 1, dtype=np.float64)
    bank = np.zeros((n_phases + 1, 2 * half_len + 1))
    for q in range(n_phases + 1):
        t = taps - q / n_phases
        inside = np.abs(t) <= half_len
        window = 0.5 * (1.0 + np.cos(np.pi * t / half_len))
        bank[q] = np.where(inside, window * np.sinc(2.0 * cutoff * t), 0.0)
    return bank


def _highpass(x, sample_rate, f0_hz, q=0.7071):
    """Causal biquad high-pass along the last axis (RBJ cookbook)."""
    w0 = 2.0 * np.pi * f0_hz / sample_rate
    alpha = np.sin(w0) / (2.0 * q)
    cw = np.cos(w0)
    b = np.array([(1 + cw) / 2, -(1 + cw), (1 + cw) / 2])
    a = np.array([1 + alpha, -2 * cw, 1 - alpha])
    return lfilter(b / a[0], a / a[0], x, axis=-1)


def simulate_rir(
    room,
    src,
    mics,
    array_center,
    sample_rate=16000,
    rir_len_s=None,
    n_phases=64,
    kernel_half_len=32,
    cutoff=0.45,
    highpass_hz=80.0,
):
    """Per-mic impulse responses from a point source in a shoebox room.

    Arguments:
        room: RoomSpec
        src: source position, meters
        mics: ArrayGeometry (positions relative to array_center)
        array_center: array center position, meters
        rir_len_s: response length; default direct delay + 1.25 * rt60
        cutoff: low-pass cutoff as a fraction of the sample rate
        highpass_hz: removes the near-DC buildup of the all-positive image
            amplitudes (None disables)
    Return:
        (mic_count, rir_len) float array; h[i, n] ~ sum of image amplitudes
        1/(4 pi d) placed at delay d/c with sub-sample interpolation
    """
    src = np.asarray(src, dtype=np.float64)
    center = np.asarray(array_center, dtype=np.float64)
    mic_abs = mics.positions + center
    dims = np.asarray(room.dimensions)
    for label, p in [("source", src)] + [(f"mic {i}", m) for i, m in enumerate(mic_abs)]:
        if np.any(p <= 0.0) or np.any(p >= dims):
            raise ValidationError(f"{label} at {p} is not strictly inside the room {dims}")

    beta = float(np.sqrt(1.0 - wall_absorption(room)))
    c = room.speed_of_sound
    direct_delay = float(np.linalg.norm(src - mic_abs, axis=1).max()) / c
    if rir_len_s is None:
        rir_len_s = direct_delay + 1.25 * room.rt60
    n_samples = int(np.ceil(rir_len_s * sample_rate))

    # image lattice large enough that every image within earshot is included
    max_dist = rir_len_s * c
    order = np.ceil(max_dist / (2.0 * dims)).astype(int)
    rx = np.arange(-order[0], order[0] + 1)
    ry = np.arange(-order[1], order[1] + 1)
    rz = np.arange(-order[2], order[2] + 1)
    parity = np.array([(px, py, pz) for px in (0, 1) for py in (0, 1) for pz in (0, 1)])

    bank = _sinc_kernel_bank(n_phases, kernel_half_len, cutoff)
    grids = np.zeros((mics.mic_count, n_phases + 1, n_samples))

    # chunk over the x-lattice to bound memory on long reverbs in small rooms
    for rx_chunk in np.array_split(rx, max(1, len(rx) // 16)):
        R = np.stack(
            np.meshgrid(rx_chunk, ry, rz, indexing="ij"), axis=-1
        ).reshape(-1, 3)
        for p in parity:
            img = (1.0 - 2.0 * p) * src + 2.0 * R * dims
            # reflections per axis: |r - p| off the near wall family, |r| off the far
            n_reflections = np.abs(R - p).sum(axis=1) + np.abs(R).sum(axis=1)
            amp_refl = beta**n_reflections
            for m in range(mics.mic_count):
                d = np.linalg.norm(img - mic_abs[m], axis=1)
                delay = d * sample_rate / c
                keep = delay < n_samples - kernel_half_len - 1
                if not np.any(keep):
                    continue
                dk = delay[keep]
                n0 = np.floor(dk).astype(np.int64)
                q = np.round((dk - n0) * n_phases).astype(np.int64)
                n0 += q // n_phases  # q == n_phases wraps to the next sample
                q %= n_phases
                amp = amp_refl[keep] / (4.0 * np.pi * d[keep])
                np.add.at(grids[m], (q, n0), amp)

    rirs = np.zeros((mics.mic_count, n_samples))
    for m in range(mics.mic_count):
        for q in range(n_phases):
            if not np.any(grids[m, q]):
                continue
            full = np.convolve(grids[m, q], bank[q])
            rirs[m] += full[kernel_half_len : kernel_half_len + n_samples]
    if highpass_hz is not None:
        rirs = _highpass(rirs, sample_rate, highpass_hz)
    return rirs


def schroeder_decay_db(rir):
    """Backward-integrated energy decay curve in dB, normalized to 0 at t=0."""
    energy = np.cumsum(rir[::-1] ** 2)[::-1]
    energy = np.maximum(energy, energy[0] * 1e-30 + 1e-300)
    return 10.0 * np.log10(energy / energy[0])


def decay_time(rir, sample_rate, drop_db=60.0):
    """Time from the direct-path arrival until the decay curve falls drop_db."""
    edc = schroeder_decay_db(rir)
    t0 = int(np.argmax(np.abs(rir)))
    below = np.nonzero(edc <= -drop_db)[0]
    if len(below) == 0:
        return np.inf
    return (below[0] - t0) / sample_rate


def diffuse_noise(geometry, n_samples, sample_rate, rng, n_directions=96, c=SPEED_OF_SOUND):
    """Spherically isotropic noise: many independent plane waves summed.

    Each direction carries its own white noise, delayed per mic with an
    exact frequency-domain phase ramp. Output is scaled to unit RMS
    averaged over channels.
    """
    n_fft = int(2 ** np.ceil(np.log2(max(n_samples, 2))))
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    positions = geometry.positions
    out = np.zeros((geometry.mic_count, len(freqs)), dtype=np.complex128)
    # uniform directions on the sphere
    z = rng.uniform(-1.0, 1.0, size=n_directions)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n_directions)
    s = np.sqrt(1.0 - z**2)
    dirs = np.stack([s * np.cos(phi), s * np.sin(phi), z], axis=1)
    for u in dirs:
        spectrum = np.fft.rfft(rng.standard_normal(n_fft))
        delays = -(positions @ u) / c
        out += spectrum[None, :] * np.exp(-2j * np.pi * freqs[None, :] * delays[:, None])
    noise = np.fft.irfft(out, n=n_fft, axis=1)[:, :n_samples]
    rms = np.sqrt(np.mean(noise**2))
    return noise / max(rms, 1e-30)

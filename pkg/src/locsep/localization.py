"""Azimuth grid, far-field steering model and classical DOA estimation.

The grid covers the half circle [0, 180] degrees in 1-degree steps (181
angle classes) plus one non-speech class, 182 classes total. Azimuth 0 is
endfire towards +x, 90 is broadside; a linear array cannot resolve the
front/back mirror so the half circle is the full observable space.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, NoEstimateError, ValidationError

SPEED_OF_SOUND = 343.0


@dataclass(frozen=True)
class DoaGrid:
    """181 azimuth classes (0..180 deg, 1 deg apart) + 1 non-speech class."""

    step_deg: float = 1.0

    @property
    def angles_deg(self):
        return np.arange(0.0, 180.0 + self.step_deg / 2, self.step_deg)

    @property
    def angle_count(self):
        return len(self.angles_deg)

    @property
    def class_count(self):
        return self.angle_count + 1

    @property
    def non_speech_class(self):
        return self.angle_count

    def class_of(self, doa_deg):
        """Nearest grid class for an azimuth, round-half-up."""
        if not 0.0 <= doa_deg <= 180.0:
            raise ValidationError(f"DOA {doa_deg} outside [0, 180]")
        return min(int(np.floor(doa_deg / self.step_deg + 0.5)), self.angle_count - 1)


@dataclass
class DoaPosterior:
    """Per-frame class probabilities, shape (frames, class_count).

    Values are independent sigmoid outputs in [0, 1]; rows are not
    normalized (several classes can be active in one frame).
    """

    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim != 2:
            raise DimensionError("posterior must be (frames, classes)")

    @property
    def frame_count(self):
        return self.probs.shape[0]

    @property
    def class_count(self):
        return self.probs.shape[1]


def unit_vector(doa_deg):
    """Unit propagation-source direction for an azimuth in the array plane."""
    theta = np.deg2rad(doa_deg)
    return np.array([np.cos(theta), np.sin(theta), 0.0])


def steering_delays(geometry, doa_deg, c=SPEED_OF_SOUND):
    """Far-field arrival delays (seconds) of each mic relative to array center.

    tau_i = -(p_i . u(theta)) / c; a mic closer to the source (positive
    projection on u) has negative delay, i.e. hears the wavefront earlier.
    """
    positions = np.asarray(geometry.mic_positions, dtype=np.float64)
    return -(positions @ unit_vector(doa_deg)) / c


def azimuth_of(position, array_center):
    """True grid angle of a point source relative to the +x array axis.

    A linear array along x observes the cone angle arccos(dx / |d|); the
    elevation and the front/back mirror are collapsed into [0, 180]. Using
    the observable angle keeps ground-truth labels consistent with what
    any estimator driven by inter-mic delays can measure.
    """
    d = np.asarray(position, dtype=np.float64) - np.asarray(array_center, dtype=np.float64)
    norm = np.linalg.norm(d)
    if norm == 0.0:
        raise ValidationError("source at the array center: angle undefined")
    return float(np.degrees(np.arccos(np.clip(d[0] / norm, -1.0, 1.0))))


def gcc_phat(spec, geometry, grid=None, c=SPEED_OF_SOUND, eps=1e-12):
    """Classical steered-response DOA estimate with PHAT weighting.

    Cross-power spectra of all mic pairs are phase-normalized, summed over
    frames, and scanned against the steering model on the candidate grid.

    Arguments:
        spec: multichannel Spectrogram (>= 2 channels)
        geometry: ArrayGeometry
        grid: DoaGrid (default 181-point)
    Return:
        estimated azimuth in degrees (float)
    """
    if spec.channel_count < 2:
        raise DimensionError("GCC-PHAT needs at least 2 channels")
    if grid is None:
        grid = DoaGrid()
    if not np.any(spec.data):
        raise NoEstimateError("all-zero spectrogram")

    angles = grid.angles_deg
    freqs = spec.bin_freqs_hz
    n_ch = spec.channel_count
    delays = np.stack([steering_delays(geometry, a, c=c) for a in angles])  # (A, I)

    score = np.zeros(len(angles))
    for i in range(n_ch):
        for j in range(i + 1, n_ch):
            cross = spec.data[i] * np.conj(spec.data[j])  # (T, F)
            cross = cross / np.maximum(np.abs(cross), eps)
            r = cross.sum(axis=0)  # (F,)
            # align: X_i carries e^{-j 2 pi f tau_i}, so compensate with +
            phase = np.exp(2j * np.pi * freqs[None, :] * (delays[:, i] - delays[:, j])[:, None])
            score += np.real(phase @ r)
    return float(angles[int(np.argmax(score))])


def pool_posterior(post, grid=None):
    """Average frame-level probabilities over time and take the best angle.

    The non-speech class is excluded from the argmax; ties resolve to the
    lowest class index.
    """
    if grid is None:
        grid = DoaGrid()
    if post.frame_count == 0:
        raise NoEstimateError("posterior has no frames")
    if post.class_count != grid.class_count:
        raise DimensionError(
            f"posterior has {post.class_count} classes, grid wants {grid.class_count}"
        )
    avg = post.probs.mean(axis=0)
    return float(grid.angles_deg[int(np.argmax(avg[: grid.angle_count]))])


def doa_targets(doas_deg, vad, grid=None):
    """Per-frame classification targets from true DOAs and VAD labels.

    Arguments:
        doas_deg: sequence of true azimuths, one per speaker
        vad: boolean array (speakers, frames), True where the speaker is active
        grid: DoaGrid
    Return:
        (frames, class_count) float array; 1 at each active speaker's nearest
        grid angle, 1 at the non-speech class iff nobody is active. With a
        single speaker the rows are one-hot.
    """
    if grid is None:
        grid = DoaGrid()
    vad = np.atleast_2d(np.asarray(vad, dtype=bool))
    doas_deg = np.atleast_1d(np.asarray(doas_deg, dtype=np.float64))
    if len(doas_deg) != vad.shape[0]:
        raise DimensionError("one DOA per speaker required")
    n_frames = vad.shape[1]
    target = np.zeros((n_frames, grid.class_count))
    classes = [grid.class_of(d) for d in doas_deg]
    for spk, cls in enumerate(classes):
        target[vad[spk], cls] = 1.0
    target[~vad.any(axis=0), grid.non_speech_class] = 1.0
    return target

"""Delay-and-sum, recursive spatial covariances and the rank-1 MWF.

Shapes (for I mics, T frames, F bins):
    spectrogram data: (I, T, F)
    covariance field: (T, F, I, I)
    weights:          (T, F, I) or (1, F, I) when one filter spans all frames
"""

from dataclasses import dataclass

import numpy as np

from .dsp import Spectrogram
from .errors import DimensionError, ValidationError
from .localization import steering_delays

DIAG_LOAD = 1e-6


@dataclass
class CovarianceField:
    """Per-(frame, bin) Hermitian I x I matrices with the forgetting factor
    used to build them."""

    values: np.ndarray  # (T, F, I, I) complex
    alpha: float


@dataclass
class BeamformerWeights:
    """Per-(frame, bin) complex filter vectors plus fallback diagnostics."""

    values: np.ndarray      # (T, F, I)
    fallbacks: np.ndarray   # (T, F) bool, True where passthrough was used


def delay_and_sum(spec, doa_deg, geometry, c=None):
    """Phase-align all channels toward a DOA and average.

    Arguments:
        spec: Spectrogram (I, T, F)
        doa_deg: steering azimuth in [0, 180]
        geometry: ArrayGeometry
    Return:
        single-channel Spectrogram (1, T, F)
    """
    if not 0.0 <= doa_deg <= 180.0:
        raise ValidationError(f"DOA {doa_deg} outside [0, 180]")
    kwargs = {} if c is None else {"c": c}
    delays = steering_delays(geometry, doa_deg, **kwargs)  # (I,)
    if len(delays) != spec.channel_count:
        raise DimensionError("geometry mic count does not match the spectrogram")
    freqs = spec.bin_freqs_hz
    phase = np.exp(2j * np.pi * delays[:, None] * freqs[None, :])  # (I, F)
    out = np.mean(spec.data * phase[:, None, :], axis=0, keepdims=True)
    return Spectrogram(out, spec.sample_rate, spec.hop, spec.window_len,
                       spec.fft_len, spec.window)


def update_covariances(spec, mask, alpha):
    """Recursive source/noise covariance fields from a mask.

    Sigma_s(t) = alpha Sigma_s(t-1) + (1-alpha) m(t) x x^H, starting from
    zero; the noise recursion uses weight (1-m).

    Arguments:
        spec: Spectrogram (I, T, F)
        mask: (T, F) array or Mask, values in [0, 1]
        alpha: forgetting factor in [0, 1)
    Return:
        (CovarianceField source, CovarianceField noise)
    """
    if not 0.0 <= alpha < 1.0:
        raise ValidationError(f"forgetting factor {alpha} outside [0, 1)")
    m = np.asarray(getattr(mask, "values", mask), dtype=np.float64)
    n_ch, n_frames, n_bins = spec.data.shape
    if m.shape != (n_frames, n_bins):
        raise DimensionError(f"mask shape {m.shape} != {(n_frames, n_bins)}")
    outer = np.einsum("itf,jtf->tfij", spec.data, np.conj(spec.data))
    sig_s = np.zeros((n_frames, n_bins, n_ch, n_ch), dtype=np.complex128)
    sig_n = np.zeros_like(sig_s)
    prev_s = np.zeros((n_bins, n_ch, n_ch), dtype=np.complex128)
    prev_n = np.zeros_like(prev_s)
    for t in range(n_frames):
        w = m[t][:, None, None]
        prev_s = alpha * prev_s + (1.0 - alpha) * w * outer[t]
        prev_n = alpha * prev_n + (1.0 - alpha) * (1.0 - w) * outer[t]
        sig_s[t] = prev_s
        sig_n[t] = prev_n
    return CovarianceField(sig_s, alpha), CovarianceField(sig_n, alpha)


def _solve_batch(mats, rhs):
    """Batched solve with adaptive diagonal loading on failure.

    Tries the plain solve first so well-conditioned inputs are untouched;
    singular or non-finite entries are retried with trace-relative loading.
    rhs may be a stack of vectors (..., I) or matrices (..., I, K).
    Returns (solution, bad) where bad marks items that stayed unusable.
    """
    n = mats.shape[-1]
    vector_rhs = rhs.ndim == mats.ndim - 1
    b = rhs[..., None] if vector_rhs else rhs

    def attempt(a, b):
        try:
            with np.errstate(all="ignore"):
                return np.linalg.solve(a, b)
        except np.linalg.LinAlgError:
            pass
        out = np.empty(b.shape, dtype=np.complex128)
        flat_a = a.reshape(-1, n, n)
        flat_b = b.reshape(-1, n, b.shape[-1])
        flat_o = out.reshape(-1, n, b.shape[-1])
        for k in range(flat_a.shape[0]):
            try:
                flat_o[k] = np.linalg.solve(flat_a[k], flat_b[k])
            except np.linalg.LinAlgError:
                flat_o[k] = np.nan
        return out

    sol = attempt(mats, b)
    bad = ~np.isfinite(sol).all(axis=(-2, -1))
    if np.any(bad):
        tr = np.einsum("...ii->...", mats[bad]).real
        load = DIAG_LOAD * np.maximum(tr, 1e-300) / n
        loaded = mats[bad] + load[..., None, None] * np.eye(n)
        sol[bad] = attempt(loaded, b[bad])
        bad = bad & ~np.isfinite(sol).all(axis=(-2, -1))
    if vector_rhs:
        sol = sol[..., 0]
    return sol, bad


def principal_eigenvectors(mats, start=None, iters=50, tol=1e-10, polish_iters=12):
    """Dominant eigenpair of each matrix in a batch via power iteration.

    A few Rayleigh-quotient iterations polish entries whose power-iteration
    residual is still above tol (cubic convergence, two or three steps).

    Arguments:
        mats: (..., I, I) batch, not necessarily Hermitian
    Return:
        (vectors (..., I) unit norm, eigenvalues (...), residuals (...))
    """
    n = mats.shape[-1]
    batch_shape = mats.shape[:-2]
    v = np.zeros(batch_shape + (n,), dtype=np.complex128)
    if start is None:
        v[..., 0] = 1.0
    else:
        v[:] = start
    for _ in range(iters):
        w = np.einsum("...ij,...j->...i", mats, v)
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        new_v = np.where(norm > 0, w / np.maximum(norm, 1e-300), v)
        delta = np.linalg.norm(new_v - v, axis=-1).max() if v.size else 0.0
        v = new_v
        if delta < tol:
            break
    lam = np.einsum("...i,...ij,...j->...", np.conj(v), mats, v)
    resid = _eigen_residual(mats, v, lam)
    needs = resid > tol
    for _ in range(polish_iters):
        if not np.any(needs):
            break
        sub = mats[needs] - lam[needs][..., None, None] * np.eye(n)
        w, bad = _solve_batch(sub, v[needs])
        w = np.where(bad[..., None], v[needs], w)
        norm = np.linalg.norm(w, axis=-1, keepdims=True)
        w = np.where(norm > 0, w / np.maximum(norm, 1e-300), v[needs])
        v[needs] = w
        lam[needs] = np.einsum("...i,...ij,...j->...", np.conj(w), mats[needs], w)
        resid[needs] = _eigen_residual(mats[needs], w, lam[needs])
        needs = resid > tol
    return v, lam, resid


def _eigen_residual(mats, v, lam):
    num = np.linalg.norm(
        np.einsum("...ij,...j->...i", mats, v) - lam[..., None] * v, axis=-1
    )
    den = np.abs(lam) * np.linalg.norm(v, axis=-1)
    return num / np.maximum(den, 1e-300)


def r1_mwf(sigma_s, sigma_n, mu=1.0):
    """Rank-1 constrained multichannel Wiener filter weights.

    For each (frame, bin): h is the principal eigenvector of
    Sigma_n^-1 Sigma_s; the source covariance is replaced by the rank-1
    surrogate along d = Sigma_n h (for a rank-1 source sigma a a^H, d is
    exactly the steering direction a), trace-matched to Sigma_s:

        Sigma_r1 = tr(Sigma_s) d d^H / ||d||^2,
        lambda   = tr(Sigma_n^-1 Sigma_r1),
        W        = Sigma_n^-1 Sigma_r1 u1 / (mu + lambda)
                 = tr(Sigma_s) h conj(d_1) / (||d||^2 (mu + lambda)).

    Whenever Sigma_s is truly rank one this equals the unconstrained
    Wiener solution; the constraint only removes estimation noise in the
    off-dominant directions.

    Arguments:
        sigma_s, sigma_n: CovarianceField or (T, F, I, I) arrays
        mu: distortion weighting (mu=0 gives an MVDR-like solution)
    Return:
        BeamformerWeights; frames whose linear algebra failed even after
        diagonal loading fall back to a channel-1 passthrough and are
        flagged in .fallbacks
    """
    s_vals = np.asarray(getattr(sigma_s, "values", sigma_s))
    n_vals = np.asarray(getattr(sigma_n, "values", sigma_n))
    if s_vals.shape != n_vals.shape or s_vals.shape[-1] != s_vals.shape[-2]:
        raise DimensionError("covariance fields must share a square (I, I) tail")
    batch_shape = s_vals.shape[:-2]
    n = s_vals.shape[-1]

    b_mat, bad_inv = _solve_batch(n_vals, s_vals)
    b_mat = np.where(bad_inv[..., None, None], 0.0, b_mat)
    h, _lam, resid = principal_eigenvectors(b_mat)

    tr_s = np.einsum("...ii->...", s_vals).real
    d = np.einsum("...ij,...j->...i", n_vals, h)
    d_norm2 = np.sum(np.abs(d) ** 2, axis=-1)
    with np.errstate(all="ignore"):
        scale = tr_s / d_norm2
        lam = scale * np.einsum("...i,...i->...", np.conj(d), h).real
        w = scale[..., None] * h * np.conj(d[..., 0])[..., None] / (mu + lam)[..., None]

    # zero source statistics mean full suppression, not a fallback
    zero_source = tr_s <= 0.0
    w = np.where(zero_source[..., None], 0.0, w)
    fallback = (bad_inv | ~np.isfinite(w).all(axis=-1)) & ~zero_source
    if np.any(fallback):
        u1 = np.zeros(n, dtype=np.complex128)
        u1[0] = 1.0
        w = np.where(fallback[..., None], u1, w)
    return BeamformerWeights(values=w.reshape(batch_shape + (n,)),
                             fallbacks=fallback.reshape(batch_shape))


def final_frame_weights(weights):
    """Keep only the last frame's filters, broadcastable over all frames.

    Used for per-utterance (batch) filtering: the covariance recursion is
    run to the end once, then the resulting filter is applied everywhere.
    """
    return BeamformerWeights(values=weights.values[-1:],
                             fallbacks=weights.fallbacks[-1:])


def extract_source(spec, weights):
    """Apply beamformer weights: s_hat(t, f) = W^H(t, f) x(t, f).

    Arguments:
        spec: Spectrogram (I, T, F)
        weights: BeamformerWeights with values (T, F, I) or (1, F, I)
    Return:
        single-channel Spectrogram
    """
    w = weights.values
    if w.shape[-1] != spec.channel_count or w.shape[-2] != spec.bin_count:
        raise DimensionError(f"weights shape {w.shape} does not match the spectrogram")
    if w.shape[0] not in (1, spec.frame_count):
        raise DimensionError("weights must cover 1 or all frames")
    if w.shape[0] == 1:
        w = np.broadcast_to(w, (spec.frame_count,) + w.shape[1:])
    out = np.einsum("tfi,itf->tf", np.conj(w), spec.data)[None, ...]
    return Spectrogram(out, spec.sample_rate, spec.hop, spec.window_len,
                       spec.fft_len, spec.window)

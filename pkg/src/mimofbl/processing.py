"""Combining, precoding, and reduction of links to scalar channels.

Every uplink or downlink ends up as a single-input channel with a true
gain, the gain the receiver believes in, and a noise-plus-interference
variance; the error-probability kernel consumes exactly that triple
plus the symbol power.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve


@dataclass(frozen=True)
class EffectiveChannel:
    """Scalar channel seen after spatial processing."""

    gain: complex
    gain_est: complex
    noise_var: float
    power: float

    def __post_init__(self):
        values = (self.gain, self.gain_est, self.noise_var, self.power)
        if not all(cmath.isfinite(complex(v)) for v in values):
            raise ValueError("effective channel fields must be finite")
        if self.noise_var < 0.0:
            raise ValueError("noise_var must be >= 0")
        if self.power <= 0.0:
            raise ValueError("power must be > 0")


def mr_combiner(h_hat) -> np.ndarray:
    """Maximum-ratio direction: the estimate scaled by 1/M."""
    h_hat = np.asarray(h_hat, dtype=np.complex128)
    return h_hat / h_hat.shape[-1]


def combiner_regularizer(error_covs, rho_ul: float,
                         sigma2_ul: float) -> np.ndarray:
    """Interference floor the MMSE combiner sees beyond the estimates.

    Sums the estimation-error covariance of every user the BS hears
    and adds the thermal noise scaled to the symbol power.
    """
    covs = np.asarray(error_covs, dtype=np.complex128)
    if rho_ul <= 0.0 or sigma2_ul <= 0.0:
        raise ValueError("rho_ul and sigma2_ul must be > 0")
    m = covs.shape[-1]
    flat = covs.reshape((-1, m, m))
    return flat.sum(axis=0) + (sigma2_ul / rho_ul) * np.eye(m)


def mmse_combiners(h_hat_all, regularizer) -> np.ndarray:
    """All users' MMSE combining vectors against a shared regularizer.

    h_hat_all has shape (..., N, M) with one row per heard user; the
    result matches that shape.  The Gram update is applied through the
    matrix-inversion identity, so only the (M, M) regularizer is
    factorized and only (N, N) systems are solved per draw.
    """
    est = np.asarray(h_hat_all, dtype=np.complex128)
    z = np.asarray(regularizer, dtype=np.complex128)
    m = est.shape[-1]
    if z.shape != (m, m):
        raise ValueError(f"regularizer must be ({m}, {m}), got {z.shape}")
    cho = cho_factor(z)

    h = est.swapaxes(-1, -2)                      # (..., M, N)
    stacked = np.moveaxis(h, -2, 0).reshape(m, -1)
    b = cho_solve(cho, stacked).reshape((m,) + h.shape[:-2] + (h.shape[-1],))
    b = np.moveaxis(b, 0, -2)                     # Z^{-1} H
    s = np.eye(h.shape[-1]) + np.einsum("...mn,...mp->...np", h.conj(), b)
    # combiners are the columns of B S^{-1}; S is Hermitian PD
    u_cols = np.linalg.solve(s, b.swapaxes(-1, -2).conj())
    return u_cols.conj()


def mmse_combiner(h_hat_all, regularizer, target: int) -> np.ndarray:
    """One user's MMSE combining vector; see mmse_combiners."""
    return mmse_combiners(h_hat_all, regularizer)[..., target, :]


def precoder_from_combiner(combiner, norm_samples) -> np.ndarray:
    """Scale a combining direction to unit average transmit energy.

    norm_samples are squared norms of the combiner across independent
    fading draws of the same placement; their mean estimates the
    normalization constant.
    """
    samples = np.asarray(norm_samples, dtype=np.float64)
    mean = samples.mean()
    if not (np.isfinite(mean) and mean > 0.0):
        raise ValueError("norm samples must have a positive finite mean")
    return np.asarray(combiner, dtype=np.complex128) / math.sqrt(mean)


def effective_channel_ul(combiner, channel, channel_est, interferers,
                         rho_ul: float, sigma2_ul: float) -> EffectiveChannel:
    """Reduce one uplink to its scalar channel.

    interferers holds the true channels of every other user the BS
    hears, shape (P, M); P may be zero.  The believed gain applies the
    combiner to the estimate, the true gain to the true channel.
    """
    u = np.asarray(combiner, dtype=np.complex128)
    h = np.asarray(channel, dtype=np.complex128)
    others = np.asarray(interferers, dtype=np.complex128).reshape(-1, u.size)
    gain = complex(np.vdot(u, h))
    gain_est = complex(np.vdot(u, np.asarray(channel_est)))
    interference = float(np.sum(np.abs(others.conj() @ u) ** 2))
    noise_var = sigma2_ul * float(np.vdot(u, u).real) + rho_ul * interference
    return EffectiveChannel(gain=gain, gain_est=gain_est,
                            noise_var=noise_var, power=rho_ul)


def effective_channel_dl(channel, precoder, gain_est, interferer_channels,
                         interferer_precoders, rho_dl: float,
                         sigma2_dl: float) -> EffectiveChannel:
    """Reduce one downlink to its scalar channel.

    channel is the target user's channel from its serving BS; the
    believed gain comes from the caller (a hardening average over the
    placement, or the true gain when the user has perfect CSI).  Row p
    of interferer_channels is the channel from the BS transmitting
    interferer_precoders[p] to this user.
    """
    h = np.asarray(channel, dtype=np.complex128)
    w = np.asarray(precoder, dtype=np.complex128)
    ch_int = np.asarray(interferer_channels,
                        dtype=np.complex128).reshape(-1, h.size)
    pre_int = np.asarray(interferer_precoders,
                         dtype=np.complex128).reshape(-1, h.size)
    if ch_int.shape[0] != pre_int.shape[0]:
        raise ValueError(
            "interferer channels and precoders must pair up rowwise")
    gain = complex(np.vdot(h, w))
    cross = np.einsum("pm,pm->p", ch_int.conj(), pre_int)
    noise_var = sigma2_dl + rho_dl * float(np.sum(np.abs(cross) ** 2))
    return EffectiveChannel(gain=gain, gain_est=complex(gain_est),
                            noise_var=noise_var, power=rho_dl)

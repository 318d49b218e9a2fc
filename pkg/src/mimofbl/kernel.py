"""Finite-blocklength error-probability kernel for a mismatched Gaussian link.

The channel under study is the scalar conditional model

    v[k] = g q[k] + z[k],   q[k] ~ CN(0, rho),  z[k] ~ CN(0, sigma2),

decoded with a scaled nearest-neighbor metric built on a channel estimate
g_hat that the receiver treats as exact.  For a Gaussian codebook with
m = e^{n R} codewords the random-coding union bound gives

    eps <= Pr[ sum_k i_s(q[k], v[k]) + log U <= log(m - 1) ],  U ~ U(0,1),

where the generalized information density for metric parameter s > 0 is

    i_s(q, v) = -s |v - g_hat q|^2 + s |v|^2 / (1 + s rho |g_hat|^2)
                + log(1 + s rho |g_hat|^2).

Under the channel law, i_s decomposes into a constant plus the difference
of two dependent exponential variables whose scales and correlation are

    beta_a = s (rho |g - g_hat|^2 + sigma2)
    beta_b = s (rho |g|^2 + sigma2) / (1 + s rho |g_hat|^2)
    nu     = |sigma2 + rho conj(g)(g - g_hat)|^2
             / ((rho |g - g_hat|^2 + sigma2)(rho |g|^2 + sigma2)),

which yields the closed-form transform

    E[e^{-zeta i_s}] = (1 + s rho |g_hat|^2)^{-zeta}
                       / (1 + (beta_b - beta_a) zeta
                            - beta_a beta_b (1 - nu) zeta^2)

on the open interval (zeta_lo, zeta_hi) between the real roots of the
denominator.  The CGF of -i_s, its first two derivatives, the
saddlepoint expansion of the error probability and the Gaussian
(normal) approximation are all built from these few numbers.

The module offers a scalar API returning small dataclasses, plus
vectorized internals (underscore prefix) that the simulation harness
uses to evaluate thousands of fading realizations at once.  Tail values
are assembled in the log domain via the scaled complementary error
function so that extremely small probabilities survive.  Rates are in
nats per channel use throughout.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc, erfcx, log_ndtr

from .rng import seed_sequence

__all__ = [
    "SaddlepointContext",
    "ErrorProbEstimate",
    "info_density",
    "saddle_context",
    "cgf",
    "cgf_d1",
    "cgf_d2",
    "solve_zeta",
    "psi",
    "saddlepoint_eps",
    "rcus_mc_eps",
    "optimize_s",
    "normal_approx_eps",
    "normal_approx_awgn",
    "outage_eps",
    "wilson_interval",
    "log_codebook_mass",
]

_WILSON_Z = 1.959963984540054  # two-sided 95%
_INVPHI = (math.sqrt(5.0) - 1.0) / 2.0
_INVPHI2 = (3.0 - math.sqrt(5.0)) / 2.0
# Quadratic coefficient below this fraction of max(beta_a, beta_b)^2 is
# treated as degenerate (nu -> 1): root structure comes from the linear
# term with the quadratic as a perturbation.
_DEGENERATE_FRAC = 1e-14
_HUGE_ZETA = 1e300
# narrow enough that solutions hugging a denominator root stay inside
# the working bracket, wide enough that the denominator at the edge is
# still a few hundred rounding units away from sign noise
_EDGE_SHRINK = 1e-13
_EPS = float(np.finfo(np.float64).eps)


@dataclass(frozen=True)
class SaddlepointContext:
    """Per-realization parameters of the information-density transform.

    Attributes:
        s: metric parameter of the decoder, > 0.
        gain: true effective channel g (complex).
        gain_est: channel estimate g_hat the decoder relies on (complex).
        noise_var: variance sigma2 of the effective additive noise, > 0.
        power: transmit power rho of the Gaussian codebook, > 0.
        log_gain: log(1 + s rho |g_hat|^2).
        beta_a: exponential scale of the metric-residual term.
        beta_b: exponential scale of the channel-output term.
        nu: squared correlation between the two terms, in [0, 1].
        zeta_lo: lower edge of the open transform interval (< 0).
        zeta_hi: upper edge of the open transform interval (> 0).
    """

    s: float
    gain: complex
    gain_est: complex
    noise_var: float
    power: float
    log_gain: float
    beta_a: float
    beta_b: float
    nu: float
    zeta_lo: float
    zeta_hi: float


@dataclass(frozen=True)
class ErrorProbEstimate:
    """An error-probability value with provenance.

    ci_low/ci_high bound a 95% confidence interval and are None for
    deterministic methods.  log_value carries the natural log of value
    so results below the smallest positive float stay comparable.
    zeta_used is None for methods without a saddlepoint solve.
    saturated marks a zeta solve pinned at the transform-interval edge.
    """

    value: float
    method: str
    log_value: float = -math.inf
    ci_low: float | None = None
    ci_high: float | None = None
    s_used: float | None = None
    zeta_used: float | None = None
    num_samples: int | None = None
    saturated: bool = False

    def __post_init__(self):
        if not (0.0 <= self.value <= 1.0 or math.isnan(self.value)):
            raise ValueError(f"probability out of range: {self.value}")


def _validate_positive(**kwargs):
    for name, val in kwargs.items():
        arr = np.asarray(val)
        if not np.all(np.isfinite(arr)) or not np.all(arr > 0):
            raise ValueError(f"{name} must be finite and > 0, got {val}")


# ---------------------------------------------------------------------------
# vectorized core
# ---------------------------------------------------------------------------


class _Ctx:
    """Flat arrays describing a batch of transform contexts."""

    __slots__ = ("s", "log_gain", "beta_a", "beta_b", "b1", "c2",
                 "zeta_lo", "zeta_hi", "nu", "shape")

    def __init__(self, s, gain, gain_est, noise_var, power):
        s, gain, gain_est, noise_var, power = np.broadcast_arrays(
            np.asarray(s, dtype=np.float64),
            np.asarray(gain, dtype=np.complex128),
            np.asarray(gain_est, dtype=np.complex128),
            np.asarray(noise_var, dtype=np.float64),
            np.asarray(power, dtype=np.float64),
        )
        self.shape = s.shape
        s = s.ravel()
        gain = gain.ravel()
        gain_est = gain_est.ravel()
        noise_var = noise_var.ravel()
        power = power.ravel()

        abs_g2 = gain.real**2 + gain.imag**2
        diff = gain - gain_est
        mism2 = diff.real**2 + diff.imag**2
        abs_ghat2 = gain_est.real**2 + gain_est.imag**2

        var_out = power * abs_g2 + noise_var           # E|v|^2
        var_res = power * mism2 + noise_var            # E|v - g_hat q|^2
        cross = noise_var + power * (np.conj(gain) * diff)
        cross2 = cross.real**2 + cross.imag**2

        one_plus = 1.0 + s * power * abs_ghat2
        self.s = s
        self.log_gain = np.log1p(s * power * abs_ghat2)
        self.beta_a = s * var_res
        self.beta_b = s * var_out / one_plus
        self.nu = np.clip(cross2 / (var_out * var_res), 0.0, 1.0)
        self.b1 = self.beta_b - self.beta_a
        # beta_a beta_b (1 - nu) assembled without the nu round trip
        self.c2 = np.maximum(s * s * (var_out * var_res - cross2) / one_plus, 0.0)
        self.zeta_lo, self.zeta_hi = _transform_interval(
            self.beta_a, self.beta_b, self.b1, self.c2
        )


def _transform_interval(beta_a, beta_b, b1, c2):
    """Real roots of 1 + b1 zeta - c2 zeta^2, returned as (lo, hi).

    Uses the cancellation-free quadratic form q = -(b + sign(b) sqrt(disc))/2
    with roots q/a and c/q.  When c2 is negligible against the betas, the
    near root comes from the linear term plus a first-order correction and
    the far root is pushed out to a huge sentinel.
    """
    scale = np.maximum(beta_a, beta_b) ** 2
    degenerate = c2 <= _DEGENERATE_FRAC * scale
    c2_safe = np.where(c2 > 0.0, c2, 1.0)
    b1_safe = np.where(b1 != 0.0, b1, 1.0)

    disc = b1 * b1 + 4.0 * c2
    sq = np.sqrt(disc)
    qq = -0.5 * (b1 + np.where(b1 >= 0.0, sq, -sq))
    qq_safe = np.where(qq != 0.0, qq, 1.0)

    r_far = -qq / c2_safe
    r_near = 1.0 / qq_safe
    lin_pert = -1.0 / b1_safe + c2 / b1_safe**3
    far_deg = np.where(
        c2 > 0.0, b1 / c2_safe, np.where(b1 >= 0.0, _HUGE_ZETA, -_HUGE_ZETA)
    )

    near = np.where(degenerate, lin_pert, r_near)
    far = np.where(degenerate, far_deg, r_far)
    # fully flat transform (b1 == 0 and c2 == 0): unbounded on both sides
    flat = degenerate & (b1 == 0.0)
    near = np.where(flat, -_HUGE_ZETA, near)
    far = np.where(flat, _HUGE_ZETA, far)

    return np.minimum(near, far), np.maximum(near, far)


def _cgf_terms(ctx: _Ctx, zeta):
    """kappa, kappa', kappa'' of -i_s and the transform denominator."""
    u = zeta * (ctx.b1 - ctx.c2 * zeta)
    denom = 1.0 + u
    k0 = -zeta * ctx.log_gain - np.log1p(u)
    slope = (ctx.b1 - 2.0 * ctx.c2 * zeta) / denom
    k1 = -ctx.log_gain - slope
    k2 = slope * slope + 2.0 * ctx.c2 / denom
    return k0, k1, k2, denom


def _working_bracket(ctx: _Ctx):
    """Finite open bracket strictly inside (zeta_lo, zeta_hi).

    Each edge is pulled toward zero by a relative margin (the roots are
    never zero because the denominator equals one there), so severely
    skewed intervals keep both the origin and the near-singular region
    usable.  Evaluating the rational terms close to a root only
    subtracts exactly-known floats, which costs a few digits of the
    denominator but never poisons the Newton iteration, so no absolute
    cap is needed.
    """
    return ctx.zeta_lo * (1.0 - _EDGE_SHRINK), ctx.zeta_hi * (1.0 - _EDGE_SHRINK)


def _solve_zeta(ctx: _Ctx, rate, zeta0=None, max_iter: int = 100):
    """Solve rate = -kappa'(zeta) elementwise by safeguarded Newton.

    Returns (zeta, saturated).  saturated marks elements whose rate falls
    outside the range representable inside the working bracket (possible
    only through numeric underflow near the interval edges); they are
    pinned to the nearest edge.
    """
    rate = np.asarray(rate, dtype=np.float64).ravel()
    lo_w, hi_w = _working_bracket(ctx)
    tol = 1e-10 * np.maximum(1.0, np.abs(rate))

    with np.errstate(over="ignore"):
        _, k1_lo, _, _ = _cgf_terms(ctx, lo_w)
        _, k1_hi, _, _ = _cgf_terms(ctx, hi_w)
    sat_lo = k1_lo + rate >= 0.0    # rate at/above the bracket's -kappa' max
    sat_hi = k1_hi + rate <= 0.0    # rate at/below the bracket's -kappa' min
    saturated = sat_lo | sat_hi

    size = max(lo_w.size, rate.size)
    lo_b = np.broadcast_to(lo_w, (size,)).copy()
    hi_b = np.broadcast_to(hi_w, (size,)).copy()
    if zeta0 is not None:
        zeta = np.asarray(zeta0, dtype=np.float64).ravel()
        zeta = np.clip(np.broadcast_to(zeta, (size,)), lo_b, hi_b).copy()
        edge = (zeta <= lo_b) | (zeta >= hi_b)
        zeta[edge] = 0.5 * (lo_b[edge] + hi_b[edge])
    else:
        # zero is always interior: the denominator roots straddle it
        zeta = np.zeros(size)

    # solutions hugging a denominator root hit a residual noise floor
    # above tol (the slope loses digits there); freeze those elements
    # once the Newton step falls under machine resolution so a stubborn
    # element cannot pin a whole batch at max_iter
    frozen = saturated.copy()
    for _ in range(max_iter):
        _, k1, k2, _ = _cgf_terms(ctx, zeta)
        resid = k1 + rate
        done = (np.abs(resid) <= tol) | frozen
        if done.all():
            break
        np.minimum(hi_b, np.where(resid > 0.0, zeta, hi_b), out=hi_b)
        np.maximum(lo_b, np.where(resid <= 0.0, zeta, lo_b), out=lo_b)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            cand = zeta - resid / k2
        bad = ~np.isfinite(cand) | (cand <= lo_b) | (cand >= hi_b)
        cand = np.where(bad, 0.5 * (lo_b + hi_b), cand)
        stall = np.abs(cand - zeta) <= 8.0 * _EPS * np.maximum(np.abs(zeta), 1.0)
        frozen |= ~done & stall
        zeta = np.where(done, zeta, cand)

    zeta = np.where(sat_lo, np.broadcast_to(lo_w, (size,)), zeta)
    zeta = np.where(sat_hi, np.broadcast_to(hi_w, (size,)), zeta)
    return zeta, saturated


def _log_half_erfcx(y):
    """log(0.5 * exp(y^2) * erfc(y)), stable on the whole real line."""
    y = np.asarray(y, dtype=np.float64)
    out = np.empty_like(y)
    pos = y >= 0.0
    if pos.any():
        out[pos] = np.log(0.5 * erfcx(y[pos]))
    if (~pos).any():
        yn = y[~pos]
        out[~pos] = yn * yn + np.log(0.5 * erfc(yn))
    return out


def _log_psi(n_kappa2, u):
    """log Psi(u) = log[ exp(n u^2 kappa''/2) Q(u sqrt(n kappa'')) ]."""
    return _log_half_erfcx(u * np.sqrt(0.5 * n_kappa2))


def _log1mexp(logw):
    """log(1 - e^{logw}) for logw <= 0, accurate at both ends."""
    logw = np.minimum(np.asarray(logw, dtype=np.float64), 0.0)
    small = logw < -math.log(2.0)
    out = np.empty_like(logw)
    out[small] = np.log1p(-np.exp(logw[small]))
    big = ~small
    out[big] = np.log(-np.expm1(logw[big]))
    return out


def _saddlepoint_log_eps(ctx: _Ctx, n, rate, zeta0=None):
    """Log of the saddlepoint tail approximation, elementwise over ctx.

    Returns (log_eps, zeta, saturated).  Three regimes, selected by the
    solved zeta: central for zeta in [0, 1], large-deviation evaluated at
    zeta = 1 for zeta > 1, and the complementary regime for zeta < 0.
    """
    rate = np.asarray(rate, dtype=np.float64).ravel()
    zeta, saturated = _solve_zeta(ctx, rate, zeta0=zeta0)
    size = zeta.size
    n_b = np.broadcast_to(np.asarray(n, dtype=np.float64).ravel(), (size,))
    rate_b = np.broadcast_to(rate, (size,))

    k0, _, k2, _ = _cgf_terms(ctx, zeta)
    k0 = np.broadcast_to(k0, (size,))
    nk2 = n_b * np.broadcast_to(k2, (size,))

    log_eps = np.empty(size)
    mid = np.flatnonzero((zeta >= 0.0) & (zeta <= 1.0))
    high = np.flatnonzero(zeta > 1.0)
    low = np.flatnonzero(zeta < 0.0)

    if mid.size:
        zm = zeta[mid]
        expo = n_b[mid] * (k0[mid] + zm * rate_b[mid])
        lp1 = _log_psi(nk2[mid], zm)
        lp2 = _log_psi(nk2[mid], 1.0 - zm)
        log_eps[mid] = expo + np.logaddexp(lp1, lp2)

    if high.size:
        sub = _subset_ctx(ctx, high)
        ones = np.ones(high.size)
        k0_1, k1_1, k2_1, _ = _cgf_terms(sub, ones)
        crit = -k1_1                        # rate where zeta = 1
        tt = n_b[high] * (crit - rate_b[high])
        sn2 = n_b[high] * k2_1
        root = np.sqrt(sn2)
        lp1 = -tt * tt / (2.0 * sn2) + _log_half_erfcx((sn2 + tt) / (root * math.sqrt(2.0)))
        lp2 = log_ndtr(tt / root)
        log_eps[high] = n_b[high] * (k0_1 + rate_b[high]) + np.logaddexp(lp1, lp2)

    if low.size:
        zl = zeta[low]
        expo = n_b[low] * (k0[low] + zl * rate_b[low])
        half = np.sqrt(0.5 * nk2[low])
        inner = 0.5 * (erfcx(-zl * half) - erfcx((1.0 - zl) * half))
        with np.errstate(divide="ignore"):
            logw = expo + np.log(np.maximum(inner, 0.0))
        log_eps[low] = _log1mexp(logw)

    return np.minimum(log_eps, 0.0), zeta, saturated


def _subset_ctx(ctx: _Ctx, idx) -> _Ctx:
    sub = _Ctx.__new__(_Ctx)
    size = None
    for name in ("s", "log_gain", "beta_a", "beta_b", "b1", "c2", "zeta_lo", "zeta_hi", "nu"):
        arr = getattr(ctx, name)
        if arr.size == 1:
            setattr(sub, name, arr)
        else:
            taken = arr[idx]
            setattr(sub, name, taken)
            size = taken.size
    sub.shape = (size if size is not None else 1,)
    return sub


def _default_s(gain, gain_est, noise_var, power):
    gain = np.asarray(gain, dtype=np.complex128)
    diff = gain - np.asarray(gain_est, dtype=np.complex128)
    mism2 = diff.real**2 + diff.imag**2
    return 1.0 / (np.asarray(noise_var, dtype=np.float64)
                  + np.asarray(power, dtype=np.float64) * mism2)


def _optimize_s_saddle(gain, gain_est, noise_var, power, n, rate,
                       iterations: int = 60, span: float = 1e3):
    """Vectorized golden-section minimization of the saddlepoint bound over s.

    Search runs on log s over [s_init/span, s_init*span] with
    s_init = 1/(sigma2 + rho |g - g_hat|^2).  s_init is evaluated first,
    so the result can never be worse than the default choice.  Returns
    flat arrays (s_opt, log_eps, zeta, saturated).
    """

    def evaluate(x, warm):
        ctx = _Ctx(np.exp(x), gain, gain_est, noise_var, power)
        return _saddlepoint_log_eps(ctx, n, rate, zeta0=warm)

    x0 = np.log(_default_s(gain, gain_est, noise_var, power)).ravel()
    f0, z0, sat0 = evaluate(x0, None)
    x_best, f_best, z_best, sat_best = x0.copy(), f0, z0, sat0

    lnspan = math.log(span)
    a = x0 - lnspan
    b = x0 + lnspan
    h = b - a
    c = a + _INVPHI2 * h
    d = a + _INVPHI * h
    fc, zc, sc = evaluate(c, z0)
    fd, zd, sd = evaluate(d, z0)

    def fold(x, f, z, sat):
        nonlocal x_best, f_best, z_best, sat_best
        better = f < f_best
        x_best = np.where(better, x, x_best)
        f_best = np.where(better, f, f_best)
        z_best = np.where(better, z, z_best)
        sat_best = np.where(better, sat, sat_best)

    fold(c, fc, zc, sc)
    fold(d, fd, zd, sd)

    for _ in range(iterations):
        left = fc < fd                      # keep [a, d], else keep [c, b]
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        h = b - a
        probe = np.where(left, a + _INVPHI2 * h, a + _INVPHI * h)
        f_new, z_new, s_new = evaluate(probe, np.where(left, zc, zd))
        fold(probe, f_new, z_new, s_new)
        c_old, fc_old, zc_old = c, fc, zc
        d_old, fd_old, zd_old = d, fd, zd
        c = np.where(left, probe, d_old)
        fc = np.where(left, f_new, fd_old)
        zc = np.where(left, z_new, zd_old)
        d = np.where(left, c_old, probe)
        fd = np.where(left, fc_old, f_new)
        zd = np.where(left, zc_old, z_new)

    return np.exp(x_best), f_best, z_best, sat_best


# ---------------------------------------------------------------------------
# scalar / public API
# ---------------------------------------------------------------------------


def info_density(s, gain_est, power, symbols, observations):
    """Generalized information density i_s per channel use.

    Args:
        s: metric parameter, > 0.
        gain_est: channel estimate the decoder treats as exact.
        power: Gaussian codebook power rho.
        symbols: transmitted symbols q (array-like, complex).
        observations: channel outputs v, same shape as symbols.

    Returns:
        Array of i_s values, elementwise over the inputs.
    """
    _validate_positive(s=s, power=power)
    q = np.asarray(symbols, dtype=np.complex128)
    v = np.asarray(observations, dtype=np.complex128)
    ghat = complex(gain_est)
    one_plus = 1.0 + s * power * abs(ghat) ** 2
    res = v - ghat * q
    res2 = res.real**2 + res.imag**2
    out2 = v.real**2 + v.imag**2
    return -s * res2 + (s / one_plus) * out2 + math.log1p(s * power * abs(ghat) ** 2)


def saddle_context(s, gain, gain_est, noise_var, power) -> SaddlepointContext:
    """Assemble the transform parameters for one conditional channel.

    Raises ValueError unless s, noise_var and power are finite positives.
    """
    _validate_positive(s=s, noise_var=noise_var, power=power)
    ctx = _Ctx(s, gain, gain_est, noise_var, power)
    return SaddlepointContext(
        s=float(s),
        gain=complex(gain),
        gain_est=complex(gain_est),
        noise_var=float(noise_var),
        power=float(power),
        log_gain=float(ctx.log_gain[0]),
        beta_a=float(ctx.beta_a[0]),
        beta_b=float(ctx.beta_b[0]),
        nu=float(ctx.nu[0]),
        zeta_lo=float(ctx.zeta_lo[0]),
        zeta_hi=float(ctx.zeta_hi[0]),
    )


def _ctx_from_public(ctx: SaddlepointContext) -> _Ctx:
    return _Ctx(ctx.s, ctx.gain, ctx.gain_est, ctx.noise_var, ctx.power)


def _check_zeta_domain(ctx: SaddlepointContext, zeta):
    if not (ctx.zeta_lo < zeta < ctx.zeta_hi):
        raise ValueError(
            f"zeta {zeta} outside open transform interval "
            f"({ctx.zeta_lo}, {ctx.zeta_hi})"
        )


def cgf(ctx: SaddlepointContext, zeta) -> float:
    """CGF kappa(zeta) of -i_s; domain error outside the open interval."""
    _check_zeta_domain(ctx, zeta)
    k0, _, _, _ = _cgf_terms(_ctx_from_public(ctx), np.float64(zeta))
    return float(k0[0])


def cgf_d1(ctx: SaddlepointContext, zeta) -> float:
    """First CGF derivative kappa'(zeta); note GMI = -kappa'(0)."""
    _check_zeta_domain(ctx, zeta)
    _, k1, _, _ = _cgf_terms(_ctx_from_public(ctx), np.float64(zeta))
    return float(k1[0])


def cgf_d2(ctx: SaddlepointContext, zeta) -> float:
    """Second CGF derivative kappa''(zeta), strictly positive inside."""
    _check_zeta_domain(ctx, zeta)
    _, _, k2, _ = _cgf_terms(_ctx_from_public(ctx), np.float64(zeta))
    return float(k2[0])


def mgf_neg_density(ctx: SaddlepointContext, zeta) -> float:
    """Closed-form E[e^{-zeta i_s}] inside the open transform interval."""
    _check_zeta_domain(ctx, zeta)
    return math.exp(cgf(ctx, zeta))


def solve_zeta(ctx: SaddlepointContext, rate) -> tuple[float, bool]:
    """Solve rate = -kappa'(zeta); returns (zeta, saturated).

    rate is in nats per channel use.  Any finite value is accepted: the
    exponent slope sweeps past zero inside the transform interval, so
    the equation itself does not care about the sign (callers that
    compute error probabilities enforce positivity themselves).
    """
    if not math.isfinite(rate):
        raise ValueError(f"rate must be finite, got {rate}")
    zeta, sat = _solve_zeta(_ctx_from_public(ctx), np.float64(rate))
    return float(zeta[0]), bool(sat[0])


def psi(ctx: SaddlepointContext, n, zeta, u) -> float:
    """Psi(u) = exp(n u^2 kappa''(zeta)/2) Q(u sqrt(n kappa''(zeta))).

    Evaluated through the scaled complementary error function, so the
    value neither overflows nor loses accuracy for n u^2 kappa'' as
    large as 1e6.  Psi(0) = 0.5 exactly.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    k2 = cgf_d2(ctx, zeta)
    if not k2 > 0:
        raise ValueError(f"kappa''(zeta) must be > 0, got {k2}")
    return math.exp(float(_log_psi(np.float64(n * k2), np.float64(u))))


def log_codebook_mass(n, rate) -> float:
    """log(m - 1) for m = e^{n rate} codewords, stable for all n rate > 0."""
    nr = n * rate
    if nr <= 0:
        raise ValueError(f"n*rate must be > 0, got {nr}")
    if nr < 1e-8:
        return math.log(math.expm1(nr))
    return nr + math.log1p(-math.exp(-nr))


def saddlepoint_eps(ctx: SaddlepointContext, n, rate) -> ErrorProbEstimate:
    """Saddlepoint approximation of the union-bound tail for one context."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if rate < 0 or not math.isfinite(rate):
        raise ValueError(f"rate must be finite and >= 0, got {rate}")
    log_eps, zeta, sat = _saddlepoint_log_eps(
        _ctx_from_public(ctx), np.float64(n), np.float64(rate)
    )
    le = float(log_eps[0])
    return ErrorProbEstimate(
        value=min(math.exp(le), 1.0),
        log_value=le,
        method="saddlepoint",
        s_used=ctx.s,
        zeta_used=float(zeta[0]),
        saturated=bool(sat[0]),
    )


def wilson_interval(hits: int, num_samples: int) -> tuple[float, float]:
    """95% Wilson score interval for a binomial proportion."""
    if num_samples <= 0:
        raise ValueError("num_samples must be positive")
    if not 0 <= hits <= num_samples:
        raise ValueError("hits must lie in [0, num_samples]")
    z2 = _WILSON_Z * _WILSON_Z
    phat = hits / num_samples
    denom = 1.0 + z2 / num_samples
    center = (phat + z2 / (2.0 * num_samples)) / denom
    half = (_WILSON_Z / denom) * math.sqrt(
        phat * (1.0 - phat) / num_samples + z2 / (4.0 * num_samples**2)
    )
    # the closed form touches the endpoints exactly at 0 or full hits,
    # but sqrt rounding leaves ~1e-18 residue; pin those cases
    lo = 0.0 if hits == 0 else max(center - half, 0.0)
    hi = 1.0 if hits == num_samples else min(center + half, 1.0)
    return lo, hi


def _rcus_block_hits(args):
    (gain, gain_est, noise_var, power, s, n, rate, block, seed_key) = args
    rng = np.random.Generator(np.random.PCG64(seed_key))
    ghat = complex(gain_est)
    one_plus = 1.0 + s * power * abs(ghat) ** 2
    log_gain = math.log1p(s * power * abs(ghat) ** 2)
    logm1 = log_codebook_mass(n, rate)
    thresh = logm1 - n * log_gain

    q = rng.standard_normal((block, 2 * n)).view(np.complex128)
    q *= math.sqrt(power / 2.0)
    z = rng.standard_normal((block, 2 * n)).view(np.complex128)
    z *= math.sqrt(noise_var / 2.0)
    v = gain * q + z
    # reuse z as the metric residual v - g_hat q = (g - g_hat) q + z
    z += (gain - ghat) * q
    rv = v.view(np.float64)
    rz = z.view(np.float64)
    out2 = np.einsum("ij,ij->i", rv, rv)
    res2 = np.einsum("ij,ij->i", rz, rz)
    stat = (s / one_plus) * out2 - s * res2
    u = rng.random(block)
    return int(np.count_nonzero(stat + np.log(u) <= thresh))


def rcus_mc_eps(gain, gain_est, noise_var, power, s, n, rate,
                num_samples: int, seed: int, workers: int = 1,
                block_size: int | None = None) -> ErrorProbEstimate:
    """Monte-Carlo estimate of the union-bound tail probability.

    Draws (q[k], z[k]) i.i.d. per channel use plus one uniform per
    sample, and counts how often the summed information density falls
    below log(m - 1) - log U.  The sample is split into fixed-size
    blocks with stream identities derived from (seed, block index), so
    the estimate is bit-identical for any worker count.  block_size
    defaults to a function of n that keeps per-block buffers around
    100 MB.  Returns a 95% Wilson interval around the hit fraction.
    """
    _validate_positive(s=s, noise_var=noise_var, power=power)
    if n < 1 or num_samples < 1:
        raise ValueError("n and num_samples must be >= 1")
    n = int(n)
    num_samples = int(num_samples)
    if block_size is None:
        block_size = min(1 << 14, max(256, (1 << 22) // n))
    blocks = []
    start = 0
    bidx = 0
    while start < num_samples:
        size = min(block_size, num_samples - start)
        blocks.append((bidx, size))
        start += size
        bidx += 1

    def block_args(bidx, size):
        return (complex(gain), complex(gain_est), float(noise_var),
                float(power), float(s), n, float(rate), size,
                seed_sequence(seed, "rcus-mc", bidx))

    if workers > 1 and len(blocks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            hits = sum(pool.map(_rcus_block_hits,
                                (block_args(b, sz) for b, sz in blocks),
                                chunksize=max(1, len(blocks) // (8 * workers))))
    else:
        hits = sum(_rcus_block_hits(block_args(b, sz)) for b, sz in blocks)

    phat = hits / num_samples
    lo, hi = wilson_interval(hits, num_samples)
    return ErrorProbEstimate(
        value=phat,
        log_value=math.log(phat) if phat > 0 else -math.inf,
        method="rcus-mc",
        ci_low=lo,
        ci_high=hi,
        s_used=float(s),
        num_samples=num_samples,
    )


def optimize_s(gain, gain_est, noise_var, power, n, rate,
               evaluator: str = "saddlepoint", iterations: int = 60,
               span: float = 1e3, mc_samples: int = 100_000,
               seed: int = 0, workers: int = 1) -> ErrorProbEstimate:
    """Minimize the error bound over the metric parameter s.

    Golden-section search on log s over [s_init/span, s_init*span],
    s_init = 1/(sigma2 + rho |g - g_hat|^2).  evaluator selects the
    objective: "saddlepoint" (deterministic) or "rcus-mc" (the Monte-
    Carlo bound re-evaluated under common random numbers, i.e. the same
    seed at every probed s).  The returned estimate can never be worse
    than the bound at s_init because s_init is always evaluated.
    """
    _validate_positive(noise_var=noise_var, power=power)
    if evaluator == "saddlepoint":
        s_opt, log_eps, zeta, sat = _optimize_s_saddle(
            gain, gain_est, noise_var, power, np.float64(n), np.float64(rate),
            iterations=iterations, span=span,
        )
        le = float(log_eps[0])
        return ErrorProbEstimate(
            value=min(math.exp(le), 1.0),
            log_value=le,
            method="saddlepoint",
            s_used=float(s_opt[0]),
            zeta_used=float(zeta[0]),
            saturated=bool(sat[0]),
        )
    if evaluator != "rcus-mc":
        raise ValueError(f"unknown evaluator {evaluator!r}")

    def target(x):
        return rcus_mc_eps(gain, gain_est, noise_var, power, math.exp(x),
                           n, rate, mc_samples, seed, workers=workers)

    x0 = math.log(float(_default_s(gain, gain_est, noise_var, power)))
    best = target(x0)
    lnspan = math.log(span)
    a, b = x0 - lnspan, x0 + lnspan
    h = b - a
    c = a + _INVPHI2 * h
    d = a + _INVPHI * h
    fc, fd = target(c), target(d)
    for cand in (fc, fd):
        if cand.value < best.value:
            best = cand
    for _ in range(iterations):
        if fc.value < fd.value:
            b, d, fd = d, c, fc
            c = a + _INVPHI2 * (b - a)
            fc = target(c)
            if fc.value < best.value:
                best = fc
        else:
            a, c, fc = c, d, fd
            d = a + _INVPHI * (b - a)
            fd = target(d)
            if fd.value < best.value:
                best = fd
    return best


def batch_optimized_eps(gain, gain_est, noise_var, power, n, rate,
                        iterations: int = 60, span: float = 1e3):
    """Elementwise s-optimized saddlepoint bound over broadcast arrays.

    Inputs broadcast against each other; every element is an independent
    conditional channel with its own golden-section search, but each
    search step is evaluated across the whole batch at once, so this is
    the entry point for sweeping thousands of fading draws.  Returns
    (s_opt, log_eps, zeta, saturated) in the broadcast shape.
    """
    g, gh, nv, pw, n_b, rate_b = np.broadcast_arrays(
        np.asarray(gain, dtype=np.complex128),
        np.asarray(gain_est, dtype=np.complex128),
        np.asarray(noise_var, dtype=np.float64),
        np.asarray(power, dtype=np.float64),
        np.asarray(n, dtype=np.float64),
        np.asarray(rate, dtype=np.float64),
    )
    for name, arr in (("noise_var", nv), ("power", pw)):
        if not np.all(np.isfinite(arr) & (arr > 0.0)):
            raise ValueError(f"{name} must be finite and positive")
    if not (np.all(np.isfinite(g)) and np.all(np.isfinite(gh))):
        raise ValueError("gain and gain_est must be finite")
    shape = g.shape
    s_opt, log_eps, zeta, sat = _optimize_s_saddle(
        g.ravel(), gh.ravel(), nv.ravel(), pw.ravel(),
        n_b.ravel(), rate_b.ravel(), iterations=iterations, span=span,
    )
    return (s_opt.reshape(shape), log_eps.reshape(shape),
            zeta.reshape(shape), sat.reshape(shape))


def batch_saddle_log_eps(s, gain, gain_est, noise_var, power, n, rate):
    """Vectorized saddlepoint log-probability at fixed per-element s.

    The batched counterpart of saddlepoint_eps, for evaluating many
    channels under one externally chosen metric parameter (e.g. the
    shared-s averaging mode).  Returns (log_eps, zeta, saturated) in
    the broadcast shape of the channel arguments.
    """
    s_arr = np.asarray(s, dtype=np.float64)
    if not np.all(np.isfinite(s_arr) & (s_arr > 0.0)):
        raise ValueError("s must be finite and positive")
    ctx = _Ctx(s_arr, gain, gain_est, noise_var, power)
    log_eps, zeta, sat = _saddlepoint_log_eps(
        ctx, np.float64(n), np.float64(rate))
    return (log_eps.reshape(ctx.shape), zeta.reshape(ctx.shape),
            sat.reshape(ctx.shape))


def batch_normal_log_eps(s, gain, gain_est, noise_var, power, n, rate):
    """Vectorized log of the Gaussian approximation at fixed per-element s.

    Elementwise the same quantity normal_approx_eps reports: mean
    I_s = -kappa'(0), variance V_s = kappa''(0).  n and rate are scalars
    shared by the batch; the channel arguments broadcast.
    """
    ctx = _Ctx(s, gain, gain_est, noise_var, power)
    logm1 = log_codebook_mass(n, rate)
    _, k1, k2, _ = _cgf_terms(ctx, np.zeros(ctx.s.size))
    mean_gap = n * (-k1) - logm1
    with np.errstate(divide="ignore", invalid="ignore"):
        log_eps = np.asarray(log_ndtr(-mean_gap / np.sqrt(n * k2)))
    degenerate = k2 <= 0.0
    if np.any(degenerate):
        log_eps[degenerate] = np.where(mean_gap[degenerate] > 0.0, -np.inf, 0.0)
    return log_eps.reshape(ctx.shape)


def normal_approx_eps(ctx: SaddlepointContext, n, rate) -> ErrorProbEstimate:
    """Gaussian approximation Q((n I_s - log(m-1)) / sqrt(n V_s)).

    I_s = -kappa'(0) (the generalized mutual information for this s) and
    V_s = kappa''(0).
    """
    cvec = _ctx_from_public(ctx)
    _, k1, k2, _ = _cgf_terms(cvec, np.zeros(1))
    i_s = -float(k1[0])
    v_s = float(k2[0])
    return _normal_from_iv(i_s, v_s, n, rate, s_used=ctx.s)


def normal_approx_awgn(snr, n, rate) -> ErrorProbEstimate:
    """Gaussian approximation from the matched AWGN closed forms.

    I = log(1 + snr), V = 2 snr / (1 + snr), the large-array limits of
    the per-realization quantities at the matched metric s = 1/sigma2.
    """
    _validate_positive(snr=snr)
    i_s = math.log1p(snr)
    v_s = 2.0 * snr / (1.0 + snr)
    return _normal_from_iv(i_s, v_s, n, rate, s_used=None)


def _normal_from_iv(i_s, v_s, n, rate, s_used) -> ErrorProbEstimate:
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    logm1 = log_codebook_mass(n, rate)
    if v_s <= 0:
        value = 0.0 if n * i_s > logm1 else 1.0
        return ErrorProbEstimate(
            value=value, method="normal",
            log_value=0.0 if value == 1.0 else -math.inf, s_used=s_used,
        )
    arg = (n * i_s - logm1) / math.sqrt(n * v_s)
    log_eps = float(log_ndtr(-arg))
    return ErrorProbEstimate(
        value=math.exp(log_eps), log_value=log_eps,
        method="normal", s_used=s_used,
    )


def outage_eps(gain_samples, power, noise_var, rate) -> ErrorProbEstimate:
    """Empirical outage probability Pr[log(1 + rho |g|^2 / sigma2) < rate].

    gain_samples holds effective-channel draws; the returned interval is
    the Wilson 95% interval of the empirical fraction.
    """
    _validate_positive(noise_var=noise_var, power=power)
    g = np.asarray(gain_samples)
    g2 = np.abs(g) ** 2
    num = g2.size
    if num == 0:
        raise ValueError("gain_samples must be nonempty")
    hits = int(np.count_nonzero(np.log1p(power * g2 / noise_var) < rate))
    phat = hits / num
    lo, hi = wilson_interval(hits, num)
    return ErrorProbEstimate(
        value=phat,
        log_value=math.log(phat) if phat > 0 else -math.inf,
        method="outage", ci_low=lo, ci_high=hi, num_samples=num,
    )

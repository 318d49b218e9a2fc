"""Scenario orchestration over placements and fading draws.

Glues geometry, pilot estimation, combining, and the error-probability
kernel into the four experiment loops: a single-user antenna sweep, a
two-user angle sweep, a large-array diagnostic sweep, and the multicell
availability study.  Placements (or sweep grid points) are the outer
Monte-Carlo and parallelism unit, fading draws the inner one.  Every
random quantity comes from a named substream of the master seed, keyed
by placement index and chunk index but never by worker id, so a rerun
reproduces byte-identically on one worker and the worker count never
changes a single number.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from . import channel, kernel, pilots, processing
from .rng import complex_normal, substream

LN2 = math.log(2.0)

# fading draws processed per block; fixed so chunk-keyed substreams
# give the same draws regardless of totals requested
_DRAW_CHUNK = 100

# reference received SNR of the single-user study: 1 dB
_REF_SNR_DB = 1.0
_REF_SNR = 10.0 ** (_REF_SNR_DB / 10.0)
# antenna count at which the fixed-power mode hits the reference SNR
_REF_ANTENNAS = 320

DEFAULT_ANTENNA_GRID = (1, 2, 3, 4, 5, 8, 16, 32, 64, 128, 320)
DEFAULT_ASYMPTOTIC_GRID = (25, 50, 100, 200, 400)

_COMBINERS = ("mr", "mmse")
_DIRECTIONS = ("ul", "dl", "dl-perfect")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkConfig:
    """Static description of one cellular deployment.

    Powers and noise variances are in watts; angular quantities in
    radians.  The block structure is blocklength = pilot_length + two
    equal data halves, one per direction, with pilot_length always
    reuse_factor * users_per_cell.
    """

    num_cells: int = 4
    users_per_cell: int = 10
    num_antennas: int = 100
    cell_side: float = 75.0
    min_ue_distance: float = 5.0
    blocklength: int = 300
    reuse_factor: int = 4
    payload_bits: int = 160
    rho_ul: float = 0.01
    rho_dl: float = 0.01
    sigma2_ul: float = 10.0 ** -12.4
    sigma2_dl: float = 10.0 ** -12.4
    angular_spread: float = math.radians(25.0)
    combiner: str = "mmse"
    csi_at_ue: str = "hardening"
    correlation: str = "local-scattering"

    def __post_init__(self):
        for name in ("num_cells", "users_per_cell", "num_antennas",
                     "blocklength", "reuse_factor", "payload_bits"):
            val = getattr(self, name)
            if not isinstance(val, (int, np.integer)) or val < 1:
                raise ValueError(f"{name} must be a positive integer, got {val!r}")
        side = math.isqrt(self.num_cells)
        if side * side != self.num_cells:
            raise ValueError(
                f"num_cells must be a perfect square, got {self.num_cells}")
        for name in ("cell_side", "rho_ul", "rho_dl", "sigma2_ul", "sigma2_dl"):
            val = getattr(self, name)
            if not (math.isfinite(val) and val > 0.0):
                raise ValueError(f"{name} must be finite and > 0, got {val}")
        if not 0.0 < self.min_ue_distance < self.cell_side / 2.0:
            raise ValueError("min_ue_distance must lie in (0, cell_side/2)")
        if not 0.0 <= self.angular_spread < math.pi / 2.0:
            raise ValueError("angular_spread must lie in [0, pi/2)")
        if self.combiner not in _COMBINERS:
            raise ValueError(f"combiner must be one of {_COMBINERS}")
        if self.csi_at_ue not in ("hardening", "perfect"):
            raise ValueError("csi_at_ue must be 'hardening' or 'perfect'")
        if self.correlation not in ("local-scattering", "uncorrelated"):
            raise ValueError(
                "correlation must be 'local-scattering' or 'uncorrelated'")
        spare = self.blocklength - self.pilot_length
        if spare < 2:
            raise ValueError(
                f"blocklength {self.blocklength} leaves no data symbols "
                f"after {self.pilot_length} pilots")
        if spare % 2:
            raise ValueError(
                f"blocklength minus pilot length must be even, got {spare}")

    @property
    def pilot_length(self) -> int:
        return self.reuse_factor * self.users_per_cell

    @property
    def data_uses(self) -> int:
        """Channel uses per direction after the pilot block."""
        return (self.blocklength - self.pilot_length) // 2

    @property
    def rate_ul(self) -> float:
        """Uplink rate in nats per channel use."""
        return self.payload_bits * LN2 / self.data_uses

    @property
    def rate_dl(self) -> float:
        return self.payload_bits * LN2 / self.data_uses

    def geometry(self) -> channel.NetworkGeometry:
        return channel.NetworkGeometry.square_grid(
            self.num_cells, self.cell_side,
            min_ue_distance=self.min_ue_distance)

    def pilot_book(self) -> pilots.PilotBook:
        return pilots.build_pilot_book(
            self.users_per_cell, self.reuse_factor, self.pilot_length,
            self.num_cells)


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SingleUeCurve:
    """Error-probability columns of the single-user antenna sweep."""

    antennas: tuple
    power_mode: str
    blocklength: int
    rate_bits: float
    num_fading: int
    mc_samples_per_draw: int
    master_seed: int
    eps_saddle: np.ndarray
    eps_mc: np.ndarray
    mc_ci_low: np.ndarray
    mc_ci_high: np.ndarray
    eps_normal: np.ndarray
    eps_outage: np.ndarray
    outage_ci_low: np.ndarray
    outage_ci_high: np.ndarray
    avg_snr_db: np.ndarray
    eps_normal_limit: float | None


@dataclass(frozen=True)
class AngleSweepResult:
    """Per-user error probabilities along the interferer-angle grid.

    eps and eps_se map (direction, combiner) to arrays of shape
    (grid, users); user 0 sits at the fixed angle.
    """

    angle_grid_deg: np.ndarray
    fixed_angle_deg: float
    antennas: int
    shared_pilots: bool
    num_fading: int
    master_seed: int
    eps: dict
    eps_se: dict


@dataclass(frozen=True)
class AsymptoticLimits:
    """Large-array contamination diagnostics for the tracked user pair.

    signal_ratio and cross_ratio are the per-antenna traces of the
    estimate covariance and the estimate cross-covariance at each grid
    point; the squared entries at the largest grid point stand in for
    their limits.  prediction_eps is the error probability of the
    limiting single-input channel whose gain is signal_ratio and whose
    noise is the cross term treated as an independent Gaussian
    codebook, evaluated per grid point.
    """

    antennas: tuple
    signal_ratio: np.ndarray
    cross_ratio: np.ndarray
    mr_signal_limit: float
    mr_noise_limit: float
    prediction_eps: np.ndarray


@dataclass(frozen=True)
class AsymptoticSweepResult:
    antennas: tuple
    shared_pilots: bool
    num_fading: int
    master_seed: int
    eps: dict
    eps_se: dict
    limits: AsymptoticLimits


@dataclass(frozen=True)
class AvailabilityResult:
    """Per-link average error probabilities of the multicell study.

    link_eps maps (pilot_length, combiner, direction) to an array of
    shape (num_placements, cells, users) holding each link's error
    probability averaged over the fading draws.  direction is "ul",
    "dl" (channel-hardening CSI at the user), or "dl-perfect".
    """

    eps_target: float
    num_placements: int
    num_fading: int
    pilot_lengths: tuple
    combiners: tuple
    master_seed: int
    link_eps: dict

    def availability(self, pilot_length: int, combiner: str, direction: str,
                     eps_target: float | None = None) -> float:
        """Fraction of links whose average error meets the target."""
        target = self.eps_target if eps_target is None else eps_target
        eps = self.link_eps[(pilot_length, combiner, direction)]
        return float(np.mean(eps <= target))

    def eta_table(self, eps_target: float | None = None) -> dict:
        return {key: self.availability(*key, eps_target=eps_target)
                for key in sorted(self.link_eps)}


# ---------------------------------------------------------------------------
# shared machinery
# ---------------------------------------------------------------------------


def average_conditional_eps(draw_values,
                            method: str = "fading-average") -> kernel.ErrorProbEstimate:
    """Average per-draw conditional error probabilities with a CLT CI.

    The draws are deterministic conditional values, so the only Monte
    Carlo noise is over the fading; the interval is the normal one on
    the across-draw mean, clipped to [0, 1].  A single draw (or a
    constant batch) collapses to that value with a zero-width interval.
    """
    vals = np.clip(np.asarray(draw_values, dtype=np.float64), 0.0, 1.0)
    if vals.ndim != 1 or vals.size == 0:
        raise ValueError("draw_values must be a nonempty 1-D array")
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
    return kernel.ErrorProbEstimate(
        value=mean,
        log_value=math.log(mean) if mean > 0.0 else -math.inf,
        method=method,
        ci_low=max(mean - 1.96 * se, 0.0),
        ci_high=min(mean + 1.96 * se, 1.0),
        num_samples=vals.size,
    )


def _correlation_bundle(config: NetworkConfig, placement: channel.UEPlacement):
    """Correlation entries and synthesis factors, (L, K, L, M, M) each."""
    cells, users = placement.num_cells, placement.users_per_cell
    m = config.num_antennas
    corr = np.empty((cells, users, cells, m, m), dtype=np.complex128)
    factors = np.empty_like(corr)
    for ue_cell in range(cells):
        for ue in range(users):
            for bs in range(cells):
                gain_db = channel.pathloss_db(
                    placement.distances[ue_cell, ue, bs])
                beta = 10.0 ** (gain_db / 10.0)
                if config.correlation == "uncorrelated":
                    cm = channel.uncorrelated_correlation(m, beta)
                else:
                    # honors MIMOFBL_CACHE_DIR; plain synthesis without it
                    cm = channel.cached_local_scattering(
                        m, placement.angles[ue_cell, ue, bs],
                        config.angular_spread, beta)
                corr[ue_cell, ue, bs] = cm.entries
                factors[ue_cell, ue, bs] = cm.sqrt_factor()
    return corr, factors


def _draw_block(factors: np.ndarray, rng, count: int) -> np.ndarray:
    """count channel vectors per (cell, user, bs) triple.

    Returns (count, cells, users, cells, M); links are independent, each
    colored by its own factor.
    """
    cells, users, bss, m = factors.shape[:4]
    triples = cells * users * bss
    w = complex_normal(rng, (count, cells, users, bss, m))
    flat_w = w.reshape(count, triples, m).transpose(1, 0, 2)
    flat_f = factors.reshape(triples, m, m)
    out = np.matmul(flat_w, flat_f.transpose(0, 2, 1))
    return out.transpose(1, 0, 2).reshape(count, cells, users, bss, m)


def _despread_pilots(h_bs: np.ndarray, book: pilots.PilotBook, rho_ul: float,
                     sigma2_ul: float, rng) -> dict:
    """Despread pilot statistic per sequence index at one base station.

    Synthesized directly as sqrt(rho) * length * (sum of member
    channels) plus CN(0, length * sigma2) noise; identical in law to
    despreading the full received block because the sequence family is
    orthogonal with squared norm equal to its length, which also makes
    the despread noise independent across sequences.  h_bs has shape
    (draws, cells, users, M).
    """
    amp = math.sqrt(rho_ul) * book.length
    out = {}
    for seq in np.unique(book.assignments):
        members = book.assignments == seq
        sig = amp * h_bs[:, members].sum(axis=1)
        sig += complex_normal(rng, sig.shape, book.length * sigma2_ul)
        out[int(seq)] = sig
    return out


def _estimates_from_despread(despread: dict, estimator: np.ndarray,
                             assignments: np.ndarray,
                             scope: np.ndarray) -> np.ndarray:
    """Channel estimates for the flagged (cell, user) pairs.

    estimator is the (cells, users, M, M) bank from the estimation
    statistics; entries outside scope stay zero and must not be read.
    """
    draws = next(iter(despread.values())).shape[0]
    cells, users, m = estimator.shape[:3]
    est = np.zeros((draws, cells, users, m), dtype=np.complex128)
    for ue_cell, ue in np.argwhere(scope):
        d = despread[int(assignments[ue_cell, ue])]
        est[:, ue_cell, ue] = d @ estimator[ue_cell, ue].T
    return est


def _combine(est_bs: np.ndarray, own_cell: int, combiner: str,
             regularizer: np.ndarray | None) -> np.ndarray:
    """Receive combiners for the BS's own users: (draws, users, M)."""
    if combiner == "mr":
        return processing.mr_combiner(est_bs[:, own_cell])
    draws, cells, users, m = est_bs.shape
    u_all = processing.mmse_combiners(
        est_bs.reshape(draws, cells * users, m), regularizer)
    lo = own_cell * users
    return u_all[:, lo:lo + users]


def _uplink_effective(u: np.ndarray, h_bs: np.ndarray, est_own: np.ndarray,
                      own_cell: int, rho_ul: float, sigma2_ul: float):
    """Effective scalar channels of one BS's own users, arrays (draws, K)."""
    draws, cells, users, m = h_bs.shape
    h_flat = h_bs.reshape(draws, cells * users, m)
    cross = np.einsum("dkm,dum->dku", u.conj(), h_flat)
    own_col = own_cell * users + np.arange(users)
    rows = np.arange(users)
    gain = cross[:, rows, own_col]
    gain_est = np.einsum("dkm,dkm->dk", u.conj(), est_own)
    cross2 = cross.real ** 2 + cross.imag ** 2
    interference = cross2.sum(axis=2) - cross2[:, rows, own_col]
    u_norm2 = np.einsum("dkm,dkm->dk", u.conj(), u).real
    noise = sigma2_ul * u_norm2 + rho_ul * interference
    return gain, gain_est, noise


def _downlink_effective(w_all: np.ndarray, h_conj_by_bs: np.ndarray,
                        rho_dl: float, sigma2_dl: float):
    """Effective scalar channels at every user terminal.

    w_all: (draws, cells, users, M) unit-power precoders.
    h_conj_by_bs: conjugated channels grouped by transmitting BS,
    (draws, cells_bs, cells*users, M) with the user axis (cell, user)
    row-major.  Returns gain and noise arrays of shape
    (draws, cells, users).
    """
    draws, cells, users, m = w_all.shape
    # cross[d, bs, target, i] = h_target^H w_{bs,i}
    cross = np.matmul(h_conj_by_bs, w_all.transpose(0, 1, 3, 2))
    cross = cross.reshape(draws, cells, cells, users, users)
    cross = cross.transpose(0, 2, 3, 1, 4)  # (d, tgt cell, tgt ue, bs, i)
    cross2 = cross.real ** 2 + cross.imag ** 2
    cc = np.arange(cells)[:, None]
    uu = np.arange(users)[None, :]
    gain = cross[:, cc, uu, cc, uu]
    own2 = gain.real ** 2 + gain.imag ** 2
    noise = sigma2_dl + rho_dl * (cross2.sum(axis=(3, 4)) - own2)
    return gain, noise


def _placement_study(config: NetworkConfig, placement: channel.UEPlacement,
                     books: dict, combos, num_fading: int, num_hardening: int,
                     master_seed: int, stream_tag: tuple) -> dict:
    """Raw effective-channel arrays for one placement.

    combos is an iterable of (pilot_length, combiner, direction)
    triples; the result maps each to (gain, gain_est, noise_var), all
    shaped (num_fading, cells, users).  Channel draws are shared by
    every combo (common random numbers across pilot lengths and
    combiners); pilot noise is keyed by pilot length; the downlink
    hardening phase runs on streams disjoint from the evaluation ones,
    so uplink numbers do not depend on whether a downlink combo is
    requested.
    """
    combos = sorted(set(combos))
    cells, users = config.num_cells, config.users_per_cell
    if num_fading < 1:
        raise ValueError("num_fading must be >= 1")
    for npil, comb, direction in combos:
        if npil not in books:
            raise ValueError(f"no pilot book for pilot length {npil}")
        if books[npil].length != npil:
            raise ValueError("pilot book length does not match its key")
        if comb not in _COMBINERS or direction not in _DIRECTIONS:
            raise ValueError(f"unknown combo {(npil, comb, direction)!r}")
    corr, factors = _correlation_bundle(config, placement)

    pil_lens = sorted({c[0] for c in combos})
    mmse_lens = {c[0] for c in combos if c[1] == "mmse"}
    estimators = {}
    regularizers = {}
    scopes = {}
    for npil in pil_lens:
        book = books[npil]
        # MR touches only the serving cell's estimates; MMSE all of them
        scopes[npil] = np.full((cells, users), npil in mmse_lens, dtype=bool)
        estimators[npil] = {}
        for bs in range(cells):
            stats = pilots.estimation_statistics(
                corr[:, :, bs], book, config.rho_ul, config.sigma2_ul)
            estimators[npil][bs] = stats.estimator
            if npil in mmse_lens:
                regularizers[npil, bs] = processing.combiner_regularizer(
                    stats.error_cov, config.rho_ul, config.sigma2_ul)

    directions_by_pair = {}
    for npil, comb, direction in combos:
        directions_by_pair.setdefault((npil, comb), set()).add(direction)
    hard_pairs = sorted(pair for pair, dirs in directions_by_pair.items()
                        if dirs & {"dl", "dl-perfect"})
    if hard_pairs and num_hardening < 1:
        raise ValueError("downlink combos need num_hardening >= 1")

    def estimates_at(h, bs, npil, rng):
        book = books[npil]
        scope = scopes[npil].copy()
        scope[bs] = True  # serving cell always estimated
        despread = _despread_pilots(
            h[:, :, :, bs], book, config.rho_ul, config.sigma2_ul, rng)
        return _estimates_from_despread(
            despread, estimators[npil][bs], book.assignments, scope)

    # hardening phase: mean squared combiner norm and mean own-channel
    # projection, both per (pilot length, combiner) and per link
    norm2_sum = {pair: np.zeros((cells, users)) for pair in hard_pairs}
    proj_sum = {pair: np.zeros((cells, users), dtype=np.complex128)
                for pair in hard_pairs}
    done, cidx = 0, 0
    while done < num_hardening and hard_pairs:
        blk = min(_DRAW_CHUNK, num_hardening - done)
        rng_ch = substream(master_seed, *stream_tag, "hardening-fading", cidx)
        h = _draw_block(factors, rng_ch, blk)
        for npil in sorted({p for p, _ in hard_pairs}):
            rng_np = substream(
                master_seed, *stream_tag, "hardening-pilot", cidx, npil)
            for bs in range(cells):
                est = estimates_at(h, bs, npil, rng_np)
                for pair in hard_pairs:
                    if pair[0] != npil:
                        continue
                    u = _combine(est, bs, pair[1],
                                 regularizers.get((npil, bs)))
                    norm2_sum[pair][bs] += np.einsum(
                        "dkm,dkm->k", u.conj(), u).real
                    # downlink gain is h^H w: accumulate h^H u
                    proj_sum[pair][bs] += np.einsum(
                        "dkm,dkm->k", h[:, bs, :, bs].conj(), u)
        done += blk
        cidx += 1

    norm_mean = {pair: norm2_sum[pair] / num_hardening for pair in hard_pairs}
    gain_hard = {pair: proj_sum[pair] / num_hardening
                 / np.sqrt(norm_mean[pair]) for pair in hard_pairs}

    parts = {combo: ([], [], []) for combo in combos}
    any_dl = bool(hard_pairs)
    done, cidx = 0, 0
    while done < num_fading:
        blk = min(_DRAW_CHUNK, num_fading - done)
        rng_ch = substream(master_seed, *stream_tag, "fading", cidx)
        h = _draw_block(factors, rng_ch, blk)
        h_conj_by_bs = None
        if any_dl:
            h_conj_by_bs = np.ascontiguousarray(
                h.conj().transpose(0, 3, 1, 2, 4)).reshape(
                    blk, cells, cells * users, config.num_antennas)
        for npil in pil_lens:
            rng_np = substream(master_seed, *stream_tag, "pilot", cidx, npil)
            pairs_here = sorted(pair for pair in directions_by_pair
                                if pair[0] == npil)
            u_banks = {pair: np.empty(
                (blk, cells, users, config.num_antennas),
                dtype=np.complex128) for pair in pairs_here}
            for bs in range(cells):
                est = estimates_at(h, bs, npil, rng_np)
                for pair in pairs_here:
                    u = _combine(est, bs, pair[1],
                                 regularizers.get((npil, bs)))
                    u_banks[pair][:, bs] = u
                    if "ul" in directions_by_pair[pair]:
                        g, ge, nv = _uplink_effective(
                            u, h[:, :, :, bs], est[:, bs], bs,
                            config.rho_ul, config.sigma2_ul)
                        gs, ges, nvs = parts[(npil, pair[1], "ul")]
                        if bs == 0:
                            gs.append(np.empty((blk, cells, users), complex))
                            ges.append(np.empty((blk, cells, users), complex))
                            nvs.append(np.empty((blk, cells, users)))
                        gs[-1][:, bs] = g
                        ges[-1][:, bs] = ge
                        nvs[-1][:, bs] = nv
            for pair in pairs_here:
                dl_dirs = directions_by_pair[pair] & {"dl", "dl-perfect"}
                if not dl_dirs:
                    continue
                w_all = u_banks[pair] / np.sqrt(
                    norm_mean[pair])[None, :, :, None]
                g, nv = _downlink_effective(
                    w_all, h_conj_by_bs, config.rho_dl, config.sigma2_dl)
                if "dl" in dl_dirs:
                    gs, ges, nvs = parts[(pair[0], pair[1], "dl")]
                    gs.append(g)
                    ges.append(np.broadcast_to(
                        gain_hard[pair], g.shape).copy())
                    nvs.append(nv)
                if "dl-perfect" in dl_dirs:
                    gs, ges, nvs = parts[(pair[0], pair[1], "dl-perfect")]
                    gs.append(g)
                    ges.append(g.copy())
                    nvs.append(nv)
        done += blk
        cidx += 1

    return {combo: (np.concatenate(parts[combo][0]),
                    np.concatenate(parts[combo][1]),
                    np.concatenate(parts[combo][2])) for combo in combos}


def _combo_kernel_eps(config: NetworkConfig, study: dict, combo) -> np.ndarray:
    """Per-draw s-optimized error probabilities, (draws, cells, users)."""
    gain, gain_est, noise = study[combo]
    rho = config.rho_ul if combo[2] == "ul" else config.rho_dl
    rate = config.rate_ul if combo[2] == "ul" else config.rate_dl
    _, log_eps, _, _ = kernel.batch_optimized_eps(
        gain, gain_est, noise, rho, config.data_uses, rate)
    return np.minimum(np.exp(log_eps), 1.0)


# ---------------------------------------------------------------------------
# single-user antenna sweep
# ---------------------------------------------------------------------------


def _single_ue_mc(gain, s, rho, blocklength, rate, samples_per_draw, rng):
    """Joint fading/noise Monte Carlo of the random-coding bound.

    For each fading draw, samples_per_draw codebook transmissions are
    simulated at that draw's metric parameter; the per-draw error
    fractions are returned so the caller can form a clustered CI.
    """
    logm1 = kernel.log_codebook_mass(blocklength, rate)
    draws = gain.size
    hits = np.empty(draws, dtype=np.int64)
    slab = max(1, int(4_000_000 // (samples_per_draw * blocklength)))
    for lo in range(0, draws, slab):
        hi = min(lo + slab, draws)
        g = gain[lo:hi, None, None]
        ss = s[lo:hi, None, None]
        shape = (hi - lo, samples_per_draw, blocklength)
        q = complex_normal(rng, shape, rho)
        noise = complex_normal(rng, shape, 1.0)
        v = g * q + noise
        one_plus = 1.0 + ss * rho * g * g
        dens = (-ss * (noise.real ** 2 + noise.imag ** 2)
                + (ss / one_plus) * (v.real ** 2 + v.imag ** 2)
                + np.log1p(ss * rho * g * g))
        total = dens.sum(axis=2)
        slack = np.log(rng.uniform(size=total.shape))
        hits[lo:hi] = np.count_nonzero(total + slack <= logm1, axis=1)
    return hits


def run_single_ue(antennas=DEFAULT_ANTENNA_GRID, power_mode: str = "scaled",
                  blocklength: int = 100, rate_bits: float = 0.6,
                  num_fading: int = 10_000, master_seed: int = 0,
                  mc_samples_per_draw: int = 100) -> SingleUeCurve:
    """Single-user MR sweep over the antenna count, perfect CSI.

    The channel is isotropic with unit per-antenna gain and unit noise
    variance, so the power alone carries the SNR: "scaled" divides the
    reference power by the antenna count (constant array gain), "fixed"
    keeps it at the value that reaches the reference SNR at 320
    antennas.  Per draw, the effective channel is the channel norm with
    itself as estimate; four estimators are averaged over the draws:
    the s-optimized saddlepoint bound, a joint Monte Carlo of the
    random-coding bound at the per-draw s, the Gaussian approximation
    at the matched metric, and the outage probability.
    """
    if power_mode not in ("scaled", "fixed"):
        raise ValueError("power_mode must be 'scaled' or 'fixed'")
    if num_fading < 2:
        raise ValueError("num_fading must be >= 2")
    antennas = tuple(int(m) for m in antennas)
    if any(m < 1 for m in antennas):
        raise ValueError("antenna counts must be positive")
    rate = rate_bits * LN2

    cols = {name: np.empty(len(antennas)) for name in
            ("saddle", "mc", "mc_lo", "mc_hi", "normal",
             "outage", "out_lo", "out_hi", "snr")}
    for idx, m in enumerate(antennas):
        rho = _REF_SNR / m if power_mode == "scaled" else _REF_SNR / _REF_ANTENNAS
        rng = substream(master_seed, "single-ue", power_mode, m)
        h = complex_normal(rng, (num_fading, m))
        gain = np.linalg.norm(h, axis=1)

        s_opt, log_eps, _, _ = kernel.batch_optimized_eps(
            gain, gain, 1.0, rho, blocklength, rate)
        cols["saddle"][idx] = np.minimum(np.exp(log_eps), 1.0).mean()

        # matched metric s = 1/sigma2, whose limit normal_approx_awgn is;
        # reusing the tail-optimized s would mask the approximation error
        log_norm = kernel.batch_normal_log_eps(
            np.ones_like(gain), gain, gain, 1.0, rho, blocklength, rate)
        cols["normal"][idx] = np.minimum(np.exp(log_norm), 1.0).mean()

        out = kernel.outage_eps(gain, rho, 1.0, rate)
        cols["outage"][idx] = out.value
        cols["out_lo"][idx] = out.ci_low
        cols["out_hi"][idx] = out.ci_high

        rng_mc = substream(master_seed, "single-ue-mc", power_mode, m)
        hits = _single_ue_mc(gain, s_opt, rho, blocklength, rate,
                             mc_samples_per_draw, rng_mc)
        fractions = hits / mc_samples_per_draw
        mc_mean = float(fractions.mean())
        cols["mc"][idx] = mc_mean
        if hits.sum() >= 5:
            se = fractions.std(ddof=1) / math.sqrt(num_fading)
            cols["mc_lo"][idx] = max(mc_mean - 1.96 * se, 0.0)
            cols["mc_hi"][idx] = min(mc_mean + 1.96 * se, 1.0)
        else:
            # too few errors for a cluster CI; fall back to the pooled
            # binomial interval, which is what dominates anyway
            lo, hi = kernel.wilson_interval(
                int(hits.sum()), num_fading * mc_samples_per_draw)
            cols["mc_lo"][idx], cols["mc_hi"][idx] = lo, hi

        # in dB space so the reference point is exact, not a float round
        # trip through rho; scaled mode holds the reference at every M
        cols["snr"][idx] = _REF_SNR_DB + (
            0.0 if power_mode == "scaled"
            else 10.0 * math.log10(m / _REF_ANTENNAS))

    limit = None
    if power_mode == "scaled":
        limit = kernel.normal_approx_awgn(_REF_SNR, blocklength, rate).value
    return SingleUeCurve(
        antennas=antennas, power_mode=power_mode, blocklength=blocklength,
        rate_bits=rate_bits, num_fading=num_fading,
        mc_samples_per_draw=mc_samples_per_draw, master_seed=master_seed,
        eps_saddle=cols["saddle"], eps_mc=cols["mc"],
        mc_ci_low=cols["mc_lo"], mc_ci_high=cols["mc_hi"],
        eps_normal=cols["normal"], eps_outage=cols["outage"],
        outage_ci_low=cols["out_lo"], outage_ci_high=cols["out_hi"],
        avg_snr_db=cols["snr"], eps_normal_limit=limit)


# ---------------------------------------------------------------------------
# two-user single-cell studies
# ---------------------------------------------------------------------------


def two_ue_config(antennas: int = 100) -> NetworkConfig:
    """Single-cell two-user deployment with orthogonal-capable pilots."""
    return NetworkConfig(num_cells=1, users_per_cell=2,
                         num_antennas=antennas, reuse_factor=1)


def _two_ue_placement(config: NetworkConfig, angles_deg,
                      distance: float) -> channel.UEPlacement:
    """Both users at the same range, at explicit angles from the BS."""
    center = config.cell_side / 2.0
    rad = np.radians(np.asarray(angles_deg, dtype=np.float64))
    pos = np.stack([center + distance * np.cos(rad),
                    center + distance * np.sin(rad)], axis=-1)
    return channel.UEPlacement(
        positions=pos[None, :, :],
        distances=np.full((1, rad.size, 1), float(distance)),
        angles=rad[None, :, None])


def _two_ue_point(config, angles_deg, distance, shared_pilots, combos,
                  num_fading, num_hardening, master_seed, stream_tag):
    placement = _two_ue_placement(config, angles_deg, distance)
    book = pilots.two_user_book(shared_pilots)
    study = _placement_study(config, placement, {2: book}, combos,
                             num_fading, num_hardening, master_seed,
                             stream_tag)
    means, ses = {}, {}
    for combo in combos:
        eps = _combo_kernel_eps(config, study, combo)[:, 0, :]
        means[combo] = eps.mean(axis=0)
        ses[combo] = eps.std(axis=0, ddof=1) / math.sqrt(eps.shape[0])
    return means, ses


def _angle_task(args):
    (config, fixed_deg, probe_deg, distance, shared, combos,
     num_fading, num_hardening, master_seed, idx) = args
    return _two_ue_point(config, (fixed_deg, probe_deg), distance, shared,
                         combos, num_fading, num_hardening, master_seed,
                         ("angle", idx))


def run_two_ue_angle_sweep(config: NetworkConfig | None = None,
                           fixed_angle_deg: float = 30.0,
                           angle_grid_deg=None, shared_pilots: bool = True,
                           num_fading: int = 1000, num_hardening: int = 1000,
                           ue_distance: float = 36.4, master_seed: int = 0,
                           workers: int = 1) -> AngleSweepResult:
    """Error probability of two co-cell users versus their angular gap.

    User 0's nominal angle stays fixed while user 1 walks the grid;
    both sit at the same range.  All four (direction, combiner)
    curves are produced in one pass per grid point; the downlink uses
    the config's CSI mode.
    """
    config = config or two_ue_config()
    if (config.num_cells, config.users_per_cell) != (1, 2):
        raise ValueError("angle sweep needs a single cell with two users")
    if config.pilot_length != 2:
        raise ValueError("angle sweep expects a two-symbol pilot block")
    grid = (np.linspace(-20.0, 80.0, 101) if angle_grid_deg is None
            else np.asarray(angle_grid_deg, dtype=np.float64))
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("angle grid must be a nonempty 1-D array")

    dl_dir = "dl" if config.csi_at_ue == "hardening" else "dl-perfect"
    combos = [(2, comb, direction) for comb in _COMBINERS
              for direction in ("ul", dl_dir)]
    tasks = [(config, fixed_angle_deg, float(a), ue_distance, shared_pilots,
              combos, num_fading, num_hardening, master_seed, i)
             for i, a in enumerate(grid)]
    results = _ordered_map(_angle_task, tasks, workers)

    eps = {("ul" if c[2] == "ul" else "dl", c[1]):
           np.empty((grid.size, 2)) for c in combos}
    eps_se = {key: np.empty((grid.size, 2)) for key in eps}
    for i, (means, ses) in enumerate(results):
        for combo in combos:
            key = ("ul" if combo[2] == "ul" else "dl", combo[1])
            eps[key][i] = means[combo]
            eps_se[key][i] = ses[combo]
    return AngleSweepResult(
        angle_grid_deg=grid, fixed_angle_deg=fixed_angle_deg,
        antennas=config.num_antennas, shared_pilots=shared_pilots,
        num_fading=num_fading, master_seed=master_seed, eps=eps,
        eps_se=eps_se)


def _asymptotic_task(args):
    (config, angles_deg, distance, shared, combos, num_fading,
     num_hardening, master_seed, m) = args
    cfg = replace(config, num_antennas=m)
    means, ses = _two_ue_point(cfg, angles_deg, distance, shared, combos,
                               num_fading, num_hardening, master_seed,
                               ("asymptotic", m))

    placement = _two_ue_placement(cfg, angles_deg, distance)
    corr, _ = _correlation_bundle(cfg, placement)
    book = pilots.two_user_book(shared)
    stats = pilots.estimation_statistics(
        corr[:, :, 0], book, cfg.rho_ul, cfg.sigma2_ul)
    signal_ratio = float(np.trace(stats.phi[0, 0]).real) / m
    if shared:
        cross_ratio = abs(np.trace(stats.upsilon(0, 0, 0, 1))) / m
        prediction = kernel.optimize_s(
            signal_ratio, signal_ratio, cfg.rho_ul * cross_ratio ** 2,
            cfg.rho_ul, cfg.data_uses, cfg.rate_ul).value
    else:
        # orthogonal pilots leave no cross term; the limit channel is
        # noiseless and the limiting error probability is exactly zero
        cross_ratio = 0.0
        prediction = 0.0
    return means, ses, signal_ratio, cross_ratio, prediction


def run_asymptotic_sweep(config: NetworkConfig | None = None,
                         antennas=DEFAULT_ASYMPTOTIC_GRID,
                         shared_pilots: bool = True,
                         angles_deg=(30.0, 40.0), ue_distance: float = 36.4,
                         num_fading: int = 2000, num_hardening: int = 1000,
                         master_seed: int = 0,
                         workers: int = 1) -> AsymptoticSweepResult:
    """Two-user error probability versus antenna count, plus limits.

    Tracks user 0.  Alongside the Monte-Carlo curves, computes the
    per-antenna estimate-covariance traces whose limits govern the
    large-array behaviour, and the error probability of the limiting
    single-input channel they predict under pilot sharing.
    """
    config = config or two_ue_config()
    if (config.num_cells, config.users_per_cell) != (1, 2):
        raise ValueError("asymptotic sweep needs a single cell, two users")
    antennas = tuple(int(m) for m in antennas)
    if any(m < 1 for m in antennas) or list(antennas) != sorted(antennas):
        raise ValueError("antenna grid must be positive and ascending")

    dl_dir = "dl" if config.csi_at_ue == "hardening" else "dl-perfect"
    combos = [(2, comb, direction) for comb in _COMBINERS
              for direction in ("ul", dl_dir)]
    tasks = [(config, tuple(angles_deg), ue_distance, shared_pilots, combos,
              num_fading, num_hardening, master_seed, m) for m in antennas]
    results = _ordered_map(_asymptotic_task, tasks, workers)

    eps = {("ul" if c[2] == "ul" else "dl", c[1]):
           np.empty(len(antennas)) for c in combos}
    eps_se = {key: np.empty(len(antennas)) for key in eps}
    signal_ratio = np.empty(len(antennas))
    cross_ratio = np.empty(len(antennas))
    prediction = np.empty(len(antennas))
    for i, (means, ses, sig, crs, pred) in enumerate(results):
        for combo in combos:
            key = ("ul" if combo[2] == "ul" else "dl", combo[1])
            eps[key][i] = means[combo][0]
            eps_se[key][i] = ses[combo][0]
        signal_ratio[i] = sig
        cross_ratio[i] = crs
        prediction[i] = pred
    limits = AsymptoticLimits(
        antennas=antennas, signal_ratio=signal_ratio,
        cross_ratio=cross_ratio,
        mr_signal_limit=float(signal_ratio[-1]) ** 2,
        mr_noise_limit=float(cross_ratio[-1]) ** 2,
        prediction_eps=prediction)
    return AsymptoticSweepResult(
        antennas=antennas, shared_pilots=shared_pilots,
        num_fading=num_fading, master_seed=master_seed, eps=eps,
        eps_se=eps_se, limits=limits)


# ---------------------------------------------------------------------------
# multicell availability
# ---------------------------------------------------------------------------


def _availability_task(args):
    (config, books_spec, combos, num_fading, num_hardening, master_seed,
     pidx) = args
    books = {npil: pilots.build_pilot_book(
        config.users_per_cell, npil // config.users_per_cell, npil,
        config.num_cells) for npil in books_spec}
    rng = substream(master_seed, "placement", pidx)
    placement = channel.place_ues(
        config.geometry(), config.users_per_cell, rng)
    study = _placement_study(config, placement, books, combos, num_fading,
                             num_hardening, master_seed, ("avail", pidx))
    return {combo: _combo_kernel_eps(config, study, combo).mean(axis=0)
            for combo in combos}


def run_network_availability(config: NetworkConfig | None = None,
                             eps_target: float = 1e-5,
                             num_placements: int = 500,
                             num_fading: int = 1000,
                             num_hardening: int = 1000,
                             reuse_factors=(1, 2, 4, 8),
                             combiners=_COMBINERS,
                             directions=("ul", "dl"),
                             include_perfect_csi_dl: bool = True,
                             mmse_reuse_factors=None,
                             master_seed: int = 0,
                             workers: int = 1) -> AvailabilityResult:
    """Fraction of links meeting a target error over random placements.

    For every placement, every link's conditional error probability is
    averaged over the fading draws; a link counts as available when
    that average meets the target.  The sweep covers the requested
    pilot reuse factors and combiners for both directions, plus a
    perfect-CSI downlink series per combiner.  mmse_reuse_factors
    optionally restricts the MMSE part of the sweep to a subset of the
    reuse factors (the MR part always covers all of them).
    """
    config = config or NetworkConfig()
    if num_placements < 1 or num_fading < 1:
        raise ValueError("num_placements and num_fading must be >= 1")
    if not 0.0 <= eps_target <= 1.0:
        raise ValueError("eps_target must lie in [0, 1]")
    combiners = tuple(combiners)
    directions = tuple(directions)
    if not set(combiners) <= set(_COMBINERS):
        raise ValueError(f"combiners must be among {_COMBINERS}")
    if not set(directions) <= {"ul", "dl"}:
        raise ValueError("directions must be among ('ul', 'dl')")
    reuse_factors = tuple(sorted(set(int(f) for f in reuse_factors)))
    # replace() revalidates the block structure for each reuse factor
    variant = {f: replace(config, reuse_factor=f) for f in reuse_factors}
    if mmse_reuse_factors is None:
        mmse_reuse_factors = reuse_factors
    mmse_reuse_factors = tuple(sorted(set(int(f) for f in mmse_reuse_factors)))
    if not set(mmse_reuse_factors) <= set(reuse_factors):
        raise ValueError("mmse_reuse_factors must be a subset of reuse_factors")

    combos = []
    for f in reuse_factors:
        npil = variant[f].pilot_length
        for comb in combiners:
            if comb == "mmse" and f not in mmse_reuse_factors:
                continue
            for direction in directions:
                combos.append((npil, comb, direction))
            if "dl" in directions and include_perfect_csi_dl:
                combos.append((npil, comb, "dl-perfect"))
    combos = sorted(set(combos))
    books_spec = tuple(sorted({c[0] for c in combos}))

    tasks = [(config, books_spec, combos, num_fading, num_hardening,
              master_seed, p) for p in range(num_placements)]
    results = _ordered_map(_availability_task, tasks, workers)

    link_eps = {combo: np.stack([res[combo] for res in results])
                for combo in combos}
    return AvailabilityResult(
        eps_target=eps_target, num_placements=num_placements,
        num_fading=num_fading,
        pilot_lengths=books_spec, combiners=combiners,
        master_seed=master_seed, link_eps=link_eps)


# ---------------------------------------------------------------------------
# single-link probe
# ---------------------------------------------------------------------------


def per_link_eps(placement: channel.UEPlacement, fading_draws: int,
                 config: NetworkConfig, link, master_seed: int = 0,
                 num_hardening: int = 1000, s_mode: str = "per-draw",
                 evaluator: str = "saddlepoint",
                 mc_samples_per_draw: int = 20_000) -> kernel.ErrorProbEstimate:
    """Average conditional error probability of one link.

    link is (cell, user, direction) with direction "ul" or "dl"; the
    downlink follows the config's CSI mode.  s_mode "per-draw" puts a
    fresh metric-parameter search on every fading draw; "shared"
    optimizes once, on the draw with the median effective SNR, and
    evaluates the rest at that s (cheaper, never tighter).  evaluator
    "rcus-mc" replaces the per-draw saddlepoint value with a Monte
    Carlo of the random-coding bound at the per-draw s.
    """
    cell, user, direction = link
    if not (0 <= cell < config.num_cells
            and 0 <= user < config.users_per_cell):
        raise ValueError(f"link {link!r} outside the configured grid")
    if direction not in ("ul", "dl"):
        raise ValueError("link direction must be 'ul' or 'dl'")
    if s_mode not in ("per-draw", "shared"):
        raise ValueError("s_mode must be 'per-draw' or 'shared'")
    if evaluator not in ("saddlepoint", "rcus-mc"):
        raise ValueError("evaluator must be 'saddlepoint' or 'rcus-mc'")
    if fading_draws < 1:
        raise ValueError("fading_draws must be >= 1")

    dir_key = direction
    if direction == "dl" and config.csi_at_ue == "perfect":
        dir_key = "dl-perfect"
    combo = (config.pilot_length, config.combiner, dir_key)
    study = _placement_study(
        config, placement, {config.pilot_length: config.pilot_book()},
        [combo], fading_draws, num_hardening if direction == "dl" else 0,
        master_seed, ("link",))
    gain, gain_est, noise = (a[:, cell, user] for a in study[combo])
    rho = config.rho_ul if direction == "ul" else config.rho_dl
    rate = config.rate_ul if direction == "ul" else config.rate_dl
    n = config.data_uses

    s_opt, log_eps, _, _ = kernel.batch_optimized_eps(
        gain, gain_est, noise, rho, n, rate)
    if s_mode == "shared":
        snr = np.abs(gain) ** 2 / noise
        pick = int(np.argsort(snr)[snr.size // 2])
        s_shared = float(s_opt[pick])
        log_eps, _, _ = kernel.batch_saddle_log_eps(
            np.full(gain.shape, s_shared), gain, gain_est, noise, rho,
            n, rate)
        method = "saddlepoint-shared-s-average"
    else:
        method = "saddlepoint-average"

    if evaluator == "rcus-mc":
        values = np.empty(fading_draws)
        for i in range(fading_draws):
            est = kernel.rcus_mc_eps(
                gain[i], gain_est[i], noise[i], rho, float(s_opt[i]), n,
                rate, mc_samples_per_draw,
                seed=int(substream(master_seed, "link-mc", i).integers(2**63)))
            values[i] = est.value
        return average_conditional_eps(values, method="rcus-mc-average")

    return average_conditional_eps(
        np.minimum(np.exp(log_eps), 1.0), method=method)


# ---------------------------------------------------------------------------
# parallel plumbing
# ---------------------------------------------------------------------------


def _ordered_map(fn, tasks, workers: int):
    """Run tasks in order; results identical for any worker count."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if workers == 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, tasks))

import math
from dataclasses import replace

import numpy as np
import pytest

from mimofbl import channel, harness, kernel, pilots, processing
from mimofbl.rng import complex_normal, substream


def tiny_config(**kw):
    base = dict(num_cells=1, users_per_cell=2, num_antennas=8,
                blocklength=24, reuse_factor=1, payload_bits=12)
    base.update(kw)
    return harness.NetworkConfig(**base)


def tiny_multicell(**kw):
    base = dict(num_cells=4, users_per_cell=2, num_antennas=8,
                blocklength=24, reuse_factor=1, payload_bits=12)
    base.update(kw)
    return harness.NetworkConfig(**base)


# ---------------------------------------------------------------------------
# configuration type
# ---------------------------------------------------------------------------


def test_config_block_structure():
    cfg = harness.NetworkConfig()
    assert cfg.pilot_length == cfg.reuse_factor * cfg.users_per_cell
    assert cfg.data_uses == (cfg.blocklength - cfg.pilot_length) // 2
    expect = cfg.payload_bits * math.log(2.0) / cfg.data_uses
    assert cfg.rate_ul == pytest.approx(expect)
    assert cfg.rate_dl == pytest.approx(expect)


def test_config_rejects_bad_values():
    with pytest.raises(ValueError):
        harness.NetworkConfig(num_cells=3)
    with pytest.raises(ValueError):
        harness.NetworkConfig(blocklength=301)  # odd data remainder
    with pytest.raises(ValueError):
        harness.NetworkConfig(blocklength=40, reuse_factor=4)  # pilots eat it
    with pytest.raises(ValueError):
        harness.NetworkConfig(combiner="zf")
    with pytest.raises(ValueError):
        harness.NetworkConfig(csi_at_ue="genie")
    with pytest.raises(ValueError):
        harness.NetworkConfig(correlation="rayleigh")
    with pytest.raises(ValueError):
        harness.NetworkConfig(rho_ul=0.0)
    with pytest.raises(ValueError):
        harness.NetworkConfig(min_ue_distance=40.0)
    with pytest.raises(ValueError):
        harness.NetworkConfig(num_antennas=0)


def test_config_reuse_factor_sweepable():
    cfg = harness.NetworkConfig()
    for f in (1, 2, 4, 8):
        v = replace(cfg, reuse_factor=f)
        assert v.pilot_length == 10 * f
        assert 2 * v.data_uses + v.pilot_length == v.blocklength


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------


def test_average_constant_draws_collapses():
    est = harness.average_conditional_eps(np.full(50, 0.37))
    assert est.value == pytest.approx(0.37)
    assert est.ci_low == pytest.approx(0.37)
    assert est.ci_high == pytest.approx(0.37)
    assert est.num_samples == 50


def test_average_single_draw_zero_width():
    est = harness.average_conditional_eps(np.array([0.2]))
    assert est.value == pytest.approx(0.2)
    assert est.ci_high - est.ci_low == 0.0


def test_average_ci_covers_mean():
    rng = np.random.default_rng(3)
    vals = rng.uniform(0.0, 0.4, size=2000)
    est = harness.average_conditional_eps(vals)
    se = vals.std(ddof=1) / math.sqrt(vals.size)
    assert est.ci_low == pytest.approx(est.value - 1.96 * se)
    assert est.ci_high == pytest.approx(est.value + 1.96 * se)
    assert est.log_value == pytest.approx(math.log(est.value))


def test_average_rejects_bad_shapes():
    with pytest.raises(ValueError):
        harness.average_conditional_eps(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        harness.average_conditional_eps(np.array([]))


# ---------------------------------------------------------------------------
# despread pilot synthesis
# ---------------------------------------------------------------------------


def test_despread_matches_full_pilot_block_noiseless():
    # with the noise off, despreading the full received block must give
    # exactly what the synthesis shortcut produces
    cfg = tiny_multicell(reuse_factor=2)
    book = cfg.pilot_book()
    rng = np.random.default_rng(9)
    h = complex_normal(rng, (5, 4, 2, 8))
    y = pilots.received_pilot_signal(h, book, cfg.rho_ul, 0.0, rng)
    direct = harness._despread_pilots(h, book, cfg.rho_ul, 0.0,
                                      np.random.default_rng(0))
    for seq in np.unique(book.assignments):
        ref = np.einsum("dmp,p->dm", y, book.sequences[:, seq])
        assert np.allclose(direct[int(seq)], ref, atol=1e-9)


def test_despread_noise_moments():
    cfg = tiny_multicell()
    book = cfg.pilot_book()
    h = np.zeros((4000, 4, 2, 8), dtype=np.complex128)
    out = harness._despread_pilots(h, book, cfg.rho_ul, cfg.sigma2_ul,
                                   np.random.default_rng(11))
    var = book.length * cfg.sigma2_ul
    seqs = sorted(out)
    for seq in seqs:
        n = out[seq]
        sample = np.mean(np.abs(n) ** 2)
        assert sample == pytest.approx(var, rel=0.05)
    # despread noise must be uncorrelated across sequences
    a, b = out[seqs[0]].ravel(), out[seqs[1]].ravel()
    corr = np.vdot(a, b) / math.sqrt(np.vdot(a, a).real * np.vdot(b, b).real)
    assert abs(corr) < 0.05


# ---------------------------------------------------------------------------
# engine versus the scalar chain
# ---------------------------------------------------------------------------


def _scalar_reference(cfg, placement, draws, seed):
    """Per-draw effective channels computed link by link with the
    scalar pilot/combining functions, on independent randomness."""
    book = cfg.pilot_book()
    cms = []
    for u in range(2):
        beta = 10.0 ** (channel.pathloss_db(
            placement.distances[0, u, 0]) / 10.0)
        cms.append(channel.local_scattering_correlation(
            cfg.num_antennas, placement.angles[0, u, 0],
            cfg.angular_spread, beta))
    corr = np.stack([cm.entries for cm in cms])[None]
    stats = pilots.estimation_statistics(corr, book, cfg.rho_ul,
                                         cfg.sigma2_ul)
    z = processing.combiner_regularizer(stats.error_cov, cfg.rho_ul,
                                        cfg.sigma2_ul)
    rng = np.random.default_rng(seed)
    rows = {comb: {f: [] for f in ("ge", "g2", "nv", "mis")}
            for comb in ("mr", "mmse")}
    norm2 = np.zeros(2)
    proj = np.zeros(2, dtype=np.complex128)
    for _ in range(draws):
        h = np.stack([channel.draw_channel(cm, rng) for cm in cms])[None]
        y = pilots.received_pilot_signal(h, book, cfg.rho_ul,
                                         cfg.sigma2_ul, rng)
        est = np.stack([pilots.mmse_estimate(y, book, stats, 0, u)
                        for u in range(2)])
        for comb in ("mr", "mmse"):
            if comb == "mr":
                us = processing.mr_combiner(est)
            else:
                us = processing.mmse_combiners(est, z)
            eff = processing.effective_channel_ul(
                us[0], h[0, 0], est[0], [h[0, 1]], cfg.rho_ul,
                cfg.sigma2_ul)
            rows[comb]["ge"].append(eff.gain_est)
            rows[comb]["g2"].append(abs(eff.gain) ** 2)
            rows[comb]["nv"].append(eff.noise_var)
            rows[comb]["mis"].append(abs(eff.gain - eff.gain_est) ** 2)
            if comb == "mmse":
                norm2 += np.einsum("km,km->k", us.conj(), us).real
                proj += np.einsum("km,km->k", h[0].conj(), us)
    hard = proj / draws / np.sqrt(norm2 / draws)
    return rows, norm2 / draws, hard


def _z_score(a, b):
    a, b = np.asarray(a), np.asarray(b)
    se = math.hypot(float(np.abs(a - a.mean()).std() / math.sqrt(a.size)),
                    float(np.abs(b - b.mean()).std() / math.sqrt(b.size)))
    return abs(a.mean() - b.mean()) / se if se > 0 else 0.0


def test_uplink_effectives_match_scalar_chain():
    cfg = tiny_config(num_antennas=6)
    placement = channel.place_ues(cfg.geometry(), 2, 11)
    draws = 2500
    combos = [(2, "mr", "ul"), (2, "mmse", "ul")]
    study = harness._placement_study(cfg, placement, {2: cfg.pilot_book()},
                                     combos, draws, 0, 77, ("xval",))
    rows, _, _ = _scalar_reference(cfg, placement, draws, 123456)
    for comb in ("mr", "mmse"):
        g, ge, nv = study[(2, comb, "ul")]
        g, ge, nv = g[:, 0, 0], ge[:, 0, 0], nv[:, 0, 0]
        assert _z_score(ge.real, np.real(rows[comb]["ge"])) < 4.5
        assert _z_score(np.abs(g) ** 2, rows[comb]["g2"]) < 4.5
        assert _z_score(nv, rows[comb]["nv"]) < 4.5
        assert _z_score(np.abs(g - ge) ** 2, rows[comb]["mis"]) < 4.5


def test_downlink_effectives_match_scalar_chain():
    cfg = tiny_config(num_antennas=6)
    placement = channel.place_ues(cfg.geometry(), 2, 11)
    draws = 2500
    study = harness._placement_study(
        cfg, placement, {2: cfg.pilot_book()},
        [(2, "mmse", "dl"), (2, "mmse", "dl-perfect")],
        draws, draws, 77, ("xval-dl",))
    g, ge, nv = study[(2, "mmse", "dl")]
    g, ge, nv = g[:, 0, 0], ge[:, 0, 0], nv[:, 0, 0]

    # hardening identity: the mean realized gain and the hardened
    # estimate share the same normalizer, so their ratio is clean
    ratio = g.mean() / ge[0]
    se = (np.abs(g - g.mean()).std() / math.sqrt(draws) / abs(ge[0])
          * math.sqrt(2.0))
    assert abs(ratio - 1.0) < 5.0 * se

    # scalar cross-check; both sides carry an independently estimated
    # precoder normalizer whose noise shifts every draw together, so
    # that term is added to the plain iid standard error
    rng = np.random.default_rng(654321)
    cms = []
    for u in range(2):
        beta = 10.0 ** (channel.pathloss_db(
            placement.distances[0, u, 0]) / 10.0)
        cms.append(channel.local_scattering_correlation(
            6, placement.angles[0, u, 0], cfg.angular_spread, beta))
    corr = np.stack([cm.entries for cm in cms])[None]
    book = cfg.pilot_book()
    stats = pilots.estimation_statistics(corr, book, cfg.rho_ul,
                                         cfg.sigma2_ul)
    z = processing.combiner_regularizer(stats.error_cov, cfg.rho_ul,
                                        cfg.sigma2_ul)
    _, c_mean, hard = _scalar_reference(cfg, placement, draws, 13)
    ref_g, ref_nv = [], []
    for _ in range(draws):
        h = np.stack([channel.draw_channel(cm, rng) for cm in cms])[None]
        y = pilots.received_pilot_signal(h, book, cfg.rho_ul,
                                         cfg.sigma2_ul, rng)
        est = np.stack([pilots.mmse_estimate(y, book, stats, 0, u)
                        for u in range(2)])
        us = processing.mmse_combiners(est, z)
        w = us / np.sqrt(c_mean)[:, None]
        eff = processing.effective_channel_dl(
            h[0, 0], w[0], hard[0], [h[0, 0]], [w[1]],
            cfg.rho_dl, cfg.sigma2_dl)
        ref_g.append(eff.gain)
        ref_nv.append(eff.noise_var)
    ref_g = np.asarray(ref_g)
    norm_wobble = 0.5 / math.sqrt(draws) * math.sqrt(2.0)
    for eng, ref in ((np.abs(g) ** 2, np.abs(ref_g) ** 2), (nv, ref_nv)):
        eng, ref = np.asarray(eng), np.asarray(ref)
        se = math.hypot(
            float(np.abs(eng - eng.mean()).std() / math.sqrt(draws)),
            float(np.abs(ref - np.mean(ref)).std() / math.sqrt(draws)))
        se = math.hypot(se, norm_wobble * float(eng.mean()))
        assert abs(eng.mean() - np.mean(ref)) < 5.0 * se

    # perfect CSI reuses the realized channel as its own estimate
    gp, gep, nvp = study[(2, "mmse", "dl-perfect")]
    assert np.array_equal(gp, gep)
    assert np.array_equal(gp, study[(2, "mmse", "dl")][0])
    assert np.array_equal(nvp, study[(2, "mmse", "dl")][2])


# ---------------------------------------------------------------------------
# determinism
# ---------------------------------------------------------------------------


def test_availability_deterministic_and_subset_stable():
    cfg = tiny_multicell(reuse_factor=2)
    kw = dict(num_placements=2, num_fading=20, num_hardening=20,
              reuse_factors=(1, 2), master_seed=5)
    a = harness.run_network_availability(cfg, **kw)
    b = harness.run_network_availability(cfg, **kw)
    assert sorted(a.link_eps) == sorted(b.link_eps)
    for key in a.link_eps:
        assert np.array_equal(a.link_eps[key], b.link_eps[key])

    c = harness.run_network_availability(cfg, workers=2, **kw)
    for key in a.link_eps:
        assert np.array_equal(a.link_eps[key], c.link_eps[key])

    # uplink numbers must not depend on which other combos ran
    d = harness.run_network_availability(
        cfg, directions=("ul",), include_perfect_csi_dl=False, **kw)
    for key in d.link_eps:
        assert np.array_equal(a.link_eps[key], d.link_eps[key])
    e = harness.run_network_availability(cfg, combiners=("mr",), **kw)
    for key in e.link_eps:
        assert np.array_equal(a.link_eps[key], e.link_eps[key])


def test_per_link_rerun_identical():
    cfg = tiny_multicell()
    pl = channel.place_ues(cfg.geometry(), 2, 7)
    a = harness.per_link_eps(pl, 30, cfg, (1, 0, "ul"), master_seed=9)
    b = harness.per_link_eps(pl, 30, cfg, (1, 0, "ul"), master_seed=9)
    assert a.value == b.value
    assert (a.ci_low, a.ci_high) == (b.ci_low, b.ci_high)


# ---------------------------------------------------------------------------
# availability bookkeeping
# ---------------------------------------------------------------------------


def test_availability_counts_links():
    eps = np.zeros((2, 2, 3))
    eps[0, 0, 0] = 1e-3
    eps[1, 1, 2] = 0.5
    res = harness.AvailabilityResult(
        eps_target=1e-5, num_placements=2, num_fading=10,
        pilot_lengths=(6,), combiners=("mr",), master_seed=0,
        link_eps={(6, "mr", "ul"): eps})
    assert res.availability(6, "mr", "ul") == pytest.approx(10 / 12)
    assert res.availability(6, "mr", "ul", eps_target=1e-2) == pytest.approx(11 / 12)
    assert res.availability(6, "mr", "ul", eps_target=1.0) == 1.0
    assert list(res.eta_table()) == [(6, "mr", "ul")]


def test_eta_monotone_in_target():
    cfg = tiny_multicell(reuse_factor=2)
    res = harness.run_network_availability(
        cfg, num_placements=2, num_fading=25, num_hardening=25,
        reuse_factors=(2,), combiners=("mmse",), master_seed=5)
    targets = [1e-8, 1e-5, 1e-3, 1e-1, 1.0]
    etas = [res.availability(4, "mmse", "ul", eps_target=t) for t in targets]
    assert etas == sorted(etas)
    assert etas[-1] == 1.0


# ---------------------------------------------------------------------------
# per-link estimates
# ---------------------------------------------------------------------------


def test_per_link_ci_shrinks_with_draws():
    cfg = tiny_multicell(combiner="mr")
    pl = channel.place_ues(cfg.geometry(), 2, 21)
    a = harness.per_link_eps(pl, 200, cfg, (0, 0, "ul"), master_seed=4)
    b = harness.per_link_eps(pl, 400, cfg, (0, 0, "ul"), master_seed=4)
    assert 0.05 < a.value < 0.95
    ratio = (a.ci_high - a.ci_low) / (b.ci_high - b.ci_low)
    assert 1.2 < ratio < 1.7


def test_per_link_shared_s_never_tighter():
    cfg = tiny_multicell(combiner="mr")
    pl = channel.place_ues(cfg.geometry(), 2, 21)
    per_draw = harness.per_link_eps(pl, 80, cfg, (0, 0, "ul"), master_seed=4)
    shared = harness.per_link_eps(pl, 80, cfg, (0, 0, "ul"), master_seed=4,
                                  s_mode="shared")
    assert shared.value >= per_draw.value - 1e-12
    assert shared.method == "saddlepoint-shared-s-average"


def test_per_link_rcus_mc_confirms_saddlepoint():
    cfg = harness.NetworkConfig(num_cells=1, users_per_cell=2,
                                num_antennas=4, blocklength=104,
                                reuse_factor=1, payload_bits=30,
                                combiner="mr", rho_ul=2e-4)
    pl = channel.place_ues(cfg.geometry(), 2, 5)
    sp = harness.per_link_eps(pl, 10, cfg, (0, 0, "ul"), master_seed=8)
    mc = harness.per_link_eps(pl, 10, cfg, (0, 0, "ul"), master_seed=8,
                              evaluator="rcus-mc", mc_samples_per_draw=20000)
    assert mc.method == "rcus-mc-average"
    assert mc.ci_low <= sp.value <= mc.ci_high
    assert sp.value == pytest.approx(mc.value, rel=0.1)


def test_per_link_rejects_bad_requests():
    cfg = tiny_multicell()
    pl = channel.place_ues(cfg.geometry(), 2, 7)
    with pytest.raises(ValueError):
        harness.per_link_eps(pl, 10, cfg, (9, 0, "ul"))
    with pytest.raises(ValueError):
        harness.per_link_eps(pl, 10, cfg, (0, 0, "sideways"))
    with pytest.raises(ValueError):
        harness.per_link_eps(pl, 0, cfg, (0, 0, "ul"))
    with pytest.raises(ValueError):
        harness.per_link_eps(pl, 10, cfg, (0, 0, "ul"), s_mode="magic")
    with pytest.raises(ValueError):
        harness.per_link_eps(pl, 10, cfg, (0, 0, "ul"), evaluator="exact")


# ---------------------------------------------------------------------------
# single-user sweep
# ---------------------------------------------------------------------------


def test_single_ue_snr_anchor():
    scaled = harness.run_single_ue(antennas=(1, 8), num_fading=10,
                                   mc_samples_per_draw=10)
    assert np.allclose(scaled.avg_snr_db, 1.0, atol=1e-9)
    assert scaled.eps_normal_limit is not None
    fixed = harness.run_single_ue(antennas=(1, 320), power_mode="fixed",
                                  num_fading=10, mc_samples_per_draw=10)
    assert fixed.avg_snr_db[-1] == pytest.approx(1.0, abs=1e-9)
    assert fixed.avg_snr_db[0] == pytest.approx(1.0 - 10 * math.log10(320))
    assert fixed.eps_normal_limit is None


def test_single_ue_mc_agrees_with_kernel_mc():
    # one fading draw pinned against the standalone conditional MC,
    # which is itself validated against the saddlepoint bound
    g, rho, n, rate, s = 1.0, 1.0, 60, 0.65, 0.9
    hits = harness._single_ue_mc(np.array([g]), np.array([s]), rho, n, rate,
                                 40000, np.random.default_rng(2))
    mine = hits[0] / 40000
    ref = kernel.rcus_mc_eps(g, g, 1.0, rho, s, n, rate, 40000, seed=5)
    se = math.sqrt(mine * (1 - mine) / 40000 +
                   (ref.ci_high - ref.ci_low) ** 2 / 16)
    assert abs(mine - ref.value) < 5 * se


def test_single_ue_columns_coherent():
    curve = harness.run_single_ue(antennas=(1, 16), num_fading=400,
                                  mc_samples_per_draw=60, master_seed=1)
    # the Monte Carlo column must bracket the saddlepoint one
    for i in range(2):
        lo, hi = curve.mc_ci_low[i], curve.mc_ci_high[i]
        assert lo <= curve.eps_saddle[i] <= hi or \
            abs(curve.eps_saddle[i] - curve.eps_mc[i]) < 0.15 * curve.eps_mc[i]
    # outage ignores the finite blocklength, so it sits below at M=1
    assert curve.eps_outage[0] < curve.eps_saddle[0]
    assert curve.eps_outage[0] == pytest.approx(curve.eps_saddle[0], rel=0.2)


def test_single_ue_rejects_bad_mode():
    with pytest.raises(ValueError):
        harness.run_single_ue(power_mode="pulsed", num_fading=10)
    with pytest.raises(ValueError):
        harness.run_single_ue(antennas=(0, 4), num_fading=10)


# ---------------------------------------------------------------------------
# two-user sweeps
# ---------------------------------------------------------------------------


def test_angle_sweep_shapes_and_swap_symmetry():
    cfg = harness.two_ue_config(antennas=16)
    sweep = harness.run_two_ue_angle_sweep(
        cfg, angle_grid_deg=[50.0], num_fading=400, num_hardening=400,
        master_seed=2)
    assert set(sweep.eps) == {("ul", "mr"), ("ul", "mmse"),
                              ("dl", "mr"), ("dl", "mmse")}
    for key, arr in sweep.eps.items():
        assert arr.shape == (1, 2)
        assert np.all((arr >= 0) & (arr <= 1))

    # swapping the two users' angles must swap their statistics
    swapped = harness.run_two_ue_angle_sweep(
        cfg, fixed_angle_deg=50.0, angle_grid_deg=[30.0], num_fading=400,
        num_hardening=400, master_seed=2)
    for key in sweep.eps:
        a, sa = sweep.eps[key][0], sweep.eps_se[key][0]
        b, sb = swapped.eps[key][0], swapped.eps_se[key][0]
        for u in range(2):
            se = math.hypot(sa[u], sb[1 - u]) + 1e-12
            assert abs(a[u] - b[1 - u]) < 6 * se + 1e-6


def test_angle_sweep_rejects_other_layouts():
    with pytest.raises(ValueError):
        harness.run_two_ue_angle_sweep(tiny_multicell(), num_fading=5)
    with pytest.raises(ValueError):
        harness.run_two_ue_angle_sweep(harness.two_ue_config(),
                                       angle_grid_deg=[], num_fading=5)


def test_asymptotic_sweep_structure():
    res = harness.run_asymptotic_sweep(antennas=(8, 16), num_fading=80,
                                       num_hardening=80, master_seed=2)
    assert res.limits.antennas == (8, 16)
    assert np.all(res.limits.signal_ratio > 0)
    assert np.all(res.limits.cross_ratio > 0)
    assert res.limits.mr_signal_limit == pytest.approx(
        res.limits.signal_ratio[-1] ** 2)
    assert np.all((res.limits.prediction_eps >= 0) &
                  (res.limits.prediction_eps <= 1))
    for arr in res.eps.values():
        assert arr.shape == (2,)

    ortho = harness.run_asymptotic_sweep(antennas=(8,), shared_pilots=False,
                                         num_fading=40, num_hardening=40,
                                         master_seed=2)
    assert np.all(ortho.limits.cross_ratio == 0.0)
    assert np.all(ortho.limits.prediction_eps == 0.0)

    with pytest.raises(ValueError):
        harness.run_asymptotic_sweep(antennas=(16, 8), num_fading=5)


def test_workers_match_single_thread_on_sweep():
    cfg = harness.two_ue_config(antennas=8)
    kw = dict(angle_grid_deg=[25.0, 55.0], num_fading=40, num_hardening=40,
              master_seed=6)
    one = harness.run_two_ue_angle_sweep(cfg, **kw)
    two = harness.run_two_ue_angle_sweep(cfg, workers=2, **kw)
    for key in one.eps:
        assert np.array_equal(one.eps[key], two.eps[key])

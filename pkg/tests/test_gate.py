"""Fusion gate: statistics, targets, losses, safe deployment policy."""

import numpy as np
import pytest

from nuclass import (
    DROP_ONE_VARIANTS,
    DimensionError,
    GATE_STAT_NAMES,
    GateLossConfig,
    GateNet,
    SafeGateCalibration,
    adaptive_pos_weight,
    autodiff as ad,
    conflict_weight,
    fuse,
    fuse_t,
    gate_losses,
    gate_stats,
    load_calibration,
    safe_calibrate,
    safe_decide,
    save_calibration,
    select_thresholds,
    soft_target,
)
from nuclass.seeding import substream


def test_gate_stats_hand_case():
    pl = np.array([0.7, 0.2, 0.1])
    pg = np.array([0.5, 0.3, 0.2])
    r = gate_stats(pl, pg)
    assert r.shape == (len(GATE_STAT_NAMES),) == (8,)

    def ent(p):
        return -(p * np.log(p)).sum() / np.log(p.size)

    expected = [0.7, 0.5, ent(pl), ent(pg), 0.5, 0.2, -0.2, 0.2]
    assert np.allclose(r, expected, atol=1e-12)


def test_gate_stats_batched_and_validated():
    rng = np.random.default_rng(0)
    pl = rng.dirichlet(np.ones(4), size=6)
    pg = rng.dirichlet(np.ones(4), size=6)
    r = gate_stats(pl, pg)
    assert r.shape == (6, 8)
    assert np.allclose(r[:, 6], pg.max(1) - pl.max(1), atol=1e-12)
    assert np.allclose(r[:, 7], np.abs(r[:, 6]), atol=1e-12)
    with pytest.raises(DimensionError):
        gate_stats(pl, pg[:, :3])


def test_fuse_is_convex_mixture():
    rng = np.random.default_rng(1)
    pl = rng.dirichlet(np.ones(5), size=7)
    pg = rng.dirichlet(np.ones(5), size=7)
    assert np.allclose(fuse(pl, pg, 0.0), pl, atol=1e-15)
    assert np.allclose(fuse(pl, pg, 1.0), pg, atol=1e-15)
    g = rng.uniform(size=7)
    mixed = fuse(pl, pg, g)
    assert np.allclose(mixed, (1 - g[:, None]) * pl + g[:, None] * pg, atol=1e-15)
    assert np.allclose(mixed.sum(axis=1), 1.0, atol=1e-12)
    with pytest.raises(ValueError):
        fuse(pl, pg, 1.2)


def test_fuse_t_matches_fuse():
    rng = np.random.default_rng(2)
    pl = rng.dirichlet(np.ones(3), size=4)
    pg = rng.dirichlet(np.ones(3), size=4)
    g = rng.uniform(size=(4, 1))
    out = fuse_t(ad.constant(pl), ad.constant(pg), ad.constant(g))
    assert np.allclose(out.value, fuse(pl, pg, g[:, 0]), atol=1e-15)


def test_soft_target_three_branches():
    # both experts rank the true class first: sigmoid branch, Delta = 0.2
    assert soft_target([0.5, 0.3, 0.2], [0.7, 0.2, 0.1], 0) == pytest.approx(
        1.0 / (1.0 + np.exp(-1.0)), abs=1e-12)
    # only the global argmax is correct
    assert soft_target([0.2, 0.8], [0.9, 0.1], 0) == 1.0
    # only the local argmax is correct
    assert soft_target([0.9, 0.1], [0.2, 0.8], 0) == 0.0


def test_conflict_weight_hand_values():
    # XOR case with Delta = 0.5: w = 1 + 2 + 0.5
    assert conflict_weight([0.1, 0.9], [0.6, 0.4], 0) == pytest.approx(3.5)
    # agreement case: w = 1 + |Delta|
    assert conflict_weight([0.6, 0.4], [0.8, 0.2], 0) == pytest.approx(1.2)
    batch = conflict_weight(
        np.array([[0.1, 0.9], [0.6, 0.4]]),
        np.array([[0.6, 0.4], [0.8, 0.2]]),
        np.array([0, 0]),
    )
    assert np.allclose(batch, [3.5, 1.2])


def test_adaptive_pos_weight_cases():
    assert adaptive_pos_weight(np.array([0.9, 0.9, 0.9])) == pytest.approx(0.25)
    assert adaptive_pos_weight(np.full(50, 0.1)) == pytest.approx(10.0)
    assert adaptive_pos_weight(np.array([0.9, 0.9, 0.1, 0.1])) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        adaptive_pos_weight(np.empty(0))


def _loss_oracle(pl, pg, g, logit, y, cfg, pos_w=None, p_star=None, aux_vals=()):
    """Plain numpy restatement of the gate objective."""
    n = len(y)
    rows = np.arange(n)
    floor = 1e-12
    pred_l, pred_g = pl.argmax(1), pg.argmax(1)
    only_g = (pred_g == y) & (pred_l != y)
    only_l = (pred_l == y) & (pred_g != y)
    delta = pg[rows, y] - pl[rows, y]
    sig = 1.0 / (1.0 + np.exp(-cfg.kappa * delta))
    gt = np.where(only_g, 1.0, np.where(only_l, 0.0, sig))
    xor = (only_g | only_l).astype(float)
    w = 1.0 + cfg.lambda_conf * xor + cfg.lambda_delta * np.abs(delta) ** cfg.gamma_delta
    if pos_w is None:
        pos = int((gt >= 0.5).sum())
        pos_w = float(np.clip((n - pos + 1) / (pos + 1), 0.1, 10.0))

    p_mix = (1.0 - g[:, None]) * pl + g[:, None] * pg
    l_mix = (w * -np.log(np.maximum(p_mix[rows, y], floor))).mean()

    log_g = -np.logaddexp(0.0, -logit)
    log_1mg = -np.logaddexp(0.0, logit)
    bce = -(pos_w * gt * log_g + (1.0 - gt) * log_1mg)
    l_gate = (w * bce).mean()

    if p_star is None:
        p_star = np.where(gt[:, None] > 0.5, pg, pl)
    plogp = np.where(p_star > 0.0, p_star * np.log(np.maximum(p_star, floor)), 0.0)
    kl = plogp.sum(1) - (p_star * np.log(np.maximum(p_mix, floor))).sum(1)
    l_align = (w * kl).mean()

    h_bern = g * -log_g + (1.0 - g) * -log_1mg
    l_ent = cfg.lambda_ent * (np.abs(delta) * h_bern).mean()

    terms = {"mix": l_mix, "gate": l_gate,
             "align": cfg.lambda_align * l_align, "ent": l_ent}
    total = sum(terms[name] for name in cfg.enabled)
    total += cfg.lambda_aux * sum(aux_vals)
    return {"mix": l_mix, "gate": l_gate, "align": l_align, "ent": l_ent,
            "total": total}


def _random_batch(seed, n=16, c=4):
    rng = np.random.default_rng(seed)
    pl = rng.dirichlet(np.ones(c), size=n)
    pg = rng.dirichlet(np.ones(c), size=n)
    logit = rng.normal(size=n) * 1.5
    g = 1.0 / (1.0 + np.exp(-logit))
    y = rng.integers(0, c, size=n)
    return pl, pg, g, logit, y


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gate_losses_match_numpy_oracle(seed):
    pl, pg, g, logit, y = _random_batch(seed)
    cfg = GateLossConfig()
    logit_t = ad.constant(logit[:, None])
    res = gate_losses(ad.constant(pl), ad.constant(pg), ad.sigmoid(logit_t),
                      logit_t, y, cfg)
    want = _loss_oracle(pl, pg, g, logit, y, cfg)
    for name in ("mix", "gate", "align", "ent", "total"):
        got = float(getattr(res, name).value)
        assert got == pytest.approx(want[name], abs=1e-10), name
    assert res.aux is None
    assert res.diagnostics["pos_w"] == pytest.approx(
        adaptive_pos_weight(np.where(
            (pg.argmax(1) == y) & (pl.argmax(1) != y), 1.0,
            np.where((pl.argmax(1) == y) & (pg.argmax(1) != y), 0.0,
                     1.0 / (1.0 + np.exp(-5.0 * (pg[np.arange(16), y] - pl[np.arange(16), y])))))))


def test_gate_losses_total_follows_enabled_terms():
    pl, pg, g, logit, y = _random_batch(3)
    logit_t = ad.constant(logit[:, None])
    aux = (ad.constant(0.7), ad.constant(0.2))
    for name, enabled in DROP_ONE_VARIANTS:
        cfg = GateLossConfig(enabled=enabled)
        res = gate_losses(ad.constant(pl), ad.constant(pg), ad.sigmoid(logit_t),
                          logit_t, y, cfg, aux=aux)
        want = _loss_oracle(pl, pg, g, logit, y, cfg, aux_vals=(0.7, 0.2))
        assert float(res.total.value) == pytest.approx(want["total"], abs=1e-10), name
        assert float(res.aux.value) == pytest.approx(0.9, abs=1e-12)


def test_gate_losses_pinning_overrides():
    pl, pg, g, logit, y = _random_batch(4, n=8, c=3)
    logit_t = ad.constant(logit[:, None])
    p_star = np.full_like(pl, 1.0 / 3.0)
    res = gate_losses(ad.constant(pl), ad.constant(pg), ad.sigmoid(logit_t),
                      logit_t, y, GateLossConfig(), p_star=p_star, pos_w=2.5)
    want = _loss_oracle(pl, pg, g, logit, y, GateLossConfig(),
                        pos_w=2.5, p_star=p_star)
    assert float(res.total.value) == pytest.approx(want["total"], abs=1e-10)
    assert res.diagnostics["pos_w"] == 2.5


def test_gate_losses_rejects_misaligned_batch():
    pl, pg, g, logit, y = _random_batch(5, n=6, c=3)
    logit_t = ad.constant(logit[:, None])
    with pytest.raises(DimensionError):
        gate_losses(ad.constant(pl), ad.constant(pg), ad.sigmoid(logit_t),
                    logit_t, y[:4], GateLossConfig())


def test_gate_loss_config_validation():
    with pytest.raises(ValueError):
        GateLossConfig(lambda_conf=-0.1)
    with pytest.raises(ValueError):
        GateLossConfig(enabled=("mix", "bogus"))


def test_gate_net_forward_contract():
    rng = substream(0, "gate-test")
    net = GateNet(d_local_feat=6, d_global_feat=8, rng=rng, d_proj=5, hidden=(7, 3))
    fl = ad.constant(rng.normal(size=(9, 6)))
    fg = ad.constant(rng.normal(size=(9, 8)))
    stats = rng.dirichlet(np.ones(8), size=9)
    g, logit = net(fl, fg, stats)
    assert g.shape == (9, 1) and logit.shape == (9, 1)
    assert np.all((g.value > 0) & (g.value < 1))
    g2, _ = net(fl, fg, stats)
    assert np.array_equal(g.value, g2.value), "eval mode is deterministic"
    g3, _ = net(fl, fg, stats, rng=substream(1, "gate-drop"))
    assert not np.array_equal(g.value, g3.value), "dropout must perturb training mode"
    assert len(net.params()) == 8


def test_safe_calibrate_reliability_tables():
    y = np.array([0, 0, 1, 1])
    p_local = np.array([[0.9, 0.1], [0.8, 0.2], [0.7, 0.3], [0.4, 0.6]])
    p_global = np.array([[0.2, 0.8], [0.3, 0.7], [0.1, 0.9], [0.2, 0.8]])
    calib = safe_calibrate(p_local, p_global, y, ("a", "b"))
    # local predicts class 0 three times (two correct) and class 1 once (correct)
    assert np.allclose(calib.reliability_local, [2 / 3, 1.0])
    # global never predicts class 0: uninformative prior 0.5
    assert np.allclose(calib.reliability_global, [0.5, 0.75])
    with pytest.raises(ValueError):
        safe_calibrate(p_local, p_global, np.empty(0, dtype=int), ("a", "b"))


def test_safe_decide_hand_case():
    calib = SafeGateCalibration(
        class_names=("a", "b"),
        reliability_local=np.array([0.9, 0.2]),
        reliability_global=np.array([0.5, 0.8]),
        tau=0.6, gamma_gap=0.1)
    p_local = np.array([[0.8, 0.2], [0.8, 0.2], [0.8, 0.2]])
    p_global = np.array([[0.4, 0.6], [0.4, 0.6], [0.1, 0.9]])
    g = np.array([0.9, 0.4, 0.9])

    dec = safe_decide(p_local, p_global, g, calib)
    # sample 0: baseline local (0.72 vs 0.48) but the gate overrides to global
    # sample 1: same scores, g below tau, stays with the baseline local path
    # sample 2: scores tie exactly (0.72 each), tie goes local, then override
    assert dec.baseline_path.tolist() == [0, 0, 0]
    assert dec.overridden.tolist() == [True, False, True]
    assert dec.path.tolist() == [1, 0, 1]
    assert np.allclose(dec.dist[0], p_global[0])
    assert np.allclose(dec.dist[1], p_local[1])
    assert np.allclose(dec.rho, p_global.max(1) - p_local.max(1), atol=1e-15)
    assert dec.gate_path.tolist() == [1, 0, 1]


def test_select_thresholds_feasible_case():
    # local solves the first half, global the second; the gate knows which
    n = 40
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    p_local = np.zeros((n, 2))
    p_global = np.zeros((n, 2))
    p_local[: n // 2] = [0.95, 0.05]
    p_local[n // 2:] = [0.55, 0.45]
    p_global[: n // 2] = [0.45, 0.55]
    p_global[n // 2:] = [0.05, 0.95]
    g = np.array([0.05] * (n // 2) + [0.95] * (n // 2))
    calib = select_thresholds(p_local, p_global, g, y,
                              safe_calibrate(p_local, p_global, y, ("a", "b")))
    assert calib.val_metrics["constraint_met"] is True
    assert calib.val_metrics["val_accuracy_safe"] == 1.0
    again = select_thresholds(p_local, p_global, g, y,
                              safe_calibrate(p_local, p_global, y, ("a", "b")))
    assert (calib.tau, calib.gamma_gap) == (again.tau, again.gamma_gap)


def test_select_thresholds_infeasible_falls_back():
    # rigged reliabilities force the baseline local everywhere; the gate never
    # clears any tau on the grid, so no point reaches the single-path floor
    n = 20
    y = np.array([0] * (n // 2) + [1] * (n // 2))
    p_local = np.tile([0.8, 0.2], (n, 1))
    p_global = np.zeros((n, 2))
    p_global[: n // 2] = [0.3, 0.7]
    p_global[n // 2:] = [0.1, 0.9]
    g = np.full(n, 0.4)
    rigged = SafeGateCalibration(
        class_names=("a", "b"),
        reliability_local=np.array([1.0, 1.0]),
        reliability_global=np.array([0.0, 0.0]))
    calib = select_thresholds(p_local, p_global, g, y, rigged)
    assert calib.val_metrics["constraint_met"] is False
    assert calib.val_metrics["val_accuracy_safe"] == 0.5
    assert calib.tau == 0.9 and calib.gamma_gap == 0.30, "ties go to larger thresholds"


def test_calibration_round_trip(tmp_path):
    calib = SafeGateCalibration(
        class_names=("a", "b", "c"),
        reliability_local=np.array([0.7, 0.5, 0.9]),
        reliability_global=np.array([0.6, 0.8, 0.4]),
        tau=0.75, gamma_gap=0.2, val_metrics={"val_accuracy_safe": 0.8})
    path = tmp_path / "calib.json"
    save_calibration(calib, path)
    loaded = load_calibration(path)
    assert loaded.class_names == calib.class_names
    assert np.allclose(loaded.reliability_local, calib.reliability_local)
    assert np.allclose(loaded.reliability_global, calib.reliability_global)
    assert (loaded.tau, loaded.gamma_gap) == (0.75, 0.2)
    assert loaded.val_metrics["val_accuracy_safe"] == 0.8

    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": "other/1"}')
    with pytest.raises(ValueError):
        load_calibration(bad)

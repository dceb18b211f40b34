"""Optimizer, schedules, stage plans, checkpoints, and the stage drivers."""

import copy
import dataclasses
import math

import numpy as np
import pytest

from nuclass import (
    AdamW,
    Checkpoint,
    GateNet,
    NumericalError,
    ParamGroup,
    Schedule,
    StagePlan,
    ablation_plan,
    alpha_at,
    desk_plan,
    gate_from_checkpoint,
    gate_values,
    global_from_checkpoint,
    load_checkpoint,
    local_from_checkpoint,
    paper_plan,
    params_snapshot,
    plan_from_dict,
    plan_to_dict,
    predict_global,
    predict_local,
    restore_params,
    save_checkpoint,
    train_gate,
    train_global,
    train_local,
)
from nuclass import autodiff as ad
from nuclass.training import _macro_f1


# ---------------------------------------------------------------------------
# AdamW


def _adamw_reference(theta0, grads, lr, wd, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar re-statement of the update rule, one parameter at a time."""
    theta = np.array(theta0, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    for t, g in enumerate(grads, start=1):
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        theta = theta - lr * m_hat / (np.sqrt(v_hat) + eps)
        theta = theta - lr * wd * theta
    return theta


def test_adamw_first_step_matches_reference():
    theta0 = np.array([1.0, -2.0, 0.5])
    g = np.array([0.3, -0.1, 2.0])
    p = ad.parameter(theta0.copy())
    opt = AdamW([ParamGroup("w", {"w": p}, lr=0.01, weight_decay=0.1)])
    p.grad = g.copy()
    opt.step()
    expected = _adamw_reference(theta0, [g], lr=0.01, wd=0.1)
    np.testing.assert_allclose(p.value, expected, rtol=0, atol=0)
    # bias correction makes the very first adaptive move ~ lr * sign(g)
    raw = theta0 - 0.01 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.value, raw * (1 - 0.01 * 0.1), rtol=1e-9)


def test_adamw_multi_step_matches_reference():
    rng = np.random.default_rng(4)
    theta0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(7)]
    p = ad.parameter(theta0.copy())
    opt = AdamW([ParamGroup("w", {"w": p}, lr=2e-3, weight_decay=0.02)])
    for g in grads:
        p.grad = g.copy()
        opt.step()
    expected = _adamw_reference(theta0, grads, lr=2e-3, wd=0.02)
    np.testing.assert_allclose(p.value, expected, rtol=1e-14)


def test_adamw_zero_grad_is_pure_decay():
    p = ad.parameter(np.array([4.0, -8.0]))
    opt = AdamW([ParamGroup("w", {"w": p}, lr=0.1, weight_decay=0.5)])
    p.grad = np.zeros(2)
    opt.step()
    np.testing.assert_allclose(p.value, np.array([4.0, -8.0]) * (1 - 0.1 * 0.5),
                               rtol=1e-15)


def test_adamw_without_decay_leaves_magnitude_to_gradient():
    p = ad.parameter(np.array([1.0]))
    opt = AdamW([ParamGroup("w", {"w": p}, lr=0.1)])
    p.grad = np.zeros(1)
    opt.step()
    np.testing.assert_allclose(p.value, np.array([1.0]))


def test_adamw_inactive_group_is_untouched():
    pa = ad.parameter(np.array([1.0, 1.0]))
    pb = ad.parameter(np.array([2.0, 2.0]))
    opt = AdamW([
        ParamGroup("a", {"w": pa}, lr=0.1, weight_decay=0.1),
        ParamGroup("b", {"w": pb}, lr=0.1, weight_decay=0.1),
    ])
    before_b = pb.value.copy()
    for _ in range(3):
        pa.grad = np.ones(2)
        pb.grad = np.ones(2)
        opt.step(active={"a"})
    assert not np.array_equal(pa.value, np.ones(2))
    np.testing.assert_array_equal(pb.value, before_b)
    assert opt.steps["a"] == 3 and opt.steps["b"] == 0
    assert not np.any(opt.m["b"]["w"])
    # once activated the late group starts with fresh bias correction
    pb.grad = np.ones(2)
    opt.step(active={"b"})
    assert opt.steps["b"] == 1
    expected = _adamw_reference(before_b, [np.ones(2)], lr=0.1, wd=0.1)
    np.testing.assert_allclose(pb.value, expected)


def test_adamw_scale_multiplies_the_learning_rate():
    g = np.array([0.7])
    p1 = ad.parameter(np.array([1.0]))
    p2 = ad.parameter(np.array([1.0]))
    o1 = AdamW([ParamGroup("w", {"w": p1}, lr=0.05)])
    o2 = AdamW([ParamGroup("w", {"w": p2}, lr=0.025)])
    p1.grad = g.copy()
    p2.grad = g.copy()
    o1.step(scale=0.5)
    o2.step(scale=1.0)
    np.testing.assert_allclose(p1.value, p2.value, rtol=1e-15)


def test_adamw_rejects_non_finite_gradient():
    p = ad.parameter(np.ones(2))
    opt = AdamW([ParamGroup("w", {"w": p}, lr=0.1)])
    p.grad = np.array([1.0, np.nan])
    with pytest.raises(NumericalError):
        opt.step()


def test_adamw_rejects_duplicate_group_names():
    p = ad.parameter(np.ones(1))
    q = ad.parameter(np.ones(1))
    with pytest.raises(ValueError):
        AdamW([ParamGroup("w", {"a": p}, lr=0.1),
               ParamGroup("w", {"b": q}, lr=0.1)])


def test_adamw_zero_grad_resets_to_zeros():
    p = ad.parameter(np.ones(3))
    opt = AdamW([ParamGroup("w", {"w": p}, lr=0.1)])
    p.grad = np.full(3, 2.0)
    opt.zero_grad()
    np.testing.assert_array_equal(p.grad, np.zeros(3))


# ---------------------------------------------------------------------------
# schedule and alpha ramp


def test_schedule_warmup_values():
    sched = Schedule(warmup_steps=4)
    assert sched.scale(1) == 0.25
    assert sched.scale(2) == 0.5
    assert sched.scale(4) == 1.0
    assert sched.scale(9) == 1.0


def test_schedule_disabled_without_warmup():
    assert Schedule(0).scale(1) == 1.0
    assert Schedule(-3).scale(1) == 1.0


def test_alpha_ramp_endpoints_and_midpoint():
    assert alpha_at(0.0, 0.25, 2.0) == 0.25
    assert alpha_at(2.0, 0.25, 2.0) == 1.0
    assert alpha_at(5.0, 0.25, 2.0) == 1.0
    assert alpha_at(1.0, 0.25, 2.0) == pytest.approx(0.625)
    assert alpha_at(0.0, 0.25, 0.0) == 1.0


# ---------------------------------------------------------------------------
# stage plans


def test_plan_presets_validate():
    for stage in ("local", "global", "gate"):
        desk_plan(stage).validate()
        paper_plan(stage).validate()
    ablation_plan().validate()


@pytest.mark.parametrize("mutation", [
    {"stage": "fusion"},
    {"epochs": 0},
    {"batch_size": 0},
    {"freeze_epochs": -1.0},
    {"freeze_epochs": 99.0},
    {"gate_warmup_frac": -0.5},
    {"alpha0": 0.0},
    {"alpha0": 1.5},
    {"alpha_epochs": -1.0},
    {"patience": -1},
    {"val_every": 0.0},
    {"unfreeze_groups": ("heads", "decoder")},
])
def test_plan_validation_rejects_bad_fields(mutation):
    plan = dataclasses.replace(desk_plan("gate"), **mutation)
    with pytest.raises(ValueError):
        plan.validate()


def test_plan_dict_round_trip():
    for plan in (desk_plan("local"), desk_plan("global"), desk_plan("gate"),
                 ablation_plan(), paper_plan("gate")):
        assert plan_from_dict(plan_to_dict(plan)) == plan


def test_plan_from_dict_merges_over_stage_defaults():
    plan = plan_from_dict({"stage": "gate", "epochs": 2})
    base = desk_plan("gate")
    assert plan.epochs == 2
    assert plan.lrs == base.lrs
    assert plan.warmup_steps == base.warmup_steps


def test_plan_from_dict_rejects_unknown_keys():
    with pytest.raises(ValueError, match="unknown stage-plan keys"):
        plan_from_dict({"stage": "local", "momentum": 0.9})


def test_plan_is_immutable():
    plan = desk_plan("local")
    with pytest.raises(dataclasses.FrozenInstanceError):
        plan.epochs = 3


# ---------------------------------------------------------------------------
# snapshots


def test_snapshot_and_restore_are_isolated():
    p = ad.parameter(np.array([1.0, 2.0]))
    params = {"w": p}
    snap = params_snapshot(params)
    p.value += 10.0
    snap["w"][0] = -99.0  # mutating the snapshot copy must not leak back
    assert p.value[0] == 11.0
    snap2 = params_snapshot(params)
    restore_params(params, {"w": np.array([5.0, 6.0])})
    np.testing.assert_array_equal(p.value, [5.0, 6.0])
    restore_params(params, snap2)
    np.testing.assert_array_equal(p.value, [11.0, 12.0])


def test_restore_rejects_missing_or_misshapen_entries():
    params = {"w": ad.parameter(np.ones(2))}
    with pytest.raises(ValueError, match="missing"):
        restore_params(params, {})
    with pytest.raises(ValueError, match="shape"):
        restore_params(params, {"w": np.ones(3)})


# ---------------------------------------------------------------------------
# stage drivers on the tiny dataset


def _short(stage, **over):
    return dataclasses.replace(desk_plan(stage), epochs=2, warmup_steps=2, **over)


def test_train_local_is_deterministic(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    m1, log1, info1 = train_local(tr, va, _short("local"), seed=5, hidden=32)
    m2, log2, info2 = train_local(tr, va, _short("local"), seed=5, hidden=32)
    for key, t in m1.params().items():
        np.testing.assert_array_equal(t.value, m2.params()[key].value)
    assert info1 == info2
    assert len(log1) == len(log2)
    m3, _, _ = train_local(tr, va, _short("local"), seed=6, hidden=32)
    assert any(not np.array_equal(t.value, m3.params()[k].value)
               for k, t in m1.params().items())


def test_train_local_log_and_info_shape(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    plan = _short("local")
    model, log, info = train_local(tr, va, plan, seed=5, hidden=32)
    steps_per_epoch = math.ceil(len(tr) / plan.batch_size)
    assert info["steps"] == plan.epochs * steps_per_epoch
    assert not info["stopped_early"] and not info["aborted"]
    assert log[0]["step"] == 0 and "val_macro_f1" in log[0]
    assert len(log) == info["steps"] + 1
    lrs = [e["lr"] for e in log[1:]]
    assert lrs[0] == pytest.approx(plan.lrs["local"] / plan.warmup_steps)
    assert max(lrs) == pytest.approx(plan.lrs["local"])


def test_restore_best_returns_the_best_validation_model(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    model, _, info = train_local(tr, va, _short("local"), seed=5, hidden=32)
    score = _macro_f1(predict_local(model, va), va.labels,
                      va.taxonomy.n_classes)
    assert score == pytest.approx(info["best_val_macro_f1"], abs=1e-12)


def test_early_stop_with_zero_patience_and_frozen_lr(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    plan = dataclasses.replace(desk_plan("local"), epochs=10,
                               lrs={"local": 0.0}, patience=0)
    model, log, info = train_local(tr, va, plan, seed=5, hidden=32)
    assert info["stopped_early"]
    steps_per_epoch = math.ceil(len(tr) / plan.batch_size)
    assert info["steps"] < plan.epochs * steps_per_epoch
    assert info["best_step"] == 0


def test_patience_none_disables_early_stopping(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    plan = dataclasses.replace(desk_plan("local"), epochs=3,
                               lrs={"local": 0.0}, patience=None)
    _, _, info = train_local(tr, va, plan, seed=5, hidden=32)
    assert not info["stopped_early"]
    assert info["steps"] == plan.epochs * math.ceil(len(tr) / plan.batch_size)


def test_divergent_run_aborts_and_restores_baseline(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    plan = dataclasses.replace(desk_plan("local"), epochs=2,
                               lrs={"local": 1e160}, warmup_steps=0)
    model, log, info = train_local(tr, va, plan, seed=5, hidden=32)
    assert info["aborted"]
    assert "non-finite" in info["abort_reason"]
    assert info["steps"] < plan.epochs * math.ceil(len(tr) / plan.batch_size)
    # state falls back to the best (here: initial) snapshot, so the model
    # still produces finite probabilities
    p = predict_local(model, va)
    assert all(np.all(np.isfinite(t.value)) for t in model.params().values())
    assert p.shape == (len(va), va.taxonomy.n_classes)
    assert np.all(np.isfinite(p))


def test_train_global_improves_on_context(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    local, _, _ = train_local(tr, va, _short("local"), seed=5, hidden=32)
    global_, _, info = train_global(tr, va, _short("global"), seed=5,
                                    local_expert=local, d_proj=16, hidden=32)
    assert info["best_val_macro_f1"] > 0.2
    probs = predict_global(global_, va)
    assert probs.shape == (len(va), va.taxonomy.n_classes)


def test_train_gate_keeps_experts_frozen_by_default(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    local, _, _ = train_local(tr, va, _short("local"), seed=5, hidden=32)
    global_, _, _ = train_global(tr, va, _short("global"), seed=5,
                                 local_expert=local, d_proj=16, hidden=32)
    before_l = params_snapshot(local.params())
    before_g = params_snapshot(global_.params())
    gate, _, info = train_gate(tr, va, _short("gate"), seed=5,
                               local_expert=local, global_expert=global_)
    for key, t in local.params().items():
        np.testing.assert_array_equal(t.value, before_l[key])
    for key, t in global_.params().items():
        np.testing.assert_array_equal(t.value, before_g[key])
    vals = gate_values(gate, local, global_, va)
    g = vals["g"]
    assert g.shape == (len(va), 1)
    assert np.all((g >= 0) & (g <= 1))
    np.testing.assert_allclose(vals["p_mix"].sum(axis=1), 1.0, atol=1e-9)


def test_train_gate_unfreeze_touches_only_named_groups(tiny_data):
    tr, va = tiny_data["train"], tiny_data["val"]
    local0, _, _ = train_local(tr, va, _short("local"), seed=5, hidden=32)
    global0, _, _ = train_global(tr, va, _short("global"), seed=5,
                                 local_expert=local0, d_proj=16, hidden=32)
    local = copy.deepcopy(local0)
    global_ = copy.deepcopy(global0)
    plan = dataclasses.replace(
        desk_plan("gate"), epochs=2, warmup_steps=2,
        unfreeze_after_warmup=True, unfreeze_groups=("heads",),
        gate_warmup_frac=0.5,
        lrs={"gate": 8e-4, "heads": 1e-2, "adaptors": 1e-2})
    train_gate(tr, va, plan, seed=5, local_expert=local, global_expert=global_)
    head_moved = any(
        not np.array_equal(t.value, local0.params()[k].value)
        for k, t in local.params().items() if ".head." in k)
    assert head_moved
    # everything outside the classification heads stays bit-identical
    for k, t in local.params().items():
        if ".head." not in k:
            np.testing.assert_array_equal(t.value, local0.params()[k].value)
    for k, t in global_.params().items():
        if ".head." not in k:
            np.testing.assert_array_equal(t.value, global0.params()[k].value)


# ---------------------------------------------------------------------------
# checkpoints


def test_local_checkpoint_round_trip(tiny_data, tmp_path):
    tr, va = tiny_data["train"], tiny_data["val"]
    model, _, _ = train_local(tr, va, _short("local"), seed=5,
                              hidden=32, film_hidden=24)
    path = str(tmp_path / "local.json")
    save_checkpoint(path, "local", model, tr.taxonomy, seed=5,
                    config_hash="abc123", extra={"note": "round trip"})
    ck = load_checkpoint(path)
    assert isinstance(ck, Checkpoint)
    assert ck.stage == "local" and ck.seed == 5
    assert ck.config_hash == "abc123" and ck.extra == {"note": "round trip"}
    assert ck.taxonomy.classes == tr.taxonomy.classes
    assert ck.arch["film_hidden"] == 24
    rebuilt = local_from_checkpoint(ck)
    for key, t in model.params().items():
        np.testing.assert_array_equal(t.value, rebuilt.params()[key].value)
    np.testing.assert_array_equal(predict_local(model, va),
                                  predict_local(rebuilt, va))


def test_global_and_gate_checkpoint_round_trip(tiny_data, tmp_path):
    tr, va = tiny_data["train"], tiny_data["val"]
    local, _, _ = train_local(tr, va, _short("local"), seed=5, hidden=32)
    global_, _, _ = train_global(tr, va, _short("global"), seed=5,
                                 local_expert=local, d_proj=16, hidden=32)
    gate, _, _ = train_gate(tr, va, _short("gate"), seed=5,
                            local_expert=local, global_expert=global_)
    gpath = str(tmp_path / "global.json")
    save_checkpoint(gpath, "global", global_, tr.taxonomy, seed=5)
    g2 = global_from_checkpoint(load_checkpoint(gpath))
    np.testing.assert_array_equal(predict_global(global_, va),
                                  predict_global(g2, va))
    tpath = str(tmp_path / "gate.json")
    save_checkpoint(tpath, "gate", gate, tr.taxonomy, seed=5)
    gate2 = gate_from_checkpoint(load_checkpoint(tpath))
    v1 = gate_values(gate, local, global_, va)
    v2 = gate_values(gate2, local, global_, va)
    np.testing.assert_array_equal(v1["g"], v2["g"])
    np.testing.assert_array_equal(v1["p_mix"], v2["p_mix"])


def test_checkpoint_stage_mismatch_is_rejected(tiny_data, tmp_path):
    tr, va = tiny_data["train"], tiny_data["val"]
    model, _, _ = train_local(tr, va, _short("local"), seed=5, hidden=32)
    path = str(tmp_path / "local.json")
    save_checkpoint(path, "local", model, tr.taxonomy, seed=5)
    ck = load_checkpoint(path)
    with pytest.raises(ValueError, match="expected a gate checkpoint"):
        gate_from_checkpoint(ck)
    with pytest.raises(ValueError, match="expected a global checkpoint"):
        global_from_checkpoint(ck)


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "weird.json"
    path.write_text('{"schema": "something-else/9"}\n', encoding="utf-8")
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(str(path))

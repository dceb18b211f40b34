"""Optimization machinery and the three stage drivers (local, global, gate).

The optimizer is a from-scratch decoupled-weight-decay Adam over named
parameter groups; the schedule is linear warm-up to a constant. Stage
drivers share one loop: shuffled batches from a named seed substream,
warm-up-scaled steps, fractional-epoch validation on macro-F1 with
patience-based early stopping, and a best-checkpoint restore at the end.
A non-finite loss or gradient aborts the stage and keeps the last good
parameters.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FeatureDataset, Taxonomy, class_counts
from .experts import (
    DEFAULT_FILM_HIDDEN,
    DEFAULT_GAMMA_FOCAL,
    DEFAULT_LAMBDA_STABLE,
    DEFAULT_SMOOTHING,
    GlobalExpert,
    LocalExpert,
    class_balanced_ce,
    effective_number_weights,
    global_loss,
)
from .gate import GateLossConfig, GateNet, fuse, gate_losses, gate_stats
from .metrics import confusion, f1_scores
from .seeding import substream

CKPT_SCHEMA = "nuclass-ckpt/1"
EVAL_BATCH = 1024


class NumericalError(RuntimeError):
    """A loss or gradient stopped being finite."""


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class ParamGroup:
    name: str
    params: dict[str, Tensor]
    lr: float
    weight_decay: float = 0.0


class AdamW:
    """Bias-corrected adaptive update scaled by the group lr, then decoupled
    decay p <- p - lr*wd*p. Moments and the step count are per group, so a
    group activated late starts with fresh bias correction."""

    def __init__(self, groups: Sequence[ParamGroup], beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        names = [g.name for g in groups]
        if len(set(names)) != len(names):
            raise ValueError("parameter group names must be unique")
        self.groups = list(groups)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {g.name: {k: np.zeros_like(t.value) for k, t in g.params.items()}
                  for g in groups}
        self.v = {g.name: {k: np.zeros_like(t.value) for k, t in g.params.items()}
                  for g in groups}
        self.steps = {g.name: 0 for g in groups}

    def step(self, scale: float = 1.0, active: set[str] | None = None) -> None:
        for group in self.groups:
            if active is not None and group.name not in active:
                continue
            for key, tensor in group.params.items():
                if not np.all(np.isfinite(tensor.grad)):
                    raise NumericalError(f"non-finite gradient in {key}")
            self.steps[group.name] += 1
            t = self.steps[group.name]
            lr = group.lr * scale
            bc1 = 1.0 - self.beta1 ** t
            bc2 = 1.0 - self.beta2 ** t
            for key, tensor in group.params.items():
                g = tensor.grad
                m = self.m[group.name][key]
                v = self.v[group.name][key]
                m *= self.beta1
                m += (1.0 - self.beta1) * g
                v *= self.beta2
                v += (1.0 - self.beta2) * g * g
                update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
                tensor.value -= lr * update
                if group.weight_decay:
                    tensor.value -= lr * group.weight_decay * tensor.value

    def zero_grad(self) -> None:
        for group in self.groups:
            for tensor in group.params.values():
                tensor.grad = np.zeros_like(tensor.value)


@dataclass(frozen=True)
class Schedule:
    """lr multiplier min(1, step/W); steps are 1-indexed, W = 0 disables."""

    warmup_steps: int = 0

    def scale(self, step: int) -> float:
        if self.warmup_steps <= 0:
            return 1.0
        return min(1.0, step / self.warmup_steps)


# ---------------------------------------------------------------------------
# stage plans


@dataclass(frozen=True)
class StagePlan:
    stage: str
    epochs: int
    batch_size: int = 128
    lrs: dict = field(default_factory=dict)
    weight_decay: float = 0.0
    warmup_steps: int = 0
    alpha0: float = 0.25
    alpha_epochs: float = 2.0
    rho_drop: float = 0.10
    gate_warmup_frac: float = 0.5
    unfreeze_after_warmup: bool = False
    unfreeze_groups: tuple[str, ...] = ("heads", "adaptors")
    freeze: tuple[str, ...] = ()
    freeze_epochs: float = 0.0
    patience: int | None = 4
    val_every: float = 0.25
    restore_best: bool = True

    def validate(self) -> None:
        if self.stage not in ("local", "global", "gate"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if not 0.0 <= self.freeze_epochs <= self.epochs:
            raise ValueError("freeze window must fit inside the stage")
        if not 0.0 <= self.gate_warmup_frac <= self.epochs:
            raise ValueError("gate warm-up must fit inside the stage")
        if not (0.0 < self.alpha0 <= 1.0 and self.alpha_epochs >= 0.0):
            raise ValueError("alpha ramp out of range")
        if (self.patience is not None and self.patience < 0) or self.val_every <= 0.0:
            raise ValueError("patience and validation cadence out of range")
        bad = set(self.unfreeze_groups) - {"heads", "adaptors"}
        if bad:
            raise ValueError(f"unknown unfreeze groups: {sorted(bad)}")


def desk_plan(stage: str) -> StagePlan:
    """Small-run defaults: batch 128, epochs 10/8/4, shortened warm-up."""
    if stage == "local":
        return StagePlan("local", epochs=10, batch_size=128, lrs={"local": 3e-4},
                         weight_decay=2e-5, warmup_steps=100)
    if stage == "global":
        return StagePlan("global", epochs=8, batch_size=128, lrs={"global": 3e-4},
                         weight_decay=2e-5, warmup_steps=100)
    if stage == "gate":
        return StagePlan("gate", epochs=4, batch_size=128,
                         lrs={"gate": 8e-4, "heads": 2e-4, "adaptors": 5e-5},
                         weight_decay=1e-5, warmup_steps=50)
    raise ValueError(f"unknown stage {stage!r}")


def ablation_plan() -> StagePlan:
    """Gate plan for the drop-one loss study.

    Unlike the deployment plan this is a fixed-budget run evaluated at its
    final state (no early stop, no best-checkpoint restore), with both expert
    groups unfrozen at learning rates far above the deployment values. The
    point of the study is what the fused NLL term anchors: at these rates a
    run that keeps it stays above the best single path, while a run without
    it destroys both experts and lands at chance. Milder rates never show
    the effect, because the label-aware gate and alignment targets keep a
    mixture of live experts accurate on their own.
    """
    return StagePlan("gate", epochs=16, batch_size=384,
                     lrs={"gate": 8e-4, "heads": 8e-2, "adaptors": 8e-2},
                     weight_decay=1e-5, warmup_steps=150,
                     unfreeze_after_warmup=True,
                     patience=None, restore_best=False)


def paper_plan(stage: str) -> StagePlan:
    """Published-scale schedules; only useful with the real cohorts."""
    if stage == "local":
        return StagePlan("local", epochs=50, batch_size=1024, lrs={"local": 3e-4},
                         weight_decay=2e-5, warmup_steps=1500)
    if stage == "global":
        return StagePlan("global", epochs=40, batch_size=512, lrs={"global": 3e-4},
                         weight_decay=2e-5, warmup_steps=2000)
    if stage == "gate":
        return StagePlan("gate", epochs=4, batch_size=384,
                         lrs={"gate": 8e-4, "heads": 2e-4, "adaptors": 5e-5},
                         weight_decay=1e-5, warmup_steps=1000)
    raise ValueError(f"unknown stage {stage!r}")


def plan_to_dict(plan: StagePlan) -> dict:
    return {
        "stage": plan.stage, "epochs": plan.epochs, "batch_size": plan.batch_size,
        "lrs": dict(plan.lrs), "weight_decay": plan.weight_decay,
        "warmup_steps": plan.warmup_steps, "alpha0": plan.alpha0,
        "alpha_epochs": plan.alpha_epochs, "rho_drop": plan.rho_drop,
        "gate_warmup_frac": plan.gate_warmup_frac,
        "unfreeze_after_warmup": plan.unfreeze_after_warmup,
        "unfreeze_groups": list(plan.unfreeze_groups),
        "freeze": list(plan.freeze), "freeze_epochs": plan.freeze_epochs,
        "patience": plan.patience, "val_every": plan.val_every,
        "restore_best": plan.restore_best,
    }


def plan_from_dict(doc: dict) -> StagePlan:
    base = desk_plan(doc.get("stage", "local"))
    known = set(plan_to_dict(base))
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown stage-plan keys: {sorted(unknown)}")
    merged = plan_to_dict(base)
    merged.update(doc)
    merged["freeze"] = tuple(merged["freeze"])
    merged["unfreeze_groups"] = tuple(merged["unfreeze_groups"])
    plan = StagePlan(**merged)
    plan.validate()
    return plan


# ---------------------------------------------------------------------------
# alpha ramp


def alpha_at(epoch: float, alpha0: float, alpha_epochs: float) -> float:
    """Linear, non-decreasing: alpha0 at epoch 0, 1.0 at alpha_epochs on."""
    if alpha_epochs <= 0.0:
        return 1.0
    return min(1.0, alpha0 + (1.0 - alpha0) * (epoch / alpha_epochs))


# ---------------------------------------------------------------------------
# snapshots and checkpoints


def params_snapshot(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.value.copy() for k, t in params.items()}


def restore_params(params: dict[str, Tensor], snapshot: dict[str, np.ndarray]) -> None:
    missing = set(params) - set(snapshot)
    if missing:
        raise ValueError(f"snapshot is missing parameters: {sorted(missing)}")
    for key, tensor in params.items():
        if snapshot[key].shape != tensor.value.shape:
            raise ValueError(f"shape mismatch restoring {key}")
        tensor.value = snapshot[key].copy()


@dataclass
class Checkpoint:
    stage: str
    taxonomy: Taxonomy
    arch: dict
    params: dict[str, np.ndarray]
    seed: int
    config_hash: str = ""
    extra: dict = field(default_factory=dict)


def save_checkpoint(path: str, stage: str, model, taxonomy: Taxonomy,
                    seed: int, config_hash: str = "", extra: dict | None = None) -> None:
    doc = {
        "schema": CKPT_SCHEMA,
        "stage": stage,
        "taxonomy": {"classes": list(taxonomy.classes),
                     "tissues": list(taxonomy.tissues)},
        "arch": model.arch,
        "params": {k: t.value.tolist() for k, t in model.params().items()},
        "seed": int(seed),
        "config_hash": config_hash,
        "extra": extra or {},
    }
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("schema") != CKPT_SCHEMA:
        raise ValueError(f"{path}: not a checkpoint file (schema {doc.get('schema')!r})")
    taxonomy = Taxonomy(tuple(doc["taxonomy"]["classes"]),
                        tuple(doc["taxonomy"]["tissues"]))
    params = {k: np.asarray(v, dtype=np.float64) for k, v in doc["params"].items()}
    return Checkpoint(stage=doc["stage"], taxonomy=taxonomy, arch=doc["arch"],
                      params=params, seed=int(doc["seed"]),
                      config_hash=doc.get("config_hash", ""),
                      extra=doc.get("extra", {}))


def _dummy_rng() -> np.random.Generator:
    return np.random.default_rng(0)


def local_from_checkpoint(ck: Checkpoint) -> LocalExpert:
    if ck.stage != "local":
        raise ValueError(f"expected a local checkpoint, got {ck.stage!r}")
    model = LocalExpert(rng=_dummy_rng(), **ck.arch)
    restore_params(model.params(), ck.params)
    return model


def global_from_checkpoint(ck: Checkpoint) -> GlobalExpert:
    if ck.stage != "global":
        raise ValueError(f"expected a global checkpoint, got {ck.stage!r}")
    model = GlobalExpert(rng=_dummy_rng(), **ck.arch)
    restore_params(model.params(), ck.params)
    return model


def gate_from_checkpoint(ck: Checkpoint) -> GateNet:
    if ck.stage != "gate":
        raise ValueError(f"expected a gate checkpoint, got {ck.stage!r}")
    arch = dict(ck.arch)
    arch["hidden"] = tuple(arch["hidden"])
    model = GateNet(rng=_dummy_rng(), **arch)
    restore_params(model.params(), ck.params)
    return model


# ---------------------------------------------------------------------------
# batched inference


def expert_outputs_local(model: LocalExpert, ds: FeatureDataset,
                         batch: int = EVAL_BATCH) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, modulated features) over the dataset, eval mode."""
    ps, feats = [], []
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        out = model(ds.local[sl], ds.tissue[sl])
        ps.append(out.p.value)
        feats.append(out.feature.value)
    return np.concatenate(ps), np.concatenate(feats)


def expert_outputs_global(model: GlobalExpert, ds: FeatureDataset,
                          batch: int = EVAL_BATCH,
                          alpha: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    ps, feats = [], []
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        out = model(ds.local[sl], ds.ctx[sl], ds.tissue[sl], alpha=alpha)
        ps.append(out.p.value)
        feats.append(out.feature.value)
    return np.concatenate(ps), np.concatenate(feats)


def predict_local(model: LocalExpert, ds: FeatureDataset,
                  batch: int = EVAL_BATCH) -> np.ndarray:
    return expert_outputs_local(model, ds, batch)[0]


def predict_global(model: GlobalExpert, ds: FeatureDataset,
                   batch: int = EVAL_BATCH) -> np.ndarray:
    return expert_outputs_global(model, ds, batch)[0]


def gate_values(gate: GateNet, local: LocalExpert, global_: GlobalExpert,
                ds: FeatureDataset, batch: int = EVAL_BATCH,
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """(p_mix, g, p_local, p_global) over the dataset, eval mode."""
    p_l, feat_l = expert_outputs_local(local, ds, batch)
    p_g, feat_g = expert_outputs_global(global_, ds, batch)
    gs = []
    for start in range(0, len(ds), batch):
        sl = slice(start, start + batch)
        g, _ = gate(ad.constant(feat_l[sl]), ad.constant(feat_g[sl]),
                    gate_stats(p_l[sl], p_g[sl]))
        gs.append(g.value[:, 0])
    g_all = np.concatenate(gs)
    return fuse(p_l, p_g, g_all), g_all, p_l, p_g


def _macro_f1(p: np.ndarray, y: np.ndarray, n_classes: int) -> float:
    return f1_scores(confusion(y, p.argmax(axis=1), n_classes))[1]


# ---------------------------------------------------------------------------
# shared stage loop


def _run_stage(
    plan: StagePlan,
    seed: int,
    n_train: int,
    optimizer: AdamW,
    all_params: dict[str, Tensor],
    forward_loss: Callable[[np.ndarray, int, float], dict],
    validate: Callable[[], float],
    active_groups: Callable[[int, float], set[str]],
    log: list,
) -> dict:
    plan.validate()
    schedule = Schedule(plan.warmup_steps)
    steps_per_epoch = max(1, math.ceil(n_train / plan.batch_size))
    val_every_steps = max(1, round(plan.val_every * steps_per_epoch))
    primary = plan.stage

    best_score = validate()
    best_snapshot = params_snapshot(all_params)
    best_step = 0
    log.append({"step": 0, "epoch": 0.0, "stage": plan.stage,
                "loss_terms": {}, "lr": 0.0, "val_macro_f1": best_score})

    bad = 0
    step = 0
    stopped_early = False
    aborted = False
    abort_reason = ""
    try:
        for epoch in range(plan.epochs):
            order = substream(seed, plan.stage, "order", str(epoch)).permutation(n_train)
            for start in range(0, n_train, plan.batch_size):
                idx = order[start:start + plan.batch_size]
                epoch_f = step / steps_per_epoch
                step += 1
                terms = forward_loss(idx, step, epoch_f)
                if not all(np.isfinite(v) for v in terms.values()):
                    raise NumericalError(f"non-finite loss at step {step}")
                scale = schedule.scale(step)
                optimizer.step(scale, active=active_groups(step, epoch_f))
                optimizer.zero_grad()
                entry = {"step": step, "epoch": step / steps_per_epoch,
                         "stage": plan.stage, "loss_terms": terms,
                         "lr": plan.lrs.get(primary, 0.0) * scale}
                if step % val_every_steps == 0:
                    score = validate()
                    entry["val_macro_f1"] = score
                    if score > best_score:
                        best_score = score
                        best_snapshot = params_snapshot(all_params)
                        best_step = step
                        bad = 0
                    else:
                        bad += 1
                        if plan.patience is not None and bad > plan.patience:
                            stopped_early = True
                log.append(entry)
                if stopped_early:
                    break
            if stopped_early:
                break
    except NumericalError as err:
        aborted = True
        abort_reason = str(err)
        log.append({"step": step, "epoch": step / steps_per_epoch,
                    "stage": plan.stage, "loss_terms": {}, "lr": 0.0,
                    "abort": abort_reason})

    # Fixed-budget runs (restore_best off) keep whatever state training ended
    # in; an aborted run always falls back to the last good checkpoint.
    if plan.restore_best or aborted:
        restore_params(all_params, best_snapshot)
    return {"best_val_macro_f1": best_score, "best_step": best_step,
            "steps": step, "stopped_early": stopped_early,
            "aborted": aborted, "abort_reason": abort_reason}


# ---------------------------------------------------------------------------
# stage drivers


def train_local(
    train: FeatureDataset,
    val: FeatureDataset,
    plan: StagePlan,
    seed: int,
    hidden: int = 256,
    d_tissue: int = 64,
    film_hidden: int = DEFAULT_FILM_HIDDEN,
    smoothing: float = DEFAULT_SMOOTHING,
) -> tuple[LocalExpert, list, dict]:
    counts = class_counts(train)
    weights = effective_number_weights(counts)
    tax = train.taxonomy
    model = LocalExpert(tax.n_tissues, train.d_local, tax.n_classes,
                        substream(seed, "local", "init"),
                        hidden=hidden, d_tissue=d_tissue,
                        film_hidden=film_hidden)
    groups = [ParamGroup("local", model.params(), plan.lrs["local"],
                         plan.weight_decay)]
    opt = AdamW(groups)
    y = train.labels

    def forward_loss(idx, step, epoch_f):
        out = model(train.local[idx], train.tissue[idx])
        loss = class_balanced_ce(out.z, y[idx], weights, eps=smoothing)
        loss.backward()
        return {"total": float(loss.value)}

    def validate():
        return _macro_f1(predict_local(model, val), val.labels, tax.n_classes)

    def active(step, epoch_f):
        if "local" in plan.freeze and epoch_f < plan.freeze_epochs:
            return set()
        return {"local"}

    log: list = []
    info = _run_stage(plan, seed, len(train), opt, model.params(),
                      forward_loss, validate, active, log)
    return model, log, info


def train_global(
    train: FeatureDataset,
    val: FeatureDataset,
    plan: StagePlan,
    seed: int,
    local_expert: LocalExpert,
    d_proj: int = 512,
    hidden: int = 256,
    d_tissue: int = 64,
    film_hidden: int = DEFAULT_FILM_HIDDEN,
    smoothing: float = DEFAULT_SMOOTHING,
    gamma_focal: float = DEFAULT_GAMMA_FOCAL,
    lambda_stable: float = DEFAULT_LAMBDA_STABLE,
) -> tuple[GlobalExpert, list, dict]:
    """The local expert stays frozen; its probabilities weight the loss."""
    counts = class_counts(train)
    weights = effective_number_weights(counts)
    tax = train.taxonomy
    model = GlobalExpert(tax.n_tissues, train.d_local, train.d_ctx, tax.n_classes,
                         substream(seed, "global", "init"),
                         d_proj=d_proj, hidden=hidden, d_tissue=d_tissue,
                         film_hidden=film_hidden, rho_drop=plan.rho_drop)
    p_local_train = predict_local(local_expert, train)
    groups = [ParamGroup("global", model.params(), plan.lrs["global"],
                         plan.weight_decay)]
    opt = AdamW(groups)
    y = train.labels

    def forward_loss(idx, step, epoch_f):
        alpha = alpha_at(epoch_f, plan.alpha0, plan.alpha_epochs)
        mask = model.draw_drop_mask(len(idx),
                                    substream(seed, "global", "ctxdrop", str(step)))
        out = model(train.local[idx], train.ctx[idx], train.tissue[idx],
                    alpha=alpha, drop_mask=mask)
        loss, parts = global_loss(out.z, y[idx], p_local_train[idx], weights,
                                  eps=smoothing, gamma_focal=gamma_focal,
                                  lambda_stable=lambda_stable)
        loss.backward()
        terms = {"total": float(loss.value)}
        terms.update({k: float(v) for k, v in parts.items()})
        terms["alpha"] = alpha
        return terms

    def validate():
        return _macro_f1(predict_global(model, val), val.labels, tax.n_classes)

    def active(step, epoch_f):
        if "global" in plan.freeze and epoch_f < plan.freeze_epochs:
            return set()
        return {"global"}

    log: list = []
    info = _run_stage(plan, seed, len(train), opt, model.params(),
                      forward_loss, validate, active, log)
    return model, log, info


def train_gate(
    train: FeatureDataset,
    val: FeatureDataset,
    plan: StagePlan,
    seed: int,
    local_expert: LocalExpert,
    global_expert: GlobalExpert,
    loss_cfg: GateLossConfig = GateLossConfig(),
    d_proj: int = 128,
    hidden: tuple[int, int] = (256, 64),
    smoothing: float = DEFAULT_SMOOTHING,
) -> tuple[GateNet, list, dict]:
    """Gate-only warm-up for the first `gate_warmup_frac` of an epoch; the
    experts unfreeze afterwards only when the plan asks for it, in which
    case their own losses join the total through lambda_aux."""
    counts = class_counts(train)
    weights = effective_number_weights(counts)
    tax = train.taxonomy
    d_local_feat = train.d_local
    d_global_feat = 2 * global_expert.d_proj
    gate = GateNet(d_local_feat, d_global_feat,
                   substream(seed, "gate", "init"),
                   d_proj=d_proj, hidden=hidden)
    steps_per_epoch = max(1, math.ceil(len(train) / plan.batch_size))
    warmup_end = round(plan.gate_warmup_frac * steps_per_epoch)

    groups = [ParamGroup("gate", gate.params(), plan.lrs["gate"],
                         plan.weight_decay)]
    head_params: dict[str, Tensor] = {}
    head_params.update(local_expert.head.params())
    head_params.update(global_expert.head.params())
    adaptor_params: dict[str, Tensor] = {}
    adaptor_params.update(local_expert.film.params())
    adaptor_params.update(global_expert.film_ctx.params())
    adaptor_params.update(global_expert.w_u.params())
    adaptor_params.update(global_expert.w_v.params())
    expert_groups = {"heads": head_params, "adaptors": adaptor_params}
    unfrozen = tuple(g for g in plan.unfreeze_groups) if plan.unfreeze_after_warmup else ()
    for name in unfrozen:
        groups.append(ParamGroup(name, expert_groups[name],
                                 plan.lrs.get(name, 0.0), plan.weight_decay))
    opt = AdamW(groups)

    all_params: dict[str, Tensor] = dict(gate.params())
    for name in unfrozen:
        all_params.update(expert_groups[name])

    # while the experts are frozen their outputs are constants; cache them
    p_l_cache, feat_l_cache = expert_outputs_local(local_expert, train)
    p_g_cache, feat_g_cache = expert_outputs_global(global_expert, train)
    y = train.labels

    def forward_loss(idx, step, epoch_f):
        live = plan.unfreeze_after_warmup and step > warmup_end
        drop_rng = substream(seed, "gate", "dropout", str(step))
        if live:
            out_l = local_expert(train.local[idx], train.tissue[idx])
            out_g = global_expert(train.local[idx], train.ctx[idx],
                                  train.tissue[idx])
            p_l_t, p_g_t = out_l.p, out_g.p
            feat_l, feat_g = out_l.feature, out_g.feature
            stats = gate_stats(p_l_t.value, p_g_t.value)
            aux = (
                class_balanced_ce(out_l.z, y[idx], weights, eps=smoothing),
                class_balanced_ce(out_g.z, y[idx], weights, eps=smoothing),
            )
        else:
            p_l_t = ad.constant(p_l_cache[idx])
            p_g_t = ad.constant(p_g_cache[idx])
            feat_l = ad.constant(feat_l_cache[idx])
            feat_g = ad.constant(feat_g_cache[idx])
            stats = gate_stats(p_l_cache[idx], p_g_cache[idx])
            aux = ()
        g, logit = gate(feat_l, feat_g, stats, rng=drop_rng)
        result = gate_losses(p_l_t, p_g_t, g, logit, y[idx], loss_cfg, aux=aux)
        result.total.backward()
        terms = {"total": float(result.total.value),
                 "mix": float(result.mix.value),
                 "gate": float(result.gate.value),
                 "align": float(result.align.value),
                 "ent": float(result.ent.value)}
        if aux:
            terms["aux"] = float(sum(a.value for a in aux))
        return terms

    def validate():
        p_mix, _, _, _ = gate_values(gate, local_expert, global_expert, val)
        return _macro_f1(p_mix, val.labels, tax.n_classes)

    def active(step, epoch_f):
        if step <= warmup_end or not unfrozen:
            return {"gate"}
        return {"gate", *unfrozen}

    log: list = []
    info = _run_stage(plan, seed, len(train), opt, all_params,
                      forward_loss, validate, active, log)
    return gate, log, info

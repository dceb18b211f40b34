"""Fusion gate: statistics, gate network, mixing, losses, safe deployment.

The gate produces a per-cell scalar g in (0,1) from ground-truth-free
inputs (projected expert features plus an 8-statistic summary of the two
probability vectors) and fuses the experts in probability space:
p_mix = (1 - g) p_local + g p_global.

Training supervision uses the labels: a soft target g_tilde saying which
expert to trust, a conflict weight emphasizing disagreement, and four loss
terms (fused NLL, gate BCE, alignment KL toward the preferred expert, and
a Bernoulli entropy penalty scaled by the true-class confidence gap). The
soft target and conflict weight are built from the expert probabilities
without gradient blocking, so when expert parameters are trainable these
terms backpropagate into them; only the alignment target p_star is treated
as a constant.

Deployment offers a calibrated safe mode: per-path reliability tables by
predicted class feed a baseline confidence chooser, and the gate's choice
overrides it only when g > tau and |rho| > gamma_gap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import core
from .autodiff import Tensor
from .core import DimensionError
from .layers import MLP, Linear, apply_dropout

LOG_FLOOR = 1e-12

GATE_STAT_NAMES = (
    "p_local_max",
    "p_global_max",
    "entropy_local",
    "entropy_global",
    "margin_local",
    "margin_global",
    "rho",
    "abs_rho",
)


def gate_stats(p_local: np.ndarray, p_global: np.ndarray) -> np.ndarray:
    """The 8-component statistic vector r (per sample when batched).

    rho = p_global_max - p_local_max; entropies are normalized by log C.
    """
    p_local = np.asarray(p_local, dtype=np.float64)
    p_global = np.asarray(p_global, dtype=np.float64)
    if p_local.shape != p_global.shape:
        raise DimensionError("expert distributions must share a class count")
    single = p_local.ndim == 1
    pl = np.atleast_2d(p_local)
    pg = np.atleast_2d(p_global)
    pl_max = pl.max(axis=-1)
    pg_max = pg.max(axis=-1)
    rho = pg_max - pl_max
    r = np.stack(
        [
            pl_max,
            pg_max,
            core.normalized_entropy(pl),
            core.normalized_entropy(pg),
            core.margin(pl),
            core.margin(pg),
            rho,
            np.abs(rho),
        ],
        axis=-1,
    )
    return r[0] if single else r


def fuse(p_local: np.ndarray, p_global: np.ndarray, g) -> np.ndarray:
    """(1 - g) p_local + g p_global; convex, so the result stays on the simplex."""
    g_arr = np.asarray(g, dtype=np.float64)
    if np.any(g_arr < 0.0) or np.any(g_arr > 1.0):
        raise ValueError("gate value outside [0, 1]")
    p_local = np.asarray(p_local, dtype=np.float64)
    p_global = np.asarray(p_global, dtype=np.float64)
    if p_local.shape != p_global.shape:
        raise DimensionError("expert distributions must share a class count")
    if p_local.ndim == 2 and g_arr.ndim == 1:
        g_arr = g_arr[:, None]
    return (1.0 - g_arr) * p_local + g_arr * p_global


def fuse_t(p_local: Tensor, p_global: Tensor, g: Tensor) -> Tensor:
    """Differentiable fuse; g has shape (n, 1) against (n, C) distributions."""
    gl = ad.add(ad.neg(g), 1.0)
    return ad.add(ad.mul(p_local, gl), ad.mul(p_global, g))


# ---------------------------------------------------------------------------
# supervision targets and weights


def _argmax_masks(pl: np.ndarray, pg: np.ndarray, y: np.ndarray):
    local_right = pl.argmax(axis=-1) == y
    global_right = pg.argmax(axis=-1) == y
    only_global = global_right & ~local_right
    only_local = local_right & ~global_right
    soft = ~(only_global | only_local)
    return only_global, only_local, soft


def soft_target(p_local, p_global, y, kappa: float = 5.0):
    """g_tilde: 1 if only the global argmax is correct, 0 if only the local
    one is, else sigmoid(kappa * (p_global(y) - p_local(y)))."""
    pl = np.atleast_2d(np.asarray(p_local, dtype=np.float64))
    pg = np.atleast_2d(np.asarray(p_global, dtype=np.float64))
    single = np.asarray(p_local).ndim == 1
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.int64))
    only_global, only_local, soft = _argmax_masks(pl, pg, y_arr)
    rows = np.arange(pl.shape[0])
    delta = pg[rows, y_arr] - pl[rows, y_arr]
    gt = np.where(only_global, 1.0, np.where(only_local, 0.0,
                                             core.sigmoid(kappa * delta)))
    return float(gt[0]) if single else gt


def conflict_weight(
    p_local, p_global, y,
    lambda_conf: float = 2.0,
    lambda_delta: float = 1.0,
    gamma_delta: float = 1.0,
):
    """w = 1 + lambda_conf * [exactly one argmax correct] + lambda_delta |Delta|^gamma."""
    pl = np.atleast_2d(np.asarray(p_local, dtype=np.float64))
    pg = np.atleast_2d(np.asarray(p_global, dtype=np.float64))
    single = np.asarray(p_local).ndim == 1
    y_arr = np.atleast_1d(np.asarray(y, dtype=np.int64))
    only_global, only_local, _ = _argmax_masks(pl, pg, y_arr)
    xor = only_global | only_local
    rows = np.arange(pl.shape[0])
    delta = pg[rows, y_arr] - pl[rows, y_arr]
    w = 1.0 + lambda_conf * xor + lambda_delta * np.abs(delta) ** gamma_delta
    return float(w[0]) if single else w


def adaptive_pos_weight(g_tilde: np.ndarray) -> float:
    """pos_w = clamp((#neg + 1) / (#pos + 1), 0.1, 10); positives are g_tilde >= 0.5."""
    g_tilde = np.atleast_1d(np.asarray(g_tilde, dtype=np.float64))
    if g_tilde.size == 0:
        raise ValueError("empty batch")
    pos = int(np.sum(g_tilde >= 0.5))
    neg = g_tilde.size - pos
    return float(np.clip((neg + 1) / (pos + 1), 0.1, 10.0))


# ---------------------------------------------------------------------------
# gate network


class GateNet:
    """LN + linear projections of the two expert features, concatenated with
    the statistic vector, through an MLP (256, 64) to a sigmoid scalar.

    Dropout 0.2 on the projected features, 0.1 inside the MLP; both apply
    only when an rng is passed (training mode).
    """

    def __init__(
        self,
        d_local_feat: int,
        d_global_feat: int,
        rng: np.random.Generator,
        d_proj: int = 128,
        hidden: tuple[int, int] = (256, 64),
        drop_feat: float = 0.2,
        drop_gate: float = 0.1,
    ):
        self.proj_local = Linear(d_local_feat, d_proj, rng, bias=False,
                                 name="gate.proj_local")
        self.proj_global = Linear(d_global_feat, d_proj, rng, bias=False,
                                  name="gate.proj_global")
        self.mlp = MLP([2 * d_proj + len(GATE_STAT_NAMES), *hidden, 1], rng,
                       name="gate.mlp")
        self.drop_feat = drop_feat
        self.drop_gate = drop_gate
        self.arch = {"d_local_feat": d_local_feat, "d_global_feat": d_global_feat,
                     "d_proj": d_proj, "hidden": list(hidden),
                     "drop_feat": drop_feat, "drop_gate": drop_gate}

    def __call__(
        self,
        f_local: Tensor,
        s_global: Tensor,
        stats: np.ndarray,
        rng: np.random.Generator | None = None,
    ) -> tuple[Tensor, Tensor]:
        """Returns (g, logit); g = sigmoid(logit), shape (n, 1)."""
        a = self.proj_local(ad.layer_norm(ad.as_tensor(f_local)))
        b = self.proj_global(ad.layer_norm(ad.as_tensor(s_global)))
        if rng is not None:
            a = apply_dropout(a, self.drop_feat, rng)
            b = apply_dropout(b, self.drop_feat, rng)
        r = np.atleast_2d(np.asarray(stats, dtype=np.float64))
        x = ad.concat([a, b, ad.constant(r)], axis=1)
        logit = self.mlp(x, dropout_rate=self.drop_gate if rng is not None else 0.0,
                         rng=rng)
        return ad.sigmoid(logit), logit

    def params(self) -> dict[str, Tensor]:
        out = dict(self.proj_local.params())
        out.update(self.proj_global.params())
        out.update(self.mlp.params())
        return out


# ---------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class GateLossConfig:
    kappa: float = 5.0
    lambda_conf: float = 2.0
    lambda_delta: float = 1.0
    gamma_delta: float = 1.0
    lambda_align: float = 0.1
    lambda_ent: float = 0.05
    lambda_aux: float = 0.05
    # which terms enter the total; the drop-one ablation clears one entry
    enabled: tuple[str, ...] = ("mix", "gate", "align", "ent")

    def __post_init__(self):
        for name in ("kappa", "lambda_conf", "lambda_delta", "gamma_delta",
                     "lambda_align", "lambda_ent", "lambda_aux"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        unknown = set(self.enabled) - {"mix", "gate", "align", "ent"}
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")


DROP_ONE_VARIANTS: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("full", ("mix", "gate", "align", "ent")),
    ("no_mix", ("gate", "align", "ent")),
    ("no_gate", ("mix", "align", "ent")),
    ("no_align", ("mix", "gate", "ent")),
    ("no_ent", ("mix", "gate", "align")),
)


@dataclass
class GateLossResult:
    mix: Tensor
    gate: Tensor
    align: Tensor
    ent: Tensor
    aux: Tensor | None
    total: Tensor
    diagnostics: dict = field(default_factory=dict)


def _soft_target_t(p_local: Tensor, p_global: Tensor, y: np.ndarray,
                   kappa: float) -> tuple[Tensor, Tensor]:
    """Differentiable (g_tilde, Delta) as (n, 1) tensors.

    The piecewise branch masks are constants (they depend on argmaxes),
    while the sigmoid branch and Delta itself carry gradients.
    """
    only_global, only_local, soft = _argmax_masks(p_local.value, p_global.value, y)
    delta = ad.sub(ad.take_per_row(p_global, y), ad.take_per_row(p_local, y))
    soft_branch = ad.sigmoid(ad.scale(delta, kappa))
    gt = ad.add(
        ad.constant(only_global.astype(np.float64)[:, None]),
        ad.mul(soft_branch, ad.constant(soft.astype(np.float64)[:, None])),
    )
    return gt, delta


def _conflict_weight_t(p_local: Tensor, p_global: Tensor, delta: Tensor,
                       y: np.ndarray, cfg: GateLossConfig) -> Tensor:
    only_global, only_local, _ = _argmax_masks(p_local.value, p_global.value, y)
    xor = (only_global | only_local).astype(np.float64)[:, None]
    gap = ad.powc(ad.absval(delta), cfg.gamma_delta)
    return ad.add(ad.constant(1.0 + cfg.lambda_conf * xor),
                  ad.scale(gap, cfg.lambda_delta))


def gate_losses(
    p_local: Tensor,
    p_global: Tensor,
    g: Tensor,
    gate_logit: Tensor,
    y,
    cfg: GateLossConfig = GateLossConfig(),
    aux: Sequence[Tensor] = (),
    p_star: np.ndarray | None = None,
    pos_w: float | None = None,
) -> GateLossResult:
    """All four gate losses plus the weighted total.

    p_local/p_global may be constants (experts frozen) or live graph nodes
    (experts unfrozen); the same graph serves both. `aux` carries the
    experts' own classification losses, added as lambda_aux * sum(aux) when
    nonempty (the unfreezing phase).

    The alignment target and the BCE positive weight are gradient-blocked.
    By default both are re-derived from the current expert values; pass
    `p_star` or `pos_w` to pin them (needed by finite-difference checks,
    where an implicitly re-derived constant would make the checked function
    differ from the differentiated one).
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    n = y.size
    if p_local.shape[0] != n or g.shape != (n, 1):
        raise DimensionError("batch sizes of experts, gate, and labels disagree")

    gt, delta = _soft_target_t(p_local, p_global, y, cfg.kappa)
    w = _conflict_weight_t(p_local, p_global, delta, y, cfg)
    if pos_w is None:
        pos_w = adaptive_pos_weight(gt.value[:, 0])

    # fused NLL
    p_mix = fuse_t(p_local, p_global, g)
    picked = ad.take_per_row(p_mix, y)
    floored = int(np.sum(picked.value < LOG_FLOOR))
    l_mix = ad.tmean(ad.mul(w, ad.neg(ad.log(picked, floor=LOG_FLOOR))))

    # gate BCE against the soft target, positive side scaled by pos_w
    log_g = ad.neg(ad.softplus(ad.neg(gate_logit)))
    log_1mg = ad.neg(ad.softplus(gate_logit))
    bce = ad.neg(ad.add(ad.scale(ad.mul(gt, log_g), pos_w),
                        ad.mul(ad.add(ad.neg(gt), 1.0), log_1mg)))
    l_gate = ad.tmean(ad.mul(w, bce))

    # alignment toward the preferred expert's (constant) distribution
    if p_star is None:
        p_star = np.where(gt.value > 0.5, p_global.value, p_local.value)
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(p_star > 0.0, p_star * np.log(np.maximum(p_star, LOG_FLOOR)), 0.0)
    const_term = plogp.sum(axis=1, keepdims=True)
    cross = ad.tsum(ad.mul(ad.constant(p_star), ad.log(p_mix, floor=LOG_FLOOR)),
                    axis=1, keepdims=True)
    kl = ad.sub(ad.constant(const_term), cross)
    l_align = ad.tmean(ad.mul(w, kl))

    # entropy penalty, scaled by the true-class confidence gap
    h_bern = ad.add(ad.mul(g, ad.neg(log_g)),
                    ad.mul(ad.add(ad.neg(g), 1.0), ad.neg(log_1mg)))
    l_ent = ad.scale(ad.tmean(ad.mul(ad.absval(delta), h_bern)), cfg.lambda_ent)

    terms = {"mix": l_mix, "gate": l_gate,
             "align": ad.scale(l_align, cfg.lambda_align), "ent": l_ent}
    total = None
    for name in cfg.enabled:
        total = terms[name] if total is None else ad.add(total, terms[name])
    if total is None:
        total = ad.constant(0.0)
    l_aux = None
    if aux:
        l_aux = aux[0]
        for extra in aux[1:]:
            l_aux = ad.add(l_aux, extra)
        total = ad.add(total, ad.scale(l_aux, cfg.lambda_aux))

    diagnostics = {
        "floored_log_pmix": floored,
        "pos_w": pos_w,
        "mean_soft_target": float(gt.value.mean()),
        "mean_conflict_weight": float(w.value.mean()),
    }
    return GateLossResult(mix=l_mix, gate=l_gate, align=l_align, ent=l_ent,
                          aux=l_aux, total=total, diagnostics=diagnostics)


# ---------------------------------------------------------------------------
# safe-gate deployment


SAFEGATE_SCHEMA = "nuclass-safegate/1"
PATH_NAMES = ("local", "global")


@dataclass
class SafeGateCalibration:
    """Reliability of each path by its own predicted class, plus thresholds."""

    class_names: tuple[str, ...]
    reliability_local: np.ndarray
    reliability_global: np.ndarray
    tau: float = 0.7
    gamma_gap: float = 0.1
    val_metrics: dict = field(default_factory=dict)

    def reliability(self, path: int) -> np.ndarray:
        return self.reliability_local if path == 0 else self.reliability_global

    def to_json_dict(self) -> dict:
        return {
            "schema": SAFEGATE_SCHEMA,
            "reliability": {
                "local": {name: float(r) for name, r in
                          zip(self.class_names, self.reliability_local)},
                "global": {name: float(r) for name, r in
                           zip(self.class_names, self.reliability_global)},
            },
            "tau": self.tau,
            "gamma_gap": self.gamma_gap,
            "val_metrics": self.val_metrics,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "SafeGateCalibration":
        if doc.get("schema") != SAFEGATE_SCHEMA:
            raise ValueError(f"expected schema {SAFEGATE_SCHEMA!r}")
        names = tuple(doc["reliability"]["local"].keys())
        rl = np.array([doc["reliability"]["local"][n] for n in names])
        rg = np.array([doc["reliability"]["global"][n] for n in names])
        return cls(class_names=names, reliability_local=rl, reliability_global=rg,
                   tau=float(doc["tau"]), gamma_gap=float(doc["gamma_gap"]),
                   val_metrics=dict(doc.get("val_metrics", {})))


def save_calibration(calib: SafeGateCalibration, path, extra: dict | None = None) -> None:
    doc = calib.to_json_dict()
    if extra:
        doc.update(extra)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_calibration(path) -> SafeGateCalibration:
    return SafeGateCalibration.from_json_dict(json.loads(Path(path).read_text()))


def safe_calibrate(
    p_local: np.ndarray,
    p_global: np.ndarray,
    y: np.ndarray,
    class_names: Sequence[str],
) -> SafeGateCalibration:
    """Per-path accuracy grouped by the path's own predicted class.

    Classes a path never predicts get 0.5, an uninformative prior.
    """
    y = np.asarray(y, dtype=np.int64)
    if y.size == 0:
        raise ValueError("empty validation set")
    c = len(class_names)
    tables = []
    for p in (p_local, p_global):
        pred = np.asarray(p).argmax(axis=-1)
        rel = np.full(c, 0.5)
        for k in range(c):
            mask = pred == k
            if mask.any():
                rel[k] = float((y[mask] == k).mean())
        tables.append(rel)
    return SafeGateCalibration(class_names=tuple(class_names),
                               reliability_local=tables[0],
                               reliability_global=tables[1])


@dataclass
class SafeDecision:
    """Per-sample outcome of the safe policy (arrays over the batch)."""

    dist: np.ndarray
    path: np.ndarray
    baseline_path: np.ndarray
    gate_path: np.ndarray
    overridden: np.ndarray
    rho: np.ndarray


def safe_decide(
    p_local: np.ndarray,
    p_global: np.ndarray,
    g: np.ndarray,
    calib: SafeGateCalibration,
) -> SafeDecision:
    """Baseline chooser: argmax over paths of p_max * reliability[path][pred].

    The gate's own choice (global iff g > 0.5) replaces the baseline only
    when g > tau and |rho| > gamma_gap. Output is always a single expert's
    distribution, never a mixture. Ties in the baseline go to the local path.
    """
    pl = np.atleast_2d(np.asarray(p_local, dtype=np.float64))
    pg = np.atleast_2d(np.asarray(p_global, dtype=np.float64))
    g_arr = np.atleast_1d(np.asarray(g, dtype=np.float64))
    pred_l = pl.argmax(axis=-1)
    pred_g = pg.argmax(axis=-1)
    conf_l = pl.max(axis=-1)
    conf_g = pg.max(axis=-1)
    rho = conf_g - conf_l

    score_l = conf_l * calib.reliability_local[pred_l]
    score_g = conf_g * calib.reliability_global[pred_g]
    baseline = (score_g > score_l).astype(np.int64)

    gate_choice = (g_arr > 0.5).astype(np.int64)
    override = (g_arr > calib.tau) & (np.abs(rho) > calib.gamma_gap)
    path = np.where(override, gate_choice, baseline)
    dist = np.where(path[:, None] == 1, pg, pl)
    return SafeDecision(dist=dist, path=path, baseline_path=baseline,
                        gate_path=gate_choice, overridden=override, rho=rho)


def select_thresholds(
    p_local: np.ndarray,
    p_global: np.ndarray,
    g: np.ndarray,
    y: np.ndarray,
    calib: SafeGateCalibration,
    taus: Sequence[float] = (0.5, 0.6, 0.7, 0.8, 0.9),
    gaps: Sequence[float] = (0.0, 0.05, 0.10, 0.15, 0.20, 0.25, 0.30),
) -> SafeGateCalibration:
    """Grid-search (tau, gamma_gap) on validation accuracy.

    Keeps points whose safe accuracy is at least the best single path's;
    among those takes the most accurate, ties toward larger thresholds. If
    the constraint is infeasible on the grid, falls back to the overall
    accuracy maximum (same tie rule) and records that in val_metrics.
    """
    y = np.asarray(y, dtype=np.int64)
    acc_l = float((np.asarray(p_local).argmax(axis=-1) == y).mean())
    acc_g = float((np.asarray(p_global).argmax(axis=-1) == y).mean())
    floor = max(acc_l, acc_g)

    rows = []
    for tau in taus:
        for gap in gaps:
            trial = SafeGateCalibration(
                class_names=calib.class_names,
                reliability_local=calib.reliability_local,
                reliability_global=calib.reliability_global,
                tau=float(tau), gamma_gap=float(gap))
            decision = safe_decide(p_local, p_global, g, trial)
            acc = float((decision.dist.argmax(axis=-1) == y).mean())
            rows.append((acc, float(tau), float(gap)))

    feasible = [r for r in rows if r[0] >= floor]
    pool = feasible if feasible else rows
    best = max(pool)  # lexicographic: accuracy, then tau, then gamma_gap
    chosen = SafeGateCalibration(
        class_names=calib.class_names,
        reliability_local=calib.reliability_local,
        reliability_global=calib.reliability_global,
        tau=best[1], gamma_gap=best[2],
        val_metrics={
            "val_accuracy_safe": best[0],
            "val_accuracy_local": acc_l,
            "val_accuracy_global": acc_g,
            "constraint_met": bool(feasible),
        })
    return chosen

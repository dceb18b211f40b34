"""The two expert classifiers and their losses.

Path local: FiLM-conditioned head over the cell-scale feature. The tissue
index selects an embedding, a 2-layer MLP maps it to a (gamma, beta) pair,
and the feature is modulated as LN(h) * (1 + gamma) + beta before a 2-layer
classification head. The modulation MLP's output layer starts at zero, so
modulation is exactly the identity (pure LayerNorm) at initialization.

Path global: two-stream expert. The cell-scale stream is LN + linear
projection; the context stream gets its own tissue FiLM, then LN + linear
projection; both land in a common width and are concatenated (the context
half scaled by a warm-up factor alpha, and hard-zeroed per sample under
context dropout). A 2-layer MLP head classifies the concatenation.

Losses: class-balanced cross-entropy with label smoothing (Effective Number
class weights), and for Path global a local-aware weighting that focuses
training where the (frozen) local expert is unsure, plus an unweighted
stabilizer term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import DimensionError
from .layers import MLP, Linear

DEFAULT_BETA_EN = 0.9999
DEFAULT_SMOOTHING = 0.1
DEFAULT_GAMMA_FOCAL = 2.0
DEFAULT_LAMBDA_STABLE = 0.3
DEFAULT_TISSUE_EMBED_DIM = 64
DEFAULT_FILM_HIDDEN = 128
DEFAULT_HEAD_HIDDEN = 256


@dataclass
class ExpertOutput:
    """Logits, matching softmax probabilities, and the pre-head feature."""

    z: Tensor
    p: Tensor
    feature: Tensor

    @property
    def probs(self) -> np.ndarray:
        return self.p.value


class FiLMAdaptor:
    """Tissue-conditioned feature modulation: LN(h) * (1 + gamma_t) + beta_t."""

    def __init__(
        self,
        n_tissues: int,
        d: int,
        rng: np.random.Generator,
        d_tissue: int = DEFAULT_TISSUE_EMBED_DIM,
        hidden: int = DEFAULT_FILM_HIDDEN,
        name: str = "film",
    ):
        self.d = d
        self.emb = ad.parameter(
            rng.normal(scale=0.1, size=(n_tissues, d_tissue)), name=f"{name}.emb"
        )
        self.fc1 = Linear(d_tissue, hidden, rng, name=f"{name}.fc1")
        # zero output layer -> (gamma, beta) = (0, 0) -> identity modulation
        self.fc2 = Linear(hidden, 2 * d, rng, zero_init=True, name=f"{name}.fc2")
        self.name = name

    def modulation(self, tissue_ids: np.ndarray) -> tuple[Tensor, Tensor]:
        e = ad.embedding(self.emb, tissue_ids)
        hid = ad.relu(self.fc1(e))
        gb = self.fc2(hid)
        gamma = ad.slice_cols(gb, 0, self.d)
        beta = ad.slice_cols(gb, self.d, 2 * self.d)
        return gamma, beta

    def __call__(self, h: Tensor, tissue_ids: np.ndarray) -> Tensor:
        if h.shape[-1] != self.d:
            raise DimensionError(
                f"feature dim {h.shape[-1]} does not match adaptor dim {self.d}"
            )
        gamma, beta = self.modulation(tissue_ids)
        return ad.add(ad.mul(ad.layer_norm(h), ad.add(gamma, 1.0)), beta)

    def params(self) -> dict[str, Tensor]:
        out = {f"{self.name}.emb": self.emb}
        out.update(self.fc1.params())
        out.update(self.fc2.params())
        return out


class LocalExpert:
    """FiLM modulation then a 2-layer MLP head over the local feature."""

    def __init__(
        self,
        n_tissues: int,
        d_local: int,
        n_classes: int,
        rng: np.random.Generator,
        hidden: int = DEFAULT_HEAD_HIDDEN,
        d_tissue: int = DEFAULT_TISSUE_EMBED_DIM,
        film_hidden: int = DEFAULT_FILM_HIDDEN,
    ):
        self.film = FiLMAdaptor(n_tissues, d_local, rng, d_tissue=d_tissue,
                                hidden=film_hidden, name="local.film")
        self.head = MLP([d_local, hidden, n_classes], rng, name="local.head")
        self.arch = {"n_tissues": n_tissues, "d_local": d_local,
                     "n_classes": n_classes, "hidden": hidden,
                     "d_tissue": d_tissue, "film_hidden": film_hidden}

    def __call__(self, local_feats, tissue_ids) -> ExpertOutput:
        h = ad.as_tensor(local_feats)
        feat = self.film(h, np.asarray(tissue_ids, dtype=np.int64))
        z = self.head(feat)
        return ExpertOutput(z=z, p=ad.softmax(z), feature=feat)

    def params(self) -> dict[str, Tensor]:
        out = dict(self.film.params())
        out.update(self.head.params())
        return out


class GlobalExpert:
    """Two-stream expert over the local feature and the context feature."""

    def __init__(
        self,
        n_tissues: int,
        d_local: int,
        d_ctx: int,
        n_classes: int,
        rng: np.random.Generator,
        d_proj: int = 512,
        hidden: int = DEFAULT_HEAD_HIDDEN,
        d_tissue: int = DEFAULT_TISSUE_EMBED_DIM,
        rho_drop: float = 0.10,
        film_hidden: int = DEFAULT_FILM_HIDDEN,
    ):
        self.film_ctx = FiLMAdaptor(n_tissues, d_ctx, rng, d_tissue=d_tissue,
                                    hidden=film_hidden, name="global.film_ctx")
        self.w_u = Linear(d_local, d_proj, rng, bias=False, name="global.w_u")
        self.w_v = Linear(d_ctx, d_proj, rng, bias=False, name="global.w_v")
        self.head = MLP([2 * d_proj, hidden, n_classes], rng, name="global.head")
        self.d_proj = d_proj
        self.rho_drop = rho_drop
        self.arch = {"n_tissues": n_tissues, "d_local": d_local, "d_ctx": d_ctx,
                     "n_classes": n_classes, "d_proj": d_proj, "hidden": hidden,
                     "d_tissue": d_tissue, "rho_drop": rho_drop,
                     "film_hidden": film_hidden}

    def __call__(
        self,
        local_feats,
        ctx_feats,
        tissue_ids,
        alpha: float = 1.0,
        drop_mask: np.ndarray | None = None,
    ) -> ExpertOutput:
        """drop_mask[i] = True hard-zeroes sample i's projected context
        (no rescaling); alpha scales the surviving context half."""
        if not 0.0 <= alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        u = ad.as_tensor(local_feats)
        v = ad.as_tensor(ctx_feats)
        tissue_ids = np.asarray(tissue_ids, dtype=np.int64)

        v_mod = self.film_ctx(v, tissue_ids)
        u_proj = self.w_u(ad.layer_norm(u))
        v_proj = self.w_v(ad.layer_norm(v_mod))
        if drop_mask is not None:
            keep = (~np.asarray(drop_mask, dtype=bool)).astype(np.float64)
            v_proj = ad.mul(v_proj, ad.constant(keep[:, None]))
        s = ad.concat([u_proj, ad.scale(v_proj, alpha)], axis=1)
        z = self.head(s)
        return ExpertOutput(z=z, p=ad.softmax(z), feature=s)

    def draw_drop_mask(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.random(n) < self.rho_drop

    def params(self) -> dict[str, Tensor]:
        out = dict(self.film_ctx.params())
        out.update(self.w_u.params())
        out.update(self.w_v.params())
        out.update(self.head.params())
        return out


# ---------------------------------------------------------------------------
# losses


def effective_number_weights(counts, beta_en: float = DEFAULT_BETA_EN) -> np.ndarray:
    """Class weights proportional to (1 - beta) / (1 - beta^n_c), mean 1."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.ndim != 1 or counts.size == 0:
        raise ValueError("counts must be a nonempty 1-d array")
    if np.any(counts < 1):
        raise ValueError("every class needs at least one sample for its weight")
    if not 0.0 <= beta_en < 1.0:
        raise ValueError("beta_en must lie in [0, 1)")
    if beta_en == 0.0:
        raw = np.ones_like(counts, dtype=np.float64)
    else:
        raw = (1.0 - beta_en) / (1.0 - np.power(beta_en, counts.astype(np.float64)))
    return raw / raw.mean()


def smoothed_targets(y, n_classes: int, eps: float = DEFAULT_SMOOTHING) -> np.ndarray:
    """1 - eps on the true class, eps / (C - 1) elsewhere."""
    if n_classes < 2:
        raise ValueError("label smoothing needs at least 2 classes")
    if not 0.0 <= eps < 1.0:
        raise ValueError("eps must lie in [0, 1)")
    y = np.asarray(y, dtype=np.int64)
    scalar = y.ndim == 0
    y = np.atleast_1d(y)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError("label out of range")
    q = np.full((y.size, n_classes), eps / (n_classes - 1))
    q[np.arange(y.size), y] = 1.0 - eps
    return q[0] if scalar else q


def class_balanced_ce(
    z: Tensor,
    y,
    class_weights: np.ndarray,
    eps: float = DEFAULT_SMOOTHING,
    reduce: str = "mean",
):
    """-w_y * sum_c q_c log softmax(z)_c via log-softmax.

    reduce "mean" gives the batch scalar; "none" the per-sample column.
    """
    z = ad.as_tensor(z)
    batched = z.value.ndim == 2
    if not batched:
        z = ad.as_tensor(z.value[None, :])
    n, c = z.shape
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if y.shape != (n,):
        raise DimensionError("labels must align with the logit batch")
    q = np.atleast_2d(smoothed_targets(y, c, eps))
    w_y = np.asarray(class_weights, dtype=np.float64)[y][:, None]
    log_p = ad.log_softmax(z)
    per_sample = ad.neg(ad.tsum(ad.mul(log_p, ad.constant(q)), axis=1, keepdims=True))
    per_sample = ad.mul(per_sample, ad.constant(w_y))
    if reduce == "none":
        return per_sample
    if reduce == "mean":
        return ad.tmean(per_sample)
    raise ValueError(f"unknown reduce {reduce!r}")


def local_aware_weight(p_local: np.ndarray, y, gamma_focal: float = DEFAULT_GAMMA_FOCAL):
    """(1 - p_local(y))^gamma; focuses Path global on Path local's misses."""
    if gamma_focal < 0:
        raise ValueError("gamma_focal must be >= 0")
    p_local = np.asarray(p_local, dtype=np.float64)
    if p_local.ndim == 1:
        return float((1.0 - p_local[int(y)]) ** gamma_focal)
    y = np.asarray(y, dtype=np.int64)
    picked = p_local[np.arange(p_local.shape[0]), y]
    return (1.0 - picked) ** gamma_focal


def global_loss(
    z_global: Tensor,
    y,
    p_local_frozen: np.ndarray,
    class_weights: np.ndarray,
    eps: float = DEFAULT_SMOOTHING,
    gamma_focal: float = DEFAULT_GAMMA_FOCAL,
    lambda_stable: float = DEFAULT_LAMBDA_STABLE,
) -> tuple[Tensor, dict]:
    """mean(w_i * l_i) + lambda_stable * mean(l_i).

    p_local_frozen carries no gradient; the weights w_i are plain numbers.
    """
    per_sample = class_balanced_ce(z_global, y, class_weights, eps, reduce="none")
    w = np.atleast_1d(local_aware_weight(p_local_frozen, y, gamma_focal))
    main = ad.tmean(ad.mul(per_sample, ad.constant(w[:, None])))
    stable = ad.tmean(per_sample)
    total = ad.add(main, ad.scale(stable, lambda_stable))
    parts = {"main": float(main.value), "stable": float(stable.value)}
    return total, parts

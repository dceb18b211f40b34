"""Datasets of per-cell feature pairs (local patch view + tissue context view).

Covers the label taxonomy, a columnar in-memory dataset, a synthetic
generator with controllable local/global complementarity, stratified cohort
splits, and NDJSON/CSV interchange.

The generator builds Gaussian class clusters whose means are arranged so
that designated classes are separable in exactly one view: a LOCAL-SEPARABLE
class shares its context-view mean with a confuser class (so context alone
cannot tell them apart), and a GLOBAL-SEPARABLE class shares its local-view
mean symmetrically. Classes tagged BOTH get distinct means in both views.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .seeding import substream

NDJSON_SCHEMA = "nuclass-features/1"

REGIME_LOCAL = "local"
REGIME_GLOBAL = "global"
REGIME_BOTH = "both"
_REGIMES = (REGIME_LOCAL, REGIME_GLOBAL, REGIME_BOTH)


class ConfigError(ValueError):
    """Invalid generator or taxonomy configuration."""


class FormatError(ValueError):
    """Malformed dataset file; message names the offending line."""


@dataclass(frozen=True)
class Taxonomy:
    """Ordered class and tissue vocabularies; indices are positional."""

    classes: tuple[str, ...]
    tissues: tuple[str, ...]

    def __post_init__(self):
        if len(self.classes) < 2:
            raise ConfigError("taxonomy needs at least 2 classes")
        if len(self.tissues) < 1:
            raise ConfigError("taxonomy needs at least 1 tissue")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names")
        if len(set(self.tissues)) != len(self.tissues):
            raise ConfigError("duplicate tissue names")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_tissues(self) -> int:
        return len(self.tissues)

    def class_index(self, name: str) -> int:
        try:
            return self.classes.index(name)
        except ValueError:
            raise KeyError(f"unknown class name: {name!r}") from None

    def tissue_index(self, name: str) -> int:
        try:
            return self.tissues.index(name)
        except ValueError:
            raise KeyError(f"unknown tissue name: {name!r}") from None


@dataclass(frozen=True)
class FeatureRecord:
    cell_id: str
    tissue: int
    label: int | None
    local: np.ndarray
    ctx: np.ndarray


class FeatureDataset:
    """Columnar store of feature records, immutable after construction.

    labels use -1 for "absent". All arrays are float64 / int64.
    """

    def __init__(
        self,
        taxonomy: Taxonomy,
        local: np.ndarray,
        ctx: np.ndarray,
        tissue: np.ndarray,
        labels: np.ndarray,
        cell_ids: list[str],
    ):
        local = np.asarray(local, dtype=np.float64)
        ctx = np.asarray(ctx, dtype=np.float64)
        tissue = np.asarray(tissue, dtype=np.int64)
        labels = np.asarray(labels, dtype=np.int64)
        n = local.shape[0]
        if local.ndim != 2 or ctx.ndim != 2:
            raise ValueError("feature blocks must be 2-d (n, dim)")
        if ctx.shape[0] != n or tissue.shape != (n,) or labels.shape != (n,):
            raise ValueError("column lengths disagree")
        if len(cell_ids) != n:
            raise ValueError("cell_ids length disagrees with features")
        if n and (tissue.min() < 0 or tissue.max() >= taxonomy.n_tissues):
            raise ValueError("tissue index out of range")
        if n and (labels.min() < -1 or labels.max() >= taxonomy.n_classes):
            raise ValueError("label index out of range")
        self.taxonomy = taxonomy
        self.local = local
        self.ctx = ctx
        self.tissue = tissue
        self.labels = labels
        self.cell_ids = list(cell_ids)
        for a in (self.local, self.ctx, self.tissue, self.labels):
            a.setflags(write=False)

    def __len__(self) -> int:
        return self.local.shape[0]

    @property
    def d_local(self) -> int:
        return self.local.shape[1]

    @property
    def d_ctx(self) -> int:
        return self.ctx.shape[1]

    def records(self) -> Iterator[FeatureRecord]:
        for i in range(len(self)):
            lab = int(self.labels[i])
            yield FeatureRecord(
                cell_id=self.cell_ids[i],
                tissue=int(self.tissue[i]),
                label=None if lab < 0 else lab,
                local=self.local[i].copy(),
                ctx=self.ctx[i].copy(),
            )

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return FeatureDataset(
            self.taxonomy,
            self.local[idx],
            self.ctx[idx],
            self.tissue[idx],
            self.labels[idx],
            [self.cell_ids[int(i)] for i in idx],
        )

    def equals(self, other: "FeatureDataset") -> bool:
        return (
            self.taxonomy == other.taxonomy
            and self.cell_ids == other.cell_ids
            and np.array_equal(self.local, other.local)
            and np.array_equal(self.ctx, other.ctx)
            and np.array_equal(self.tissue, other.tissue)
            and np.array_equal(self.labels, other.labels)
        )


def class_counts(dataset: FeatureDataset) -> np.ndarray:
    """Per-class record counts. All records must be labeled."""
    if len(dataset) and dataset.labels.min() < 0:
        bad = int(np.argmax(dataset.labels < 0))
        raise ValueError(f"unlabeled record at index {bad}")
    return np.bincount(dataset.labels, minlength=dataset.taxonomy.n_classes).astype(
        np.int64
    )


# ---------------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class SynthConfig:
    """Recipe for a complementary-view Gaussian mixture.

    regimes[c] tags each class local / global / both; confusers[c] names the
    partner class whose mean is shared in the non-separating view (-1 for
    classes tagged both). Confuser links may chain; mean groups are the
    connected components.

    tissue_xor lists LOCAL-SEPARABLE pairs whose local-view separation is
    keyed to tissue: tissues are grouped in twos, each tissue pair gets its
    own fresh local axis, and the class pair sits antipodally on that axis
    with the sign flipped between the two tissues of the group. Within any
    one tissue the class pair stays fully separated, but the two marginal
    local-feature distributions coincide, so a tissue-blind reader of the
    local view cannot tell the pair apart at all, while a per-tissue affine
    (FiLM) makes the task linear. Requires an even tissue count so the
    parity mixture is balanced.
    """

    classes: tuple[str, ...]
    tissues: tuple[str, ...]
    d_local: int = 1536
    d_ctx: int = 1024
    n_per_class: tuple[int, ...] = ()
    sep_local: float = 3.0
    sep_ctx: float = 3.0
    tissue_shift: float = 0.5
    noise: float = 1.0
    regimes: tuple[str, ...] = ()
    confusers: tuple[int, ...] = ()
    tissue_xor: tuple[tuple[int, int], ...] = ()
    seed: int = 0

    def taxonomy(self) -> Taxonomy:
        return Taxonomy(self.classes, self.tissues)

    def validate(self) -> None:
        c = len(self.classes)
        self.taxonomy()
        if len(self.n_per_class) != c:
            raise ConfigError("n_per_class must list one count per class")
        if any(n < 1 for n in self.n_per_class):
            raise ConfigError("n_per_class entries must be >= 1")
        if min(self.sep_local, self.sep_ctx) < 0 or self.noise < 0:
            raise ConfigError("separations and noise must be >= 0")
        if self.tissue_shift < 0:
            raise ConfigError("tissue_shift must be >= 0")
        if len(self.regimes) != c or len(self.confusers) != c:
            raise ConfigError("regimes and confusers must list one entry per class")
        for k, regime in enumerate(self.regimes):
            if regime not in _REGIMES:
                raise ConfigError(f"class {k}: unknown regime {regime!r}")
            partner = self.confusers[k]
            if regime == REGIME_BOTH:
                if partner != -1:
                    raise ConfigError(f"class {k}: regime 'both' takes no confuser")
                continue
            if not (0 <= partner < c):
                raise ConfigError(
                    f"class {k}: confuser {partner} is not a known class"
                )
            if partner == k:
                raise ConfigError(f"class {k}: cannot confuse with itself")
            if self.regimes[partner] != regime:
                raise ConfigError(
                    f"class {k}: confuser {partner} has a different regime"
                )
        seen_xor: set[int] = set()
        for i, j in self.tissue_xor:
            for k in (i, j):
                if not (0 <= k < c):
                    raise ConfigError(f"tissue_xor names unknown class {k}")
                if self.regimes[k] != REGIME_LOCAL:
                    raise ConfigError(
                        f"tissue_xor class {k} must be LOCAL-SEPARABLE"
                    )
                if k in seen_xor:
                    raise ConfigError(f"class {k} appears in two tissue_xor pairs")
                seen_xor.add(k)
            if i == j:
                raise ConfigError("a tissue_xor pair needs two distinct classes")
        if self.tissue_xor and len(self.tissues) % 2 != 0:
            raise ConfigError("tissue_xor needs an even tissue count")


def _mean_groups(cfg: SynthConfig, shared_view: str) -> np.ndarray:
    """Group ids per class for one view; confuser-linked classes share a group.

    shared_view "ctx": LOCAL-SEPARABLE classes collapse (their context means
    coincide). shared_view "local": GLOBAL-SEPARABLE classes collapse.
    """
    c = len(cfg.classes)
    parent = list(range(c))

    def find(a: int) -> int:
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    collapse_regime = REGIME_LOCAL if shared_view == "ctx" else REGIME_GLOBAL
    for k in range(c):
        if cfg.regimes[k] == collapse_regime:
            parent[find(k)] = find(cfg.confusers[k])
    roots = [find(k) for k in range(c)]
    remap: dict[int, int] = {}
    out = np.empty(c, dtype=np.int64)
    for k, r in enumerate(roots):
        if r not in remap:
            remap[r] = len(remap)
        out[k] = remap[r]
    return out


def _class_means(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray, int]:
    local_groups = _mean_groups(cfg, shared_view="local")
    ctx_groups = _mean_groups(cfg, shared_view="ctx")
    n_local_axes = int(local_groups.max()) + 1
    xor_axes = len(cfg.tissue_xor) * (len(cfg.tissues) // 2)
    if n_local_axes + xor_axes > cfg.d_local:
        raise ConfigError("d_local too small for the distinct local-view means")
    if ctx_groups.max() + 1 > cfg.d_ctx:
        raise ConfigError("d_ctx too small for the distinct context-view means")
    c = len(cfg.classes)
    mu_local = np.zeros((c, cfg.d_local))
    mu_ctx = np.zeros((c, cfg.d_ctx))
    mu_local[np.arange(c), local_groups] = cfg.sep_local
    mu_ctx[np.arange(c), ctx_groups] = cfg.sep_ctx
    return mu_local, mu_ctx, n_local_axes


def generate(cfg: SynthConfig) -> FeatureDataset:
    """Sample the mixture described by cfg; byte-identical for a fixed cfg."""
    cfg.validate()
    taxonomy = cfg.taxonomy()
    mu_local, mu_ctx, n_local_axes = _class_means(cfg)

    # tissue-keyed means: one fresh axis per (pair, tissue-group), parity sign
    t = taxonomy.n_tissues
    half = t // 2
    xor_classes = {k for pair in cfg.tissue_xor for k in pair}
    xor_mu = np.zeros((len(cfg.classes), t, cfg.d_local))
    for p, (i, j) in enumerate(cfg.tissue_xor):
        mu_local[i] = 0.0
        mu_local[j] = 0.0
        for tis in range(t):
            axis = n_local_axes + p * half + tis // 2
            sign = 1.0 if tis % 2 == 0 else -1.0
            xor_mu[i, tis, axis] = sign * cfg.sep_local
            xor_mu[j, tis, axis] = -sign * cfg.sep_local

    off_rng = substream(cfg.seed, "synth", "tissue-offset")
    tissue_local = off_rng.standard_normal((t, cfg.d_local))
    tissue_ctx = off_rng.standard_normal((t, cfg.d_ctx))
    # unit directions scaled by the configured shift
    tissue_local *= cfg.tissue_shift / np.maximum(
        np.linalg.norm(tissue_local, axis=1, keepdims=True), 1e-12
    )
    tissue_ctx *= cfg.tissue_shift / np.maximum(
        np.linalg.norm(tissue_ctx, axis=1, keepdims=True), 1e-12
    )

    assign_rng = substream(cfg.seed, "synth", "tissue-assign")
    noise_rng = substream(cfg.seed, "synth", "noise")

    blocks_local, blocks_ctx, blocks_tissue, blocks_label = [], [], [], []
    for k, n_k in enumerate(cfg.n_per_class):
        tiss = assign_rng.integers(0, t, size=n_k)
        if k in xor_classes:
            loc = xor_mu[k][tiss] + tissue_local[tiss]
        else:
            loc = mu_local[k] + tissue_local[tiss]
        loc = loc + cfg.noise * noise_rng.standard_normal((n_k, cfg.d_local))
        ctx = mu_ctx[k] + tissue_ctx[tiss]
        ctx = ctx + cfg.noise * noise_rng.standard_normal((n_k, cfg.d_ctx))
        blocks_local.append(loc)
        blocks_ctx.append(ctx)
        blocks_tissue.append(tiss)
        blocks_label.append(np.full(n_k, k, dtype=np.int64))

    local = np.concatenate(blocks_local, axis=0)
    ctx = np.concatenate(blocks_ctx, axis=0)
    tissue = np.concatenate(blocks_tissue, axis=0)
    labels = np.concatenate(blocks_label, axis=0)
    cell_ids = [f"cell-{i:06d}" for i in range(local.shape[0])]
    return FeatureDataset(taxonomy, local, ctx, tissue, labels, cell_ids)


def complementary_benchmark_config(
    per_class: int = 3500,
    d_local: int = 32,
    d_ctx: int = 32,
    sep: float = 2.5,
    noise: float = 1.0,
    seed: int = 0,
) -> SynthConfig:
    """Eight classes: two LOCAL-SEPARABLE pairs and two GLOBAL-SEPARABLE pairs.

    Within a local pair the context means coincide, so a context-only model
    is at coin-flip accuracy on that subset; the global pairs mirror this in
    the local view. The local pairs additionally carry the tissue-keyed
    axis scheme (tissue_xor), so the local view resolves them only through
    tissue conditioning; a tissue-blind reader of the local features sees
    the two pair members as the same marginal distribution. Tissue shift is
    zero here so tissue identity enters the models only through the
    conditioning ids, not through the features. Defaults give 28k cells
    (20k/4k/4k under a 5/7, 1/7, 1/7 split) over sixteen tissues.
    """
    classes = (
        "loc_a0", "loc_a1", "loc_b0", "loc_b1",
        "glo_a0", "glo_a1", "glo_b0", "glo_b1",
    )
    regimes = (REGIME_LOCAL,) * 4 + (REGIME_GLOBAL,) * 4
    confusers = (1, 0, 3, 2, 5, 4, 7, 6)
    return SynthConfig(
        classes=classes,
        tissues=("breast", "colon", "skin", "lung",
                 "ovary", "pancreas", "liver", "kidney",
                 "stomach", "bladder", "prostate", "thyroid",
                 "uterus", "tonsil", "spleen", "lymph_node"),
        d_local=d_local,
        d_ctx=d_ctx,
        n_per_class=(per_class,) * 8,
        sep_local=sep,
        sep_ctx=sep,
        tissue_shift=0.0,
        noise=noise,
        regimes=regimes,
        confusers=confusers,
        tissue_xor=((0, 1), (2, 3)),
        seed=seed,
    )


def hard_class_config(
    per_class: int = 600,
    d_local: int = 32,
    d_ctx: int = 32,
    sep: float = 3.0,
    sep_ctx: float = 2.0,
    noise: float = 1.2,
    seed: int = 0,
) -> SynthConfig:
    """Six classes, three easy and three locally confusable hard ones.

    The easy classes are LOCAL-SEPARABLE, so a sample-difficulty weight
    derived from the local expert's confidence is near zero on them. The
    hard triple chains into one GLOBAL-SEPARABLE group (one shared
    local-view mean), resolvable only through the context view, whose
    separation is kept below the local one so the triple retains headroom.
    Counts are equal on purpose: class-frequency rebalancing inside the
    cross entropy then cancels out, and any difference between weighted and
    unweighted training comes from the per-sample weighting alone.
    """
    classes = ("easy0", "easy1", "easy2", "hard0", "hard1", "hard2")
    regimes = (REGIME_LOCAL,) * 3 + (REGIME_GLOBAL,) * 3
    confusers = (1, 2, 0, 4, 5, 3)
    return SynthConfig(
        classes=classes,
        tissues=("breast", "colon"),
        d_local=d_local,
        d_ctx=d_ctx,
        n_per_class=(per_class,) * 6,
        sep_local=sep,
        sep_ctx=sep_ctx,
        tissue_shift=0.5,
        noise=noise,
        regimes=regimes,
        confusers=confusers,
        seed=seed,
    )


# ---------------------------------------------------------------------------
# cohort splits


@dataclass(frozen=True)
class CohortSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    eval_taxonomy: Taxonomy | None = None

    def __post_init__(self):
        for name in ("train", "val", "test"):
            object.__setattr__(
                self, name, np.asarray(getattr(self, name), dtype=np.int64)
            )


def split_dataset(
    dataset: FeatureDataset,
    fractions: tuple[float, float, float] = (0.7, 0.15, 0.15),
    seed: int = 0,
) -> CohortSplit:
    """Stratified train/val/test split; indices disjoint and exhaustive."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    if any(f < 0 for f in fractions):
        raise ValueError("split fractions must be >= 0")
    if len(dataset) and dataset.labels.min() < 0:
        raise ValueError("stratified split requires labels on every record")
    rng = substream(seed, "split")
    buckets: tuple[list, list, list] = ([], [], [])
    for k in range(dataset.taxonomy.n_classes):
        idx = np.flatnonzero(dataset.labels == k)
        rng.shuffle(idx)
        n = idx.size
        n_train = int(round(fractions[0] * n))
        n_val = int(round(fractions[1] * n))
        n_train = min(n_train, n)
        n_val = min(n_val, n - n_train)
        buckets[0].append(idx[:n_train])
        buckets[1].append(idx[n_train : n_train + n_val])
        buckets[2].append(idx[n_train + n_val :])
    parts = [
        np.sort(np.concatenate(b)) if b else np.empty(0, dtype=np.int64)
        for b in buckets
    ]
    return CohortSplit(train=parts[0], val=parts[1], test=parts[2])


# ---------------------------------------------------------------------------
# interchange formats


def save_records(dataset: FeatureDataset, path, fmt: str = "ndjson",
                 meta: dict | None = None) -> None:
    """Write the dataset; `meta` entries join the NDJSON header line.

    CSV is a flat export with no header object, so meta is rejected there
    rather than silently dropped.
    """
    path = Path(path)
    if fmt == "ndjson":
        _save_ndjson(dataset, path, meta)
    elif fmt == "csv":
        if meta:
            raise ValueError("CSV export cannot carry header metadata")
        _save_csv(dataset, path)
    else:
        raise ValueError(f"unknown format {fmt!r}")


def load_records(path, fmt: str = "ndjson", taxonomy: Taxonomy | None = None) -> FeatureDataset:
    """Read a dataset file.

    NDJSON is self-describing (the header line carries the taxonomy and
    dims). CSV is a flat export and needs the taxonomy passed in.
    """
    path = Path(path)
    if fmt == "ndjson":
        return _load_ndjson(path)
    if fmt == "csv":
        if taxonomy is None:
            raise ValueError("loading CSV requires an explicit taxonomy")
        return _load_csv(path, taxonomy)
    raise ValueError(f"unknown format {fmt!r}")


def _save_ndjson(dataset: FeatureDataset, path: Path,
                 meta: dict | None = None) -> None:
    tax = dataset.taxonomy
    header = {
        "schema": NDJSON_SCHEMA,
        "classes": list(tax.classes),
        "tissues": list(tax.tissues),
        "d_local": dataset.d_local,
        "d_ctx": dataset.d_ctx,
    }
    for key, value in (meta or {}).items():
        if key in header:
            raise ValueError(f"meta key {key!r} collides with the header")
        header[key] = value
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for rec in dataset.records():
            row = {
                "cell_id": rec.cell_id,
                "tissue": tax.tissues[rec.tissue],
                "label": None if rec.label is None else tax.classes[rec.label],
                "local": rec.local.tolist(),
                "ctx": rec.ctx.tolist(),
            }
            fh.write(json.dumps(row) + "\n")


def _load_ndjson(path: Path) -> FeatureDataset:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}:1: empty file, expected a header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}:1: bad header JSON ({e.msg})") from None
    if header.get("schema") != NDJSON_SCHEMA:
        raise FormatError(
            f"{path}:1: expected schema {NDJSON_SCHEMA!r}, got {header.get('schema')!r}"
        )
    for key in ("classes", "tissues", "d_local", "d_ctx"):
        if key not in header:
            raise FormatError(f"{path}:1: header missing {key!r}")
    taxonomy = Taxonomy(tuple(header["classes"]), tuple(header["tissues"]))
    d_local, d_ctx = int(header["d_local"]), int(header["d_ctx"])

    locals_, ctxs, tissues, labels, cell_ids = [], [], [], [], []
    for lineno, raw in enumerate(lines[1:], start=2):
        if not raw.strip():
            continue
        try:
            row = json.loads(raw)
        except json.JSONDecodeError as e:
            raise FormatError(f"{path}:{lineno}: bad record JSON ({e.msg})") from None
        for key in ("cell_id", "tissue", "label", "local", "ctx"):
            if key not in row:
                raise FormatError(f"{path}:{lineno}: record missing {key!r}")
        try:
            tissues.append(taxonomy.tissue_index(row["tissue"]))
        except KeyError:
            raise FormatError(
                f"{path}:{lineno}: unknown tissue {row['tissue']!r}"
            ) from None
        if row["label"] is None:
            labels.append(-1)
        else:
            try:
                labels.append(taxonomy.class_index(row["label"]))
            except KeyError:
                raise FormatError(
                    f"{path}:{lineno}: unknown class {row['label']!r}"
                ) from None
        loc = np.asarray(row["local"], dtype=np.float64)
        ctx = np.asarray(row["ctx"], dtype=np.float64)
        if loc.shape != (d_local,):
            raise FormatError(
                f"{path}:{lineno}: local has {loc.shape[0] if loc.ndim == 1 else 'ragged'}"
                f" values, header says {d_local}"
            )
        if ctx.shape != (d_ctx,):
            raise FormatError(
                f"{path}:{lineno}: ctx has {ctx.shape[0] if ctx.ndim == 1 else 'ragged'}"
                f" values, header says {d_ctx}"
            )
        locals_.append(loc)
        ctxs.append(ctx)
        cell_ids.append(str(row["cell_id"]))

    n = len(cell_ids)
    return FeatureDataset(
        taxonomy,
        np.vstack(locals_) if n else np.empty((0, d_local)),
        np.vstack(ctxs) if n else np.empty((0, d_ctx)),
        np.asarray(tissues, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        cell_ids,
    )


def _save_csv(dataset: FeatureDataset, path: Path) -> None:
    tax = dataset.taxonomy
    header = (
        ["cell_id", "tissue", "label"]
        + [f"l{i}" for i in range(dataset.d_local)]
        + [f"c{i}" for i in range(dataset.d_ctx)]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for rec in dataset.records():
            writer.writerow(
                [
                    rec.cell_id,
                    tax.tissues[rec.tissue],
                    "" if rec.label is None else tax.classes[rec.label],
                ]
                + [repr(float(v)) for v in rec.local]
                + [repr(float(v)) for v in rec.ctx]
            )


def _load_csv(path: Path, taxonomy: Taxonomy) -> FeatureDataset:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}:1: empty file, expected a header row") from None
        if header[:3] != ["cell_id", "tissue", "label"]:
            raise FormatError(
                f"{path}:1: header must start with cell_id,tissue,label"
            )
        d_local = sum(1 for h in header[3:] if h.startswith("l"))
        d_ctx = sum(1 for h in header[3:] if h.startswith("c"))
        if 3 + d_local + d_ctx != len(header):
            raise FormatError(f"{path}:1: unexpected feature columns in header")

        locals_, ctxs, tissues, labels, cell_ids = [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise FormatError(
                    f"{path}:{lineno}: expected {len(header)} columns, got {len(row)}"
                )
            cell_ids.append(row[0])
            try:
                tissues.append(taxonomy.tissue_index(row[1]))
            except KeyError:
                raise FormatError(
                    f"{path}:{lineno}: unknown tissue {row[1]!r}"
                ) from None
            if row[2] == "":
                labels.append(-1)
            else:
                try:
                    labels.append(taxonomy.class_index(row[2]))
                except KeyError:
                    raise FormatError(
                        f"{path}:{lineno}: unknown class {row[2]!r}"
                    ) from None
            try:
                vals = [float(v) for v in row[3:]]
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-numeric feature value") from None
            locals_.append(vals[:d_local])
            ctxs.append(vals[d_local:])

    n = len(cell_ids)
    return FeatureDataset(
        taxonomy,
        np.asarray(locals_) if n else np.empty((0, d_local)),
        np.asarray(ctxs) if n else np.empty((0, d_ctx)),
        np.asarray(tissues, dtype=np.int64),
        np.asarray(labels, dtype=np.int64),
        cell_ids,
    )

"""Train-to-evaluation label-space projection.

Each evaluation cohort carries its own class list; a fixed binary matrix M
(rows = training classes, columns = evaluation classes) maps predictions
into that space as p_eval = M^T p_train. Rows may be all-zero (training
classes dropped at evaluation); the lost probability is reported as
dropped_mass, and by default the projected vector is renormalized so it is
a proper distribution over the evaluation classes.

Shipped fixtures: lung, ovary, pancreas cohort matrices, plus a small
demo_merge example (two epithelial subclasses collapsing into one).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import DimensionError

PROJ_SCHEMA = "nuclass-proj/1"
DROPPED = -1

BUILTIN_COHORTS = ("lung", "ovary", "pancreas", "demo_merge")


class ProjectionError(ValueError):
    """Invalid mapping or matrix."""


@dataclass(frozen=True)
class ProjectionMatrix:
    """Binary train->eval map; every row sums to 0 or 1, no empty column."""

    m: np.ndarray
    train_classes: tuple[str, ...]
    eval_classes: tuple[str, ...]

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        object.__setattr__(self, "m", m)
        if m.ndim != 2:
            raise ProjectionError("projection matrix must be 2-d")
        if m.shape != (len(self.train_classes), len(self.eval_classes)):
            raise ProjectionError("matrix shape does not match the class lists")
        if not np.all((m == 0.0) | (m == 1.0)):
            raise ProjectionError("matrix entries must be 0 or 1")
        row_sums = m.sum(axis=1)
        if not np.all((row_sums == 0) | (row_sums == 1)):
            bad = self.train_classes[int(np.argmax((row_sums != 0) & (row_sums != 1)))]
            raise ProjectionError(
                f"training class {bad!r} maps to more than one evaluation class"
            )
        col_sums = m.sum(axis=0)
        if np.any(col_sums < 1):
            bad = self.eval_classes[int(np.argmin(col_sums))]
            raise ProjectionError(f"evaluation class {bad!r} has no source class")
        m.setflags(write=False)

    @property
    def n_train(self) -> int:
        return len(self.train_classes)

    @property
    def n_eval(self) -> int:
        return len(self.eval_classes)

    def dropped_rows(self) -> np.ndarray:
        return np.flatnonzero(self.m.sum(axis=1) == 0)

    def mapping(self) -> dict[str, str | None]:
        out: dict[str, str | None] = {}
        for i, name in enumerate(self.train_classes):
            j = np.flatnonzero(self.m[i])
            out[name] = self.eval_classes[int(j[0])] if j.size else None
        return out


@dataclass(frozen=True)
class ProjectedPrediction:
    p_eval: np.ndarray
    dropped_mass: np.ndarray
    renormalized: bool


def build_matrix(
    mapping: Mapping[str, str | None] | Iterable[tuple[str, str | None]],
    train_classes: Sequence[str],
    eval_classes: Sequence[str],
) -> ProjectionMatrix:
    """Assemble M from name pairs; None (or null in files) marks a drop."""
    if isinstance(mapping, Mapping):
        pairs = list(mapping.items())
    else:
        pairs = list(mapping)
    seen: set[str] = set()
    for src, _ in pairs:
        if src in seen:
            raise ProjectionError(f"training class {src!r} mapped twice")
        seen.add(src)
    missing = set(train_classes) - seen
    if missing:
        raise ProjectionError(f"mapping does not cover {sorted(missing)}")
    unknown = seen - set(train_classes)
    if unknown:
        raise ProjectionError(f"mapping names unknown training classes {sorted(unknown)}")

    m = np.zeros((len(train_classes), len(eval_classes)))
    col = {name: j for j, name in enumerate(eval_classes)}
    row = {name: i for i, name in enumerate(train_classes)}
    for src, dst in pairs:
        if dst is None:
            continue
        if dst not in col:
            raise ProjectionError(f"unknown evaluation class {dst!r}")
        m[row[src], col[dst]] = 1.0
    return ProjectionMatrix(m=m, train_classes=tuple(train_classes),
                            eval_classes=tuple(eval_classes))


def project(
    p_train: np.ndarray,
    matrix: ProjectionMatrix,
    renormalize: bool = True,
) -> ProjectedPrediction:
    """p_eval = M^T p_train, with dropped-mass accounting.

    Accepts a single distribution or a batch (n, C_train).
    """
    p = np.asarray(p_train, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    if p.shape[1] != matrix.n_train:
        raise DimensionError(
            f"distribution has {p.shape[1]} classes, matrix expects {matrix.n_train}"
        )
    p_eval = p @ matrix.m
    dropped = 1.0 - p_eval.sum(axis=1)
    dropped = np.clip(dropped, 0.0, 1.0)
    if renormalize:
        if np.any(dropped >= 1.0):
            raise ProjectionError(
                "all probability mass fell on dropped classes; cannot renormalize"
            )
        p_eval = p_eval / (1.0 - dropped)[:, None]
    if single:
        return ProjectedPrediction(p_eval=p_eval[0], dropped_mass=float(dropped[0]),
                                   renormalized=renormalize)
    return ProjectedPrediction(p_eval=p_eval, dropped_mass=dropped,
                               renormalized=renormalize)


def project_labels(y_train, matrix: ProjectionMatrix) -> np.ndarray:
    """Map training labels to evaluation labels; DROPPED (-1) for dropped rows.

    Dropped samples are excluded from evaluation metrics by the caller.
    """
    y = np.atleast_1d(np.asarray(y_train, dtype=np.int64))
    if y.size and (y.min() < 0 or y.max() >= matrix.n_train):
        raise ValueError("training label out of range")
    lut = np.full(matrix.n_train, DROPPED, dtype=np.int64)
    for i in range(matrix.n_train):
        j = np.flatnonzero(matrix.m[i])
        if j.size:
            lut[i] = int(j[0])
    return lut[y]


# ---------------------------------------------------------------------------
# serialization and shipped fixtures


def save_projection(matrix: ProjectionMatrix, path) -> None:
    doc = {
        "schema": PROJ_SCHEMA,
        "train_classes": list(matrix.train_classes),
        "eval_classes": list(matrix.eval_classes),
        "map": matrix.mapping(),
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def projection_from_dict(doc: dict) -> ProjectionMatrix:
    if doc.get("schema") != PROJ_SCHEMA:
        raise ProjectionError(f"expected schema {PROJ_SCHEMA!r}, got {doc.get('schema')!r}")
    for key in ("train_classes", "eval_classes", "map"):
        if key not in doc:
            raise ProjectionError(f"projection file missing {key!r}")
    return build_matrix(doc["map"], doc["train_classes"], doc["eval_classes"])


def load_projection(path) -> ProjectionMatrix:
    return projection_from_dict(json.loads(Path(path).read_text()))


def cohort_matrix(name: str) -> ProjectionMatrix:
    """One of the shipped cohort fixtures: lung, ovary, pancreas, demo_merge."""
    if name not in BUILTIN_COHORTS:
        raise ProjectionError(
            f"unknown cohort {name!r}; shipped cohorts: {', '.join(BUILTIN_COHORTS)}"
        )
    text = resources.files("nuclass.cohorts").joinpath(f"{name}.json").read_text()
    return projection_from_dict(json.loads(text))

"""Synthetic data: taxonomy, generator geometry, splits, interchange."""

import json
from dataclasses import replace

import numpy as np
import pytest

from nuclass import (
    ConfigError,
    FormatError,
    Taxonomy,
    class_counts,
    complementary_benchmark_config,
    generate,
    hard_class_config,
    load_records,
    save_records,
    split_dataset,
)
from nuclass.seeding import substream


@pytest.fixture(scope="module")
def probe_data():
    # smaller and cleaner than the benchmark so mean probes are sharp
    cfg = complementary_benchmark_config(per_class=400, noise=0.3)
    return cfg, generate(cfg)


def test_taxonomy_lookups():
    tax = Taxonomy(("a", "b"), ("t0", "t1", "t2"))
    assert tax.n_classes == 2 and tax.n_tissues == 3
    assert tax.class_index("b") == 1
    assert tax.tissue_index("t2") == 2
    with pytest.raises(KeyError):
        tax.class_index("missing")
    with pytest.raises(KeyError):
        tax.tissue_index("missing")


def test_generate_counts_and_determinism(probe_data):
    cfg, ds = probe_data
    assert len(ds) == 400 * 8
    assert np.array_equal(class_counts(ds), np.full(8, 400))
    assert ds.tissue.min() >= 0 and ds.tissue.max() < 16
    again = generate(cfg)
    assert ds.equals(again), "same config must give a byte-identical draw"


def _class_mean(ds, k, view):
    block = getattr(ds, view)[ds.labels == k]
    return block.mean(axis=0)


def test_local_pair_shares_context_mean(probe_data):
    _, ds = probe_data
    # classes 0 and 1 are a LOCAL-SEPARABLE pair: same context cloud
    d_same = np.linalg.norm(_class_mean(ds, 0, "ctx") - _class_mean(ds, 1, "ctx"))
    d_cross = np.linalg.norm(_class_mean(ds, 0, "ctx") - _class_mean(ds, 4, "ctx"))
    assert d_same < 0.5, f"paired context means should coincide, got {d_same:.3f}"
    assert d_cross > 1.5, "distinct groups must stay separated in context"


def test_global_pair_shares_local_mean(probe_data):
    _, ds = probe_data
    # classes 4 and 5 are a GLOBAL-SEPARABLE pair: same local cloud
    d_same = np.linalg.norm(_class_mean(ds, 4, "local") - _class_mean(ds, 5, "local"))
    d_ctx = np.linalg.norm(_class_mean(ds, 4, "ctx") - _class_mean(ds, 5, "ctx"))
    assert d_same < 0.5
    assert d_ctx > 1.5, "the pair must separate in the context view"


def test_tissue_keyed_axis_cancels_in_the_marginal(probe_data):
    _, ds = probe_data
    # per tissue the xor pair (0, 1) is far apart in the local view, yet the
    # tissue-pooled means coincide, so a tissue-blind reader sees one cloud
    pooled = np.linalg.norm(_class_mean(ds, 0, "local") - _class_mean(ds, 1, "local"))
    assert pooled < 0.5, f"pooled local means should cancel, got {pooled:.3f}"
    for tis in (0, 1):
        sel0 = (ds.labels == 0) & (ds.tissue == tis)
        sel1 = (ds.labels == 1) & (ds.tissue == tis)
        gap = np.linalg.norm(ds.local[sel0].mean(axis=0) - ds.local[sel1].mean(axis=0))
        assert gap > 2.5, f"tissue {tis}: expected a wide within-tissue gap, got {gap:.3f}"


def test_hard_config_validates_and_generates():
    ds = generate(hard_class_config(per_class=20))
    assert len(ds) == 120
    assert ds.taxonomy.n_classes == 6


@pytest.mark.parametrize(
    "mutation",
    [
        {"n_per_class": (10,) * 7},
        {"d_local": 16},
        {"tissue_xor": ((4, 5),)},
        {"confusers": (4, 0, 3, 2, 5, 1, 7, 6)},
        {"noise": -1.0},
        {"tissues": tuple(f"t{i}" for i in range(15))},
    ],
)
def test_config_validation_rejects(mutation):
    # generate() validates the recipe and the mean layout before sampling
    cfg = replace(complementary_benchmark_config(per_class=10), **mutation)
    with pytest.raises(ConfigError):
        generate(cfg)


def test_split_is_stratified_disjoint_exhaustive(probe_data):
    _, ds = probe_data
    parts = split_dataset(ds, (0.7, 0.15, 0.15), seed=3)
    all_idx = np.concatenate([parts.train, parts.val, parts.test])
    assert np.array_equal(np.sort(all_idx), np.arange(len(ds)))
    assert len(set(parts.train) & set(parts.val)) == 0
    assert len(set(parts.train) & set(parts.test)) == 0
    for k in range(8):
        in_train = int(np.sum(ds.labels[parts.train] == k))
        assert in_train == round(0.7 * 400)
    assert split_dataset(ds, (0.7, 0.15, 0.15), seed=3).train.tolist() == parts.train.tolist()
    assert split_dataset(ds, (0.7, 0.15, 0.15), seed=4).train.tolist() != parts.train.tolist()


def test_split_rejects_bad_fractions(probe_data):
    _, ds = probe_data
    with pytest.raises(ValueError):
        split_dataset(ds, (0.5, 0.2, 0.2))
    with pytest.raises(ValueError):
        split_dataset(ds, (1.2, -0.1, -0.1))


def test_ndjson_round_trip(tmp_path):
    ds = generate(complementary_benchmark_config(per_class=6))
    path = tmp_path / "d.ndjson"
    save_records(ds, path)
    assert load_records(path).equals(ds)


def test_ndjson_meta_header(tmp_path):
    ds = generate(complementary_benchmark_config(per_class=3))
    path = tmp_path / "d.ndjson"
    save_records(ds, path, meta={"config_hash": "cafe", "seed": 7})
    header = json.loads(path.read_text().splitlines()[0])
    assert header["config_hash"] == "cafe" and header["seed"] == 7
    assert load_records(path).equals(ds), "meta keys must not disturb loading"
    with pytest.raises(ValueError):
        save_records(ds, path, meta={"schema": "clash"})


def test_csv_round_trip_needs_taxonomy(tmp_path):
    ds = generate(complementary_benchmark_config(per_class=4))
    path = tmp_path / "d.csv"
    save_records(ds, path, fmt="csv")
    assert load_records(path, fmt="csv", taxonomy=ds.taxonomy).equals(ds)
    with pytest.raises(ValueError):
        load_records(path, fmt="csv")
    with pytest.raises(ValueError):
        save_records(ds, path, fmt="csv", meta={"seed": 1})


def test_unknown_format_rejected(tmp_path):
    ds = generate(complementary_benchmark_config(per_class=2))
    with pytest.raises(ValueError):
        save_records(ds, tmp_path / "d.bin", fmt="parquet")
    with pytest.raises(ValueError):
        load_records(tmp_path / "d.bin", fmt="parquet")


def test_format_errors_name_the_line(tmp_path):
    path = tmp_path / "bad.ndjson"
    path.write_text("")
    with pytest.raises(FormatError, match=":1:"):
        load_records(path)

    path.write_text('{"schema": "other/9"}\n')
    with pytest.raises(FormatError, match="schema"):
        load_records(path)

    ds = generate(complementary_benchmark_config(per_class=2))
    good = tmp_path / "good.ndjson"
    save_records(ds, good)
    lines = good.read_text().splitlines()
    row = json.loads(lines[1])
    del row["tissue"]
    (tmp_path / "missing.ndjson").write_text("\n".join([lines[0], json.dumps(row)]) + "\n")
    with pytest.raises(FormatError, match="missing 'tissue'"):
        load_records(tmp_path / "missing.ndjson")

    row = json.loads(lines[1])
    row["local"] = row["local"][:-1]
    (tmp_path / "ragged.ndjson").write_text("\n".join([lines[0], json.dumps(row)]) + "\n")
    with pytest.raises(FormatError, match="header says"):
        load_records(tmp_path / "ragged.ndjson")


def test_class_counts_rejects_unlabeled(tmp_path):
    ds = generate(complementary_benchmark_config(per_class=2))
    path = tmp_path / "d.ndjson"
    save_records(ds, path)
    lines = path.read_text().splitlines()
    row = json.loads(lines[1])
    row["label"] = None
    path.write_text("\n".join([lines[0], json.dumps(row)]) + "\n")
    loaded = load_records(path)
    assert loaded.labels[0] == -1
    with pytest.raises(ValueError):
        class_counts(loaded)


def test_substream_determinism_and_independence():
    a1 = substream(5, "alpha").integers(0, 1000, size=8)
    a2 = substream(5, "alpha").integers(0, 1000, size=8)
    b = substream(5, "beta").integers(0, 1000, size=8)
    other_seed = substream(6, "alpha").integers(0, 1000, size=8)
    assert np.array_equal(a1, a2)
    assert not np.array_equal(a1, b)
    assert not np.array_equal(a1, other_seed)
    nested = substream(5, "alpha", "0").integers(0, 1000, size=8)
    assert not np.array_equal(a1, nested)

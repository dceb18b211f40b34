"""Shared fixtures: one trained benchmark stack reused by several modules.

The session-scoped stack (data + local expert + global expert + gate) is
expensive relative to the rest of the suite, so it is built once and every
consumer treats it as read-only. Tests that need to mutate trained experts
must deepcopy them.
"""

import time

import pytest

from nuclass import (
    complementary_benchmark_config,
    desk_plan,
    generate,
    split_dataset,
    train_gate,
    train_global,
    train_local,
)

BENCHMARK_SPLIT = (5 / 7, 1 / 7, 1 / 7)
TRAIN_SEED = 7


@pytest.fixture(scope="session")
def benchmark_data():
    cfg = complementary_benchmark_config()
    t0 = time.perf_counter()
    ds = generate(cfg)
    parts = split_dataset(ds, BENCHMARK_SPLIT, seed=0)
    return {
        "config": cfg,
        "dataset": ds,
        "train": ds.subset(parts.train),
        "val": ds.subset(parts.val),
        "test": ds.subset(parts.test),
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def benchmark_models(benchmark_data):
    tr, va = benchmark_data["train"], benchmark_data["val"]
    t0 = time.perf_counter()
    local, _, info_local = train_local(tr, va, desk_plan("local"), seed=TRAIN_SEED)
    global_, _, info_global = train_global(
        tr, va, desk_plan("global"), seed=TRAIN_SEED,
        local_expert=local, d_proj=32, hidden=32)
    gate, _, info_gate = train_gate(
        tr, va, desk_plan("gate"), seed=TRAIN_SEED,
        local_expert=local, global_expert=global_)
    return {
        "local": local,
        "global": global_,
        "gate": gate,
        "info": {"local": info_local, "global": info_global, "gate": info_gate},
        "seconds": time.perf_counter() - t0,
    }


@pytest.fixture(scope="session")
def tiny_data():
    """A small draw of the same benchmark family for fast training tests."""
    cfg = complementary_benchmark_config(per_class=40)
    ds = generate(cfg)
    parts = split_dataset(ds, seed=0)
    return {
        "dataset": ds,
        "train": ds.subset(parts.train),
        "val": ds.subset(parts.val),
        "test": ds.subset(parts.test),
    }


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)

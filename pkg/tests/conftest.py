import os

import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_toy(tmp_path_factory):
    """Small generated dataset: 6 train + 2 test solos per category, 4 + 4 cocktails."""
    from soundloc.data import ToyConfig, generate_toy_dataset, load_manifest

    root = tmp_path_factory.mktemp("toy")
    cfg = ToyConfig(clips_per_category=6, test_clips_per_category=2, multi_train=4, multi_test=4, seed=3)
    summary = generate_toy_dataset(cfg, root)
    return {"root": root, "cfg": cfg, "summary": summary,
            "records": load_manifest(root / "manifest.jsonl")}


@pytest.fixture(scope="session")
def tiny_arrays(tiny_toy):
    from soundloc.data import load_arrays, select

    recs, root = tiny_toy["records"], tiny_toy["root"]
    return {(split, subset): load_arrays(select(recs, split, subset), root)
            for split in ("single", "multi") for subset in ("train", "test")}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(config, items):
    if os.environ.get("SOUNDLOC_SKIP_SLOW"):
        skip = pytest.mark.skip(reason="SOUNDLOC_SKIP_SLOW set")
        for item in items:
            if "slow" in item.keywords:
                item.add_marker(skip)

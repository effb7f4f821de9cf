import os
from dataclasses import replace

import numpy as np
import pytest

from detadapt.detector import DetectorConfig
from detadapt.toydomains import SceneSpec, generate_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("DETADAPT_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set DETADAPT_RUN_SLOW=1 to run end-to-end training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """32 px images, three classes, narrow layers."""
    return DetectorConfig(
        image_size=32,
        num_classes=3,
        stage_channels=(4, 8, 8, 8),
        pyramid_channels=8,
        head_convs=1,
        anchor_sizes=(8.0, 16.0, 32.0),
    )


@pytest.fixture
def tiny_scene():
    return SceneSpec(seed=3, image_size=32, num_classes=3, max_objects=2, object_size=(0.25, 0.4))


@pytest.fixture
def tiny_datasets(tmp_path, tiny_scene):
    """Source train/test and target train/test manifests of a few 32 px scenes."""
    out = {}
    for domain in ("source", "target"):
        for split, count in (("train", 6), ("test", 4)):
            spec = replace(tiny_scene, domain=domain, split=split)
            out[f"{domain}_{split}"] = generate_dataset(spec, count, tmp_path / f"{domain}_{split}")
    return out

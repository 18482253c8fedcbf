import numpy as np
import pytest
import torch

from surgsynth.dataset_io import ToyConfig, generate_toy_dataset
from surgsynth.inpaint import ModelRegistry, SSIConfig, train_ssi
from surgsynth.refiner import SceneModelConfig, train_scene_model

torch.set_num_threads(1)

# verdict lines of the acceptance suite, repeated in the terminal summary
ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toy16():
    """Small 16x16 toy dataset shared by the fast unit tests."""
    return generate_toy_dataset(ToyConfig(n_samples=40, image_size=16, n_classes=3, test_fraction=0.25), seed=0)


@pytest.fixture(scope="session")
def tiny_registry(tmp_path_factory, toy16):
    """Briefly trained per-class and scene models; good enough for contract tests, not for quality."""
    records, cm = toy16
    train = [r for r in records if r.split == "train"]
    reg = ModelRegistry(tmp_path_factory.mktemp("registry"))
    for cid in cm.class_ids:
        train_ssi(cid, train, cm, SSIConfig(steps=8, lr=1e-3, batch=8, seed=cid, channel_mults=(1, 2)), reg)
    train_scene_model(train, cm, SceneModelConfig(steps=8, lr=1e-3, batch=8, channel_mults=(1, 2)), reg)
    return ModelRegistry(reg.root)


def random_mask(rng, size, p=0.4):
    return (rng.random((size, size)) < p).astype(np.uint8)

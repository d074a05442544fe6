import numpy as np
import pytest
import torch

from lungseg.cli import run as cli_run
from lungseg.datagen import GeneratorConfig, generate_dataset, split_dataset_by_counts, write_manifest


@pytest.fixture(scope="session", autouse=True)
def single_threaded_torch():
    torch.set_num_threads(1)


# Easy-contrast generator settings for tests that need learnable-but-cheap data.
EASY_GEN = dict(
    delta_range=(0.45, 0.6),
    noise_sigma=0.03,
    count_weights=(0.2, 0.5, 0.3, 0.0, 0.0, 0.0, 0.0),
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24/8/8 easy-contrast dataset at 64x64 shared across slow-ish tests."""
    root = tmp_path_factory.mktemp("tinydata")
    cfg = GeneratorConfig(num_samples=40, image_size=64, seed=123, **EASY_GEN)
    manifest = generate_dataset(cfg, root)
    train, val, test = split_dataset_by_counts(manifest, (24, 8, 8), seed=0)
    write_manifest(train, root / "train.csv")
    write_manifest(val, root / "val.csv")
    write_manifest(test, root / "test.csv")
    return root


@pytest.fixture(scope="session")
def tiny_checkpoints(tiny_dataset, tmp_path_factory):
    """Briefly trained segmenter + detector checkpoints for CLI/eval tests."""
    out = tmp_path_factory.mktemp("tinyckpt")
    assert cli_run(
        ["pseudo-label", "--manifest", str(tiny_dataset / "train.csv"),
         "--out", str(out / "labels.csv")]
    ) == 0
    assert cli_run(
        ["train-seg", "--train", str(tiny_dataset / "train.csv"),
         "--val", str(tiny_dataset / "val.csv"), "--out", str(out / "seg"),
         "--epochs", "3", "--batch-size", "8", "--seed", "1"]
    ) == 0
    assert cli_run(
        ["train-det", "--train", str(tiny_dataset / "train.csv"),
         "--labels", str(out / "labels.csv"), "--val", str(tiny_dataset / "val.csv"),
         "--out", str(out / "det"), "--epochs", "3", "--batch-size", "8", "--seed", "1"]
    ) == 0
    return {
        "data": tiny_dataset,
        "labels": out / "labels.csv",
        "seg": out / "seg" / "seg.ckpt",
        "det": out / "det" / "det.ckpt",
    }

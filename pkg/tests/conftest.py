from __future__ import annotations

import os
import signal as stdlib_signal

import numpy as np
import pytest
import torch

from unicontext import synthdata, tasks, testing
from unicontext.model import build_model
from unicontext.quantizers import bpe
from unicontext.quantizers.bundle import train_quantizers
from unicontext.vocab import build_vocabulary


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="Also run the long training checks",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def kill_own_pid():
    def f(signal=stdlib_signal.SIGTERM):
        os.kill(os.getpid(), signal)

    return f


@pytest.fixture(autouse=True)
def single_thread_torch():
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    yield
    torch.set_num_threads(threads)


@pytest.fixture(scope="session")
def data_config():
    return synthdata.DataConfig(
        seed=3,
        train_scenes=40,
        val_scenes=12,
        image_size=32,
        patch_size=4,
        codebook_size=32,
        codebook_iters=20,
        bpe_merges=32,
        caption_budget=48,
    )


@pytest.fixture(scope="session")
def dataset(data_config):
    return synthdata.build_dataset(data_config)


@pytest.fixture(scope="session")
def quantizers(dataset):
    return train_quantizers(dataset)


@pytest.fixture(scope="session")
def vocab(quantizers):
    return quantizers.vocab


@pytest.fixture
def small_vocab(tokenizer):
    return build_vocabulary(text_size=tokenizer.size, image_code_count=16)


@pytest.fixture
def tokenizer():
    return bpe.train_bpe(
        ["a small red square in the top left", "a large blue bar in the center"],
        num_merges=10,
    )


@pytest.fixture
def seg_task(dataset, quantizers):
    return tasks.SegmentationTask(dataset, quantizers, split="train")


@pytest.fixture
def cap_task(dataset, quantizers):
    return tasks.CaptioningTask(dataset, quantizers, split="train")


@pytest.fixture
def make_model(vocab):
    def _(**kwargs):
        values = {"max_positions": 640}
        values.update(kwargs)
        seed = values.pop("seed", 0)
        config = testing.tiny_model_config(vocab.total_size, **values)
        return build_model(config, seed=seed, segment_table=vocab.segment_table())

    return _


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def action_records(caplog):
    def f(action):
        return [r for r in caplog.records if getattr(r, "action", None) == action]

    return f

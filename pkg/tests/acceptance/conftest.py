from __future__ import annotations

import collections
import os
import subprocess
import sys

import pytest

TINY_CONFIG = """\
seed = 1
train_scenes = 40
val_scenes = 12
codebook_iters = 20
bpe_merges = 32
caption_budget = 48

num_layers = 2
hidden_size = 16
num_heads = 2
max_positions = 640
moe_layer_indices = 1
ffn_multiplier = 2

learning_rate = 0.003
epochs = 1
steps_per_epoch = 3
batch_size = 2
in_context_k = 1
log_every = 1

ks = 0, 1
split = train
max_items = 3
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.conf"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def run():
    def _(*args, check=True):
        env = os.environ.copy()
        env["PYTHONUNBUFFERED"] = "1"
        result = subprocess.run(
            [sys.executable, "-m", "unicontext", *map(str, args)],
            capture_output=True,
            text=True,
            env=env,
        )
        if check:
            assert result.returncode == 0, result.stderr
        return result

    return _


@pytest.fixture
def workspace(tmp_path, tiny_config, run):
    """
    A run directory with the dataset and the tokenizers built.
    """
    out = tmp_path / "run"
    run("build-data", "--config", tiny_config, "--out", out)
    run("train-tokenizers", "--config", tiny_config, "--out", out)
    return out


@pytest.fixture
def query(workspace):
    """
    A train (scene id, class index) pair whose class shows up in another scene.
    """
    scenes = workspace / "dataset" / "scenes"
    scenes_of = collections.defaultdict(set)
    for scene_id in range(40):
        text = (scenes / f"{scene_id}.objects.txt").read_text()
        for line in text.splitlines():
            scenes_of[int(line.split(" ", 1)[0])].add(scene_id)
    for class_index, scene_ids in sorted(scenes_of.items()):
        if len(scene_ids) >= 2:
            return min(scene_ids), class_index
    raise AssertionError("No class shows up in two scenes")

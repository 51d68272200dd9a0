"""
Checkpoint file layout::

    unicontext-checkpoint 1\\n
    <manifest as one JSON line, sorted keys>\\n
    <tensors, raw little-endian bytes, in manifest order>

The manifest holds the model config, free-form metadata (step, epoch...) and,
for every tensor of the state dict, its name, dtype, shape and byte offset.
"""

from __future__ import annotations

import json
import logging
import pathlib
from typing import Any

import attr
import numpy as np
import torch

from unicontext import exceptions
from unicontext.model import DecoderModel, ModelConfig

logger = logging.getLogger(__name__)

HEADER = b"unicontext-checkpoint 1\n"


@attr.dataclass(frozen=True, kw_only=True)
class Checkpoint:
    config: ModelConfig
    metadata: dict[str, Any]
    model: DecoderModel


def dumps(model: DecoderModel, metadata: dict[str, Any] | None = None) -> bytes:
    tensors = []
    payload = []
    offset = 0
    for name, tensor in model.state_dict().items():
        array = tensor.detach().cpu().numpy()
        data = array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes()
        tensors.append(
            {
                "name": name,
                "dtype": array.dtype.str.lstrip("<>|="),
                "shape": list(array.shape),
                "offset": offset,
            }
        )
        payload.append(data)
        offset += len(data)
    manifest = {
        "config": attr.asdict(model.config),
        "metadata": metadata or {},
        "tensors": tensors,
    }
    return HEADER + json.dumps(manifest, sort_keys=True).encode() + b"\n" + b"".join(
        payload
    )


def loads(data: bytes) -> Checkpoint:
    if not data.startswith(HEADER):
        raise exceptions.CheckpointError("Not a unicontext checkpoint")
    manifest_end = data.find(b"\n", len(HEADER))
    if manifest_end < 0:
        raise exceptions.CheckpointError("Checkpoint truncated in its manifest")
    try:
        manifest = json.loads(data[len(HEADER) : manifest_end])
        config_values = manifest["config"]
        config_values["moe_layer_indices"] = tuple(config_values["moe_layer_indices"])
        config = ModelConfig(**config_values)
    except (ValueError, KeyError, TypeError) as exc:
        raise exceptions.CheckpointError("Unreadable checkpoint manifest") from exc

    payload = memoryview(data)[manifest_end + 1 :]
    state = {}
    for entry in manifest["tensors"]:
        dtype = np.dtype("<" + entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dtype.itemsize
        if end > len(payload):
            raise exceptions.CheckpointError(f"Checkpoint truncated at {entry['name']}")
        array = np.frombuffer(payload[entry["offset"] : end], dtype=dtype)
        state[entry["name"]] = torch.from_numpy(array.reshape(entry["shape"]).copy())

    with torch.random.fork_rng(devices=[]):
        model = DecoderModel(config)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise exceptions.CheckpointError(
            "Checkpoint does not match its config"
        ) from exc
    return Checkpoint(config=config, metadata=manifest["metadata"], model=model)


def save_checkpoint(
    path: pathlib.Path, model: DecoderModel, metadata: dict[str, Any] | None = None
) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    # Written aside then renamed over the target
    partial = path.with_name(path.name + ".partial")
    partial.write_bytes(dumps(model, metadata))
    partial.replace(path)
    logger.info(
        f"Saved checkpoint {path}",
        extra={"action": "save_checkpoint", "path": str(path), **(metadata or {})},
    )


def load_checkpoint(path: pathlib.Path) -> Checkpoint:
    try:
        data = path.read_bytes()
    except FileNotFoundError as exc:
        raise exceptions.CheckpointError(f"No checkpoint at {path}") from exc
    checkpoint = loads(data)
    logger.debug(
        f"Loaded checkpoint {path}",
        extra={"action": "load_checkpoint", "path": str(path)},
    )
    return checkpoint

"""
Binary checkpoint format.

    magic       8 bytes   b"MOEMOE01" (the last two bytes are the format version)
    header_len  <Q        length of the JSON header
    header      JSON      config, parameter manifest, optimizer scalars, epoch, RNG state
    payload     <f8 ...   parameters, then Adam moments, each row-major
    checksum    8 bytes   blake2b(digest_size=8) of everything before it
"""
import hashlib
import json
import logging
import struct
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from multisource_qa.core.blocks import BlockConfig
from multisource_qa.core.model import Model, ModelOptions
from multisource_qa.core.moe import MoEConfig, moe_layers
from multisource_qa.core.optim import OptimizerState

logger = logging.getLogger("multisource_qa.core.checkpoint")

MAGIC_PREFIX = b"MOEMOE"
FORMAT_VERSION = b"01"
MAGIC = MAGIC_PREFIX + FORMAT_VERSION
HEADER_LEN = struct.Struct("<Q")
CHECKSUM_SIZE = 8
F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    """Bad magic, unsupported version, checksum mismatch or inconsistent structure."""


@dataclass
class Checkpoint:
    model: Model
    epoch: int
    optimizer: Optional[OptimizerState]
    rng_state: Optional[Dict]
    run_config: Optional[Dict]
    header: Dict

    def rng(self):
        """A Generator restored to the saved state, or None."""
        if self.rng_state is None:
            return None
        gen = np.random.Generator(getattr(np.random, self.rng_state["bit_generator"])())
        gen.bit_generator.state = self.rng_state
        return gen


def _checksum(data):
    return hashlib.blake2b(data, digest_size=CHECKSUM_SIZE).digest()


def save_checkpoint(path, model, optimizer=None, epoch=0, rng=None, run_config=None):
    """
    Serialize a model, optionally with optimizer state and the training RNG.

    Args:
        path (str): Output file
        model (Model): Model to save
        optimizer (OptimizerState): Adam state, moments included
        epoch (int): Completed epochs
        rng (numpy.random.Generator): Training generator whose state is stored
        run_config (dict): Flat run configuration echoed into the header
    """
    chunks = []
    offset = 0
    manifest = []
    for p in model.parameters():
        manifest.append({"name": p.name, "shape": list(p.shape), "offset": offset, "trainable": p.trainable})
        data = np.ascontiguousarray(p.data, dtype=F8).tobytes()
        chunks.append(data)
        offset += len(data)

    moments = []
    if optimizer is not None:
        for kind, table in (("m", optimizer.first_moment), ("v", optimizer.second_moment)):
            for name in sorted(table):
                arr = table[name]
                moments.append({"name": name, "kind": kind, "shape": list(arr.shape), "offset": offset})
                data = np.ascontiguousarray(arr, dtype=F8).tobytes()
                chunks.append(data)
                offset += len(data)

    header = {
        "version": FORMAT_VERSION.decode("ascii"),
        "model_config": model.config_dict(),
        "seed": model.seed,
        "run_config": run_config,
        "manifest": manifest,
        "moments": moments,
        "moe_layers": [name for name, _ in moe_layers(model)],
        "optimizer": optimizer.to_dict() if optimizer is not None else None,
        "epoch": int(epoch),
        "rng": rng.bit_generator.state if rng is not None else None,
        "payload_bytes": offset,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = MAGIC + HEADER_LEN.pack(len(header_bytes)) + header_bytes + b"".join(chunks)
    with open(path, "wb") as f:
        f.write(body + _checksum(body))
    logger.debug(f"Saved checkpoint {path} ({len(manifest)} parameters, epoch {epoch})")


def read_header(path):
    """Verify magic, version and checksum; return ``(header, payload bytes)``."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC_PREFIX)] != MAGIC_PREFIX:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = blob[len(MAGIC_PREFIX):len(MAGIC)]
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {version.decode('ascii', 'replace')} is not supported "
            f"(this build reads version {FORMAT_VERSION.decode('ascii')})"
        )
    if len(blob) < len(MAGIC) + HEADER_LEN.size + CHECKSUM_SIZE:
        raise CheckpointError(f"{path} is truncated")
    body, stored = blob[:-CHECKSUM_SIZE], blob[-CHECKSUM_SIZE:]
    if _checksum(body) != stored:
        raise CheckpointError(f"checksum mismatch in {path}; the file is corrupt")

    (header_len,) = HEADER_LEN.unpack_from(body, len(MAGIC))
    start = len(MAGIC) + HEADER_LEN.size
    try:
        header = json.loads(body[start:start + header_len].decode("utf-8"))
    except ValueError as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from e
    payload = body[start + header_len:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointError(f"payload holds {len(payload)} bytes, header promises {header.get('payload_bytes')}")
    return header, payload


def _array(payload, entry):
    count = int(np.prod(entry["shape"], dtype=np.int64))
    end = entry["offset"] + count * F8.itemsize
    if entry["offset"] < 0 or end > len(payload):
        raise CheckpointError(f"array {entry['name']} lies outside the payload")
    return np.frombuffer(payload, dtype=F8, count=count, offset=entry["offset"]).reshape(entry["shape"]).copy()


def load_checkpoint(path):
    """Rebuild the model (MoE layers included) and restore every saved state."""
    header, payload = read_header(path)
    cfg = header["model_config"]
    try:
        model = Model(
            BlockConfig(**cfg["model"]),
            ModelOptions(**cfg["options"]),
            MoEConfig(**cfg["moe"]),
            header["seed"],
        )
    except (TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint config cannot rebuild a model: {e}") from e

    state = {entry["name"]: _array(payload, entry) for entry in header["manifest"]}
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    trainable = {entry["name"]: entry["trainable"] for entry in header["manifest"]}
    for p in model.parameters():
        p.trainable = trainable[p.name]
    rebuilt = [name for name, _ in moe_layers(model)]
    if rebuilt != header["moe_layers"]:
        raise CheckpointError(f"MoE layers {rebuilt} do not match the saved {header['moe_layers']}")

    optimizer = None
    if header["optimizer"] is not None:
        optimizer = OptimizerState.from_dict(header["optimizer"])
        for entry in header["moments"]:
            table = optimizer.first_moment if entry["kind"] == "m" else optimizer.second_moment
            table[entry["name"]] = _array(payload, entry)

    logger.debug(f"Loaded checkpoint {path} at epoch {header['epoch']}")
    return Checkpoint(
        model=model,
        epoch=header["epoch"],
        optimizer=optimizer,
        rng_state=header["rng"],
        run_config=header["run_config"],
        header=header,
    )

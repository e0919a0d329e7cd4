"""Checkpoint files and parameter accounting.

Layout::

    b"SPCK" | uint32 LE header length | JSON header | float32 LE blocks

The header lists every block with its shape, byte offset into the payload and
sha256. Loading verifies the version, the payload length and every hash.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoder import EncoderConfig, FrozenBackbone
from .prompting import MethodConfig, PromptPools, SPrompts, parameter_growth
from .router import CentroidStore

MAGIC = b"SPCK"
FORMAT_VERSION = 1


class CheckpointError(IOError):
    pass


@dataclass
class Checkpoint:
    version: int
    meta: dict
    blocks: "OrderedDict[str, np.ndarray]"
    path: str | None = None
    file_size: int | None = None
    header_size: int | None = None

    def domain_blocks(self, s: int) -> "OrderedDict[str, np.ndarray]":
        prefix = f"domain{s}/"
        return OrderedDict((k[len(prefix):], v) for k, v in self.blocks.items() if k.startswith(prefix))

    @property
    def sessions(self) -> int:
        return int(self.meta["sessions"])

    def backbone_arrays(self) -> "OrderedDict[str, np.ndarray]":
        prefix = "backbone/"
        return OrderedDict((k[len(prefix):], v) for k, v in self.blocks.items() if k.startswith(prefix))


def _digest(arr: np.ndarray) -> str:
    return hashlib.sha256(arr.tobytes()).hexdigest()


def write_blocks(path, meta: dict, blocks: "OrderedDict[str, np.ndarray]") -> dict:
    """Write a checkpoint file; returns the manifest (header) that was written."""
    entries, payload, offset = [], [], 0
    for name, arr in blocks.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset,
                        "nbytes": a.nbytes, "sha256": _digest(a)})
        payload.append(a.tobytes())
        offset += a.nbytes
    header = {"format_version": FORMAT_VERSION, "meta": meta, "blocks": entries,
              "payload_bytes": offset}
    raw = json.dumps(header, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        for chunk in payload:
            fh.write(chunk)
    os.replace(tmp, path)
    return header


def read_blocks(path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<I", data[4:8])
    if len(data) < 8 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(data[8:8 + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from exc
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version!r}, expected {FORMAT_VERSION}")
    payload = memoryview(data)[8 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    blocks: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["blocks"]:
        end = e["offset"] + e["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{path}: block {e['name']!r} runs past end of file")
        arr = np.frombuffer(payload[e["offset"]:end], dtype="<f4").reshape(e["shape"])
        if _digest(arr) != e["sha256"]:
            raise CheckpointError(f"{path}: hash mismatch in block {e['name']!r}")
        blocks[e["name"]] = arr.astype(np.float32)
    return Checkpoint(version, header["meta"], blocks, str(path), len(data), 8 + hlen)


# ------------------------------------------------------------ model state


def model_blocks(model: SPrompts, include_backbone: bool = False) -> "OrderedDict[str, np.ndarray]":
    blocks: OrderedDict[str, np.ndarray] = OrderedDict()
    if include_backbone:
        for name, arr in model.backbone.arrays().items():
            blocks[f"backbone/{name}"] = arr
    pools = model.pools
    for s in range(1, model.sessions + 1):
        if s <= len(pools.image):
            blocks[f"domain{s}/image_prompt"] = pools.image[s - 1]
        if s <= len(pools.language):
            blocks[f"domain{s}/language_prompt"] = pools.language[s - 1]
        if s <= len(pools.classifier):
            w, b = pools.classifier[s - 1]
            blocks[f"domain{s}/fc_weight"] = w
            blocks[f"domain{s}/fc_bias"] = b
        blocks[f"domain{s}/centroids"] = model.store.for_domain(s)
    return blocks


def save_checkpoint(model: SPrompts, path, include_backbone: bool = False, extra: dict | None = None) -> dict:
    meta = {
        "sessions": model.sessions,
        "method": model.config.to_dict(),
        "encoder": model.backbone.config.to_dict(),
        "backbone_fingerprint": model.backbone.fingerprint(),
        "backbone_parameters": model.backbone.num_parameters(),
        "backbone_included": include_backbone,
        "extra": extra or {},
    }
    return write_blocks(path, meta, model_blocks(model, include_backbone))


def load_checkpoint(path) -> Checkpoint:
    return read_blocks(path)


def encoder_config_from(meta: dict) -> EncoderConfig:
    d = dict(meta["encoder"])
    d["vocab"] = tuple(d["vocab"])
    return EncoderConfig(**d)


def restore_model(ckpt: Checkpoint, backbone: FrozenBackbone | None = None) -> SPrompts:
    """Rebuild an :class:`SPrompts` from a checkpoint (backbone from file if stored)."""
    meta = ckpt.meta
    if backbone is None:
        arrays = ckpt.backbone_arrays()
        if not arrays:
            raise CheckpointError("checkpoint carries no backbone weights; pass one in")
        backbone = FrozenBackbone(encoder_config_from(meta), arrays).freeze()
    if backbone.fingerprint() != meta["backbone_fingerprint"]:
        raise CheckpointError("backbone fingerprint does not match the checkpoint")
    model = SPrompts(backbone, MethodConfig(**meta["method"]))
    pools = PromptPools()
    store = CentroidStore(backbone.config.feature_dim)
    for s in range(1, ckpt.sessions + 1):
        blk = ckpt.domain_blocks(s)
        if "image_prompt" in blk:
            pools.image.append(blk["image_prompt"])
        if "language_prompt" in blk:
            pools.language.append(blk["language_prompt"])
        if "fc_weight" in blk:
            pools.classifier.append((blk["fc_weight"], blk["fc_bias"]))
        store.add_domain(s, blk["centroids"])
    model.pools, model.store, model.sessions = pools, store, ckpt.sessions
    return model


def save_backbone(backbone: FrozenBackbone, path, extra: dict | None = None) -> dict:
    meta = {
        "sessions": 0,
        "encoder": backbone.config.to_dict(),
        "backbone_fingerprint": backbone.fingerprint(),
        "backbone_parameters": backbone.num_parameters(),
        "backbone_included": True,
        "pretrain_accuracy": backbone.pretrain_accuracy,
        "extra": extra or {},
    }
    blocks = OrderedDict((f"backbone/{k}", v) for k, v in backbone.arrays().items())
    return write_blocks(path, meta, blocks)


def load_backbone(path) -> FrozenBackbone:
    ckpt = read_blocks(path)
    bb = FrozenBackbone(encoder_config_from(ckpt.meta), ckpt.backbone_arrays()).freeze()
    if bb.fingerprint() != ckpt.meta["backbone_fingerprint"]:
        raise CheckpointError(f"{path}: backbone fingerprint mismatch")
    bb.pretrain_accuracy = ckpt.meta.get("pretrain_accuracy")
    return bb


# ------------------------------------------------------------- accounting


@dataclass
class Accounting:
    per_domain: list[int]
    expected: list[int]
    breakdown: list[dict]
    backbone_parameters: int
    relative: list[float] = field(default_factory=list)

    @property
    def matches(self) -> bool:
        return self.per_domain == self.expected

    def to_dict(self) -> dict:
        return {
            "per_domain_floats": self.per_domain,
            "expected_floats": self.expected,
            "breakdown": self.breakdown,
            "backbone_parameters": self.backbone_parameters,
            "relative_increase": self.relative,
            "matches_formula": self.matches,
        }


def param_accounting(ckpt: Checkpoint) -> Accounting:
    """Floats each domain block holds vs. the growth formula for the run's config.

    Shared-parameter ablations keep their single shared copy in domain 1, so
    later domains hold only what they add.
    """
    meta = ckpt.meta
    method = MethodConfig(**meta["method"])
    enc = encoder_config_from(meta)
    total = int(meta["backbone_parameters"])
    measured, expected, breakdown = [], [], []
    for s in range(1, ckpt.sessions + 1):
        measured.append(int(sum(a.size for a in ckpt.domain_blocks(s).values())))
        g = parameter_growth(method, enc.num_classes, enc.embed_dim, enc.text_embed_dim,
                             enc.feature_dim, s)
        expected.append(g["total"])
        breakdown.append(g)
    return Accounting(measured, expected, breakdown, total, [m / total for m in measured])


def stored_floats(ckpt: Checkpoint, include_backbone: bool = False) -> int:
    return int(sum(a.size for k, a in ckpt.blocks.items()
                   if include_backbone or not k.startswith("backbone/")))


def checkpoint_growth(paths) -> list[int]:
    """Floats each successive per-session checkpoint adds over the previous one.

    ``paths`` are the checkpoints after sessions 1..S; the first entry is the
    full size of session 1's file (prompt state starts empty).
    """
    sizes = [stored_floats(read_blocks(p)) for p in paths]
    return [b - a for a, b in zip([0] + sizes[:-1], sizes)]

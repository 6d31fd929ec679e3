"""The full captioner: transformer, group attention and memory classifier.

Also holds checkpoint I/O.  A checkpoint is little-endian binary::

    b"GDC1" | u32 version | u32 len | config JSON | u32 n_params |
    per parameter: u32 len | name | u32 ndim | u32 dims... | float64 data
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import ImageRecord, Vocabulary, distinctive_words
from .decoding import Caption, beam_decode, greedy_decode_batch
from .gma import GmaParams, GmaResult, distinctive_attention, group_attention
from .losses import MemClassifier
from .model import CaptionModel, ModelConfig, Module
from .tensor import Tensor, no_grad

CHECKPOINT_MAGIC = b"GDC1"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class GdisCap(Module):
    def __init__(self, config: ModelConfig, seed: int = 0, use_gma: bool = True,
                 omega: float = 1.0, bias: float = 0.5):
        self.caption = CaptionModel(config, seed)
        self.gma = GmaParams(omega, bias)
        self.memcls = MemClassifier(config.d_model, config.vocab_size, seed + 1)
        self.use_gma = use_gma
        self.assign_names()

    @property
    def config(self) -> ModelConfig:
        return self.caption.config

    def weighted_memory(self, features, targets=None):
        """Encode group members and weight each target's memory.

        Returns ``(memory, valid, weighted, attention)`` where ``weighted`` and
        ``attention`` have one row per target position.
        """
        memory, valid = self.caption.encode_batch(features)
        targets = list(range(len(features))) if targets is None else list(targets)
        if self.use_gma:
            _, att, weighted = group_attention(memory, valid, self.gma, targets)
        else:
            weighted = memory[targets]
            att = Tensor(valid[targets].astype(np.float64))
        return memory, valid, weighted, att

    def caption_group(self, features, targets=None, beam: int = 1) -> list[Caption]:
        with no_grad():
            _, valid, weighted, _ = self.weighted_memory(features, targets)
            targets = list(range(len(features))) if targets is None else list(targets)
            tvalid = valid[targets]
            if beam == 1:
                return greedy_decode_batch(self.caption, weighted, tvalid)
            out = []
            for i in range(len(targets)):
                n = int(tvalid[i].sum())
                out.append(beam_decode(self.caption, weighted.data[i, :n], beam))
            return out

    def inspect(self, features, target: int) -> GmaResult:
        """Per-target attention details computed image by image."""
        with no_grad():
            memory, valid = self.caption.encode_batch(features)
            rows = [Tensor(memory.data[i, : int(valid[i].sum())]) for i in range(len(features))]
            others = [r for i, r in enumerate(rows) if i != target]
            return distinctive_attention(rows[target], others, self.gma)


@dataclass
class GroupData:
    """One group's inputs, with captions encoded to vocabulary ids."""

    image_ids: list
    features: list
    captions: list  # per member: list of id lists
    targets: list
    w_d: list  # per target: DistinctiveWordSet of ids


def prepare_group(group, by_id: dict, vocab: Vocabulary) -> GroupData:
    recs: list[ImageRecord] = [by_id[i] for i in group.member_ids]
    caps = [[vocab.encode(c) for c in r.captions] for r in recs]
    targets = list(group.target_roles)
    w_d = [distinctive_words(caps[t], [c for k, c in enumerate(caps) if k != t]) for t in targets]
    return GroupData(list(group.member_ids), [r.features for r in recs], caps, targets, w_d)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, system: GdisCap, vocab: Vocabulary, extra: dict | None = None) -> None:
    config = {
        "model": system.config.to_dict(),
        "use_gma": system.use_gma,
        "vocab": vocab.id_to_token,
        "extra": extra or {},
    }
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    params = list(system.named_parameters())
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(blob)), blob,
             struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{p.data.ndim}I", p.data.ndim, *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> tuple[GdisCap, Vocabulary, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad header)")
    try:
        version, n = struct.unpack_from("<II", raw, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        config = json.loads(raw[pos : pos + n].decode("utf-8"))
        pos += n
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        blobs = {}
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", raw, pos)
            name = raw[pos + 4 : pos + 4 + ln].decode("utf-8")
            pos += 4 + ln
            (ndim,) = struct.unpack_from("<I", raw, pos)
            shape = struct.unpack_from(f"<{ndim}I", raw, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            blobs[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint") from exc
    system = GdisCap(ModelConfig(**config["model"]), use_gma=config["use_gma"])
    for name, p in system.named_parameters():
        if name not in blobs or blobs[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name!r} missing or mis-shaped")
        p.data[...] = blobs[name]
    vocab = Vocabulary(config["vocab"][4:])
    return system, vocab, config.get("extra", {})

"""Checkpoint persistence: one .npz archive holding a JSON metadata record
(format version, model config, vocabulary, step counter) and every
parameter tensor as row-major little-endian float32."""

from __future__ import annotations

import json

import numpy as np

from ..codec import Vocabulary
from ..errors import CheckpointError
from .model import ContactReasoningModel, ModelConfig

CHECKPOINT_FORMAT_VERSION = 1


def save_checkpoint(path: str, model: ContactReasoningModel,
                    vocab: Vocabulary, step: int) -> None:
    meta = {
        "checkpoint_format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.cfg.to_dict(),
        "vocab_tokens": list(vocab.tokens),
        "vocab_hash": vocab.hash(),
        "step": int(step),
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(),
                                    dtype=np.uint8)}
    for name, value in model.params.items():
        arrays["param:" + name] = np.ascontiguousarray(value,
                                                       dtype="<f4")
    np.savez(path, **arrays)


def load_checkpoint(path: str):
    """Load (model, vocab, step); raises CheckpointError on version,
    parameter-shape, or vocabulary-hash mismatches."""
    try:
        archive = np.load(path)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}")
    if "meta" not in archive:
        raise CheckpointError(f"{path}: missing metadata record")
    meta = json.loads(bytes(archive["meta"]).decode())
    if meta.get("checkpoint_format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint_format_version "
            f"{meta.get('checkpoint_format_version')!r}")
    cfg = ModelConfig.from_dict(meta["config"])
    vocab = Vocabulary(meta["vocab_tokens"])
    if vocab.hash() != meta["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary hash mismatch")
    if vocab.size != cfg.vocab_size:
        raise CheckpointError(f"{path}: vocabulary size {vocab.size} != "
                              f"config vocab_size {cfg.vocab_size}")

    reference = ContactReasoningModel(cfg, seed=0)
    params = {}
    for name, ref in reference.reference_shapes().items():
        key = "param:" + name
        if key not in archive:
            raise CheckpointError(f"{path}: missing parameter {name}")
        value = archive[key].astype(cfg.np_dtype)
        if value.shape != ref:
            raise CheckpointError(f"{path}: parameter {name} has shape "
                                  f"{value.shape}, expected {ref}")
        params[name] = value
    extras = [k for k in archive.files
              if k.startswith("param:") and k[6:] not in params]
    if extras:
        raise CheckpointError(f"{path}: unexpected parameters {extras}")
    model = ContactReasoningModel(cfg, params=params)
    return model, vocab, int(meta["step"])

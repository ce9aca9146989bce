"""Glue between dataset files, the codec, and the trainer: normalization
fitting, batch tokenization, and the tokenized-dataset file format
(human-readable token names, spot-checkable with any text tool)."""

from __future__ import annotations

import json
import os

import numpy as np

from .codec import (DEFAULT_BOUNDS_MARGIN, PositionBounds,
                    QuantileNormalizer, SegmentLayout, TokenSequence,
                    Vocabulary, build_training_sequence,
                    fit_action_normalizer, load_meta_prompts)
from .geometry import load_xyz
from .reasoning.model import ModelConfig
from .reasoning.training import TrainingSample, prepare_sample

TOKENIZED_FORMAT_VERSION = 1


def fit_normalization(samples, margin: float = DEFAULT_BOUNDS_MARGIN):
    """Quantile normalizer over the split's grasp vectors plus contact
    position bounds over its contact positions."""
    norm = fit_action_normalizer([s.pose for s in samples])
    positions = np.concatenate(
        [[r.position for r in s.contacts] for s in samples
         if len(s.contacts)])
    bounds = PositionBounds.from_positions(positions, margin)
    return norm, bounds


def tokenize_samples(samples, norm: QuantileNormalizer,
                     bounds: PositionBounds, vocab: Vocabulary,
                     p_drop: float = 0.5, seed: int = 0,
                     dropout_granularity: str = "contact",
                     n_visual_tokens: int = 16,
                     meta_prompts=None, ablate_contacts: bool = False):
    """TokenSequence per sample; meta prompts cycle by sample index and
    dropout draws come from a per-sample seeded stream."""
    if meta_prompts is None:
        meta_prompts = load_meta_prompts()
    out = []
    for i, sample in enumerate(samples):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        seq = build_training_sequence(
            sample.instruction, sample.contacts, sample.pose, norm,
            bounds, vocab, p_drop=p_drop,
            meta_prompt_id=i % len(meta_prompts), rng=rng,
            n_visual_tokens=n_visual_tokens, meta_prompts=meta_prompts,
            dropout_granularity=dropout_granularity,
            ablate_contacts=ablate_contacts)
        out.append((sample.sample_id, seq, sample.cloud_file))
    return out


def save_tokenized(path: str, entries, vocab: Vocabulary, data_dir: str,
                   meta: dict | None = None) -> None:
    """Write the tokenized dataset (JSONL of token names + layout) and its
    vocabulary sidecar ``<path>.vocab.txt``."""
    vocab_file = path + ".vocab.txt"
    vocab.save(vocab_file)
    header = {
        "tokenized_format_version": TOKENIZED_FORMAT_VERSION,
        "data_dir": data_dir,
        "vocab_file": os.path.basename(vocab_file),
        "vocab_hash": vocab.hash(),
    }
    header.update(meta or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for sample_id, seq, cloud_file in entries:
            fh.write(json.dumps({
                "id": sample_id,
                "tokens": seq.to_names(vocab),
                "layout": [list(span) for span in seq.layout.spans()],
                "cloud_file": cloud_file,
            }) + "\n")


def load_tokenized(path: str):
    """Read back (header, entries, vocab); entries hold TokenSequence plus
    the cloud file path."""
    with open(path) as fh:
        lines = [l for l in fh.read().splitlines() if l.strip()]
    header = json.loads(lines[0])
    if header.get("tokenized_format_version") != TOKENIZED_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported tokenized_format_version")
    vocab = Vocabulary.load(os.path.join(os.path.dirname(path),
                                         header["vocab_file"]))
    if vocab.hash() != header["vocab_hash"]:
        raise ValueError(f"{path}: vocabulary sidecar hash mismatch")
    entries = []
    for line in lines[1:]:
        rec = json.loads(line)
        ids = [vocab.id(name) for name in rec["tokens"].split()]
        layout = SegmentLayout(*[tuple(span) for span in rec["layout"]])
        entries.append({
            "id": rec["id"],
            "sequence": TokenSequence(tuple(ids), layout),
            "cloud_file": rec["cloud_file"],
        })
    return header, entries, vocab


def prepare_training_samples(tokenized_path: str, cfg: ModelConfig):
    """Load a tokenized dataset and precompute per-sample encoder inputs."""
    header, entries, vocab = load_tokenized(tokenized_path)
    data_dir = header["data_dir"]
    samples = []
    for entry in entries:
        cloud = load_xyz(os.path.join(data_dir, entry["cloud_file"]))
        samples.append(prepare_sample(entry["sequence"], cloud.points, cfg))
    return header, samples, vocab

"""Next-token training: batch assembly, AdamW with warmup + cosine decay,
gradient clipping, and a per-step loss curve.

All randomness (init, batch order) flows from the single ``seed``
argument, so two runs with the same inputs produce bitwise-identical loss
curves.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import SegmentLayout, TokenSequence
from ..errors import TruncationError
from .mask import hybrid_mask
from .model import (Batch, ContactReasoningModel, ModelConfig,
                    point_encoder_features)


@dataclass
class TrainingSample:
    """One tokenized sequence plus its precomputed point-encoder inputs."""

    ids: np.ndarray  # (T,) int64
    layout: SegmentLayout
    cents: np.ndarray  # (M, 3)
    neigh: np.ndarray  # (M, k, 3)


def prepare_sample(seq: TokenSequence, cloud_points: np.ndarray,
                   cfg: ModelConfig) -> TrainingSample:
    ids = np.asarray(seq.ids, dtype=np.int64)
    if ids.size > cfg.max_sequence_length:
        raise TruncationError(
            f"sequence of {ids.size} tokens exceeds max_sequence_length="
            f"{cfg.max_sequence_length}; refusing to truncate silently")
    if seq.layout.pc[1] != cfg.n_visual_tokens:
        raise ValueError(f"pc span holds {seq.layout.pc[1]} tokens, model "
                         f"expects {cfg.n_visual_tokens}")
    cents, neigh = point_encoder_features(cloud_points, cfg.n_visual_tokens,
                                          cfg.neighborhood_k)
    return TrainingSample(ids, seq.layout, cents, neigh)


def target_positions(layout: SegmentLayout, length: int,
                     loss_on_prompt: bool = False) -> np.ndarray:
    """Boolean mask over token positions whose prediction enters the loss.

    Default: the contact and action spans (delimiters included). With
    ``loss_on_prompt`` the text segments join in as well; point-cloud
    placeholder positions never carry a cross-entropy target, and position
    0 has no predictor.
    """
    mask = np.zeros(length, dtype=bool)
    c_start, c_len = layout.contact
    a_start, a_len = layout.action
    mask[c_start:a_start + a_len] = True
    if loss_on_prompt:
        mask[1:c_start] = True
        pc_start, pc_len = layout.pc
        mask[pc_start:pc_start + pc_len] = False
        # the token right after the pc span is predicted from a pc position
        mask[0] = False
    return mask


def assemble_batch(samples, pad_id: int, cfg: ModelConfig) -> Batch:
    """Pad a list of samples to a common length and build per-sample hybrid
    masks and loss masks."""
    bsz = len(samples)
    t = max(s.ids.size for s in samples)
    ids = np.full((bsz, t), pad_id, dtype=np.int64)
    attn = np.zeros((bsz, t, t), dtype=bool)
    tmask = np.zeros((bsz, t), dtype=bool)
    pc_start = np.zeros(bsz, dtype=np.int64)
    cents = np.stack([s.cents for s in samples]).astype(cfg.np_dtype)
    neigh = np.stack([s.neigh for s in samples]).astype(cfg.np_dtype)
    for i, s in enumerate(samples):
        n = s.ids.size
        ids[i, :n] = s.ids
        start, length = s.layout.pc
        pc_start[i] = start
        attn[i, :n, :n] = hybrid_mask(n, start, length)
        attn[i, np.arange(n, t), np.arange(n, t)] = True  # pad rows
        tmask[i, :n] = target_positions(s.layout, n, cfg.loss_on_prompt)
    return Batch(ids, neigh, cents, pc_start, attn, tmask)


def lr_at_step(step: int, cfg: ModelConfig) -> float:
    """Linear warmup to ``learning_rate`` then cosine decay to
    ``min_lr_ratio * learning_rate``."""
    if step < cfg.warmup_steps:
        return cfg.learning_rate * (step + 1) / cfg.warmup_steps
    span = max(cfg.total_steps - cfg.warmup_steps, 1)
    frac = min((step - cfg.warmup_steps) / span, 1.0)
    floor = cfg.min_lr_ratio * cfg.learning_rate
    return floor + (cfg.learning_rate - floor) * 0.5 * (
        1.0 + np.cos(np.pi * frac))


class AdamW:
    """Decoupled weight-decay Adam over a parameter dict."""

    def __init__(self, params: dict, cfg: ModelConfig):
        self.cfg = cfg
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        cfg = self.cfg
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for k in sorted(params.keys()):
            g = grads[k]
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * (g * g)
            m_hat = self.m[k] / bc1
            v_hat = self.v[k] / bc2
            params[k] -= lr * (m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
                               + cfg.weight_decay * params[k])


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Global-norm clipping in place; returns the pre-clip norm."""
    total = 0.0
    for k in sorted(grads.keys()):
        total += float((grads[k].astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


@dataclass
class TrainResult:
    model: ContactReasoningModel
    loss_curve: list  # (step, loss) pairs
    final_loss: float


def train(samples, cfg: ModelConfig, pad_id: int, seed: int = 0,
          log_every: int = 0) -> TrainResult:
    """Run ``cfg.total_steps`` of next-token training over the samples.

    Batches cycle through a seeded shuffle of the dataset each epoch;
    the loss curve records every step.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("training needs at least one sample")
    root = np.random.SeedSequence(seed)
    init_seed, order_seed = root.spawn(2)
    model = ContactReasoningModel(
        cfg, seed=int(init_seed.generate_state(1)[0]))
    opt = AdamW(model.params, cfg)
    order_rng = np.random.default_rng(order_seed)

    curve = []
    order = order_rng.permutation(len(samples))
    cursor = 0
    for step in range(cfg.total_steps):
        take = min(cfg.batch_size, len(samples))
        idxs = []
        while len(idxs) < take:
            if cursor >= len(order):
                order = order_rng.permutation(len(samples))
                cursor = 0
            idxs.append(int(order[cursor]))
            cursor += 1
        batch = assemble_batch([samples[i] for i in idxs], pad_id, cfg)
        loss, grads = model.loss_and_optionally_grads(batch)
        clip_gradients(grads, cfg.grad_clip)
        opt.step(model.params, grads, lr_at_step(step, cfg))
        curve.append((step, loss))
        if log_every and (step % log_every == 0 or
                          step == cfg.total_steps - 1):
            print(f"step {step:6d}  loss {loss:.4f}  "
                  f"lr {lr_at_step(step, cfg):.2e}")
    return TrainResult(model, curve, curve[-1][1] if curve else float("nan"))


def save_loss_curve(curve, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.9g}\n")

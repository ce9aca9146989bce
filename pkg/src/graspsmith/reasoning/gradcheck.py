"""Finite-difference verification of the hand-written backward pass.

Every parameter element of a tiny float64 model is perturbed by +/- h and
the central difference is compared against the analytic gradient. The
per-group relative error is the largest absolute deviation divided by the
largest gradient magnitude in that group (floored at 1e-8), which keeps
elements whose true gradient is zero from inflating the score with
finite-difference noise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mask import hybrid_mask
from .model import Batch, ContactReasoningModel, ModelConfig

TINY_CONFIG = dict(vocab_size=50, d_model=12, n_heads=2, n_layers=2,
                   n_visual_tokens=3, max_sequence_length=12,
                   neighborhood_k=4, encoder_hidden=6, dtype="float64")


@dataclass
class GradCheckReport:
    per_group: dict  # parameter name -> relative error
    max_relative_error: float

    def worst(self):
        name = max(self.per_group, key=self.per_group.get)
        return name, self.per_group[name]


def _probe_batch(cfg: ModelConfig, seed: int) -> Batch:
    rng = np.random.default_rng(seed)
    bsz, t = 2, cfg.max_sequence_length
    pre, pc = 2, cfg.n_visual_tokens
    post = 2
    contact = 3
    action = t - pre - pc - post - contact
    ids = rng.integers(0, cfg.vocab_size, size=(bsz, t), dtype=np.int64)
    attn = np.broadcast_to(hybrid_mask(t, pre, pc), (bsz, t, t)).copy()
    tmask = np.zeros((bsz, t), dtype=bool)
    tmask[:, pre + pc + post:] = True
    neigh = rng.normal(0.0, 0.05,
                       size=(bsz, cfg.n_visual_tokens, cfg.neighborhood_k, 3))
    cents = rng.normal(0.0, 0.1, size=(bsz, cfg.n_visual_tokens, 3))
    pc_start = np.full(bsz, pre, dtype=np.int64)
    return Batch(ids, neigh, cents, pc_start, attn, tmask)


def gradient_check(cfg: ModelConfig | None = None, seed: int = 0,
                   h: float = 1e-5) -> GradCheckReport:
    """Compare analytic and central-difference gradients for every
    parameter group of a tiny 64-bit model."""
    if cfg is None:
        cfg = ModelConfig(**TINY_CONFIG)
    if cfg.dtype != "float64":
        raise ValueError("gradient check requires the float64 mode")
    if cfg.d_model > 16 or cfg.max_sequence_length > 12:
        raise ValueError("gradient check is defined for tiny configs "
                         "(d_model <= 16, T <= 12)")
    model = ContactReasoningModel(cfg, seed=seed)
    batch = _probe_batch(cfg, seed + 1)
    _, grads = model.loss_and_optionally_grads(batch)

    per_group = {}
    for name in sorted(model.params.keys()):
        theta = model.params[name]
        numeric = np.zeros_like(theta)
        flat = theta.reshape(-1)
        num_flat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lo_hi = model.loss(batch)
            flat[i] = orig - h
            lo_lo = model.loss(batch)
            flat[i] = orig
            num_flat[i] = (lo_hi - lo_lo) / (2.0 * h)
        denom = max(float(np.abs(grads[name]).max()),
                    float(np.abs(numeric).max()), 1e-8)
        per_group[name] = float(np.abs(grads[name] - numeric).max()) / denom
    return GradCheckReport(per_group, max(per_group.values()))


def format_report(report: GradCheckReport) -> str:
    lines = ["gradient check (central differences, float64):"]
    width = max(len(k) for k in report.per_group)
    for name in sorted(report.per_group):
        lines.append(f"  {name:<{width}}  rel err "
                     f"{report.per_group[name]:.3e}")
    lines.append(f"max relative error: {report.max_relative_error:.3e}")
    return "\n".join(lines)

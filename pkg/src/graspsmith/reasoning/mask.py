"""Hybrid prefix-LM attention mask: the point-cloud block attends
bidirectionally, everything else is causal."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import SegmentLayout
from ..errors import LayoutError


@dataclass(frozen=True)
class AttentionMask:
    """Boolean (T, T) matrix (query rows, key columns; True = may attend)
    plus the segment layout it was built from."""

    matrix: np.ndarray
    layout: SegmentLayout

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=bool).copy()
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)


def hybrid_mask(total_len: int, pc_start: int, pc_len: int) -> np.ndarray:
    """Raw mask rule: entry (q, k) is True iff ``k <= q`` (causal) or k
    lies in the point-cloud span and q is at or past the span start."""
    if pc_start < 0 or pc_start + pc_len > total_len:
        raise LayoutError("pc span outside the sequence")
    q = np.arange(total_len)[:, None]
    k = np.arange(total_len)[None, :]
    causal = k <= q
    pc_keys = (k >= pc_start) & (k < pc_start + pc_len)
    return causal | (pc_keys & (q >= pc_start))


def build_attention_mask(layout: SegmentLayout) -> AttentionMask:
    """Hybrid mask for a [text_pre, pc, text_post, contact, action] layout.

    Point-cloud rows and columns form a fully-true pc x pc block; every
    other above-diagonal entry is False, so text before the point cloud
    attends strictly causally and never sees the pc tokens ahead of it.
    """
    pc_start, pc_len = layout.pc
    return AttentionMask(hybrid_mask(layout.total_length, pc_start, pc_len),
                         layout)


def render_mask(mask: AttentionMask, attend: str = "#",
                masked: str = ".") -> str:
    """Printable grid with segment separators (debug aid)."""
    m = mask.matrix
    edges = {start for start, _ in mask.layout.spans() if start > 0}
    lines = []
    for q in range(m.shape[0]):
        if q in edges:
            lines.append("")
        row = []
        for k in range(m.shape[1]):
            if k in edges:
                row.append(" ")
            row.append(attend if m[q, k] else masked)
        lines.append("".join(row))
    return "\n".join(lines)

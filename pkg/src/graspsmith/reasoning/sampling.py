"""Autoregressive decoding of the assistant span, with optional steering
prefixes and grammar-constrained token filtering."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..codec import (GrammarStateMachine, SegmentLayout, TokenSequence,
                     Vocabulary, build_prompt, validate_grammar)
from ..errors import InvalidSteering
from .mask import hybrid_mask
from .model import Batch, ContactReasoningModel, point_encoder_features

STATUS_COMPLETE = "complete"
STATUS_INCOMPLETE = "incomplete"


@dataclass(frozen=True)
class GenerationResult:
    """Full token sequence (prompt + assistant span), the prompt length,
    completion status, and a parsed layout when the assistant span is a
    clean contact+action block. ``incomplete`` means the length limit hit
    before ``action_end``; the partial sequence is still carried here."""

    ids: tuple
    prompt_length: int
    status: str
    layout: SegmentLayout | None
    parse_ok: bool

    @property
    def assistant_ids(self):
        return self.ids[self.prompt_length:]

    def token_sequence(self) -> TokenSequence | None:
        if self.layout is None:
            return None
        return TokenSequence(self.ids, self.layout)


def generate(model: ContactReasoningModel, vocab: Vocabulary,
             cloud_points, instruction: str, action_dim: int,
             steering_prefix=None, mode: str = "greedy",
             temperature: float = 1.0, constrain: bool = False,
             seed: int | None = None, meta_prompt_id: int = 0,
             meta_prompts=None) -> GenerationResult:
    """Decode one grasp for (cloud, instruction).

    ``steering_prefix`` (from ``build_steering_prefix``) is consumed
    verbatim before free decoding continues. With ``constrain=True`` the
    logits of grammar-invalid next tokens are removed, so the output
    always parses. Greedy decoding is deterministic; ``temperature``
    sampling draws from the seeded generator and converges to greedy as
    the temperature approaches zero.
    """
    cfg = model.cfg
    if mode not in ("greedy", "temperature"):
        raise ValueError("mode must be 'greedy' or 'temperature'")
    rng = np.random.default_rng(seed)

    prompt_ids, (n_pre, n_pc, n_post) = build_prompt(
        instruction, vocab, meta_prompt_id=meta_prompt_id,
        n_visual_tokens=cfg.n_visual_tokens, meta_prompts=meta_prompts)
    prompt_len = len(prompt_ids)
    cents, neigh = point_encoder_features(
        np.asarray(cloud_points, dtype=np.float64),
        cfg.n_visual_tokens, cfg.neighborhood_k)
    cents_b = cents[None].astype(cfg.np_dtype)
    neigh_b = neigh[None].astype(cfg.np_dtype)
    pc_start = np.array([n_pre], dtype=np.int64)

    fsm = GrammarStateMachine(vocab, action_dim)
    ids = list(prompt_ids)
    if steering_prefix:
        for tok in steering_prefix:
            violation = fsm.advance(int(tok))
            if violation is not None:
                raise InvalidSteering(f"steering prefix is not a valid "
                                      f"grammar prefix: {violation}")
            ids.append(int(tok))

    status = STATUS_INCOMPLETE
    while len(ids) < cfg.max_sequence_length:
        t = len(ids)
        batch = Batch(
            ids=np.asarray(ids, dtype=np.int64)[None],
            neigh=neigh_b, cents=cents_b, pc_start=pc_start,
            attn_mask=hybrid_mask(t, n_pre, n_pc)[None],
            target_mask=np.zeros((1, t), dtype=bool))
        last = model.logits_last(batch)[0].astype(np.float64)
        if constrain:
            allowed = fsm.allowed()
            if allowed.size == 0:
                break
            filtered = np.full_like(last, -np.inf)
            filtered[allowed] = last[allowed]
            last = filtered
        if mode == "greedy":
            tok = int(np.argmax(last))
        else:
            if temperature <= 0:
                raise ValueError("temperature must be positive")
            z = (last - last.max()) / temperature
            p = np.exp(z)
            p /= p.sum()
            tok = int(rng.choice(p.size, p=p))
        ids.append(tok)
        fsm.advance(tok)
        if tok == vocab.action_end_id:
            status = STATUS_COMPLETE
            break

    assistant = ids[prompt_len:]
    parse = validate_grammar(assistant, vocab, action_dim)
    layout = None
    if status == STATUS_COMPLETE and parse.ok:
        contact_len = assistant.index(vocab.contact_end_id) + 1
        action_len = len(assistant) - contact_len
        layout = SegmentLayout.from_lengths(n_pre, n_pc, n_post,
                                            contact_len, action_len)
    return GenerationResult(tuple(ids), prompt_len, status, layout,
                            parse.ok)

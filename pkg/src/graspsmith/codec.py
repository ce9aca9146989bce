"""Discrete grasp grammar: vocabulary, quantile normalization, action and
position binning, contact-sequence assembly with position dropout,
steering prefixes, and grammar validation.

The assistant span of every training sequence follows one grammar::

    contact_start (link (pos pos pos)?)* contact_end
    action_start action_bin{D} action_end

Position triples are optional per contact (contact position dropout keeps
the link token, with probability ``p_drop`` drops its three position
tokens). Contacts are serialized in the hand's canonical link order.

Binning convention (stated once, used for both actions and positions):
floor-based index ``clamp(floor((v + 1) / 2 * N), 0, N - 1)`` over the
normalized range [-1, 1], bin-center decode, clamping at the edges. The
round-trip error is at most half a bin width.
"""

from __future__ import annotations

import hashlib
import importlib.resources
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (GrammarError, InvalidSteering, LayoutError, UnknownLink)
from .geometry import ContactSet
from .hand import GraspPose, HandModel

N_ACTION_BINS = 256
N_POS_BINS = 256
DEFAULT_BOUNDS_MARGIN = 0.05
DEFAULT_N_VISUAL_TOKENS = 16

PAD = "<|pad|>"
IM_START = "<|im_start|>"
IM_END = "<|im_end|>"
VISION_START = "<|vision_start|>"
VISION_PAD = "<|vision_pad|>"
VISION_END = "<|vision_end|>"
CONTACT_START = "<|contact_start|>"
CONTACT_END = "<|contact_end|>"
ACTION_START = "<|action_start|>"
ACTION_END = "<|action_end|>"

_SPECIALS = (PAD, IM_START, IM_END, VISION_START, VISION_PAD, VISION_END,
             CONTACT_START, CONTACT_END, ACTION_START, ACTION_END)

SYSTEM_PROMPT = "you are a grasp planning assistant ."

_PUNCT = ".,:;?!"


def tokenize_text(text: str):
    """Word-level tokenization: lowercase, punctuation split off as its own
    tokens."""
    out = []
    for raw in text.lower().split():
        word = raw
        while word and word[-1] in _PUNCT:
            word = word[:-1]
        trail = raw[len(word):]
        while word and word[0] in _PUNCT:
            out.append(word[0])
            word = word[1:]
        if word:
            out.append(word)
        out.extend(trail)
    return out


def link_token(link_name: str) -> str:
    return f"<|rh_{link_name}|>"


def load_meta_prompts(path: str | None = None):
    """Meta-prompt variants, one per line; defaults to the packaged set."""
    if path is None:
        text = (importlib.resources.files("graspsmith.data")
                .joinpath("meta_prompts.txt").read_text())
    else:
        with open(path) as fh:
            text = fh.read()
    prompts = [line.strip() for line in text.splitlines() if line.strip()]
    if len(prompts) < 1:
        raise ValueError("meta prompt file is empty")
    return prompts


class Vocabulary:
    """Closed token inventory: special tokens, word-level text tokens,
    action bins, position bins, and one token per hand link.

    Token ids are assigned deterministically from the build inputs, so two
    builds from the same hand and word list are identical (and hash-equal).
    """

    def __init__(self, tokens):
        self._tokens = list(tokens)
        if len(set(self._tokens)) != len(self._tokens):
            raise ValueError("duplicate tokens in vocabulary")
        self._ids = {t: i for i, t in enumerate(self._tokens)}
        self._action_base = None
        self._pos_base = None
        self._n_action = 0
        self._n_pos = 0
        for i, t in enumerate(self._tokens):
            if t == "<|action_bin_0|>":
                self._action_base = i
            if t == "<|pos_bin_0|>":
                self._pos_base = i
            if t.startswith("<|action_bin_"):
                self._n_action += 1
            if t.startswith("<|pos_bin_"):
                self._n_pos += 1
        self._link_ids = {}
        for i, t in enumerate(self._tokens):
            if t.startswith("<|rh_") and t.endswith("|>"):
                self._link_ids[t[len("<|rh_"):-2]] = i

    @staticmethod
    def build(link_names, text_words, n_action_bins: int = N_ACTION_BINS,
              n_pos_bins: int = N_POS_BINS) -> "Vocabulary":
        tokens = list(_SPECIALS)
        tokens.extend(sorted(set(text_words)))
        tokens.extend(f"<|action_bin_{i}|>" for i in range(n_action_bins))
        tokens.extend(f"<|pos_bin_{i}|>" for i in range(n_pos_bins))
        tokens.extend(link_token(name) for name in link_names)
        return Vocabulary(tokens)

    # -- lookups ----------------------------------------------------------

    def __len__(self):
        return len(self._tokens)

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self):
        return tuple(self._tokens)

    def id(self, token: str) -> int:
        try:
            return self._ids[token]
        except KeyError:
            raise GrammarError(f"token not in vocabulary: {token!r}")

    def name(self, token_id: int) -> str:
        return self._tokens[token_id]

    def word_id(self, word: str) -> int:
        return self.id(word)

    @property
    def pad_id(self):
        return self._ids[PAD]

    @property
    def contact_start_id(self):
        return self._ids[CONTACT_START]

    @property
    def contact_end_id(self):
        return self._ids[CONTACT_END]

    @property
    def action_start_id(self):
        return self._ids[ACTION_START]

    @property
    def action_end_id(self):
        return self._ids[ACTION_END]

    @property
    def vision_pad_id(self):
        return self._ids[VISION_PAD]

    @property
    def n_action_bins(self):
        return self._n_action

    @property
    def n_pos_bins(self):
        return self._n_pos

    def action_bin_id(self, k: int) -> int:
        if not 0 <= k < self._n_action:
            raise GrammarError(f"action bin {k} out of range")
        return self._action_base + k

    def pos_bin_id(self, k: int) -> int:
        if not 0 <= k < self._n_pos:
            raise GrammarError(f"position bin {k} out of range")
        return self._pos_base + k

    def is_action_bin(self, token_id: int) -> bool:
        return (self._action_base is not None
                and self._action_base <= token_id
                < self._action_base + self._n_action)

    def is_pos_bin(self, token_id: int) -> bool:
        return (self._pos_base is not None
                and self._pos_base <= token_id < self._pos_base + self._n_pos)

    def action_bin_index(self, token_id: int) -> int:
        if not self.is_action_bin(token_id):
            raise GrammarError(f"not an action bin token: "
                               f"{self.name(token_id)!r}")
        return token_id - self._action_base

    def pos_bin_index(self, token_id: int) -> int:
        if not self.is_pos_bin(token_id):
            raise GrammarError(f"not a position bin token: "
                               f"{self.name(token_id)!r}")
        return token_id - self._pos_base

    def link_id(self, link_name: str) -> int:
        try:
            return self._link_ids[link_name]
        except KeyError:
            raise UnknownLink(f"no token registered for link {link_name!r}")

    def is_link(self, token_id: int) -> bool:
        t = self._tokens[token_id]
        return t.startswith("<|rh_") and t.endswith("|>")

    def link_name(self, token_id: int) -> str:
        if not self.is_link(token_id):
            raise GrammarError(f"not a link token: {self.name(token_id)!r}")
        return self._tokens[token_id][len("<|rh_"):-2]

    def link_token_ids(self) -> np.ndarray:
        return np.array(sorted(self._link_ids.values()), dtype=np.int64)

    # -- persistence -------------------------------------------------------

    def hash(self) -> str:
        return hashlib.sha256("\n".join(self._tokens).encode()).hexdigest()

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write("vocab_format_version: 1\n")
            for t in self._tokens:
                fh.write(t + "\n")

    @staticmethod
    def load(path: str) -> "Vocabulary":
        with open(path) as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "vocab_format_version: 1":
            raise ValueError(f"{path}: not a version-1 vocabulary file")
        return Vocabulary([l for l in lines[1:] if l])


def default_vocabulary(model: HandModel, extra_words=(),
                       meta_prompt_path: str | None = None,
                       n_action_bins: int = N_ACTION_BINS,
                       n_pos_bins: int = N_POS_BINS) -> Vocabulary:
    """Vocabulary covering the chat scaffold, the packaged meta prompts,
    the synthetic instruction grammar, and the hand's links."""
    from .synthetic import instruction_word_inventory

    words = set(tokenize_text(SYSTEM_PROMPT))
    words.update(["system", "user", "assistant", "query", ":"])
    for prompt in load_meta_prompts(meta_prompt_path):
        words.update(tokenize_text(prompt))
    words.update(instruction_word_inventory())
    words.update(extra_words)
    return Vocabulary.build(model.link_names, sorted(words),
                            n_action_bins, n_pos_bins)


# ---------------------------------------------------------------------------
# normalization and binning


class QuantileNormalizer:
    """Per-dimension map from the empirical 1st/99th percentile range onto
    [-1, 1] (linear-interpolation percentiles), clamped outside."""

    def __init__(self, q01, q99):
        q01 = np.asarray(q01, dtype=np.float64).copy()
        q99 = np.asarray(q99, dtype=np.float64).copy()
        if q01.shape != q99.shape or q01.ndim != 1:
            raise ValueError("q01/q99 must be matching 1-D arrays")
        if np.any(q01 >= q99):
            raise ValueError("each dimension needs q01 < q99")
        q01.setflags(write=False)
        q99.setflags(write=False)
        self.q01, self.q99 = q01, q99

    @property
    def dim(self) -> int:
        return self.q01.size

    def normalize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        v = 2.0 * (x - self.q01) / (self.q99 - self.q01) - 1.0
        return np.clip(v, -1.0, 1.0)

    def denormalize(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        return self.q01 + (v + 1.0) / 2.0 * (self.q99 - self.q01)


def fit_action_normalizer(poses) -> QuantileNormalizer:
    """Fit the 1st/99th percentile normalizer on a batch of grasp vectors.

    At least 2 samples are required (100+ recommended for stable
    percentiles). Degenerate dimensions (q01 == q99) are widened by 1e-6
    with a warning.
    """
    if hasattr(poses, "ndim"):
        data = np.asarray(poses, dtype=np.float64)
    else:
        data = np.array([p.as_vector() for p in poses])
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError("need at least 2 grasp vectors to fit percentiles")
    q01 = np.percentile(data, 1.0, axis=0, method="linear")
    q99 = np.percentile(data, 99.0, axis=0, method="linear")
    degenerate = q99 - q01 < 1e-12
    if np.any(degenerate):
        warnings.warn(f"{int(degenerate.sum())} degenerate action "
                      f"dimension(s) widened by 1e-6", stacklevel=2)
        q01 = np.where(degenerate, q01 - 5e-7, q01)
        q99 = np.where(degenerate, q99 + 5e-7, q99)
    return QuantileNormalizer(q01, q99)


@dataclass(frozen=True)
class PositionBounds:
    """Axis-aligned bounds for contact-position binning, meters."""

    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        mn = np.asarray(self.min, dtype=np.float64).copy()
        mx = np.asarray(self.max, dtype=np.float64).copy()
        if mn.shape != (3,) or mx.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if np.any(mn >= mx):
            raise ValueError("bounds need min < max per axis")
        mn.setflags(write=False)
        mx.setflags(write=False)
        object.__setattr__(self, "min", mn)
        object.__setattr__(self, "max", mx)

    @staticmethod
    def from_positions(positions,
                       margin: float = DEFAULT_BOUNDS_MARGIN,
                       ) -> "PositionBounds":
        """Training-set min/max expanded by ``margin`` of the per-axis
        range on each side."""
        positions = np.asarray(positions, dtype=np.float64)
        mn, mx = positions.min(axis=0), positions.max(axis=0)
        rng = np.maximum(mx - mn, 1e-6)
        return PositionBounds(mn - margin * rng, mx + margin * rng)


def _to_bin(v: np.ndarray, n: int) -> np.ndarray:
    idx = np.floor((v + 1.0) / 2.0 * n).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def _from_bin(idx: np.ndarray, n: int) -> np.ndarray:
    return (np.asarray(idx, dtype=np.float64) + 0.5) * 2.0 / n - 1.0


def encode_action(pose: GraspPose, norm: QuantileNormalizer,
                  vocab: Vocabulary):
    """Grasp vector -> D action-bin token ids."""
    x = pose.as_vector()
    if x.size != norm.dim:
        raise GrammarError(f"pose dimension {x.size} does not match "
                           f"normalizer dimension {norm.dim}")
    bins = _to_bin(norm.normalize(x), vocab.n_action_bins)
    return [vocab.action_bin_id(int(k)) for k in bins]


def decode_action(token_ids, norm: QuantileNormalizer,
                  vocab: Vocabulary) -> GraspPose:
    """D action-bin token ids -> grasp vector at bin centers."""
    token_ids = list(token_ids)
    if len(token_ids) != norm.dim:
        raise GrammarError(f"expected {norm.dim} action tokens, "
                           f"got {len(token_ids)}")
    bins = np.array([vocab.action_bin_index(t) for t in token_ids])
    centers = _from_bin(bins, vocab.n_action_bins)
    return GraspPose.from_vector(norm.denormalize(centers))


def encode_position(p, bounds: PositionBounds, vocab: Vocabulary):
    """3-vector (meters) -> 3 position-bin token ids; out-of-bounds input
    clamps to the edge bins."""
    p = np.asarray(p, dtype=np.float64)
    v = 2.0 * (p - bounds.min) / (bounds.max - bounds.min) - 1.0
    bins = _to_bin(np.clip(v, -1.0, 1.0), vocab.n_pos_bins)
    return [vocab.pos_bin_id(int(k)) for k in bins]


def decode_position(token_ids, bounds: PositionBounds,
                    vocab: Vocabulary) -> np.ndarray:
    token_ids = list(token_ids)
    if len(token_ids) != 3:
        raise GrammarError(f"expected 3 position tokens, "
                           f"got {len(token_ids)}")
    bins = np.array([vocab.pos_bin_index(t) for t in token_ids])
    v = _from_bin(bins, vocab.n_pos_bins)
    return bounds.min + (v + 1.0) / 2.0 * (bounds.max - bounds.min)


# ---------------------------------------------------------------------------
# contact encoding with position dropout


def encode_contacts(contacts: ContactSet, bounds: PositionBounds,
                    vocab: Vocabulary, p_drop: float = 0.0,
                    rng=None, granularity: str = "contact"):
    """Contact block token ids: ``contact_start`` then, per contact in
    canonical order, the link token followed by its 3 position tokens,
    then ``contact_end``.

    With probability ``p_drop`` a contact's position triple is omitted
    (link tokens are always kept). ``granularity`` selects independent
    per-contact coin flips ("contact") or a single flip for the whole
    sequence ("sequence").
    """
    if not 0.0 <= p_drop <= 1.0:
        raise ValueError("p_drop must be in [0, 1]")
    if granularity not in ("contact", "sequence"):
        raise ValueError("granularity must be 'contact' or 'sequence'")
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)

    if p_drop <= 0.0:
        drops = [False] * len(contacts)
    elif p_drop >= 1.0:
        drops = [True] * len(contacts)
    elif granularity == "sequence":
        drops = [bool(rng.random() < p_drop)] * len(contacts)
    else:
        drops = [bool(rng.random() < p_drop) for _ in contacts]

    out = [vocab.contact_start_id]
    for record, drop in zip(contacts, drops):
        out.append(vocab.link_id(record.link))
        if not drop:
            out.extend(encode_position(record.position, bounds, vocab))
    out.append(vocab.contact_end_id)
    return out


def build_steering_prefix(partial: ContactSet, k_links: int,
                          bounds: PositionBounds, vocab: Vocabulary):
    """Generation prefix pinning the first ``k_links`` contacts:
    ``contact_start`` plus (link + 3 position tokens) per pinned contact.

    The prefix is deliberately NOT terminated by ``contact_end`` so the
    model may append further contacts before closing the block.
    """
    if k_links < 0 or k_links > len(partial):
        raise InvalidSteering(f"k_links={k_links} outside [0, "
                              f"{len(partial)}]")
    out = [vocab.contact_start_id]
    for record in list(partial)[:k_links]:
        out.append(vocab.link_id(record.link))
        out.extend(encode_position(record.position, bounds, vocab))
    return out


# ---------------------------------------------------------------------------
# token sequences and segment layout


_SEGMENT_NAMES = ("text_pre", "pc", "text_post", "contact", "action")


@dataclass(frozen=True)
class SegmentLayout:
    """Contiguous, ordered, non-overlapping spans (start, length) for the
    five sequence segments: text_pre, pc, text_post, contact, action."""

    text_pre: tuple
    pc: tuple
    text_post: tuple
    contact: tuple
    action: tuple

    def __post_init__(self):
        spans = self.spans()
        cursor = 0
        for name, (start, length) in zip(_SEGMENT_NAMES, spans):
            if length < 0:
                raise LayoutError(f"{name}: negative length")
            if start != cursor:
                raise LayoutError(
                    f"{name}: starts at {start}, expected {cursor} "
                    f"(spans must be contiguous and ordered)")
            cursor = start + length

    @staticmethod
    def from_lengths(*lengths) -> "SegmentLayout":
        if len(lengths) != 5:
            raise LayoutError("expected 5 segment lengths")
        spans, cursor = [], 0
        for n in lengths:
            spans.append((cursor, int(n)))
            cursor += int(n)
        return SegmentLayout(*spans)

    def spans(self):
        return (self.text_pre, self.pc, self.text_post, self.contact,
                self.action)

    @property
    def total_length(self) -> int:
        start, length = self.action
        return start + length

    def segment_of(self, position: int) -> str:
        for name, (start, length) in zip(_SEGMENT_NAMES, self.spans()):
            if start <= position < start + length:
                return name
        raise LayoutError(f"position {position} outside layout")


@dataclass(frozen=True)
class TokenSequence:
    """Token ids plus the segment annotation of the full chat sequence."""

    ids: tuple
    layout: SegmentLayout

    def __post_init__(self):
        object.__setattr__(self, "ids", tuple(int(i) for i in self.ids))
        if len(self.ids) != self.layout.total_length:
            raise LayoutError(f"{len(self.ids)} ids but layout covers "
                              f"{self.layout.total_length}")

    def __len__(self):
        return len(self.ids)

    def segment_ids(self, name: str):
        start, length = dict(zip(_SEGMENT_NAMES, self.layout.spans()))[name]
        return self.ids[start:start + length]

    def assistant_ids(self):
        """Contact + action spans (the part the model is trained to emit)."""
        start = self.layout.contact[0]
        return self.ids[start:]

    def to_names(self, vocab: Vocabulary) -> str:
        return " ".join(vocab.name(i) for i in self.ids)

    def to_bytes(self) -> bytes:
        return np.asarray(self.ids, dtype="<u4").tobytes()

    @staticmethod
    def ids_from_bytes(raw: bytes):
        return np.frombuffer(raw, dtype="<u4").astype(np.int64).tolist()


def build_training_sequence(instruction: str, contacts: ContactSet,
                            pose: GraspPose, norm: QuantileNormalizer,
                            bounds: PositionBounds, vocab: Vocabulary,
                            p_drop: float = 0.0, meta_prompt_id: int = 0,
                            rng=None,
                            n_visual_tokens: int = DEFAULT_N_VISUAL_TOKENS,
                            meta_prompts=None,
                            dropout_granularity: str = "contact",
                            ablate_contacts: bool = False) -> TokenSequence:
    """Assemble one chat-formatted training sequence.

    Layout: system text and the user-turn opening (text_pre), the visual
    placeholder block (pc), meta prompt + instruction + assistant-turn
    opening (text_post), then the assistant's contact block and action
    block. ``meta_prompt_id`` cycles over the stored meta-prompt variants.
    ``ablate_contacts`` empties the contact block (the no-reasoning
    ablation); the action block is unchanged.
    """
    if meta_prompts is None:
        meta_prompts = load_meta_prompts()
    meta = meta_prompts[meta_prompt_id % len(meta_prompts)]

    text_pre = [vocab.id(IM_START), vocab.word_id("system")]
    text_pre += [vocab.word_id(w) for w in tokenize_text(SYSTEM_PROMPT)]
    text_pre += [vocab.id(IM_END), vocab.id(IM_START), vocab.word_id("user"),
                 vocab.id(VISION_START)]

    pc = [vocab.vision_pad_id] * n_visual_tokens

    text_post = [vocab.id(VISION_END)]
    text_post += [vocab.word_id(w) for w in tokenize_text(meta)]
    text_post += [vocab.word_id("query"), vocab.word_id(":")]
    text_post += [vocab.word_id(w) for w in tokenize_text(instruction)]
    text_post += [vocab.id(IM_END), vocab.id(IM_START),
                  vocab.word_id("assistant")]

    if ablate_contacts:
        contact_ids = [vocab.contact_start_id, vocab.contact_end_id]
    else:
        contact_ids = encode_contacts(contacts, bounds, vocab, p_drop, rng,
                                      dropout_granularity)
    action_ids = ([vocab.action_start_id]
                  + encode_action(pose, norm, vocab)
                  + [vocab.action_end_id])

    layout = SegmentLayout.from_lengths(len(text_pre), len(pc),
                                        len(text_post), len(contact_ids),
                                        len(action_ids))
    return TokenSequence(
        tuple(text_pre + pc + text_post + contact_ids + action_ids), layout)


def build_prompt(instruction: str, vocab: Vocabulary,
                 meta_prompt_id: int = 0,
                 n_visual_tokens: int = DEFAULT_N_VISUAL_TOKENS,
                 meta_prompts=None):
    """Prompt-only token ids (text_pre + pc + text_post) and their lengths,
    for generation."""
    if meta_prompts is None:
        meta_prompts = load_meta_prompts()
    meta = meta_prompts[meta_prompt_id % len(meta_prompts)]

    text_pre = [vocab.id(IM_START), vocab.word_id("system")]
    text_pre += [vocab.word_id(w) for w in tokenize_text(SYSTEM_PROMPT)]
    text_pre += [vocab.id(IM_END), vocab.id(IM_START), vocab.word_id("user"),
                 vocab.id(VISION_START)]
    pc = [vocab.vision_pad_id] * n_visual_tokens
    text_post = [vocab.id(VISION_END)]
    text_post += [vocab.word_id(w) for w in tokenize_text(meta)]
    text_post += [vocab.word_id("query"), vocab.word_id(":")]
    text_post += [vocab.word_id(w) for w in tokenize_text(instruction)]
    text_post += [vocab.id(IM_END), vocab.id(IM_START),
                  vocab.word_id("assistant")]
    ids = text_pre + pc + text_post
    return ids, (len(text_pre), len(pc), len(text_post))


# ---------------------------------------------------------------------------
# grammar


class GrammarStateMachine:
    """Incremental recognizer for the assistant-span grammar; also drives
    grammar-constrained decoding by listing the valid next tokens."""

    def __init__(self, vocab: Vocabulary, action_dim: int):
        self.vocab = vocab
        self.action_dim = action_dim
        self._link_ids = vocab.link_token_ids()
        self.reset()

    def reset(self):
        self.phase = "start"
        self.pos_count = 0
        self.action_count = 0

    @property
    def done(self) -> bool:
        return self.phase == "done"

    def allowed(self) -> np.ndarray:
        """Valid next token ids in the current state."""
        v = self.vocab
        if self.phase == "start":
            return np.array([v.contact_start_id])
        if self.phase == "contact":
            return np.concatenate([self._link_ids, [v.contact_end_id]])
        if self.phase == "after_link":
            pos = np.arange(v.pos_bin_id(0), v.pos_bin_id(0) + v.n_pos_bins)
            return np.concatenate([pos, self._link_ids, [v.contact_end_id]])
        if self.phase == "in_triple":
            return np.arange(v.pos_bin_id(0), v.pos_bin_id(0) + v.n_pos_bins)
        if self.phase == "await_action":
            return np.array([v.action_start_id])
        if self.phase == "action":
            if self.action_count < self.action_dim:
                return np.arange(v.action_bin_id(0),
                                 v.action_bin_id(0) + v.n_action_bins)
            return np.array([v.action_end_id])
        return np.empty(0, dtype=np.int64)  # done

    def advance(self, token_id: int) -> str | None:
        """Consume one token; returns a violation message or None."""
        v = self.vocab
        name = v.name(token_id) if 0 <= token_id < v.size else str(token_id)
        if self.phase == "start":
            if token_id != v.contact_start_id:
                return f"expected {CONTACT_START}, got {name}"
            self.phase = "contact"
            return None
        if self.phase == "contact":
            if v.is_link(token_id):
                self.phase = "after_link"
                return None
            if token_id == v.contact_end_id:
                self.phase = "await_action"
                return None
            return f"expected link token or {CONTACT_END}, got {name}"
        if self.phase == "after_link":
            if v.is_pos_bin(token_id):
                self.phase = "in_triple"
                self.pos_count = 1
                return None
            if v.is_link(token_id):
                return None
            if token_id == v.contact_end_id:
                self.phase = "await_action"
                return None
            return (f"expected position bin, link token or {CONTACT_END}, "
                    f"got {name}")
        if self.phase == "in_triple":
            if not v.is_pos_bin(token_id):
                return f"incomplete position triple: got {name}"
            self.pos_count += 1
            if self.pos_count == 3:
                self.phase = "contact"
                self.pos_count = 0
            return None
        if self.phase == "await_action":
            if token_id != v.action_start_id:
                return f"expected {ACTION_START}, got {name}"
            self.phase = "action"
            self.action_count = 0
            return None
        if self.phase == "action":
            if v.is_action_bin(token_id):
                self.action_count += 1
                if self.action_count > self.action_dim:
                    return (f"action length != {self.action_dim}: "
                            f"too many action bins")
                return None
            if token_id == v.action_end_id:
                if self.action_count != self.action_dim:
                    return (f"action length != {self.action_dim}: got "
                            f"{self.action_count}")
                self.phase = "done"
                return None
            return f"expected action bin or {ACTION_END}, got {name}"
        return f"trailing token after {ACTION_END}: {name}"


@dataclass(frozen=True)
class ParseResult:
    """Outcome of grammar validation: either a structured parse of the
    assistant span or the first violation encountered."""

    ok: bool
    violations: tuple
    contact_items: tuple  # (link_name, pos_bin_triple or None) pairs
    action_bins: tuple

    def contact_links(self):
        return [link for link, _ in self.contact_items]


def validate_grammar(token_ids, vocab: Vocabulary,
                     action_dim: int) -> ParseResult:
    """Check an assistant span against the contact/action grammar.

    Returns the parsed (contacts, action bins) structure when the sequence
    is exactly ``contact_start (link (pos pos pos)?)* contact_end
    action_start action_bin{D} action_end``, or first-violation
    diagnostics. Violations are data, not exceptions.
    """
    fsm = GrammarStateMachine(vocab, action_dim)
    contact_items, action_bins = [], []
    pending_link, pending_pos = None, []
    for pos, token_id in enumerate(token_ids):
        was_phase = fsm.phase
        err = fsm.advance(int(token_id))
        if err is not None:
            return ParseResult(False, (f"position {pos}: {err}",), (), ())
        if was_phase in ("contact", "after_link") and vocab.is_link(token_id):
            if pending_link is not None:
                contact_items.append((pending_link, None))
            pending_link = vocab.link_name(token_id)
            pending_pos = []
        elif vocab.is_pos_bin(int(token_id)):
            pending_pos.append(vocab.pos_bin_index(int(token_id)))
            if len(pending_pos) == 3:
                contact_items.append((pending_link, tuple(pending_pos)))
                pending_link, pending_pos = None, []
        elif int(token_id) == vocab.contact_end_id and pending_link:
            contact_items.append((pending_link, None))
            pending_link = None
        elif vocab.is_action_bin(int(token_id)):
            action_bins.append(vocab.action_bin_index(int(token_id)))
    if not fsm.done:
        return ParseResult(
            False, (f"sequence ended in phase {fsm.phase!r} "
                    f"(expected a complete contact+action span)",), (), ())
    return ParseResult(True, (), tuple(contact_items), tuple(action_bins))


def decode_parsed_contacts(parse: ParseResult, bounds: PositionBounds,
                           vocab: Vocabulary):
    """(link, position or None) pairs in meters from a successful parse.
    Duplicate links keep their first occurrence."""
    if not parse.ok:
        raise GrammarError("cannot decode contacts from a failed parse")
    seen, out = set(), []
    for link, bins in parse.contact_items:
        if link in seen:
            continue
        seen.add(link)
        if bins is None:
            out.append((link, None))
        else:
            pos = bounds.min + (_from_bin(np.array(bins), vocab.n_pos_bins)
                                + 1.0) / 2.0 * (bounds.max - bounds.min)
            out.append((link, pos))
    return out


# ---------------------------------------------------------------------------
# normalizer / bounds persistence


def save_normalization(norm: QuantileNormalizer, bounds: PositionBounds,
                       path: str) -> None:
    with open(path, "w") as fh:
        fh.write("norm_format_version: 1\n")
        fh.write(f"action_dim: {norm.dim}\n")
        fh.write("q01: " + " ".join("%.17g" % v for v in norm.q01) + "\n")
        fh.write("q99: " + " ".join("%.17g" % v for v in norm.q99) + "\n")
        fh.write("pos_min: " + " ".join("%.17g" % v for v in bounds.min)
                 + "\n")
        fh.write("pos_max: " + " ".join("%.17g" % v for v in bounds.max)
                 + "\n")


def load_normalization(path: str):
    fields = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            key, _, rest = line.partition(":")
            fields[key.strip()] = rest.strip()
    if fields.get("norm_format_version") != "1":
        raise ValueError(f"{path}: not a version-1 normalization file")
    q01 = np.array([float(x) for x in fields["q01"].split()])
    q99 = np.array([float(x) for x in fields["q99"].split()])
    mn = np.array([float(x) for x in fields["pos_min"].split()])
    mx = np.array([float(x) for x in fields["pos_max"].split()])
    return QuantileNormalizer(q01, q99), PositionBounds(mn, mx)

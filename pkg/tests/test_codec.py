import numpy as np
import pytest

from graspsmith import codec
from graspsmith.codec import (PositionBounds, QuantileNormalizer,
                              SegmentLayout, TokenSequence, Vocabulary,
                              build_prompt, build_steering_prefix,
                              build_training_sequence, decode_action,
                              decode_parsed_contacts, decode_position,
                              default_vocabulary, encode_action,
                              encode_contacts, encode_position,
                              fit_action_normalizer, load_meta_prompts,
                              load_normalization, save_normalization,
                              tokenize_text, validate_grammar)
from graspsmith.errors import (GrammarError, InvalidSteering, LayoutError,
                               UnknownLink)
from graspsmith.geometry import ContactRecord, ContactSet
from graspsmith.hand import GraspPose, default_hand

HAND = default_hand()
VOCAB = default_vocabulary(HAND)
D = HAND.grasp_dim


@pytest.fixture(scope="module")
def norm():
    rng = np.random.default_rng(0)
    return fit_action_normalizer(rng.normal(0.0, 0.7, size=(500, D)))


@pytest.fixture(scope="module")
def bounds():
    return PositionBounds(np.array([-0.25, -0.25, -0.25]),
                          np.array([0.25, 0.25, 0.25]))


def make_contacts(entries):
    return ContactSet.from_records(
        [ContactRecord(link, np.asarray(p, dtype=float), 0.0)
         for link, p in entries], HAND)


# --- text tokenizer ----------------------------------------------------------


def test_tokenize_text_lowercases_and_splits_punctuation():
    assert tokenize_text("Grasp the Box .") == ["grasp", "the", "box", "."]
    assert tokenize_text("query: hold, it!") == \
        ["query", ":", "hold", ",", "it", "!"]


# --- vocabulary --------------------------------------------------------------


def test_vocabulary_has_all_parts():
    assert VOCAB.n_action_bins == 256
    assert VOCAB.n_pos_bins == 256
    for link in HAND.link_names:
        assert VOCAB.is_link(VOCAB.link_id(link))
    assert len(set(VOCAB.tokens)) == VOCAB.size


def test_vocabulary_build_deterministic():
    a = default_vocabulary(HAND)
    assert a.tokens == VOCAB.tokens
    assert a.hash() == VOCAB.hash()


def test_vocabulary_save_load_round_trip(tmp_path):
    path = str(tmp_path / "vocab.txt")
    VOCAB.save(path)
    loaded = Vocabulary.load(path)
    assert loaded.tokens == VOCAB.tokens
    assert loaded.hash() == VOCAB.hash()


def test_vocabulary_unknown_link_raises():
    with pytest.raises(UnknownLink):
        VOCAB.link_id("elbow")


def test_meta_prompts_at_least_four_variants():
    assert len(load_meta_prompts()) >= 4


# --- quantile normalizer -----------------------------------------------------


def test_normalizer_percentiles_match_sort_oracle():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(10_000, 4)) * np.array([1, 2, 0.5, 3.0])
    norm = fit_action_normalizer(data)
    for dim in range(4):
        v = np.sort(data[:, dim])
        for q, got in ((0.01, norm.q01[dim]), (0.99, norm.q99[dim])):
            h = (len(v) - 1) * q
            lo = int(np.floor(h))
            expect = v[lo] + (h - lo) * (v[min(lo + 1, len(v) - 1)] - v[lo])
            assert abs(got - expect) <= 1e-12


def test_normalizer_symmetric_uniform_range():
    rng = np.random.default_rng(2)
    data = rng.uniform(-2.0, 2.0, size=(100_000, 1))
    norm = fit_action_normalizer(data)
    assert norm.q01[0] == pytest.approx(-1.96, abs=0.02)
    assert norm.q99[0] == pytest.approx(1.96, abs=0.02)
    assert norm.normalize([0.0])[0] == pytest.approx(0.0, abs=0.01)


def test_normalizer_maps_percentiles_to_unit_interval():
    rng = np.random.default_rng(3)
    norm = fit_action_normalizer(rng.normal(size=(1000, 2)))
    assert norm.normalize(norm.q01) == pytest.approx([-1.0, -1.0])
    assert norm.normalize(norm.q99) == pytest.approx([1.0, 1.0])


def test_normalizer_widens_degenerate_dimension():
    data = np.ones((50, 2))
    data[:, 1] = np.linspace(0, 1, 50)
    with pytest.warns(UserWarning):
        norm = fit_action_normalizer(data)
    assert norm.q99[0] - norm.q01[0] == pytest.approx(1e-6, rel=0.01)


# --- action binning ----------------------------------------------------------


def test_action_bin_boundaries(norm):
    v = np.full(D, -1.0)
    pose = GraspPose.from_vector(norm.denormalize(v))
    toks = encode_action(pose, norm, VOCAB)
    assert all(VOCAB.action_bin_index(t) == 0 for t in toks)
    v = np.full(D, 1.0)
    pose = GraspPose.from_vector(norm.denormalize(v))
    toks = encode_action(pose, norm, VOCAB)
    assert all(VOCAB.action_bin_index(t) == 255 for t in toks)


def test_action_center_bin_and_decode_value(norm):
    pose = GraspPose.from_vector(norm.denormalize(np.zeros(D)))
    toks = encode_action(pose, norm, VOCAB)
    assert all(VOCAB.action_bin_index(t) == 128 for t in toks)
    decoded = decode_action(toks, norm, VOCAB)
    centers = norm.normalize(decoded.as_vector())
    assert centers == pytest.approx(np.full(D, 0.00390625), abs=1e-12)


def test_action_round_trip_error_bounded(norm):
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(500):
        v = rng.uniform(-1, 1, D)
        pose = GraspPose.from_vector(norm.denormalize(v))
        decoded = decode_action(encode_action(pose, norm, VOCAB), norm,
                                VOCAB)
        err = np.abs(norm.normalize(decoded.as_vector()) - v).max()
        worst = max(worst, err)
    assert worst <= 1.0 / 256


def test_decode_action_rejects_wrong_count(norm):
    with pytest.raises(GrammarError):
        decode_action([VOCAB.action_bin_id(0)] * (D - 1), norm, VOCAB)


def test_decode_action_rejects_non_action_token(norm):
    toks = [VOCAB.action_bin_id(0)] * (D - 1) + [VOCAB.pos_bin_id(0)]
    with pytest.raises(GrammarError):
        decode_action(toks, norm, VOCAB)


# --- position binning --------------------------------------------------------


def test_position_min_maps_to_zero_bins(bounds):
    toks = encode_position(bounds.min, bounds, VOCAB)
    assert [VOCAB.pos_bin_index(t) for t in toks] == [0, 0, 0]


def test_position_midpoint_maps_to_bin_128(bounds):
    mid = 0.5 * (bounds.min + bounds.max)
    toks = encode_position(mid, bounds, VOCAB)
    assert [VOCAB.pos_bin_index(t) for t in toks] == [128, 128, 128]


def test_position_out_of_bounds_clamps(bounds):
    toks = encode_position(bounds.max + 1.0, bounds, VOCAB)
    assert [VOCAB.pos_bin_index(t) for t in toks] == [255, 255, 255]


def test_position_round_trip_error_bounded(bounds):
    rng = np.random.default_rng(5)
    half_bin = (bounds.max - bounds.min) / 512.0
    for _ in range(500):
        p = rng.uniform(bounds.min, bounds.max)
        q = decode_position(encode_position(p, bounds, VOCAB), bounds,
                            VOCAB)
        assert np.all(np.abs(q - p) <= half_bin + 1e-12)


def test_bounds_margin_expansion():
    pts = np.array([[0.0, 0, 0], [1.0, 2.0, 4.0]])
    b = PositionBounds.from_positions(pts, margin=0.05)
    assert b.min == pytest.approx([-0.05, -0.1, -0.2])
    assert b.max == pytest.approx([1.05, 2.1, 4.2])


# --- contact encoding --------------------------------------------------------


def test_encode_contacts_empty(bounds):
    toks = encode_contacts(make_contacts([]), bounds, VOCAB)
    assert toks == [VOCAB.contact_start_id, VOCAB.contact_end_id]


def test_encode_contacts_full_dropout_keeps_links_only(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0])])
    toks = encode_contacts(contacts, bounds, VOCAB, p_drop=1.0, rng=0)
    assert toks == [VOCAB.contact_start_id, VOCAB.link_id("ffdistal"),
                    VOCAB.link_id("thbase"), VOCAB.contact_end_id]
    assert not any(VOCAB.is_pos_bin(t) for t in toks)


def test_encode_contacts_no_dropout_keeps_all_triples(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0])])
    toks = encode_contacts(contacts, bounds, VOCAB, p_drop=0.0)
    assert len(toks) == 2 + 2 * 4


def test_encode_contacts_canonical_order_invariance(bounds):
    a = make_contacts([("thbase", [0, 0, 0]), ("ffdistal", [0.1, 0, 0]),
                       ("mfmiddle", [0, 0.1, 0])])
    b = make_contacts([("mfmiddle", [0, 0.1, 0]), ("thbase", [0, 0, 0]),
                       ("ffdistal", [0.1, 0, 0])])
    ta = encode_contacts(a, bounds, VOCAB, p_drop=0.0)
    tb = encode_contacts(b, bounds, VOCAB, p_drop=0.0)
    assert ta == tb


def test_encode_contacts_dropout_retention_frequency(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0]),
                              ("mfdistal", [0, 0.1, 0])])
    kept = total = 0
    rng = np.random.default_rng(6)
    for _ in range(4000):
        toks = encode_contacts(contacts, bounds, VOCAB, p_drop=0.5,
                               rng=rng)
        pos = sum(1 for t in toks if VOCAB.is_pos_bin(t))
        kept += pos // 3
        total += 3
    freq = kept / total
    half_width = 2.576 * np.sqrt(0.25 / total)  # 99% binomial interval
    assert abs(freq - 0.5) < half_width


def test_encode_contacts_dropout_never_removes_links(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0]),
                              ("lfdistal", [0, 0, 0.1])])
    for seed in range(30):
        toks = encode_contacts(contacts, bounds, VOCAB, p_drop=0.7,
                               rng=seed)
        links = {VOCAB.link_name(t) for t in toks if VOCAB.is_link(t)}
        assert links == contacts.link_set()


def test_encode_contacts_sequence_granularity(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0]),
                              ("mfdistal", [0, 0.1, 0])])
    for seed in range(20):
        toks = encode_contacts(contacts, bounds, VOCAB, p_drop=0.5,
                               rng=seed, granularity="sequence")
        pos = sum(1 for t in toks if VOCAB.is_pos_bin(t))
        assert pos in (0, 9)  # all triples kept or all dropped


def test_encode_contacts_unknown_link(bounds):
    records = (ContactRecord("elbow", np.zeros(3), 0.0),)
    with pytest.raises(UnknownLink):
        encode_contacts(ContactSet(records), bounds, VOCAB)


# --- training sequences ------------------------------------------------------


def sample_sequence(norm, bounds, p_drop=0.0, meta_prompt_id=0, rng=None,
                    ablate=False):
    contacts = make_contacts([("thbase", [0.01, 0.02, 0.03]),
                              ("ffdistal", [-0.04, 0.05, 0.06]),
                              ("mfdistal", [0.07, -0.08, 0.09])])
    pose = GraspPose.from_vector(norm.denormalize(
        np.linspace(-0.9, 0.9, D)))
    return build_training_sequence(
        "grasp the box with three fingers using a tripod grip .",
        contacts, pose, norm, bounds, VOCAB, p_drop=p_drop,
        meta_prompt_id=meta_prompt_id, rng=rng, ablate_contacts=ablate)


def test_training_sequence_assistant_span_delimiters(norm, bounds):
    seq = sample_sequence(norm, bounds)
    assistant = seq.assistant_ids()
    assert assistant[0] == VOCAB.contact_start_id
    assert assistant[-1] == VOCAB.action_end_id


def test_training_sequence_grammar_closure(norm, bounds):
    for p_drop in (0.0, 0.5, 1.0):
        for seed in range(20):
            seq = sample_sequence(norm, bounds, p_drop=p_drop, rng=seed)
            parse = validate_grammar(seq.assistant_ids(), VOCAB, D)
            assert parse.ok, parse.violations


def test_training_sequence_meta_prompt_variants(norm, bounds):
    a = sample_sequence(norm, bounds, meta_prompt_id=0)
    b = sample_sequence(norm, bounds, meta_prompt_id=1)
    assert a.segment_ids("text_post") != b.segment_ids("text_post")
    assert a.assistant_ids() == b.assistant_ids()
    assert len(load_meta_prompts()) >= 4


def test_training_sequence_round_trip(norm, bounds):
    seq = sample_sequence(norm, bounds, p_drop=0.0)
    parse = validate_grammar(seq.assistant_ids(), VOCAB, D)
    assert parse.ok
    decoded_contacts = decode_parsed_contacts(parse, bounds, VOCAB)
    assert [l for l, _ in decoded_contacts] == \
        ["ffdistal", "mfdistal", "thbase"]
    half_bin = (bounds.max - bounds.min) / 512.0
    originals = {"thbase": [0.01, 0.02, 0.03],
                 "ffdistal": [-0.04, 0.05, 0.06],
                 "mfdistal": [0.07, -0.08, 0.09]}
    for link, pos in decoded_contacts:
        assert np.all(np.abs(pos - originals[link]) <= half_bin + 1e-12)
    decoded_pose = decode_action(
        [VOCAB.action_bin_id(b) for b in parse.action_bins], norm, VOCAB)
    target = norm.denormalize(np.linspace(-0.9, 0.9, D))
    err = np.abs(norm.normalize(decoded_pose.as_vector())
                 - norm.normalize(target)).max()
    assert err <= 1.0 / 256


def test_training_sequence_ablated_contact_block(norm, bounds):
    seq = sample_sequence(norm, bounds, ablate=True)
    assert list(seq.segment_ids("contact")) == \
        [VOCAB.contact_start_id, VOCAB.contact_end_id]


def test_prompt_matches_training_prefix(norm, bounds):
    seq = sample_sequence(norm, bounds)
    ids, (n_pre, n_pc, n_post) = build_prompt(
        "grasp the box with three fingers using a tripod grip .", VOCAB)
    assert tuple(ids) == seq.ids[:len(ids)]
    assert (n_pre, n_pc, n_post) == (seq.layout.text_pre[1],
                                     seq.layout.pc[1],
                                     seq.layout.text_post[1])


def test_training_sequence_unknown_word(norm, bounds):
    with pytest.raises(GrammarError):
        build_training_sequence(
            "grasp the zeppelin .", make_contacts([]),
            GraspPose.from_vector(np.zeros(D)), norm, bounds, VOCAB)


# --- steering prefixes -------------------------------------------------------


def test_steering_prefix_zero_links(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0])])
    assert build_steering_prefix(contacts, 0, bounds, VOCAB) == \
        [VOCAB.contact_start_id]


def test_steering_prefix_two_links_token_count(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0]),
                              ("ffdistal", [0.1, 0, 0])])
    prefix = build_steering_prefix(contacts, 2, bounds, VOCAB)
    assert len(prefix) == 1 + 2 * 4
    assert prefix[0] == VOCAB.contact_start_id
    assert VOCAB.contact_end_id not in prefix


def test_steering_prefix_too_many_links(bounds):
    contacts = make_contacts([("thbase", [0, 0, 0])])
    with pytest.raises(InvalidSteering):
        build_steering_prefix(contacts, 2, bounds, VOCAB)


# --- grammar validation ------------------------------------------------------


def test_grammar_accepts_empty_contact_block():
    toks = ([VOCAB.contact_start_id, VOCAB.contact_end_id,
             VOCAB.action_start_id]
            + [VOCAB.action_bin_id(5)] * D + [VOCAB.action_end_id])
    parse = validate_grammar(toks, VOCAB, D)
    assert parse.ok and parse.contact_items == ()
    assert len(parse.action_bins) == D


def test_grammar_rejects_incomplete_position_triple():
    toks = ([VOCAB.contact_start_id, VOCAB.link_id("thbase"),
             VOCAB.pos_bin_id(1), VOCAB.pos_bin_id(2),
             VOCAB.contact_end_id, VOCAB.action_start_id]
            + [VOCAB.action_bin_id(0)] * D + [VOCAB.action_end_id])
    parse = validate_grammar(toks, VOCAB, D)
    assert not parse.ok
    assert "incomplete position triple" in parse.violations[0]


@pytest.mark.parametrize("count", [D - 1, D + 1])
def test_grammar_rejects_wrong_action_length(count):
    toks = ([VOCAB.contact_start_id, VOCAB.contact_end_id,
             VOCAB.action_start_id]
            + [VOCAB.action_bin_id(0)] * count + [VOCAB.action_end_id])
    parse = validate_grammar(toks, VOCAB, D)
    assert not parse.ok
    assert "action length" in parse.violations[0]


def test_grammar_rejects_trailing_tokens():
    toks = ([VOCAB.contact_start_id, VOCAB.contact_end_id,
             VOCAB.action_start_id]
            + [VOCAB.action_bin_id(0)] * D
            + [VOCAB.action_end_id, VOCAB.contact_start_id])
    parse = validate_grammar(toks, VOCAB, D)
    assert not parse.ok


def test_grammar_parse_contents():
    toks = ([VOCAB.contact_start_id, VOCAB.link_id("thbase"),
             VOCAB.pos_bin_id(10), VOCAB.pos_bin_id(20),
             VOCAB.pos_bin_id(30), VOCAB.link_id("ffdistal"),
             VOCAB.contact_end_id, VOCAB.action_start_id]
            + [VOCAB.action_bin_id(i % 256) for i in range(D)]
            + [VOCAB.action_end_id])
    parse = validate_grammar(toks, VOCAB, D)
    assert parse.ok
    assert parse.contact_items == (("thbase", (10, 20, 30)),
                                   ("ffdistal", None))
    assert parse.action_bins == tuple(i % 256 for i in range(D))


# --- serialization -----------------------------------------------------------


def test_token_sequence_names_round_trip(norm, bounds):
    seq = sample_sequence(norm, bounds)
    text = seq.to_names(VOCAB)
    ids = [VOCAB.id(name) for name in text.split()]
    assert tuple(ids) == seq.ids


def test_token_sequence_bytes_round_trip(norm, bounds):
    seq = sample_sequence(norm, bounds)
    raw = seq.to_bytes()
    assert len(raw) == 4 * len(seq)
    assert TokenSequence.ids_from_bytes(raw) == list(seq.ids)
    # little-endian check on the first token
    assert raw[0] == seq.ids[0] % 256


def test_normalization_file_round_trip(tmp_path, norm, bounds):
    path = str(tmp_path / "norm.txt")
    save_normalization(norm, bounds, path)
    norm2, bounds2 = load_normalization(path)
    assert np.array_equal(norm2.q01, norm.q01)
    assert np.array_equal(norm2.q99, norm.q99)
    assert np.array_equal(bounds2.min, bounds.min)
    assert np.array_equal(bounds2.max, bounds.max)


def test_segment_layout_rejects_gaps():
    with pytest.raises(LayoutError):
        SegmentLayout((0, 3), (4, 2), (6, 1), (7, 1), (8, 1))

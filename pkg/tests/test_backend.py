"""Mock backend: cache contract, determinism, sampling, simulated cost."""
from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pianoduet.backend import (
    BackendError,
    BadMarkError,
    CostModel,
    EmptyCacheError,
    MarkovBackend,
    SamplingParams,
    VocabularyMismatchError,
)
from pianoduet.clock import VirtualClock
from pianoduet.corpus import fixture_performances
from pianoduet.midi import Note
from pianoduet.tokenizer import (
    END,
    START,
    TokenizerConfig,
    dur_token,
    note_token,
    onset_token,
    tokenize,
)

CFG = TokenizerConfig()


def make_backend(**kw) -> MarkovBackend:
    return MarkovBackend(CFG, **kw)


def context_tokens():
    notes = [Note(60, 0.0, 250.0, 64), Note(64, 300.0, 200.0, 70), Note(67, 600.0, 200.0, 76)]
    return tokenize(notes, [], CFG)


# -- params and cost validation -------------------------------------------------


def test_sampling_params_validation():
    with pytest.raises(ValueError):
        SamplingParams(temperature=-0.1)
    with pytest.raises(ValueError):
        SamplingParams(top_p=0.0)
    with pytest.raises(ValueError):
        SamplingParams(top_p=1.1)
    with pytest.raises(ValueError):
        SamplingParams(max_new_tokens=0)
    SamplingParams(temperature=0.0, top_p=1.0)  # boundary values are fine


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(prefill_ms_per_token=-1)
    with pytest.raises(ValueError):
        CostModel(decode_ms_per_token=-0.5)


# -- cache contract -----------------------------------------------------------------


def test_prefill_grows_cache_and_counts():
    b = make_backend()
    toks = context_tokens()
    assert b.cache_len == 0
    n = b.prefill(toks[:4])
    assert n == 4 == b.cache_len
    n = b.prefill(toks[4:])
    assert n == len(toks) == b.cache_len
    assert b.prefill_calls == 2
    assert b.prefilled_tokens == len(toks)


def test_prefill_empty_rejected():
    with pytest.raises(ValueError):
        make_backend().prefill([])


def test_prefill_foreign_token_is_atomic():
    b = make_backend()
    b.prefill([START])
    before = b.cache_ids()
    with pytest.raises(VocabularyMismatchError):
        b.prefill([note_token(60, 0), onset_token(15)])  # off-grid offset
    assert b.cache_ids() == before


def test_decode_on_empty_cache():
    with pytest.raises(EmptyCacheError):
        make_backend().decode_next(SamplingParams())


def test_checkpoint_rollback_restores_content():
    b = make_backend()
    b.prefill(context_tokens())
    mark = b.checkpoint()
    saved = b.cache_ids()
    for _ in range(5):
        b.decode_next(SamplingParams(seed=7))
    assert b.cache_len == mark + 5
    b.rollback(mark)
    assert b.cache_ids() == saved


def test_rollback_to_zero_always_allowed():
    b = make_backend()
    b.prefill(context_tokens())
    b.rollback(0)
    assert b.cache_len == 0
    with pytest.raises(EmptyCacheError):
        b.decode_next(SamplingParams())


def test_rollback_unknown_mark():
    b = make_backend()
    b.prefill(context_tokens())
    with pytest.raises(BadMarkError):
        b.rollback(3)  # never checkpointed


def test_deeper_rollback_invalidates_later_marks():
    b = make_backend()
    toks = context_tokens()
    b.prefill(toks[:5])
    early = b.checkpoint()
    b.prefill(toks[5:])
    late = b.checkpoint()
    b.rollback(early)
    with pytest.raises(BadMarkError):
        b.rollback(late)
    b.rollback(early)  # the mark rolled back to stays usable


# -- determinism -------------------------------------------------------------------


def test_decode_is_pure_function_of_cache_and_seed():
    b = make_backend()
    b.prefill(context_tokens())
    mark = b.checkpoint()
    first = [b.decode_next(SamplingParams(seed=3)) for _ in range(6)]
    b.rollback(mark)
    second = [b.decode_next(SamplingParams(seed=3)) for _ in range(6)]
    assert first == second


def test_separate_instances_agree():
    a, b = make_backend(), make_backend()
    a.prefill(context_tokens())
    b.prefill(context_tokens())
    pa = SamplingParams(seed=11)
    assert [a.decode_next(pa) for _ in range(8)] == [b.decode_next(pa) for _ in range(8)]


@given(
    st.integers(min_value=0, max_value=2**32 - 1),
    st.lists(st.integers(min_value=1, max_value=6), min_size=0, max_size=6),
)
@settings(max_examples=40, deadline=None)
def test_chunked_prefill_equals_one_shot(seed, chunk_sizes):
    toks = context_tokens()
    params = SamplingParams(seed=seed)

    one_shot = make_backend()
    one_shot.prefill(toks)

    chunked = make_backend()
    pos = 0
    for size in chunk_sizes:
        if pos >= len(toks):
            break
        chunked.prefill(toks[pos : pos + size])
        pos += size
    if pos < len(toks):
        chunked.prefill(toks[pos:])

    assert chunked.cache_ids() == one_shot.cache_ids()
    got = [chunked.decode_next(params) for _ in range(5)]
    want = [one_shot.decode_next(params) for _ in range(5)]
    assert got == want


def test_probe_and_replay_reach_same_stream():
    # speculative probe: checkpoint, decode ahead, roll back, then the same
    # content must decode the same tokens again
    toks = context_tokens()
    b = make_backend()
    b.prefill(toks[:6])
    mark = b.checkpoint()
    b.prefill(toks[6:])
    probed = [b.decode_next(SamplingParams(seed=5)) for _ in range(3)]
    b.rollback(mark)
    b.prefill(toks[6:])
    assert [b.decode_next(SamplingParams(seed=5)) for _ in range(3)] == probed


def test_golden_decode_sequence():
    b = make_backend()
    b.prefill(context_tokens())
    toks = [b.decode_next(SamplingParams(seed=42)) for _ in range(10)]
    assert [b.vocab.encode(t) for t in toks] == [
        1115, 2166, 2572, 1148, 2189, 2568, 1165, 2212, 2570, 1166,
    ]


# -- sampling behavior ---------------------------------------------------------------


def test_greedy_ignores_seed():
    b = make_backend()
    b.prefill(context_tokens())
    mark = b.checkpoint()
    greedy = []
    for seed in (0, 1, 99):
        b.rollback(mark)
        greedy.append([b.decode_next(SamplingParams(temperature=0.0, seed=seed))
                       for _ in range(4)])
    assert greedy[0] == greedy[1] == greedy[2]


def test_tiny_nucleus_matches_greedy():
    b = make_backend()
    b.prefill(context_tokens())
    mark = b.checkpoint()
    greedy = b.decode_next(SamplingParams(temperature=0.0))
    b.rollback(mark)
    nucleus = b.decode_next(SamplingParams(temperature=1.0, top_p=1e-9, seed=123))
    assert nucleus == greedy


def test_high_temperature_still_deterministic():
    b = make_backend()
    b.prefill(context_tokens())
    mark = b.checkpoint()
    first = [b.decode_next(SamplingParams(temperature=2.5, top_p=1.0, seed=1))
             for _ in range(6)]
    b.rollback(mark)
    second = [b.decode_next(SamplingParams(temperature=2.5, top_p=1.0, seed=1))
              for _ in range(6)]
    assert first == second


def test_decoded_stream_is_well_formed():
    # NOTE is always followed by ONSET then DUR, in corpus or fallback
    from pianoduet.tokenizer import TokenKind

    b = make_backend()
    b.prefill(context_tokens())
    kinds = [b.decode_next(SamplingParams(seed=9)).kind for _ in range(60)]
    for i, k in enumerate(kinds[:-2]):
        if k is TokenKind.NOTE:
            assert kinds[i + 1] is TokenKind.ONSET
            assert kinds[i + 2] is TokenKind.DUR


def test_grammar_fallback_on_unseen_context():
    seqs = [[START, note_token(60, 7), onset_token(0), dur_token(100), END]]
    b = MarkovBackend(CFG, sequences=seqs)
    b.prefill([START, note_token(72, 3)])  # bigram never fitted
    assert b.decode_next(SamplingParams()) == onset_token(0)
    assert b.decode_next(SamplingParams()) == dur_token(100)


def test_no_continuation_raises():
    b = MarkovBackend(CFG, sequences=[[START, END]])
    b.prefill([START, note_token(60, 0)])
    with pytest.raises(BackendError):
        b.decode_next(SamplingParams())  # nothing to follow a NOTE with


# -- simulated cost ---------------------------------------------------------------------


def test_cost_charged_to_callers_clock():
    clock = VirtualClock()
    cost = CostModel(prefill_ms_per_token=2.0, decode_ms_per_token=3.0)
    b = MarkovBackend(CFG, cost=cost, clock=clock)
    toks = context_tokens()
    t0 = clock.now_ms()
    b.prefill(toks)
    assert clock.now_ms() - t0 == pytest.approx(2.0 * len(toks))
    t1 = clock.now_ms()
    b.decode_next(SamplingParams())
    assert clock.now_ms() - t1 == pytest.approx(3.0)


def test_zero_cost_leaves_clock_alone():
    clock = VirtualClock()
    b = MarkovBackend(CFG, clock=clock)
    b.prefill(context_tokens())
    b.decode_next(SamplingParams())
    assert clock.now_ms() == 0.0


# -- corpus fixture sanity -------------------------------------------------------------


def test_fixture_corpus_is_tokenizable_and_stable():
    perfs = fixture_performances()
    assert len(perfs) >= 4
    total = 0
    for notes, pedals in perfs:
        toks = tokenize(notes, pedals, CFG)
        total += len(toks)
        assert all(not n.is_open for n in notes)
    assert total > 500  # enough mass to fit transitions on
    again = fixture_performances()
    assert [n for notes, _ in again for n in notes] == [
        n for notes, _ in perfs for n in notes
    ]

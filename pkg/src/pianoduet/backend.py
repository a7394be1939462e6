"""Generative backend contract and a deterministic mock implementation.

A backend session owns a token cache (the model's KV state stand-in).
The engine grows it with ``prefill``, saves restore points with
``checkpoint``/``rollback``, and samples continuations with
``decode_next``.  The mock is an order-2 Markov chain over token ids,
fitted on the bundled fixture corpus.  Its sampling randomness is a pure
function of (seed, cache suffix), so any sequence of prefill/checkpoint/
rollback calls that reaches the same cache content decodes identically.
That property is what makes incremental prefill testable against
one-shot prefill.

Per-token costs are simulated by sleeping on the caller's clock; with a
virtual clock a benchmark measures realistic latencies instantly.
"""
from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass
from typing import Protocol, Sequence

from .clock import Clock, SystemClock
from .corpus import fixture_performances
from .tokenizer import END, Token, TokenKind, TokenizerConfig, Vocabulary, tokenize


class BackendError(Exception):
    pass


class EmptyCacheError(BackendError):
    """decode_next needs at least one cached token to condition on."""


class BadMarkError(BackendError):
    """rollback got a mark that checkpoint never produced or that a
    deeper rollback already invalidated."""


class VocabularyMismatchError(BackendError):
    """The session and the caller disagree about the token vocabulary."""


@dataclass(frozen=True)
class SamplingParams:
    """temperature 0 is the greedy limit: always the argmax."""

    temperature: float = 1.0
    top_p: float = 0.95
    seed: int = 0
    max_new_tokens: int = 256

    def __post_init__(self) -> None:
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if not 0 < self.top_p <= 1:
            raise ValueError("top_p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be positive")


@dataclass(frozen=True)
class CostModel:
    """Simulated inference cost, charged to the session's clock."""

    prefill_ms_per_token: float = 0.0
    decode_ms_per_token: float = 0.0

    def __post_init__(self) -> None:
        if self.prefill_ms_per_token < 0 or self.decode_ms_per_token < 0:
            raise ValueError("costs must be non-negative")


class Backend(Protocol):
    vocab_descriptor: str

    @property
    def cache_len(self) -> int: ...

    def prefill(self, tokens: Sequence[Token]) -> int: ...

    def decode_next(self, params: SamplingParams) -> Token: ...

    def checkpoint(self) -> int: ...

    def rollback(self, mark: int) -> None: ...


_GREEDY_EPS = 1e-9
_STATE_SUFFIX = 8  # cache tokens hashed into the sampling state

# Grammar fallback for contexts the corpus never produced: after NOTE
# comes ONSET, after ONSET comes DUR, anything else starts a new event.
_EVENT_START_KINDS = (
    TokenKind.NOTE,
    TokenKind.PEDAL_ON,
    TokenKind.PEDAL_OFF,
    TokenKind.SEGMENT,
    TokenKind.END,
)


class MarkovBackend:
    """Order-2 Markov mock over token ids, corpus-fitted, state-seeded."""

    def __init__(
        self,
        config: TokenizerConfig,
        cost: CostModel | None = None,
        clock: Clock | None = None,
        sequences: list[list[Token]] | None = None,
    ) -> None:
        self.config = config
        self.vocab = Vocabulary(config)
        self.vocab_descriptor = self.vocab.descriptor
        self._cost = cost or CostModel()
        self._clock = clock or SystemClock()
        self._cache: list[int] = []
        self._marks: list[int] = []
        self.prefill_calls = 0
        self.prefilled_tokens = 0
        self.decode_calls = 0

        if sequences is None:
            sequences = [
                tokenize(notes, pedals, config) + [END]
                for notes, pedals in fixture_performances()
            ]
        self._fit(sequences)

    # -- training ----------------------------------------------------------

    def _fit(self, sequences: list[list[Token]]) -> None:
        tri: dict[tuple[int, int], dict[int, int]] = {}
        bi: dict[int, dict[int, int]] = {}
        uni: dict[TokenKind, dict[int, int]] = {}
        for seq in sequences:
            ids = [self.vocab.encode(t) for t in seq]
            for tok, tid in zip(seq, ids):
                uni.setdefault(tok.kind, {})
                uni[tok.kind][tid] = uni[tok.kind].get(tid, 0) + 1
            for i in range(1, len(ids)):
                bi.setdefault(ids[i - 1], {})
                bi[ids[i - 1]][ids[i]] = bi[ids[i - 1]].get(ids[i], 0) + 1
            for i in range(2, len(ids)):
                key = (ids[i - 2], ids[i - 1])
                tri.setdefault(key, {})
                tri[key][ids[i]] = tri[key].get(ids[i], 0) + 1
        self._tri = tri
        self._bi = bi
        self._uni = uni

    def _fallback_distribution(self, last_id: int) -> dict[int, int]:
        last_kind = self.vocab.decode(last_id).kind
        if last_kind is TokenKind.NOTE:
            kinds: tuple[TokenKind, ...] = (TokenKind.ONSET,)
        elif last_kind is TokenKind.ONSET:
            kinds = (TokenKind.DUR,)
        else:
            kinds = _EVENT_START_KINDS
        merged: dict[int, int] = {}
        for kind in kinds:
            for tid, count in self._uni.get(kind, {}).items():
                merged[tid] = merged.get(tid, 0) + count
        return merged

    # -- sampling ----------------------------------------------------------

    def _state_seed(self, seed: int) -> int:
        h = hashlib.sha256()
        h.update(str(seed).encode())
        h.update(b"|%d|" % len(self._cache))
        h.update(b",".join(b"%d" % t for t in self._cache[-_STATE_SUFFIX:]))
        return int.from_bytes(h.digest()[:8], "big")

    def _sample(self, dist: dict[int, int], params: SamplingParams) -> int:
        items = sorted(dist.items())
        if params.temperature <= _GREEDY_EPS:
            return max(items, key=lambda kv: (kv[1], -kv[0]))[0]
        weights = [count ** (1.0 / params.temperature) for _, count in items]
        order = sorted(range(len(items)), key=lambda i: (-weights[i], items[i][0]))
        total = sum(weights)
        kept: list[int] = []
        acc = 0.0
        for i in order:
            kept.append(i)
            acc += weights[i]
            if acc >= params.top_p * total - 1e-12:
                break
        kept_total = sum(weights[i] for i in kept)
        x = _rng_uniform(self._state_seed(params.seed)) * kept_total
        running = 0.0
        for i in kept:
            running += weights[i]
            if x < running:
                return items[i][0]
        return items[kept[-1]][0]

    # -- session contract ---------------------------------------------------

    @property
    def cache_len(self) -> int:
        return len(self._cache)

    def prefill(self, tokens: Sequence[Token]) -> int:
        if not tokens:
            raise ValueError("prefill of zero tokens")
        try:
            ids = [self.vocab.encode(t) for t in tokens]
        except (ValueError, KeyError) as e:
            raise VocabularyMismatchError(str(e)) from e
        self._clock.sleep_ms(self._cost.prefill_ms_per_token * len(ids))
        self._cache.extend(ids)
        self.prefill_calls += 1
        self.prefilled_tokens += len(ids)
        return len(self._cache)

    def decode_next(self, params: SamplingParams) -> Token:
        if not self._cache:
            raise EmptyCacheError("decode on an empty cache")
        self._clock.sleep_ms(self._cost.decode_ms_per_token)
        dist: dict[int, int] | None = None
        if len(self._cache) >= 2:
            dist = self._tri.get((self._cache[-2], self._cache[-1]))
        if not dist:
            dist = self._bi.get(self._cache[-1])
        if not dist:
            dist = self._fallback_distribution(self._cache[-1])
        if not dist:
            raise BackendError("no continuation for the current state")
        token_id = self._sample(dist, params)
        self._cache.append(token_id)
        self.decode_calls += 1
        return self.vocab.decode(token_id)

    def checkpoint(self) -> int:
        mark = len(self._cache)
        self._marks.append(mark)
        return mark

    def rollback(self, mark: int) -> None:
        if mark != 0 and mark not in self._marks:
            raise BadMarkError(f"unknown or invalidated mark: {mark}")
        if mark > len(self._cache):
            raise BadMarkError(f"mark beyond cache: {mark} > {len(self._cache)}")
        del self._cache[mark:]
        self._marks = [m for m in self._marks if m <= mark]

    # -- inspection helpers (tests, tools) -----------------------------------

    def cache_ids(self) -> tuple[int, ...]:
        return tuple(self._cache)


def _rng_uniform(state: int) -> float:
    """One deterministic uniform draw in [0, 1) from an integer state."""
    return random.Random(state).random()

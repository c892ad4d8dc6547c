"""Greedy and beam-search caption generation.

Both decoders run over a `step_fn(prefix) -> log-prob vector` callback, so
they are testable against exhaustive enumeration with synthetic
distributions and reusable over the real model via `model_step_fn`.

A hypothesis is a sequence of content tokens. Emitting EOS finishes it
(EOS log-prob included in the score); hypotheses that reach `max_len`
content tokens compete unfinished with their accumulated score. Finished
beams are frozen and re-enter the candidate pool every step. Ties are
broken deterministically by the emitted token sequence (EOS included), so
beam size 1 reproduces greedy's lowest-id argmax exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, UsageError

StepFn = Callable[[tuple[int, ...]], np.ndarray]

LENGTH_NORMS = ("none", "by_length")


@dataclass(frozen=True)
class DecodeConfig:
    beam_size: int = 5
    max_len: int = 20
    length_norm: str = "none"

    def __post_init__(self):
        if self.beam_size < 1:
            raise ConfigError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ConfigError("max_len must be >= 1")
        if self.length_norm not in LENGTH_NORMS:
            raise ConfigError(f"length_norm must be one of {LENGTH_NORMS}")


@dataclass
class Beam:
    tokens: tuple[int, ...]        # content tokens, no BOS/EOS
    score: float                   # summed log-probs of emitted tokens
    finished: bool
    emitted: tuple[int, ...]       # tokens as emitted, EOS included (tie-break)

    def ranking_score(self, length_norm: str) -> float:
        if length_norm == "by_length":
            return self.score / max(len(self.tokens), 1)
        return self.score


def greedy_decode(step_fn: StepFn, *, eos_id: int, max_len: int) -> list[int]:
    """Argmax token per step (ties to the lowest id); stops at EOS or max_len."""
    tokens: list[int] = []
    for _ in range(max_len):
        logprobs = np.asarray(step_fn(tuple(tokens)), dtype=np.float64)
        nxt = int(np.argmax(logprobs))  # argmax returns the first (lowest) index on ties
        if nxt == eos_id:
            break
        tokens.append(nxt)
    return tokens


def beam_search(step_fn: StepFn, *, eos_id: int, cfg: DecodeConfig
                ) -> list[tuple[tuple[int, ...], float]]:
    """Ranked (tokens, score) hypotheses; scores non-increasing down the list."""
    beams = [Beam((), 0.0, False, ())]
    for _ in range(cfg.max_len):
        if all(b.finished for b in beams):
            break
        pool: list[Beam] = [b for b in beams if b.finished]
        for beam in beams:
            if beam.finished:
                continue
            logprobs = np.asarray(step_fn(beam.tokens), dtype=np.float64)
            if logprobs.ndim != 1:
                raise UsageError("step_fn must return a 1-D log-prob vector")
            for token, lp in enumerate(logprobs):
                score = beam.score + float(lp)
                emitted = beam.emitted + (token,)
                if token == eos_id:
                    pool.append(Beam(beam.tokens, score, True, emitted))
                else:
                    pool.append(Beam(beam.tokens + (token,), score, False, emitted))
        pool.sort(key=lambda b: (-b.score, b.emitted))
        beams = pool[:cfg.beam_size]
    beams.sort(key=lambda b: (-b.ranking_score(cfg.length_norm), b.emitted))
    return [(b.tokens, b.ranking_score(cfg.length_norm)) for b in beams]


def exhaustive_best(step_fn: StepFn, *, eos_id: int, vocab_size: int, max_len: int
                    ) -> tuple[tuple[int, ...], float]:
    """Brute-force optimum over every hypothesis the beam could produce.

    Uses the same tie-break as the beam (highest score, then lexicographically
    smallest emitted sequence), so results are comparable token-for-token.
    """
    hypotheses: list[tuple[float, tuple[int, ...], tuple[int, ...]]] = []

    def walk(tokens: tuple[int, ...], score: float):
        if len(tokens) == max_len:
            hypotheses.append((score, tokens, tokens))
            return
        logprobs = np.asarray(step_fn(tokens), dtype=np.float64)
        hypotheses.append((score + float(logprobs[eos_id]), tokens + (eos_id,), tokens))
        for token in range(vocab_size):
            if token != eos_id:
                walk(tokens + (token,), score + float(logprobs[token]))

    walk((), 0.0)
    hypotheses.sort(key=lambda h: (-h[0], h[1]))
    score, _, tokens = hypotheses[0]
    return tokens, score


def model_step_fn(model, encoded, bos_id: int) -> StepFn:
    """Next-token log-probs from the decoder given a content-token prefix."""

    def step(prefix: tuple[int, ...]) -> np.ndarray:
        ids = np.array([bos_id] + list(prefix), dtype=np.int64)
        logits = model.decoder_forward(encoded, ids).data[-1].astype(np.float64)
        shifted = logits - logits.max()
        return shifted - np.log(np.exp(shifted).sum())

    return step


def caption_scene(model, vocab, features, boxes, cfg: DecodeConfig,
                  geo_embed: np.ndarray | None = None) -> tuple[str, float]:
    """Encode one scene and decode a caption with the configured beam."""
    from .data import BOS_ID, EOS_ID  # local import: data depends on model

    encoded = model.encoder_forward(features, boxes, geo_embed=geo_embed)
    step = model_step_fn(model, encoded, BOS_ID)
    ranked = beam_search(step, eos_id=EOS_ID, cfg=cfg)
    tokens, score = ranked[0]
    return vocab.decode(list(tokens)), score

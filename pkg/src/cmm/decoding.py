"""Greedy and beam inference over the copy-mixture distribution, plus
corpus-level BLEU.

Decoders operate through a step scorer (prefix -> probability vector),
so tests can drive them with scripted distributions and the model
adapter reuses the exact training-time output head. BLEU is corpus
BLEU-4 on whitespace tokens with clipped counts, brevity penalty, and
no smoothing.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .model import CmmModel, MemoryEncoding
from .textcore import BOS_ID, EOS_ID, MEM_ID, PAD_ID, TokenSeq

StepScorer = Callable[[tuple[int, ...]], np.ndarray]

FORBIDDEN_OUTPUT_IDS = (PAD_ID, BOS_ID, MEM_ID)


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]  # begins with <bos>
    log_prob: float
    finished: bool

    @property
    def generated(self) -> tuple[int, ...]:
        """Emitted content tokens, <bos> and the final <eos> stripped."""
        body = self.tokens[1:]
        if body and body[-1] == EOS_ID:
            body = body[:-1]
        return body

    def score(self, length_penalty: float) -> float:
        n = max(len(self.tokens) - 1, 1)
        return self.log_prob / n**length_penalty


class ModelStepper:
    """Adapts a trained model to the step-scorer interface for one input."""

    def __init__(self, model: CmmModel, src: TokenSeq, memories: list[TokenSeq]):
        model.set_train(False)
        self.model = model
        enc = model.encode(src, memories)
        self.z_x = enc.z_x
        self.memory: MemoryEncoding | None = enc.memory

    def __call__(self, prefix: tuple[int, ...]) -> np.ndarray:
        state = self.model.decode(prefix, self.z_x, self.memory)
        probs = self.model.output_distribution_steps(state, self.memory, prefix)
        return probs.data[-1]


def _masked_log_probs(probs: np.ndarray) -> np.ndarray:
    logp = np.log(np.maximum(probs, 1e-12))
    logp[list(FORBIDDEN_OUTPUT_IDS)] = -np.inf
    return logp


def greedy_steps(step: StepScorer, max_len: int) -> Hypothesis:
    """Argmax decoding; ties resolve to the lowest token id."""
    tokens = [BOS_ID]
    log_prob = 0.0
    for _ in range(max_len):
        logp = _masked_log_probs(step(tuple(tokens)))
        tok = int(np.argmax(logp))
        log_prob += float(logp[tok])
        tokens.append(tok)
        if tok == EOS_ID:
            return Hypothesis(tuple(tokens), log_prob, True)
    return Hypothesis(tuple(tokens), log_prob, False)


def beam_steps(step: StepScorer, beam: int, max_len: int, length_penalty: float = 1.0) -> Hypothesis:
    """Beam search over the mixed distribution.

    Ranking keys are (score, tokens) so ties are deterministic; beam=1
    reproduces greedy decoding exactly.
    """
    if beam < 1:
        raise ValueError(f"beam must be >= 1, got {beam}")
    live = [Hypothesis((BOS_ID,), 0.0, False)]
    finished: list[Hypothesis] = []
    for _ in range(max_len):
        if not live:
            break
        candidates: list[Hypothesis] = []
        for hyp in live:
            logp = _masked_log_probs(step(hyp.tokens))
            order = np.lexsort((np.arange(logp.size), -logp))[:beam]
            for tok in order:
                tok = int(tok)
                if not np.isfinite(logp[tok]):
                    continue
                candidates.append(
                    Hypothesis(hyp.tokens + (tok,), hyp.log_prob + float(logp[tok]), tok == EOS_ID)
                )
        candidates.sort(key=lambda h: (-h.log_prob, h.tokens))
        live = []
        for h in candidates:
            if h.finished:
                finished.append(h)
            elif len(live) < beam:
                live.append(h)
    finished.extend(live)  # force-finish anything still open at max_len
    if not finished:
        return Hypothesis((BOS_ID,), 0.0, False)
    return max(finished, key=lambda h: (h.score(length_penalty), h.tokens))


def greedy_decode(model: CmmModel, src: TokenSeq, memories: list[TokenSeq], max_len: int = 64) -> TokenSeq:
    return greedy_steps(ModelStepper(model, src, memories), max_len).generated


def beam_decode(
    model: CmmModel,
    src: TokenSeq,
    memories: list[TokenSeq],
    beam: int = 5,
    max_len: int = 64,
    length_penalty: float = 1.0,
) -> TokenSeq:
    return beam_steps(ModelStepper(model, src, memories), beam, max_len, length_penalty).generated


# ---------------------------------------------------------------------------
# BLEU


@dataclass(frozen=True)
class BleuReport:
    bleu: float
    precisions: tuple[float, float, float, float]
    brevity_penalty: float
    hyp_len: int
    ref_len: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "bleu": self.bleu,
                "precisions": list(self.precisions),
                "brevity_penalty": self.brevity_penalty,
                "hyp_len": self.hyp_len,
                "ref_len": self.ref_len,
            },
            sort_keys=True,
        )


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(hyps: list[Sequence], refs: list[Sequence]) -> BleuReport:
    """Corpus BLEU-4: pooled clipped n-gram precision, BP, no smoothing."""
    if not hyps:
        raise ValueError("empty hypothesis list")
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, 5):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            matches[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    precisions = tuple(m / t if t > 0 else 0.0 for m, t in zip(matches, totals))
    if hyp_len == 0:
        return BleuReport(0.0, precisions, 0.0, hyp_len, ref_len)
    bp = min(1.0, math.exp(1.0 - ref_len / hyp_len))
    if any(p == 0.0 for p in precisions):
        bleu = 0.0
    else:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / 4.0) * 100.0
    return BleuReport(bleu, precisions, bp, hyp_len, ref_len)

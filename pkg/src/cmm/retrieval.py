"""Candidate generation and translation-memory selection.

An in-repo inverted index with TF-IDF scoring generates a candidate set
K per query; the selectors then pick the memory set M (|M| << |K|)
according to one of five strategies: contrastive (similarity minus an
average-similarity penalty against the already selected set), greedy,
classic MMR, adaptive max-coverage, or seeded random. All ties break by
ascending pair id so runs are bit-reproducible.
"""

from __future__ import annotations

import json
import math
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .textcore import ParallelPair, TokenSeq

INDEX_MAGIC = b"cmm-index v1\n"

SimFn = Callable[[TokenSeq, TokenSeq], float]


class IndexingError(RuntimeError):
    """Index construction or persistence failure."""


# ---------------------------------------------------------------------------
# similarity


def edit_distance(a: TokenSeq, b: TokenSeq) -> int:
    """Token-level Levenshtein distance, unit costs, two-row DP."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ta in enumerate(a, start=1):
        cur = [i]
        for j, tb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ta != tb)))
        prev = cur
    return prev[-1]


def similarity(a: TokenSeq, b: TokenSeq) -> float:
    """1 - edit_distance / max length; two empty sequences count as identical."""
    if not a and not b:
        return 1.0
    return 1.0 - edit_distance(a, b) / max(len(a), len(b))


# ---------------------------------------------------------------------------
# inverted index


class InvertedIndex:
    """Frozen TF-IDF index over the source sides of a parallel corpus."""

    def __init__(self, corpus: Sequence[ParallelPair]):
        if not corpus:
            raise IndexingError("cannot index an empty corpus")
        self.corpus = list(corpus)
        self.n_docs = len(corpus)
        postings: dict[int, list[tuple[int, int]]] = {}
        doc_lens: dict[int, int] = {}
        for pair in self.corpus:
            doc_lens[pair.id] = len(pair.src)
            counts: dict[int, int] = {}
            for tok in pair.src:
                counts[tok] = counts.get(tok, 0) + 1
            for tok, tf in counts.items():
                postings.setdefault(tok, []).append((pair.id, tf))
        for plist in postings.values():
            plist.sort()
        self.postings = postings
        self.doc_lens = doc_lens
        self._by_id = {p.id: p for p in self.corpus}

    def df(self, token: int) -> int:
        return len(self.postings.get(token, ()))

    def idf(self, token: int) -> float:
        return math.log((self.n_docs + 1) / (self.df(token) + 1)) + 1.0

    def pair(self, pair_id: int) -> ParallelPair:
        return self._by_id[pair_id]

    # -- persistence --------------------------------------------------------

    def save(self, path: str | Path) -> None:
        buf = [INDEX_MAGIC]
        buf.append(struct.pack("<QQ", self.n_docs, len(self.postings)))
        for tok in sorted(self.postings):
            plist = self.postings[tok]
            buf.append(struct.pack("<QQQ", tok, len(plist), len(plist)))
            for pair_id, tf in plist:
                buf.append(struct.pack("<QQ", pair_id, tf))
        buf.append(struct.pack("<Q", len(self.doc_lens)))
        for pair_id in sorted(self.doc_lens):
            buf.append(struct.pack("<QQ", pair_id, self.doc_lens[pair_id]))
        Path(path).write_bytes(b"".join(buf))

    @classmethod
    def load(cls, path: str | Path, corpus: Sequence[ParallelPair]) -> "InvertedIndex":
        raw = Path(path).read_bytes()
        if not raw.startswith(INDEX_MAGIC):
            raise IndexingError(f"{path}: bad index magic")
        idx = cls(corpus)  # rebuild structure, then verify the file agrees
        off = len(INDEX_MAGIC)
        n_docs, n_tokens = struct.unpack_from("<QQ", raw, off)
        off += 16
        if n_docs != idx.n_docs:
            raise IndexingError(f"{path}: index built over {n_docs} docs, corpus has {idx.n_docs}")
        stored: dict[int, list[tuple[int, int]]] = {}
        try:
            for _ in range(n_tokens):
                tok, df, plen = struct.unpack_from("<QQQ", raw, off)
                off += 24
                if df != plen:
                    raise IndexingError(f"{path}: df/postings mismatch for token {tok}")
                plist = []
                for _ in range(plen):
                    pair_id, tf = struct.unpack_from("<QQ", raw, off)
                    off += 16
                    plist.append((pair_id, tf))
                stored[tok] = plist
            (n_lens,) = struct.unpack_from("<Q", raw, off)
            off += 8
            stored_lens: dict[int, int] = {}
            for _ in range(n_lens):
                pair_id, count = struct.unpack_from("<QQ", raw, off)
                off += 16
                stored_lens[pair_id] = count
        except struct.error as e:
            raise IndexingError(f"{path}: truncated index ({e})") from None
        if off != len(raw):
            raise IndexingError(f"{path}: {len(raw) - off} trailing bytes")
        if stored != idx.postings or stored_lens != idx.doc_lens:
            raise IndexingError(f"{path}: stored index disagrees with corpus rebuild")
        return idx

    def to_json(self) -> str:
        return json.dumps(
            {
                "n_docs": self.n_docs,
                "postings": {str(t): self.postings[t] for t in sorted(self.postings)},
                "doc_lens": {str(i): self.doc_lens[i] for i in sorted(self.doc_lens)},
            },
            sort_keys=True,
        )


def build_index(corpus: Sequence[ParallelPair]) -> InvertedIndex:
    return InvertedIndex(corpus)


# ---------------------------------------------------------------------------
# candidate generation


@dataclass(frozen=True)
class ScoredCandidate:
    pair_id: int
    src: TokenSeq
    tgt: TokenSeq
    sim_to_query: float


def candidates(
    index: InvertedIndex,
    query_src: TokenSeq,
    k: int,
    exclude_id: int | None = None,
) -> list[ScoredCandidate]:
    """Top-k docs by TF-IDF overlap with the query, annotated with similarity.

    Only docs sharing at least one token can score; the query's own
    training pair (exclude_id) is never returned. Fewer than k matches
    yield a shorter list.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores: dict[int, float] = {}
    for tok in set(query_src):
        plist = index.postings.get(tok)
        if not plist:
            continue
        w = index.idf(tok)
        for pair_id, tf in plist:
            scores[pair_id] = scores.get(pair_id, 0.0) + tf * w
    if exclude_id is not None:
        scores.pop(exclude_id, None)
    ranked = sorted(scores.items(), key=lambda it: (-it[1], it[0]))[:k]
    out = []
    for pair_id, _ in ranked:
        pair = index.pair(pair_id)
        out.append(
            ScoredCandidate(
                pair_id=pair_id,
                src=pair.src,
                tgt=pair.tgt,
                sim_to_query=similarity(query_src, pair.src),
            )
        )
    return out


# ---------------------------------------------------------------------------
# memory sets and selectors


@dataclass
class MemorySet:
    """Selected memories in selection order (target sides carried)."""

    pair_ids: list[int] = field(default_factory=list)
    tgts: list[TokenSeq] = field(default_factory=list)
    sims: list[float] = field(default_factory=list)
    strategy: str = ""
    alpha: float | None = None

    def __len__(self) -> int:
        return len(self.pair_ids)

    def add(self, cand: ScoredCandidate) -> None:
        self.pair_ids.append(cand.pair_id)
        self.tgts.append(cand.tgt)
        self.sims.append(cand.sim_to_query)


def select_greedy(query_src: TokenSeq, pool: list[ScoredCandidate], m: int) -> MemorySet:
    """Top-m by similarity to the query, ties by ascending pair id."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    chosen = sorted(pool, key=lambda c: (-c.sim_to_query, c.pair_id))[:m]
    out = MemorySet(strategy="greedy")
    for c in chosen:
        out.add(c)
    return out


def select_contrastive(
    query_src: TokenSeq,
    pool: list[ScoredCandidate],
    m: int,
    alpha: float,
    sim_fn: SimFn = similarity,
) -> MemorySet:
    """Incremental argmax of sim-to-query minus the average-similarity penalty.

    At each step the penalty is alpha / |selected so far| times the sum
    of sim_fn between the candidate's source and each selected source;
    the first pick has no penalty, so alpha = 0 reproduces greedy
    selection exactly, order included.
    """
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    remaining = sorted(pool, key=lambda c: c.pair_id)
    selected: list[ScoredCandidate] = []
    sim_sums = {id(c): 0.0 for c in remaining}  # running sum against the selected set
    out = MemorySet(strategy="contrastive", alpha=alpha)
    while remaining and len(selected) < m:
        best = None
        best_score = None
        for c in remaining:
            penalty = (alpha / len(selected)) * sim_sums[id(c)] if selected else 0.0
            score = c.sim_to_query - penalty
            if best_score is None or score > best_score:
                best, best_score = c, score
        selected.append(best)
        remaining.remove(best)
        out.add(best)
        for c in remaining:
            sim_sums[id(c)] += sim_fn(c.src, best.src)
    return out


def select_mmr(
    query_src: TokenSeq,
    pool: list[ScoredCandidate],
    m: int,
    alpha: float,
    sim_fn: SimFn = similarity,
) -> MemorySet:
    """Classic maximal marginal relevance with a max redundancy penalty."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    remaining = sorted(pool, key=lambda c: c.pair_id)
    selected: list[ScoredCandidate] = []
    out = MemorySet(strategy="mmr", alpha=alpha)
    while remaining and len(selected) < m:
        best = None
        best_score = None
        for c in remaining:
            if selected:
                score = (1.0 - alpha) * c.sim_to_query - alpha * max(sim_fn(c.src, s.src) for s in selected)
            else:
                score = c.sim_to_query
            if best_score is None or score > best_score:
                best, best_score = c, score
        selected.append(best)
        remaining.remove(best)
        out.add(best)
    return out


def select_adaptive(query_src: TokenSeq, pool: list[ScoredCandidate], cap: int) -> MemorySet:
    """Greedy max-coverage over unique query token types.

    Repeatedly picks the candidate covering the most still-uncovered
    query tokens (ties: higher similarity, then ascending pair id);
    stops when nothing adds coverage or the cap is reached.
    """
    if cap < 1:
        raise ValueError(f"cap must be >= 1, got {cap}")
    uncovered = set(query_src)
    remaining = sorted(pool, key=lambda c: c.pair_id)
    out = MemorySet(strategy="adaptive")
    while remaining and uncovered and len(out) < cap:
        best = None
        best_key = None
        for c in remaining:
            gain = len(uncovered & set(c.src))
            key = (gain, c.sim_to_query, -c.pair_id)
            if best_key is None or key > best_key:
                best, best_key = c, key
        if best_key[0] == 0:
            break
        uncovered -= set(best.src)
        remaining.remove(best)
        out.add(best)
    return out


def select_random(pool: list[ScoredCandidate], m: int, seed: int) -> MemorySet:
    """Uniform sample without replacement, deterministic per seed."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    rng = random.Random(seed)
    ordered = sorted(pool, key=lambda c: c.pair_id)
    chosen = rng.sample(ordered, min(m, len(ordered)))
    out = MemorySet(strategy="random")
    for c in chosen:
        out.add(c)
    return out


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class RetrievalStats:
    avg_tm_size: float
    avg_coverage: float
    avg_similarity: float
    avg_intra_similarity: float
    n_queries: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "avg_tm_size": self.avg_tm_size,
                "avg_coverage": self.avg_coverage,
                "avg_similarity": self.avg_similarity,
                "avg_intra_similarity": self.avg_intra_similarity,
                "n_queries": self.n_queries,
            },
            sort_keys=True,
        )


def coverage(query_src: TokenSeq, memory_srcs: list[TokenSeq]) -> float:
    """Fraction of unique query token types present in the memory sources."""
    qtypes = set(query_src)
    if not qtypes:
        return 0.0
    union: set[int] = set()
    for s in memory_srcs:
        union |= set(s)
    return len(qtypes & union) / len(qtypes)


def retrieval_stats(
    entries: list[tuple[TokenSeq, MemorySet]],
    index: InvertedIndex,
) -> RetrievalStats:
    """Aggregate Table-1-style diagnostics over queries.

    Coverage is per query over source sides fetched by pair id; the
    similarity average pools all selected memories; intra-set similarity
    averages pairwise source similarities per set (sets with fewer than
    two members count as 1.0, a documented degenerate convention).
    """
    if not entries:
        raise ValueError("need at least one query")
    sizes = []
    covs = []
    sims: list[float] = []
    intras = []
    for query_src, mset in entries:
        srcs = [index.pair(pid).src for pid in mset.pair_ids]
        sizes.append(len(mset))
        covs.append(coverage(query_src, srcs))
        sims.extend(mset.sims)
        if len(srcs) < 2:
            intras.append(1.0)
        else:
            pair_sims = [
                similarity(srcs[i], srcs[j])
                for i in range(len(srcs))
                for j in range(i + 1, len(srcs))
            ]
            intras.append(sum(pair_sims) / len(pair_sims))
    return RetrievalStats(
        avg_tm_size=sum(sizes) / len(sizes),
        avg_coverage=sum(covs) / len(covs),
        avg_similarity=sum(sims) / len(sims) if sims else 0.0,
        avg_intra_similarity=sum(intras) / len(intras),
        n_queries=len(entries),
    )


def select(
    strategy: str,
    query_src: TokenSeq,
    pool: list[ScoredCandidate],
    m: int,
    alpha: float,
    adaptive_cap: int,
    seed: int = 0,
) -> MemorySet:
    """Dispatch a selection strategy by name."""
    if strategy == "contrastive":
        return select_contrastive(query_src, pool, m, alpha)
    if strategy == "greedy":
        return select_greedy(query_src, pool, m)
    if strategy == "mmr":
        return select_mmr(query_src, pool, m, alpha)
    if strategy == "adaptive":
        return select_adaptive(query_src, pool, adaptive_cap)
    if strategy == "random":
        return select_random(pool, m, seed)
    raise ValueError(f"unknown retrieval strategy {strategy!r}")

"""Tokenization, joint vocabulary, and parallel corpus IO.

Word-level whitespace tokenization over a joint (shared source/target)
vocabulary. Reserved ids: 0=<pad>, 1=<unk>, 2=<bos>, 3=<eos>, 4=<mem>.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path

PAD_ID = 0
UNK_ID = 1
BOS_ID = 2
EOS_ID = 3
MEM_ID = 4
RESERVED_TOKENS = ("<pad>", "<unk>", "<bos>", "<eos>", "<mem>")

VOCAB_MAGIC = "cmm-vocab v1"

TokenSeq = tuple[int, ...]


class CorpusFormatError(ValueError):
    """Malformed corpus or vocabulary file."""


def tokenize(text: str) -> list[str]:
    """Split one line on Unicode whitespace, dropping empty tokens."""
    return text.split()


@dataclass(frozen=True)
class Vocabulary:
    """Bijective token<->id map with fixed reserved prefix.

    Non-reserved ids start at 5 and are assigned by descending corpus
    frequency, ties broken by ascending lexicographic order, which makes
    rebuilds byte-reproducible.
    """

    id_to_token: tuple[str, ...]
    token_to_id: dict[str, int]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens: list[str]) -> TokenSeq:
        """Map tokens to ids; unknown tokens become <unk>.

        Literal reserved tags in corpus text also map to <unk> so that
        control ids are never produced by tokenizing data.
        """
        t2i = self.token_to_id
        out = []
        for tok in tokens:
            i = t2i.get(tok, UNK_ID)
            if i < len(RESERVED_TOKENS):
                i = UNK_ID
            out.append(i)
        return tuple(out)

    def decode(self, ids: TokenSeq) -> list[str]:
        """Map ids back to surface tokens; reserved ids decode to their tags."""
        out = []
        for i in ids:
            if i < 0 or i >= len(self.id_to_token):
                raise CorpusFormatError(f"token id {i} out of range for vocab of size {len(self.id_to_token)}")
            out.append(self.id_to_token[i])
        return out

    def save(self, path: str | Path) -> None:
        lines = [VOCAB_MAGIC, *self.id_to_token]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0] != VOCAB_MAGIC:
            raise CorpusFormatError(f"{path}: missing vocabulary magic {VOCAB_MAGIC!r}")
        tokens = tuple(lines[1:])
        if tokens[: len(RESERVED_TOKENS)] != RESERVED_TOKENS:
            raise CorpusFormatError(f"{path}: reserved token block corrupted")
        return cls(id_to_token=tokens, token_to_id={t: i for i, t in enumerate(tokens)})


def build_vocab(corpora: list[list[str]], min_freq: int = 1) -> Vocabulary:
    """Build a joint vocabulary from token lists.

    Tokens with frequency >= min_freq get ids; the rest map to <unk> at
    encode time. Tokens that collide with reserved tags are never entered
    as content tokens.
    """
    if min_freq < 1:
        raise ValueError(f"min_freq must be >= 1, got {min_freq}")
    freq = Counter()
    for line in corpora:
        freq.update(line)
    for tag in RESERVED_TOKENS:
        freq.pop(tag, None)
    kept = sorted((t for t, c in freq.items() if c >= min_freq), key=lambda t: (-freq[t], t))
    id_to_token = RESERVED_TOKENS + tuple(kept)
    return Vocabulary(id_to_token=id_to_token, token_to_id={t: i for i, t in enumerate(id_to_token)})


@dataclass(frozen=True)
class ParallelPair:
    """One aligned sentence pair; id is the corpus ordinal."""

    id: int
    src: TokenSeq
    tgt: TokenSeq


def load_parallel_corpus(src_path: str | Path, tgt_path: str | Path, vocab: Vocabulary) -> list[ParallelPair]:
    """Load two aligned one-sentence-per-line files into encoded pairs."""
    src_lines = Path(src_path).read_text(encoding="utf-8").splitlines()
    tgt_lines = Path(tgt_path).read_text(encoding="utf-8").splitlines()
    if len(src_lines) != len(tgt_lines):
        raise CorpusFormatError(
            f"line count {len(src_lines)} != {len(tgt_lines)} between {src_path} and {tgt_path}"
        )
    pairs = []
    for i, (s, t) in enumerate(zip(src_lines, tgt_lines)):
        s_toks, t_toks = tokenize(s), tokenize(t)
        if not s_toks or not t_toks:
            side = src_path if not s_toks else tgt_path
            raise CorpusFormatError(f"{side}: empty sentence at line {i + 1}")
        pairs.append(ParallelPair(id=i, src=vocab.encode(s_toks), tgt=vocab.encode(t_toks)))
    return pairs


def read_token_lines(path: str | Path) -> list[list[str]]:
    """Raw tokenized lines of one corpus file (no encoding)."""
    return [tokenize(line) for line in Path(path).read_text(encoding="utf-8").splitlines()]


def save_corpus_side(path: str | Path, lines: list[list[str]]) -> None:
    Path(path).write_text("\n".join(" ".join(toks) for toks in lines) + "\n", encoding="utf-8")

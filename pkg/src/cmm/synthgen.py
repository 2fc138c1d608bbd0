"""Deterministic synthetic parallel corpora with a redundancy knob.

Sources are template instantiations: fixed marker tokens interleaved
with slot fillers drawn from per-slot lexicons. Targets are an exact
function of the source (bijective token tagging followed by a
per-template span swap), so the task is learnable and the generator is
its own translation oracle. Train sentences arrive in families of
cluster_size near-duplicates that differ in a single slot, which is
what makes greedy retrieval redundant and diversity-aware retrieval
informative. Dev and test reuse train templates but never repeat a
train source verbatim.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path

TARGET_TAG = "T"


class SynthesisError(ValueError):
    """Spec asks for more sentences than distinct instantiations, or a
    source cannot be matched back to any template."""


@dataclass(frozen=True)
class SynthSpec:
    n_templates: int = 4
    slots_per_template: int = 3
    slot_lexicon_size: int = 10
    cluster_size: int = 4
    n_train: int = 200
    n_dev: int = 40
    n_test: int = 40
    seed: int = 0
    reorder_rule: str = "swap"  # "swap" | "identity"

    def validate(self) -> None:
        for name in ("n_templates", "slots_per_template", "slot_lexicon_size", "cluster_size", "n_train", "n_dev", "n_test"):
            if getattr(self, name) < 1:
                raise SynthesisError(f"{name} must be >= 1")
        if self.reorder_rule not in ("swap", "identity"):
            raise SynthesisError(f"unknown reorder rule {self.reorder_rule!r}")
        if self.cluster_size > self.slot_lexicon_size:
            raise SynthesisError("cluster_size cannot exceed slot_lexicon_size")
        capacity = self.n_templates * self.slot_lexicon_size**self.slots_per_template
        if self.n_train + self.n_dev + self.n_test > capacity:
            raise SynthesisError(
                f"requested {self.n_train + self.n_dev + self.n_test} sentences but only "
                f"{capacity} distinct instantiations exist"
            )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SynthSpec":
        return cls(**json.loads(text))


@dataclass(frozen=True)
class Template:
    """Fixed markers f_0..f_S interleaved with S slots; length 2S+1."""

    template_id: int
    fixed: tuple[str, ...]
    lexicons: tuple[tuple[str, ...], ...]
    cut: int  # swap point for the reorder rule, in [1, len-1]

    @property
    def length(self) -> int:
        return len(self.fixed) + len(self.lexicons)

    def realize(self, fillers: tuple[int, ...]) -> list[str]:
        out = []
        for j, f in enumerate(self.fixed):
            out.append(f)
            if j < len(self.lexicons):
                out.append(self.lexicons[j][fillers[j]])
        return out


def build_templates(spec: SynthSpec) -> list[Template]:
    """Templates are a pure function of the spec (cut points seeded)."""
    rng = random.Random(spec.seed ^ 0x7E3A11)
    templates = []
    for t in range(spec.n_templates):
        fixed = tuple(f"k{t}f{j}" for j in range(spec.slots_per_template + 1))
        lexicons = tuple(
            tuple(f"k{t}s{s}w{i}" for i in range(spec.slot_lexicon_size))
            for s in range(spec.slots_per_template)
        )
        length = 2 * spec.slots_per_template + 1
        cut = rng.randint(1, length - 1)
        templates.append(Template(template_id=t, fixed=fixed, lexicons=lexicons, cut=cut))
    return templates


def _is_fixed(token: str) -> bool:
    # fixed markers look like k<t>f<j>; slot fillers like k<t>s<s>w<i>
    return token.startswith("k") and "f" in token and "s" not in token


def map_token(token: str) -> str:
    """Dictionary map: fixed template words are renamed with a tag, slot
    fillers copy through unchanged (the named-entity regime that makes
    translation memories genuinely worth copying from). Bijective: no
    filler ever starts with the tag."""
    return TARGET_TAG + token if _is_fixed(token) else token


def unmap_token(token: str) -> str:
    return token[len(TARGET_TAG):] if token.startswith(TARGET_TAG) else token


def apply_rule(src_tokens: list[str], template: Template, rule: str) -> list[str]:
    mapped = [map_token(t) for t in src_tokens]
    if rule == "identity":
        return mapped
    cut = template.cut
    return mapped[cut:] + mapped[:cut]


@dataclass
class GeneratedCorpus:
    spec: SynthSpec
    splits: dict  # split -> list of (src_tokens, tgt_tokens)
    family_ids: dict  # split -> list of ints (-1 outside train)
    template_ids: dict  # split -> list of ints


def generate(spec: SynthSpec) -> GeneratedCorpus:
    """Generate train/dev/test; byte-identical for identical specs."""
    spec.validate()
    templates = build_templates(spec)
    rng = random.Random(spec.seed)
    used: set[tuple[int, tuple[int, ...]]] = set()

    train: list[tuple[list[str], list[str]]] = []
    train_families: list[int] = []
    train_templates: list[int] = []
    family_idx = 0
    guard = 200 * spec.n_train + 10_000
    while len(train) < spec.n_train:
        if family_idx > guard:
            raise SynthesisError("could not place enough unique train families; lower n_train or raise lexicon size")
        template = templates[family_idx % spec.n_templates]
        varied_slot = family_idx % spec.slots_per_template
        base = tuple(rng.randrange(spec.slot_lexicon_size) for _ in range(spec.slots_per_template))
        variants = rng.sample(range(spec.slot_lexicon_size), spec.cluster_size)
        members = []
        for v in variants:
            fillers = tuple(v if s == varied_slot else base[s] for s in range(spec.slots_per_template))
            key = (template.template_id, fillers)
            if key not in used:
                members.append((key, fillers))
        if len(members) < 2:  # a family of near-duplicates needs company; redraw
            family_idx += 1
            continue
        for key, fillers in members:
            if len(train) >= spec.n_train:
                break
            used.add(key)
            src = template.realize(fillers)
            tgt = apply_rule(src, template, spec.reorder_rule)
            train.append((src, tgt))
            train_families.append(family_idx)
            train_templates.append(template.template_id)
        family_idx += 1

    seen_templates = sorted(set(train_templates))
    # held-out fillers are restricted to values observed in train for that
    # slot, so retrieval can always surface a usable memory; the combo
    # itself is still guaranteed unseen
    seen_fillers: dict[tuple[int, int], list[int]] = {}
    for (tid, fillers) in used:
        for s, f in enumerate(fillers):
            seen_fillers.setdefault((tid, s), []).append(f)
    seen_fillers = {k: sorted(set(v)) for k, v in seen_fillers.items()}

    def draw_heldout(n: int) -> tuple[list, list]:
        pairs = []
        tids = []
        attempts = 0
        while len(pairs) < n:
            attempts += 1
            if attempts > 200 * n + 10_000:
                raise SynthesisError("could not find enough unused instantiations for held-out splits")
            tid = rng.choice(seen_templates)
            template = templates[tid]
            fillers = tuple(
                rng.choice(seen_fillers[(tid, s)]) for s in range(spec.slots_per_template)
            )
            key = (template.template_id, fillers)
            if key in used:
                continue
            used.add(key)
            src = template.realize(fillers)
            tgt = apply_rule(src, template, spec.reorder_rule)
            pairs.append((src, tgt))
            tids.append(template.template_id)
        return pairs, tids

    dev, dev_tids = draw_heldout(spec.n_dev)
    test, test_tids = draw_heldout(spec.n_test)

    corpus = GeneratedCorpus(
        spec=spec,
        splits={"train": train, "dev": dev, "test": test},
        family_ids={
            "train": train_families,
            "dev": [-1] * len(dev),
            "test": [-1] * len(test),
        },
        template_ids={"train": train_templates, "dev": dev_tids, "test": test_tids},
    )
    for split, pairs in corpus.splits.items():
        for src, tgt in pairs:
            if oracle_translate(src, spec, templates=templates) != tgt:
                raise SynthesisError(f"self-check failed in split {split!r} for source {src}")
    return corpus


def oracle_translate(
    src_tokens: list[str],
    spec: SynthSpec,
    templates: list[Template] | None = None,
) -> list[str]:
    """Ground-truth translation: identify the template, map, reorder."""
    if templates is None:
        templates = build_templates(spec)
    tids = set()
    for tok in src_tokens:
        if tok.startswith("k") and ("f" in tok or "s" in tok):
            head = tok[1:].replace("f", " ").replace("s", " ").split()
            if head and head[0].isdigit():
                tids.add(int(head[0]))
    if len(tids) != 1:
        raise SynthesisError(f"cannot attribute source to one template: {src_tokens}")
    tid = tids.pop()
    if tid >= len(templates):
        raise SynthesisError(f"template {tid} out of range")
    template = templates[tid]
    if len(src_tokens) != template.length:
        raise SynthesisError(f"source length {len(src_tokens)} does not fit template {tid}")
    pos = 0
    for j, f in enumerate(template.fixed):
        if src_tokens[pos] != f:
            raise SynthesisError(f"fixed token mismatch at position {pos}: {src_tokens[pos]!r}")
        pos += 1
        if j < len(template.lexicons):
            if src_tokens[pos] not in template.lexicons[j]:
                raise SynthesisError(f"unknown filler {src_tokens[pos]!r} for template {tid} slot {j}")
            pos += 1
    return apply_rule(src_tokens, template, spec.reorder_rule)


def write_corpus(corpus: GeneratedCorpus, out_dir: str | Path) -> list[Path]:
    """Write <split>.src/<split>.tgt pairs plus spec.json; returns paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split in ("train", "dev", "test"):
        pairs = corpus.splits[split]
        for side, idx in (("src", 0), ("tgt", 1)):
            path = out / f"{split}.{side}"
            path.write_text(
                "\n".join(" ".join(p[idx]) for p in pairs) + "\n", encoding="utf-8"
            )
            written.append(path)
    spec_path = out / "spec.json"
    spec_path.write_text(corpus.spec.to_json() + "\n", encoding="utf-8")
    written.append(spec_path)
    return written

"""Command-line pipeline: gen-synth, retrieve, train, translate, evaluate,
ablate, export-embeddings, hga-mask.

Exit codes: 0 success, 2 usage or config error, 3 runtime failure.
Errors go to stderr as one JSON object per failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import manifest
from .decoding import beam_decode, corpus_bleu
from .memgraph import build_hga_mask, layout as make_layout, mask_to_pbm
from .model import CmmModel, ModelError
from .retrieval import IndexingError, MemorySet, build_index, candidates, coverage, retrieval_stats, select
from .synthgen import SynthSpec, SynthesisError, generate, write_corpus
from .textcore import CorpusFormatError, Vocabulary, load_parallel_corpus, read_token_lines
from .training import (
    CheckpointError,
    ConfigError,
    RunConfig,
    TrainingError,
    load_checkpoint,
    restore_model,
    retrieve_for_pairs,
    train,
)

USAGE_ERRORS = (
    ConfigError,
    CorpusFormatError,
    SynthesisError,
    CheckpointError,
    IndexingError,
    ModelError,
    FileNotFoundError,
    ValueError,
)


class JsonArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _fail(exc: BaseException, code: int) -> int:
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not hasattr(args, "func"):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except USAGE_ERRORS as e:
        return _fail(e, 2)
    except Exception as e:  # noqa: BLE001 - boundary of the process
        return _fail(e, 3)


def entrypoint() -> None:
    sys.exit(main(sys.argv[1:]))


def build_parser() -> argparse.ArgumentParser:
    p = JsonArgumentParser(prog="cmm", description=__doc__)
    sub = p.add_subparsers(dest="command")

    g = sub.add_parser("gen-synth", help="generate a synthetic parallel corpus")
    g.add_argument("--spec", required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_synth)

    r = sub.add_parser("retrieve", help="retrieve translation memories per query")
    r.add_argument("--corpus", required=True)
    r.add_argument("--strategy", required=True, choices=["contrastive", "greedy", "mmr", "adaptive", "random"])
    r.add_argument("--alpha", type=float, default=0.7)
    r.add_argument("--m", type=int, default=5)
    r.add_argument("--k", type=int, default=64)
    r.add_argument("--adaptive-cap", type=int, default=10)
    r.add_argument("--split", default="train", choices=["train", "dev", "test"])
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_retrieve)

    t = sub.add_parser("train", help="train a model from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    t.add_argument("--resume", default=None)
    t.set_defaults(func=cmd_train)

    tr = sub.add_parser("translate", help="decode a corpus split with a checkpoint")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--corpus", required=True)
    tr.add_argument("--beam", type=int, default=5)
    tr.add_argument("--max-len", type=int, default=64)
    tr.add_argument("--length-penalty", type=float, default=1.0)
    tr.add_argument("--split", default="test", choices=["dev", "test"])
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="corpus BLEU of hypotheses vs references")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="train and score the variant grid")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--seeds", type=int, default=1)
    a.add_argument("--beam", type=int, default=1)
    a.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("export-embeddings", help="dump memory/target representations as TSV")
    x.add_argument("--ckpt", required=True)
    x.add_argument("--corpus", required=True)
    x.add_argument("--n", type=int, required=True)
    x.add_argument("--seed", type=int, default=0)
    x.add_argument("--split", default="test", choices=["dev", "test"])
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_embeddings)

    m = sub.add_parser("hga-mask", help="debug-print the group attention mask as PBM")
    m.add_argument("--lengths", required=True, help="comma-separated memory lengths, e.g. 2,3")
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_hga_mask)

    return p


# ---------------------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    t0 = time.perf_counter()
    spec = SynthSpec.from_json(Path(args.spec).read_text(encoding="utf-8"))
    corpus = generate(spec)
    written = write_corpus(corpus, args.out)
    manifest.append_entry(
        args.out,
        "gen-synth",
        json.loads(spec.to_json()),
        inputs=[args.spec],
        outputs=written,
        wall_s=time.perf_counter() - t0,
    )
    print(json.dumps({"written": [p.name for p in written]}))
    return 0


def _load_split(corpus_dir: str, split: str, vocab: Vocabulary):
    d = Path(corpus_dir)
    return load_parallel_corpus(d / f"{split}.src", d / f"{split}.tgt", vocab)


def _train_vocab(corpus_dir: str) -> Vocabulary:
    from .training import prepare_corpus

    return prepare_corpus(corpus_dir).vocab


def cmd_retrieve(args) -> int:
    t0 = time.perf_counter()
    vocab = _train_vocab(args.corpus)
    train_pairs = _load_split(args.corpus, "train", vocab)
    queries = train_pairs if args.split == "train" else _load_split(args.corpus, args.split, vocab)
    index = build_index(train_pairs)
    exclude_self = args.split == "train"
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    with open(out_path, "w", encoding="utf-8") as f:
        for pair in queries:
            pool = candidates(index, pair.src, args.k, exclude_id=pair.id if exclude_self else None)
            mset = select(args.strategy, pair.src, pool, max(args.m, 1), args.alpha, args.adaptive_cap, seed=args.seed + pair.id)
            entries.append((pair.src, mset))
            srcs = [index.pair(pid).src for pid in mset.pair_ids]
            f.write(
                json.dumps(
                    {
                        "query_id": pair.id,
                        "strategy": args.strategy,
                        "alpha": args.alpha if args.strategy in ("contrastive", "mmr") else None,
                        "memories": [
                            {"pair_id": pid, "sim": sim} for pid, sim in zip(mset.pair_ids, mset.sims)
                        ],
                        "coverage": coverage(pair.src, srcs),
                    }
                )
                + "\n"
            )
    stats = retrieval_stats(entries, index)
    stats_path = out_path.with_name(out_path.name + ".stats.json")
    stats_path.write_text(stats.to_json() + "\n", encoding="utf-8")
    manifest.append_entry(
        out_path.parent,
        "retrieve",
        {
            "strategy": args.strategy,
            "alpha": args.alpha,
            "m": args.m,
            "k": args.k,
            "split": args.split,
            "seed": args.seed,
        },
        inputs=[Path(args.corpus) / f"{args.split}.src", Path(args.corpus) / f"{args.split}.tgt"],
        outputs=[out_path, stats_path],
        wall_s=time.perf_counter() - t0,
    )
    print(stats.to_json())
    return 0


def _load_run(args) -> RunConfig:
    run = RunConfig.from_json(Path(args.config).read_text(encoding="utf-8"))
    for override in args.set:
        if "=" not in override:
            raise ConfigError(f"--set expects PATH=VALUE, got {override!r}")
        dotted, raw = override.split("=", 1)
        run.set_by_path(dotted, raw)
    return run


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    run = _load_run(args)
    result = train(run, resume_from=args.resume)
    out_dir = Path(run.paths.out_dir)
    corpus = Path(run.paths.corpus_dir)
    manifest.append_entry(
        out_dir,
        "train",
        run.to_dict(),
        inputs=[corpus / "train.src", corpus / "train.tgt"],
        outputs=[result.final_ckpt, result.metrics_path, out_dir / "vocab.txt", out_dir / "memories.jsonl"],
        wall_s=time.perf_counter() - t0,
    )
    print(json.dumps({"steps": result.steps, "ckpt": str(result.final_ckpt), "accuracy": result.final_accuracy}))
    return 0


def _load_model_and_vocab(ckpt_path: str):
    run, tensors = load_checkpoint(ckpt_path)
    vocab_path = Path(ckpt_path).parent / "vocab.txt"
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != run.model.vocab_size:
        raise CheckpointError(f"vocab.txt has {len(vocab)} entries, checkpoint expects {run.model.vocab_size}")
    model = restore_model(run, tensors)
    model.set_train(False)
    return run, model, vocab


def _memories_for_queries(run: RunConfig, vocab: Vocabulary, corpus_dir: str, queries) -> list[MemorySet]:
    train_pairs = _load_split(corpus_dir, "train", vocab)
    index = build_index(train_pairs)
    return retrieve_for_pairs(index, queries, run.retrieval, exclude_self=False, seed=run.seed)


def cmd_translate(args) -> int:
    t0 = time.perf_counter()
    run, model, vocab = _load_model_and_vocab(args.ckpt)
    queries = _load_split(args.corpus, args.split, vocab)
    if not queries:
        raise ConfigError(f"{args.split} split of {args.corpus} is empty")
    msets = _memories_for_queries(run, vocab, args.corpus, queries)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for pair, mset in zip(queries, msets):
            hyp = beam_decode(
                model, pair.src, list(mset.tgts), beam=args.beam, max_len=args.max_len, length_penalty=args.length_penalty
            )
            f.write(" ".join(vocab.decode(hyp)) + "\n")
    manifest.append_entry(
        out_path.parent,
        "translate",
        {"beam": args.beam, "split": args.split, "max_len": args.max_len, "length_penalty": args.length_penalty},
        inputs=[args.ckpt],
        outputs=[out_path],
        wall_s=time.perf_counter() - t0,
    )
    return 0


def cmd_evaluate(args) -> int:
    hyps = read_token_lines(args.hyp)
    refs = read_token_lines(args.ref)
    if len(hyps) != len(refs):
        raise ConfigError(f"hypothesis count {len(hyps)} != reference count {len(refs)}")
    report = corpus_bleu(hyps, refs)
    print(report.to_json())
    return 0


ABLATION_VARIANTS = ("cmm", "t_greedy", "t_mmr", "t_random", "t_wo_hga", "t_wo_mtcl", "no_tm")
ALPHA_SWEEP = (0.0, 0.3, 0.5, 0.7, 0.9, 1.1)
M_SWEEP = (0, 1, 3, 5, 7)


def _variant_run(base: RunConfig, variant: str, alpha: float, m: int, seed: int) -> RunConfig:
    run = RunConfig.from_dict(base.to_dict())
    run.seed = seed
    run.retrieval.alpha = alpha
    run.retrieval.m_size = m
    if variant == "t_greedy":
        run.retrieval.strategy = "greedy"
    elif variant == "t_mmr":
        run.retrieval.strategy = "mmr"
    elif variant == "t_random":
        run.retrieval.strategy = "random"
    elif variant == "t_wo_hga":
        run.model.hga = False
    elif variant == "t_wo_mtcl":
        run.loss.lam = 0.0
    elif variant == "no_tm":
        run.retrieval.m_size = 0
    elif variant not in ("cmm", "alpha_sweep", "m_sweep"):
        raise ConfigError(f"unknown ablation variant {variant!r}")
    return run


def _score_cell(run: RunConfig, corpus_dir: str, cell_dir: Path, beam: int) -> float:
    run.paths.corpus_dir = corpus_dir
    run.paths.out_dir = str(cell_dir)
    result = train(run)
    model = result.model
    model.set_train(False)
    vocab = result.bundle.vocab
    dev = result.bundle.dev
    index = build_index(result.bundle.train)
    msets = retrieve_for_pairs(index, dev, run.retrieval, exclude_self=False, seed=run.seed)
    hyps, refs = [], []
    for pair, mset in zip(dev, msets):
        hyp = beam_decode(model, pair.src, list(mset.tgts), beam=beam, max_len=run.model.max_len // 2, length_penalty=1.0)
        hyps.append(vocab.decode(hyp))
        refs.append(vocab.decode(pair.tgt))
    return corpus_bleu(hyps, refs).bleu


def cmd_ablate(args) -> int:
    t0 = time.perf_counter()
    base = _load_run(args)
    corpus_dir = base.paths.corpus_dir
    if not corpus_dir:
        raise ConfigError("ablate needs paths.corpus_dir in the run config")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cells: list[tuple[str, float, int]] = []
    for variant in ABLATION_VARIANTS:
        m = 0 if variant == "no_tm" else base.retrieval.m_size
        cells.append((variant, base.retrieval.alpha, m))
    for alpha in ALPHA_SWEEP:
        cells.append(("alpha_sweep", alpha, base.retrieval.m_size))
    for m in M_SWEEP:
        cells.append(("m_sweep", 0.7, m))
    rows = []
    for variant, alpha, m in cells:
        for seed in range(args.seeds):
            cell_seed = base.seed + seed
            name = f"{variant}_a{alpha}_m{m}_s{cell_seed}"
            run = _variant_run(base, variant, alpha, m, cell_seed)
            try:
                bleu = _score_cell(run, corpus_dir, out_dir / "cells" / name, args.beam)
                rows.append({"variant": variant, "alpha": alpha, "m": m, "seed": cell_seed, "bleu": f"{bleu:.4f}", "status": "ok"})
            except Exception as e:  # noqa: BLE001 - partial failures recorded per cell
                rows.append({"variant": variant, "alpha": alpha, "m": m, "seed": cell_seed, "bleu": "", "status": f"error: {e}"})
    grid_path = out_dir / "grid.csv"
    with open(grid_path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=["variant", "alpha", "m", "seed", "bleu", "status"])
        writer.writeheader()
        writer.writerows(rows)
    manifest.append_entry(
        out_dir,
        "ablate",
        base.to_dict(),
        inputs=[args.config],
        outputs=[grid_path],
        wall_s=time.perf_counter() - t0,
    )
    print(json.dumps({"cells": len(rows), "grid": str(grid_path)}))
    return 0


def cmd_export_embeddings(args) -> int:
    t0 = time.perf_counter()
    run, model, vocab = _load_model_and_vocab(args.ckpt)
    queries = _load_split(args.corpus, args.split, vocab)
    n = args.n
    if n > len(queries):
        print(json.dumps({"warning": f"n clamped from {n} to {len(queries)}"}), file=sys.stderr)
        n = len(queries)
    rng = np.random.default_rng(args.seed)
    chosen = sorted(rng.choice(len(queries), size=n, replace=False).tolist())
    sample = [queries[i] for i in chosen]
    msets = _memories_for_queries(run, vocab, args.corpus, sample)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", encoding="utf-8") as f:
        for pair, mset in zip(sample, msets):
            target_rep = model.encode_target_for_mtcl(pair.tgt).data
            f.write("\t".join([str(pair.id), "target", *(repr(v) for v in target_rep)]) + "\n")
            if len(mset) > 0:
                enc = model.encode_memories(list(mset.tgts))
                for k_i in range(len(mset)):
                    vec = enc.super_reps.data[k_i]
                    f.write("\t".join([str(pair.id), f"memory_{k_i}", *(repr(v) for v in vec)]) + "\n")
    manifest.append_entry(
        out_path.parent,
        "export-embeddings",
        {"n": n, "seed": args.seed, "split": args.split},
        inputs=[args.ckpt],
        outputs=[out_path],
        wall_s=time.perf_counter() - t0,
    )
    return 0


def cmd_hga_mask(args) -> int:
    lengths = [int(x) for x in args.lengths.split(",") if x.strip()]
    pbm = mask_to_pbm(build_hga_mask(make_layout(lengths)))
    if args.out:
        Path(args.out).write_text(pbm, encoding="ascii")
    else:
        print(pbm, end="")
    return 0

"""Batching, optimization schedule, training loop, and checkpoints.

Retrieval is precomputed once before the loop (memories come from the
training set itself, each query excluding its own pair). A step packs
examples into a token budget, runs teacher-forced forwards one example
at a time, pools cross entropy token-mean over the batch and the
contrastive memory loss example-mean, then applies one Adam update with
the inverse-sqrt warmup schedule.

Checkpoints use the public f32 "cmm-ckpt v1" format; the trainer also
drops an f64 sidecar ("cmm-trainstate v1") so an interrupted run can
resume bit-identically to an uninterrupted one.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import struct
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import numerics as nm
from .model import CmmModel, ModelConfig, ce_loss, joint_loss, mtcl_loss
from .retrieval import InvertedIndex, MemorySet, build_index, candidates, select
from .textcore import EOS_ID, ParallelPair, TokenSeq, Vocabulary, build_vocab, load_parallel_corpus, read_token_lines

CKPT_MAGIC = b"cmm-ckpt v1\n"
STATE_MAGIC = b"cmm-trainstate v1\n"


class ConfigError(ValueError):
    """run.json validation failure; message enumerates every bad field."""


class TrainingError(RuntimeError):
    """Aborted run (non-finite loss, oversized example, bad resume)."""


class CheckpointError(RuntimeError):
    """Unreadable, truncated, or mismatched checkpoint."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RetrievalConfig:
    strategy: str = "contrastive"
    alpha: float = 0.7
    m_size: int = 5
    k: int = 64
    adaptive_cap: int = 10


@dataclass
class LossConfig:
    tau: float = 0.1
    lam: float = 1.0
    epsilon: float = 0.1


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    warmup_steps: int = 400
    max_steps: int = 2000


@dataclass
class TrainerConfig:
    ckpt_interval: int = 0  # 0: checkpoint only at the end
    eval_interval: int = 0  # 0: never evaluate mid-run
    early_stop_accuracy: float = 0.0  # stop once teacher-forced accuracy reaches this
    log_interval: int = 1


@dataclass
class PathsConfig:
    corpus_dir: str = ""
    out_dir: str = ""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    batch_max_tokens: int = 2000
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        sections = {
            "model": ModelConfig,
            "retrieval": RetrievalConfig,
            "loss": LossConfig,
            "optim": OptimConfig,
            "trainer": TrainerConfig,
            "paths": PathsConfig,
        }
        bad: list[str] = []
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                sec_cls = sections[key]
                names = {f.name for f in fields(sec_cls)}
                unknown = set(value) - names
                bad.extend(f"{key}.{u}" for u in sorted(unknown))
                kwargs[key] = sec_cls(**{k: v for k, v in value.items() if k in names})
            elif key in ("batch_max_tokens", "seed"):
                kwargs[key] = value
            else:
                bad.append(key)
        if bad:
            raise ConfigError("unknown config fields: " + ", ".join(bad))
        return cls(**kwargs)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def set_by_path(self, dotted: str, raw: str) -> None:
        """Apply a --set override like model.hga=off or loss.lam=0."""
        parts = dotted.split(".")
        obj = self
        for p in parts[:-1]:
            if not hasattr(obj, p):
                raise ConfigError(f"unknown config section {dotted!r}")
            obj = getattr(obj, p)
        leaf = parts[-1]
        if not hasattr(obj, leaf):
            raise ConfigError(f"unknown config field {dotted!r}")
        current = getattr(obj, leaf)
        setattr(obj, leaf, _coerce(raw, type(current), dotted))

    def to_portable_dict(self) -> dict:
        """Config without paths: what identifies the run's math, not where
        it ran. Checkpoints embed this form so identical seeded runs in
        different directories produce byte-identical artifacts."""
        d = self.to_dict()
        d.pop("paths", None)
        return d

    def portable_json(self) -> str:
        return json.dumps(self.to_portable_dict(), sort_keys=True)

    def resume_hash(self) -> str:
        """Guard for trainstate compatibility; max_steps may grow between
        an interrupted run and its continuation."""
        d = self.to_portable_dict()
        d["optim"].pop("max_steps", None)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()


def _coerce(raw: str, target: type, dotted: str):
    if target is bool:
        low = raw.lower()
        if low in ("1", "true", "on", "yes"):
            return True
        if low in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"{dotted}: cannot parse {raw!r} as bool")
    try:
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"{dotted}: {e}") from None
    return raw


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class TrainExample:
    pair_id: int
    src: TokenSeq
    tgt: TokenSeq
    memories: MemorySet

    @property
    def token_cost(self) -> int:
        # <bos> on the source, <mem> per memory, <bos>/<eos> on the target
        return (len(self.src) + 1) + sum(len(m) + 1 for m in self.memories.tgts) + (len(self.tgt) + 2)


@dataclass
class DataBundle:
    vocab: Vocabulary
    train: list[ParallelPair]
    dev: list[ParallelPair]
    test: list[ParallelPair]


def prepare_corpus(corpus_dir: str | Path) -> DataBundle:
    """Load a gen-synth style directory; vocabulary comes from train only."""
    d = Path(corpus_dir)
    lines = read_token_lines(d / "train.src") + read_token_lines(d / "train.tgt")
    vocab = build_vocab(lines, min_freq=1)
    splits = {}
    for split in ("train", "dev", "test"):
        splits[split] = load_parallel_corpus(d / f"{split}.src", d / f"{split}.tgt", vocab)
    return DataBundle(vocab=vocab, train=splits["train"], dev=splits["dev"], test=splits["test"])


def retrieve_for_pairs(
    index: InvertedIndex,
    queries: list[ParallelPair],
    rcfg: RetrievalConfig,
    exclude_self: bool,
    seed: int = 0,
) -> list[MemorySet]:
    """One MemorySet per query; m_size 0 short-circuits to empty sets."""
    out = []
    for pair in queries:
        if rcfg.m_size == 0:
            out.append(MemorySet(strategy="none"))
            continue
        pool = candidates(index, pair.src, rcfg.k, exclude_id=pair.id if exclude_self else None)
        out.append(
            select(
                rcfg.strategy,
                pair.src,
                pool,
                rcfg.m_size,
                rcfg.alpha,
                rcfg.adaptive_cap,
                seed=seed + pair.id,
            )
        )
    return out


def make_batches(examples: list[TrainExample], batch_max_tokens: int, seed: int) -> list[list[TrainExample]]:
    """Seeded shuffle, then greedy packing under the token budget."""
    for ex in examples:
        if ex.token_cost > batch_max_tokens:
            raise TrainingError(
                f"example {ex.pair_id} needs {ex.token_cost} tokens, over the {batch_max_tokens} budget"
            )
    order = list(range(len(examples)))
    random.Random(seed).shuffle(order)
    batches: list[list[TrainExample]] = []
    cur: list[TrainExample] = []
    cur_cost = 0
    for i in order:
        ex = examples[i]
        if cur and cur_cost + ex.token_cost > batch_max_tokens:
            batches.append(cur)
            cur, cur_cost = [], 0
        cur.append(ex)
        cur_cost += ex.token_cost
    if cur:
        batches.append(cur)
    return batches


# ---------------------------------------------------------------------------
# optimizer


def lr(step: int, d_model: int, warmup: int) -> float:
    """Inverse-sqrt schedule with linear warmup; peaks at step == warmup."""
    if step < 1:
        raise TrainingError(f"lr undefined for step {step}")
    return d_model**-0.5 * min(step**-0.5, step * warmup**-1.5)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def init(cls, params: list[nm.Parameter]) -> "OptimizerState":
        return cls(
            m={p.name: np.zeros_like(p.data) for p in params},
            v={p.name: np.zeros_like(p.data) for p in params},
        )


def adam_step(
    params: list[nm.Parameter],
    state: OptimizerState,
    lr_value: float,
    beta1: float = 0.9,
    beta2: float = 0.98,
    eps: float = 1e-9,
) -> None:
    """Standard Adam with bias correction; zeroes grads afterwards."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for p in params:
        g = p.grad
        if g.shape != p.data.shape:
            raise TrainingError(f"gradient shape mismatch for {p.name}")
        m = state.m[p.name]
        v = state.v[p.name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data[...] -= lr_value * (m / bc1) / (np.sqrt(v / bc2) + eps)
        p.tensor.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: CmmModel, run: RunConfig) -> None:
    """Atomic write of the f32 checkpoint: magic, config blob + hash, records."""
    path = Path(path)
    config_bytes = run.portable_json().encode()
    buf = [CKPT_MAGIC]
    buf.append(struct.pack("<I", len(config_bytes)))
    buf.append(config_bytes)
    buf.append(hashlib.sha256(config_bytes).digest())
    params = model.parameters()
    buf.append(struct.pack("<I", len(params)))
    for p in params:
        name = p.name.encode()
        buf.append(struct.pack("<H", len(name)))
        buf.append(name)
        buf.append(struct.pack("<B", p.data.ndim))
        buf.append(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        buf.append(p.data.astype("<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(buf))
    tmp.rename(path)


def load_checkpoint(path: str | Path) -> tuple[RunConfig, dict[str, np.ndarray]]:
    """Parse and validate a checkpoint; returns (config, name -> f64 array)."""
    raw = Path(path).read_bytes()
    if not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: bad magic, expected {CKPT_MAGIC!r}")
    off = len(CKPT_MAGIC)
    try:
        (clen,) = struct.unpack_from("<I", raw, off)
        off += 4
        config_bytes = raw[off : off + clen]
        if len(config_bytes) != clen:
            raise CheckpointError(f"{path}: truncated config blob")
        off += clen
        stored_hash = raw[off : off + 32]
        off += 32
        if hashlib.sha256(config_bytes).digest() != stored_hash:
            raise CheckpointError(f"{path}: config hash mismatch")
        run = RunConfig.from_json(config_bytes.decode())
        (n_records,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors: dict[str, np.ndarray] = {}
        for _ in range(n_records):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            count = int(np.prod(shape)) if ndim else 1
            data = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
            if data.size != count:
                raise CheckpointError(f"{path}: truncated data for parameter {name}")
            off += 4 * count
            tensors[name] = data.astype(np.float64).reshape(shape)
    except (struct.error, ValueError) as e:
        raise CheckpointError(f"{path}: truncated checkpoint ({e})") from None
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return run, tensors


def restore_model(run: RunConfig, tensors: dict[str, np.ndarray]) -> CmmModel:
    """Build a model from config and install checkpoint tensors into it."""
    model = CmmModel(run.model, seed=run.seed)
    for p in model.parameters():
        if p.name not in tensors:
            raise CheckpointError(f"checkpoint missing parameter {p.name}")
        if tensors[p.name].shape != p.data.shape:
            raise CheckpointError(
                f"shape mismatch for {p.name}: checkpoint {tensors[p.name].shape}, model {p.data.shape}"
            )
        p.data[...] = tensors[p.name]
    extra = set(tensors) - set(model.params)
    if extra:
        raise CheckpointError(f"checkpoint has unknown parameters: {sorted(extra)}")
    return model


def save_train_state(path: str | Path, model: CmmModel, opt: OptimizerState, step: int, run: RunConfig) -> None:
    """f64 sidecar for bit-exact resume (internal format)."""
    path = Path(path)
    buf = [STATE_MAGIC, struct.pack("<QQ", step, opt.step)]
    buf.append(bytes.fromhex(run.resume_hash()))
    records: list[tuple[str, np.ndarray]] = [(p.name, p.data) for p in model.parameters()]
    records += [(f"adam.m.{k}", v) for k, v in opt.m.items()]
    records += [(f"adam.v.{k}", v) for k, v in opt.v.items()]
    buf.append(struct.pack("<I", len(records)))
    for name, arr in records:
        nb = name.encode()
        buf.append(struct.pack("<H", len(nb)))
        buf.append(nb)
        buf.append(struct.pack("<B", arr.ndim))
        buf.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.append(arr.astype("<f8").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(buf))
    tmp.rename(path)


def load_train_state(path: str | Path, model: CmmModel, opt: OptimizerState, run: RunConfig) -> int:
    raw = Path(path).read_bytes()
    if not raw.startswith(STATE_MAGIC):
        raise CheckpointError(f"{path}: bad trainstate magic")
    off = len(STATE_MAGIC)
    step, opt_step = struct.unpack_from("<QQ", raw, off)
    off += 16
    stored_hash = raw[off : off + 32]
    off += 32
    if bytes.fromhex(run.resume_hash()) != stored_hash:
        raise CheckpointError(f"{path}: trainstate belongs to a different config")
    (n_records,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_records):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode()
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(raw, dtype="<f8", count=count, offset=off)
        off += 8 * count
        tensors[name] = data.reshape(shape).copy()
    for p in model.parameters():
        p.data[...] = tensors[p.name]
    for k in opt.m:
        opt.m[k][...] = tensors[f"adam.m.{k}"]
        opt.v[k][...] = tensors[f"adam.v.{k}"]
    opt.step = opt_step
    return step


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    steps: int
    final_ckpt: Path
    metrics_path: Path
    final_accuracy: float | None
    model: CmmModel
    bundle: DataBundle
    examples: list[TrainExample]


def build_examples(bundle: DataBundle, run: RunConfig) -> tuple[list[TrainExample], InvertedIndex]:
    index = build_index(bundle.train)
    msets = retrieve_for_pairs(index, bundle.train, run.retrieval, exclude_self=True, seed=run.seed)
    examples = [
        TrainExample(pair_id=p.id, src=p.src, tgt=p.tgt, memories=ms)
        for p, ms in zip(bundle.train, msets)
    ]
    return examples, index


def example_losses(model: CmmModel, ex: TrainExample, run: RunConfig):
    """Per-example (ce token-mean, live token count, mtcl) graph nodes."""
    probs, enc = model.forward_probs(ex.src, list(ex.memories.tgts), ex.tgt)
    targets = [*ex.tgt, EOS_ID]
    ce = ce_loss(probs, targets, run.loss.epsilon)
    if enc is not None and len(ex.memories) >= 2:
        target_rep = model.encode_target_for_mtcl(ex.tgt)
        mt = mtcl_loss(enc.super_reps, target_rep, run.loss.tau)
    else:
        mt = nm.Tensor(0.0)
    return ce, len(targets), mt


def token_accuracy(model: CmmModel, examples: list[TrainExample]) -> float:
    """Teacher-forced argmax accuracy over tgt + <eos> tokens."""
    was_training = model.train_mode
    model.set_train(False)
    hit = total = 0
    for ex in examples:
        probs, _ = model.forward_probs(ex.src, list(ex.memories.tgts), ex.tgt)
        pred = probs.data.argmax(axis=1)
        ref = np.asarray([*ex.tgt, EOS_ID])
        hit += int((pred == ref).sum())
        total += ref.size
    model.set_train(was_training)
    return hit / total


def train(run: RunConfig, resume_from: str | Path | None = None) -> TrainResult:
    """Full training per the run config; writes metrics, vocab, checkpoints."""
    out_dir = Path(run.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = prepare_corpus(run.paths.corpus_dir)
    if run.model.vocab_size == 0:
        run.model.vocab_size = len(bundle.vocab)
    elif run.model.vocab_size != len(bundle.vocab):
        raise ConfigError(
            f"model.vocab_size {run.model.vocab_size} != corpus vocabulary {len(bundle.vocab)}"
        )
    run.model.label_smoothing = run.loss.epsilon
    examples, _ = build_examples(bundle, run)
    _dump_memories(out_dir / "memories.jsonl", examples)
    bundle.vocab.save(out_dir / "vocab.txt")

    model = CmmModel(run.model, seed=run.seed)
    params = model.parameters()
    opt = OptimizerState.init(params)
    start_step = 0
    if resume_from is not None:
        start_step = load_train_state(Path(resume_from), model, opt, run)

    metrics_path = out_dir / "metrics.jsonl"
    ckpt_path = out_dir / "ckpt.bin"
    mode = "a" if start_step > 0 else "w"
    step = 0
    final_acc: float | None = None
    stop = False
    with open(metrics_path, mode, encoding="utf-8") as metrics:
        epoch = 0
        while not stop and step < run.optim.max_steps:
            for batch in make_batches(examples, run.batch_max_tokens, run.seed + epoch):
                step += 1
                if step > run.optim.max_steps:
                    step -= 1
                    stop = True
                    break
                if step <= start_step:
                    continue  # replay the schedule deterministically up to the resume point
                t0 = time.perf_counter()
                lr_value = lr(step, run.model.d_model, run.optim.warmup_steps)
                ce_acc: nm.Tensor | None = None
                mtcl_acc: nm.Tensor | None = None
                n_tokens = 0
                for ex in batch:
                    ce, live, mt = example_losses(model, ex, run)
                    weighted = nm.mul_scalar(ce, float(live))
                    ce_acc = weighted if ce_acc is None else ce_acc + weighted
                    mtcl_acc = mt if mtcl_acc is None else mtcl_acc + mt
                    n_tokens += live
                ce_batch = nm.mul_scalar(ce_acc, 1.0 / n_tokens)
                mtcl_batch = nm.mul_scalar(mtcl_acc, 1.0 / len(batch))
                breakdown = joint_loss(ce_batch, mtcl_batch, run.loss.lam, run.loss.tau)
                if not math.isfinite(breakdown.joint.item()):
                    snap = out_dir / f"diverged.step{step}.json"
                    snap.write_text(
                        json.dumps(
                            {
                                "step": step,
                                "ce": breakdown.ce.item(),
                                "mtcl": breakdown.mtcl.item(),
                                "pair_ids": [ex.pair_id for ex in batch],
                            }
                        ),
                        encoding="utf-8",
                    )
                    raise TrainingError(f"non-finite loss at step {step}, snapshot in {snap}")
                nm.backward(breakdown.joint)
                adam_step(params, opt, lr_value, run.optim.beta1, run.optim.beta2, run.optim.eps)
                elapsed = time.perf_counter() - t0
                batch_cost = sum(ex.token_cost for ex in batch)
                if step % run.trainer.log_interval == 0:
                    metrics.write(
                        json.dumps(
                            {
                                "step": step,
                                "ce": breakdown.ce.item(),
                                "mtcl": breakdown.mtcl.item(),
                                "joint": breakdown.joint.item(),
                                "lr": lr_value,
                                "tokens_per_s": batch_cost / max(elapsed, 1e-9),
                            }
                        )
                        + "\n"
                    )
                if run.trainer.ckpt_interval and step % run.trainer.ckpt_interval == 0:
                    save_checkpoint(ckpt_path, model, run)
                    save_train_state(out_dir / "trainstate.bin", model, opt, step, run)
                if run.trainer.eval_interval and step % run.trainer.eval_interval == 0:
                    final_acc = token_accuracy(model, examples)
                    if run.trainer.early_stop_accuracy and final_acc >= run.trainer.early_stop_accuracy:
                        stop = True
                        break
                if step >= run.optim.max_steps:
                    stop = True
                    break
            epoch += 1
    save_checkpoint(ckpt_path, model, run)
    save_train_state(out_dir / "trainstate.bin", model, opt, step, run)
    return TrainResult(
        steps=step,
        final_ckpt=ckpt_path,
        metrics_path=metrics_path,
        final_accuracy=final_acc,
        model=model,
        bundle=bundle,
        examples=examples,
    )


def _dump_memories(path: Path, examples: list[TrainExample]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {
                        "query_id": ex.pair_id,
                        "strategy": ex.memories.strategy,
                        "alpha": ex.memories.alpha,
                        "memories": [
                            {"pair_id": pid, "sim": sim}
                            for pid, sim in zip(ex.memories.pair_ids, ex.memories.sims)
                        ],
                    }
                )
                + "\n"
            )

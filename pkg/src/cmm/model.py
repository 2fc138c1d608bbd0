"""The contrastive-memory translation network.

One shared embedding table feeds a pre-norm transformer source encoder,
a memory encoder whose self-attention is restricted by the hierarchical
group mask, and a decoder with two cross-attention sublayers (source,
then memories). Decoding mixes the vocabulary softmax with a copy
distribution over memory positions, gated by a learned scalar. Training
couples label-smoothed cross entropy with a contrastive loss that pulls
every memory's super-node representation toward the target sentence
representation.

Everything runs on the float64 autodiff tensors from `numerics`; one
forward call processes one example (batched padding support exists for
the source encoder only).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .memgraph import HgaLayout, build_hga_mask, layout as make_layout
from .numerics import Parameter, Tensor
from .textcore import BOS_ID, EOS_ID, MEM_ID, PAD_ID, TokenSeq


class ModelError(ValueError):
    """Configuration or input contract violation."""


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    d_ffn: int = 128
    n_layers_src: int = 2
    n_layers_mem: int = 2
    n_layers_dec: int = 2
    vocab_size: int = 0
    max_len: int = 256
    dropout: float = 0.0
    label_smoothing: float = 0.1
    tie_embeddings: bool = True
    hga: bool = True

    def validate(self) -> None:
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ModelError(f"label_smoothing must be in [0, 1), got {self.label_smoothing}")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.vocab_size < 6:
            raise ModelError(f"vocab_size must cover the reserved ids, got {self.vocab_size}")
        if self.max_len < 4:
            raise ModelError(f"max_len too small: {self.max_len}")


@dataclass
class MemoryEncoding:
    """Memory-encoder output for one example."""

    z_m: Tensor  # [total_len, d]
    super_reps: Tensor  # [|M|, d]
    token_ids: list[int]  # concatenated ids, <mem> first per segment
    layout: HgaLayout
    allow: np.ndarray  # self-attention permission matrix actually used


@dataclass
class EncoderOutput:
    z_x: Tensor
    memory: MemoryEncoding | None


@dataclass
class DecoderState:
    h_self: list[Tensor] = field(default_factory=list)
    h_src: list[Tensor] = field(default_factory=list)
    h_mem: list[Tensor] = field(default_factory=list)
    hidden: Tensor | None = None
    alpha: Tensor | None = None  # [heads, t, L] memory attention of the last layer


@dataclass
class LossBreakdown:
    ce: Tensor
    mtcl: Tensor
    joint: Tensor
    lam: float
    tau: float


class CmmModel:
    """Shared-embedding encoder/memory-encoder/decoder with copy output."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.params: dict[str, Parameter] = {}
        self.train_mode = True
        self._drop_rng = np.random.default_rng(seed + 1)
        rng = np.random.default_rng(seed)
        d, v = cfg.d_model, cfg.vocab_size

        self._param("embed.E", rng.normal(0.0, d**-0.5, size=(v, d)))
        if not cfg.tie_embeddings:
            self._param("out.W", self._xavier(rng, d, v))
        for i in range(cfg.n_layers_src):
            self._init_encoder_layer(rng, f"src.{i}")
        if cfg.n_layers_src:
            self._init_ln("src.final")
        for i in range(cfg.n_layers_mem):
            self._init_encoder_layer(rng, f"mem.{i}")
        if cfg.n_layers_mem:
            self._init_ln("mem.final")
        for i in range(cfg.n_layers_dec):
            p = f"dec.{i}"
            self._init_attn(rng, f"{p}.self")
            self._init_ln(f"{p}.ln1")
            self._init_attn(rng, f"{p}.cross_x")
            self._init_ln(f"{p}.ln2")
            self._init_attn(rng, f"{p}.cross_m")
            self._init_ln(f"{p}.ln3")
            self._init_ffn(rng, p)
            self._init_ln(f"{p}.ln4")
        if cfg.n_layers_dec:
            self._init_ln("dec.final")
        self._param("copy.w", self._xavier(rng, 3 * d, 1))
        self._param("copy.b", np.zeros((1,)))
        self._pos = nm.sinusoidal_positions(cfg.max_len, d)

    # -- parameter plumbing --------------------------------------------------

    def _param(self, name: str, data: np.ndarray) -> Parameter:
        if name in self.params:
            raise ModelError(f"parameter {name} registered twice")
        p = Parameter(name, data)
        self.params[name] = p
        return p

    @staticmethod
    def _xavier(rng, fan_in: int, fan_out: int) -> np.ndarray:
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    def _init_attn(self, rng, prefix: str) -> None:
        d = self.cfg.d_model
        for w in ("wq", "wk", "wv", "wo"):
            self._param(f"{prefix}.{w}", self._xavier(rng, d, d))
        for b in ("bq", "bk", "bv", "bo"):
            self._param(f"{prefix}.{b}", np.zeros((d,)))

    def _init_ffn(self, rng, prefix: str) -> None:
        d, f = self.cfg.d_model, self.cfg.d_ffn
        self._param(f"{prefix}.ffn.w1", self._xavier(rng, d, f))
        self._param(f"{prefix}.ffn.b1", np.zeros((f,)))
        self._param(f"{prefix}.ffn.w2", self._xavier(rng, f, d))
        self._param(f"{prefix}.ffn.b2", np.zeros((d,)))

    def _init_ln(self, prefix: str) -> None:
        d = self.cfg.d_model
        self._param(f"{prefix}.g", np.ones((d,)))
        self._param(f"{prefix}.b", np.zeros((d,)))

    def _init_encoder_layer(self, rng, prefix: str) -> None:
        self._init_attn(rng, f"{prefix}.attn")
        self._init_ln(f"{prefix}.ln1")
        self._init_ffn(rng, prefix)
        self._init_ln(f"{prefix}.ln2")

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.tensor.zero_grad()

    def set_train(self, flag: bool) -> None:
        self.train_mode = flag

    def t(self, name: str) -> Tensor:
        return self.params[name].tensor

    # -- building blocks ------------------------------------------------------

    def _drop(self, x: Tensor) -> Tensor:
        return nm.dropout(x, self.cfg.dropout, self._drop_rng, self.train_mode)

    def _ln(self, x: Tensor, prefix: str) -> Tensor:
        return nm.layer_norm(x) * self.t(f"{prefix}.g") + self.t(f"{prefix}.b")

    def _mha(self, q_in: Tensor, kv_in: Tensor, prefix: str, allow: np.ndarray | None):
        """Multi-head attention; handles [t,d] and batched [B,t,d] inputs.

        allow is a boolean [tq,tk] (or broadcastable batched) matrix;
        None means everything attends to everything.
        """
        cfg = self.cfg
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        q = q_in @ self.t(f"{prefix}.wq") + self.t(f"{prefix}.bq")
        k = kv_in @ self.t(f"{prefix}.wk") + self.t(f"{prefix}.bk")
        v = kv_in @ self.t(f"{prefix}.wv") + self.t(f"{prefix}.bv")
        batched = q.data.ndim == 3
        tq, tk = q.shape[-2], k.shape[-2]
        if batched:
            b = q.shape[0]
            qh = nm.transpose(nm.reshape(q, (b, tq, h, dh)), (0, 2, 1, 3))
            kh = nm.transpose(nm.reshape(k, (b, tk, h, dh)), (0, 2, 1, 3))
            vh = nm.transpose(nm.reshape(v, (b, tk, h, dh)), (0, 2, 1, 3))
            scores = nm.mul_scalar(qh @ nm.transpose(kh, (0, 1, 3, 2)), dh**-0.5)
            mask = np.ones((b, 1, tq, tk), dtype=bool) if allow is None else allow
        else:
            qh = nm.transpose(nm.reshape(q, (tq, h, dh)), (1, 0, 2))
            kh = nm.transpose(nm.reshape(k, (tk, h, dh)), (1, 0, 2))
            vh = nm.transpose(nm.reshape(v, (tk, h, dh)), (1, 0, 2))
            scores = nm.mul_scalar(qh @ nm.transpose(kh, (0, 2, 1)), dh**-0.5)
            mask = np.ones((tq, tk), dtype=bool) if allow is None else allow
        attn = nm.masked_softmax(scores, mask)
        ctx = attn @ vh
        if batched:
            merged = nm.reshape(nm.transpose(ctx, (0, 2, 1, 3)), (b, tq, d))
        else:
            merged = nm.reshape(nm.transpose(ctx, (1, 0, 2)), (tq, d))
        out = merged @ self.t(f"{prefix}.wo") + self.t(f"{prefix}.bo")
        return out, attn

    def _ffn(self, x: Tensor, prefix: str) -> Tensor:
        z = nm.relu(x @ self.t(f"{prefix}.ffn.w1") + self.t(f"{prefix}.ffn.b1"))
        return z @ self.t(f"{prefix}.ffn.w2") + self.t(f"{prefix}.ffn.b2")

    def _encoder_layer(self, x: Tensor, prefix: str, allow: np.ndarray | None) -> Tensor:
        normed = self._ln(x, f"{prefix}.ln1")
        a, _ = self._mha(normed, normed, f"{prefix}.attn", allow)
        x = x + self._drop(a)
        f = self._ffn(self._ln(x, f"{prefix}.ln2"), prefix)
        return x + self._drop(f)

    def _embed(self, ids: list[int], positions: np.ndarray) -> Tensor:
        e = nm.gather_rows(self.t("embed.E"), np.asarray(ids, dtype=np.intp))
        scaled = nm.mul_scalar(e, self.cfg.d_model**0.5)
        return self._drop(scaled + Tensor(positions))

    # -- encoders --------------------------------------------------------------

    def encode_source(self, src: TokenSeq) -> Tensor:
        """Dense representation of [<bos>] + src, shape [(s+1), d]."""
        ids = [BOS_ID, *src]
        if len(ids) > self.cfg.max_len:
            raise ModelError(f"source length {len(ids)} exceeds max_len {self.cfg.max_len}")
        x = self._embed(ids, self._pos[: len(ids)])
        for i in range(self.cfg.n_layers_src):
            x = self._encoder_layer(x, f"src.{i}", None)
        if self.cfg.n_layers_src:
            x = self._ln(x, "src.final")
        return x

    def encode_source_batch(self, srcs: list[TokenSeq]) -> tuple[Tensor, np.ndarray]:
        """Padded batch encoding; pad positions are masked out of attention.

        Returns ([B, S, d], bool key mask [B, S]) where S is the padded
        width including <bos>.
        """
        if not srcs:
            raise ModelError("empty batch")
        width = max(len(s) for s in srcs) + 1
        if width > self.cfg.max_len:
            raise ModelError(f"batch width {width} exceeds max_len {self.cfg.max_len}")
        b = len(srcs)
        ids = np.full((b, width), PAD_ID, dtype=np.intp)
        keep = np.zeros((b, width), dtype=bool)
        for r, s in enumerate(srcs):
            row = [BOS_ID, *s]
            ids[r, : len(row)] = row
            keep[r, : len(row)] = True
        e = nm.gather_rows(self.t("embed.E"), ids.reshape(-1))
        e = nm.reshape(e, (b, width, self.cfg.d_model))
        x = nm.mul_scalar(e, self.cfg.d_model**0.5) + Tensor(self._pos[:width][None, :, :])
        # key-side mask only: pad rows produce garbage we drop, but real
        # rows never attend to pad keys, which is what isolation needs
        allow = np.broadcast_to(keep[:, None, None, :], (b, 1, width, width))
        for i in range(self.cfg.n_layers_src):
            x = self._encoder_layer(x, f"src.{i}", allow)
        if self.cfg.n_layers_src:
            x = self._ln(x, "src.final")
        return x, keep

    def encode_memories(self, memories: list[TokenSeq]) -> MemoryEncoding:
        """Encode [<mem>] + y per memory under the group attention mask.

        With hga disabled the concatenation is treated as one long
        sequence: all-allowed attention and global positions; the <mem>
        tokens stay so the contrastive loss can still read super rows.
        """
        if not memories:
            raise ModelError("encode_memories needs at least one memory; fall back to the no-TM path")
        for m, seq in enumerate(memories):
            if len(seq) == 0:
                raise ModelError(f"memory {m} is empty")
        lay = make_layout([len(s) for s in memories])
        if lay.total_len > self.cfg.max_len:
            raise ModelError(f"memory sequence length {lay.total_len} exceeds max_len {self.cfg.max_len}")
        ids: list[int] = []
        for seq in memories:
            ids.append(MEM_ID)
            ids.extend(seq)
        if self.cfg.hga:
            allow = build_hga_mask(lay)
            positions = np.concatenate([self._pos[: n + 1] for n in lay.memory_lengths], axis=0)
        else:
            allow = np.ones((lay.total_len, lay.total_len), dtype=bool)
            positions = self._pos[: lay.total_len]
        x = self._embed(ids, positions)
        for i in range(self.cfg.n_layers_mem):
            x = self._encoder_layer(x, f"mem.{i}", allow)
        if self.cfg.n_layers_mem:
            x = self._ln(x, "mem.final")
        supers = nm.gather_rows(x, np.asarray(lay.super_positions, dtype=np.intp))
        return MemoryEncoding(z_m=x, super_reps=supers, token_ids=ids, layout=lay, allow=allow)

    def encode(self, src: TokenSeq, memories: list[TokenSeq]) -> EncoderOutput:
        mem = self.encode_memories(memories) if memories else None
        return EncoderOutput(z_x=self.encode_source(src), memory=mem)

    def encode_target_for_mtcl(self, tgt: TokenSeq) -> Tensor:
        """Target-sentence representation: the super row of the memory
        encoder run on [<mem>] + y as a singleton memory."""
        if len(tgt) == 0:
            raise ModelError("empty target sentence")
        enc = self.encode_memories([tgt])
        return nm.reshape(enc.super_reps, (self.cfg.d_model,))

    # -- decoder ---------------------------------------------------------------

    def decode(
        self,
        prefix: TokenSeq,
        z_x: Tensor,
        memory: MemoryEncoding | None,
        mem_allow_cols: np.ndarray | None = None,
    ) -> DecoderState:
        """Run the decoder stack over a <bos>-led prefix.

        Memory cross-attention sees every memory position (super tokens
        included) unless mem_allow_cols restricts the columns. Without
        memories the second cross-attention is skipped entirely.
        """
        if len(prefix) == 0 or prefix[0] != BOS_ID:
            raise ModelError("decoder prefix must begin with <bos>")
        t = len(prefix)
        if t > self.cfg.max_len:
            raise ModelError(f"prefix length {t} exceeds max_len {self.cfg.max_len}")
        causal = np.tril(np.ones((t, t), dtype=bool))
        state = DecoderState()
        x = self._embed(list(prefix), self._pos[:t])
        for i in range(self.cfg.n_layers_dec):
            p = f"dec.{i}"
            normed = self._ln(x, f"{p}.ln1")
            a, _ = self._mha(normed, normed, f"{p}.self", causal)
            x = x + self._drop(a)
            state.h_self.append(x)
            a, _ = self._mha(self._ln(x, f"{p}.ln2"), z_x, f"{p}.cross_x", None)
            x = x + self._drop(a)
            state.h_src.append(x)
            if memory is not None:
                cols = mem_allow_cols if mem_allow_cols is not None else None
                a, attn = self._mha(self._ln(x, f"{p}.ln3"), memory.z_m, f"{p}.cross_m", cols)
                x = x + self._drop(a)
                state.alpha = attn
            state.h_mem.append(x)
            f = self._ffn(self._ln(x, f"{p}.ln4"), p)
            x = x + self._drop(f)
        if self.cfg.n_layers_dec:
            x = self._ln(x, "dec.final")
        state.hidden = x
        return state

    # -- output distribution -----------------------------------------------------

    def _vocab_softmax(self, hidden: Tensor) -> Tensor:
        if self.cfg.tie_embeddings:
            logits = hidden @ nm.transpose(self.t("embed.E"), (1, 0))
        else:
            logits = hidden @ self.t("out.W")
        return nm.masked_softmax(logits, np.ones(logits.shape, dtype=bool))

    def output_distribution_steps(
        self,
        state: DecoderState,
        memory: MemoryEncoding | None,
        prefix: TokenSeq,
        p_copy_override: float | None = None,
    ) -> Tensor:
        """Mixture distribution for every decoding step, shape [t, V].

        p_copy gates between the vocabulary softmax and copying memory
        tokens weighted by the head-averaged attention of the last
        decoder layer. p_copy_override is a diagnostic hook that fixes
        the gate to a constant.
        """
        p_vocab = self._vocab_softmax(state.hidden)
        if memory is None:
            return p_vocab
        heads, t, L = state.alpha.shape
        alpha_avg = nm.mean(state.alpha, axis=0)  # [t, L]
        sums = alpha_avg.data.sum(axis=-1)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ModelError(f"memory attention rows must sum to 1, worst {sums}")
        context = alpha_avg @ memory.z_m  # [t, d]
        prev = nm.gather_rows(self.t("embed.E"), np.asarray(prefix, dtype=np.intp))
        feats = nm.concat([state.hidden, prev, context], axis=1)
        if p_copy_override is None:
            p_copy = nm.sigmoid(feats @ self.t("copy.w") + self.t("copy.b"))  # [t, 1]
        else:
            p_copy = Tensor(np.full((t, 1), float(p_copy_override)))
        scatter = np.zeros((L, self.cfg.vocab_size))
        scatter[np.arange(L), np.asarray(memory.token_ids)] = 1.0
        p_copy_dist = alpha_avg @ Tensor(scatter)  # [t, V]
        one = Tensor(np.ones((t, 1)))
        return (one - p_copy) * p_vocab + p_copy * p_copy_dist

    def forward_probs(
        self, src: TokenSeq, memories: list[TokenSeq], tgt: TokenSeq
    ) -> tuple[Tensor, MemoryEncoding | None]:
        """Teacher-forced step distributions for one example.

        Decoder input is [<bos>] + tgt; row i of the result is the
        distribution over token i of tgt + [<eos>].
        """
        enc = self.encode(src, memories)
        prefix = (BOS_ID, *tgt)
        state = self.decode(prefix, enc.z_x, enc.memory)
        probs = self.output_distribution_steps(state, enc.memory, prefix)
        return probs, enc.memory


def output_distribution(
    h_t: Tensor,
    alpha_t: Tensor,
    z_m: Tensor,
    prev_token_embedding: Tensor,
    memory_token_ids: list[int],
    copy_w: Tensor,
    copy_b: Tensor,
    vocab_softmax_row: Tensor,
    p_copy_override: float | None = None,
) -> Tensor:
    """Single-step copy mixture, the per-step form of the model output.

    alpha_t must already be head-averaged and normalized within 1e-6.
    """
    s = float(alpha_t.data.sum())
    if abs(s - 1.0) > 1e-6:
        raise ModelError(f"alpha must sum to 1, got {s}")
    L = alpha_t.shape[0]
    v = vocab_softmax_row.shape[-1]
    context = nm.reshape(alpha_t, (1, L)) @ z_m  # [1, d]
    feats = nm.concat([nm.reshape(h_t, (1, -1)), nm.reshape(prev_token_embedding, (1, -1)), context], axis=1)
    if p_copy_override is None:
        p_copy = nm.sigmoid(feats @ copy_w + copy_b)
    else:
        p_copy = Tensor(np.full((1, 1), float(p_copy_override)))
    scatter = np.zeros((L, v))
    scatter[np.arange(L), np.asarray(memory_token_ids)] = 1.0
    copy_dist = nm.reshape(alpha_t, (1, L)) @ Tensor(scatter)
    one = Tensor(np.ones((1, 1)))
    mixed = (one - p_copy) * nm.reshape(vocab_softmax_row, (1, v)) + p_copy * copy_dist
    return nm.reshape(mixed, (v,))


# ---------------------------------------------------------------------------
# losses


def ce_loss(probs: Tensor, targets: list[int], epsilon: float, pad_id: int = PAD_ID) -> Tensor:
    """Label-smoothed cross entropy, token-mean, <pad> targets masked out.

    The smoothed reference puts 1-epsilon on the target and spreads
    epsilon uniformly over the remaining non-pad vocabulary.
    """
    t, v = probs.shape
    if len(targets) != t:
        raise ModelError(f"{len(targets)} targets for {t} distribution rows")
    row_sums = probs.data.sum(axis=-1)
    if np.abs(row_sums - 1.0).max() > 1e-6:
        raise ModelError("distribution rows must sum to 1")
    tgt = np.asarray(targets, dtype=np.intp)
    live_rows = (tgt != pad_id).astype(np.float64)
    n_live = live_rows.sum()
    if n_live == 0:
        raise ModelError("no non-pad targets")
    v_eff = v - 1
    logp = nm.log(probs)
    picked = nm.take_per_row(logp, tgt)  # [t]
    col_mask = np.ones((v,))
    col_mask[pad_id] = 0.0
    total = nm.sum_(logp * Tensor(col_mask), axis=1)  # [t]
    off_target = total - picked
    if epsilon > 0.0 and v_eff > 1:
        per_row = nm.mul_scalar(picked, -(1.0 - epsilon)) - nm.mul_scalar(off_target, epsilon / (v_eff - 1))
    else:
        per_row = nm.mul_scalar(picked, -1.0)
    masked = per_row * Tensor(live_rows)
    return nm.mul_scalar(nm.sum_(masked), 1.0 / n_live)


def mtcl_loss(super_reps: Tensor, target_rep: Tensor, tau: float) -> Tensor:
    """Contrastive pull of each memory representation toward the target.

    Softmax over cosine similarities scaled by 1/tau; the summed negative
    log-likelihood is bounded below by |M| ln |M|, attained when all
    cosines are equal. Defined as 0 for a single memory.
    """
    if tau <= 0:
        raise ModelError(f"tau must be positive, got {tau}")
    m = super_reps.shape[0]
    if m < 2:
        return Tensor(0.0)
    ones = Tensor(np.ones((m, 1)))
    target_mat = ones @ nm.reshape(target_rep, (1, -1))  # [m, d]
    cos = nm.cosine_rows(super_reps, target_mat)  # [m]
    scaled = nm.mul_scalar(cos, 1.0 / tau)
    p = nm.masked_softmax(nm.reshape(scaled, (1, m)), np.ones((1, m), dtype=bool))
    return nm.mul_scalar(nm.sum_(nm.log(p)), -1.0)


def joint_loss(ce: Tensor, mtcl: Tensor, lam: float, tau: float) -> LossBreakdown:
    """joint = ce + lam * mtcl, exactly."""
    if lam < 0:
        raise ModelError(f"lambda must be >= 0, got {lam}")
    joint = ce + nm.mul_scalar(mtcl, lam)
    return LossBreakdown(ce=ce, mtcl=mtcl, joint=joint, lam=lam, tau=tau)

"""Two-branch bidirectional decoder, its training loss, and entropy-based combination.

Both branches read their own token context: the left-to-right branch sees
``BOS, c1, c2, ...`` and the right-to-left branch sees ``BOS, F?, yn, ...``.
Inside a fused block the right-to-left output is time-reversed and added to
the left-to-right output; the sum feeds the next block (reversed again for
the right-to-left branch). Reversal always spans the current context length,
so a prediction at step i only ever depends on the first i+1 tokens of each
branch. Training reproduces that exactly by expanding every target position
into its own prefix instance.
"""
from __future__ import annotations

import enum
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .encoder import EncoderMemory, MultiHeadAttention, causal_mask, positional_encoding
from .errors import ConfigError, ContractError, ShapeError
from .lexicon import BOS, EOS, PAD, PhonemeInventory
from .nn import Dropout, Embedding, FeedForward, LayerNorm, Linear, Module, RngStream
from .numerics import Tensor


class Mode(str, enum.Enum):
    SBL_ALL = "SBL_ALL"
    SBL_FIRST = "SBL_FIRST"
    UNIDIR_L2R = "UNIDIR_L2R"
    SEPARATE_BIDIR = "SEPARATE_BIDIR"


@dataclass(frozen=True)
class SblDecoderConfig:
    n_blocks: int = 2
    n_heads: int = 4
    d_model: int = 64
    d_k: int = 16
    d_v: int = 16
    d_ff: int = 128
    dropout: float = 0.1
    mode: Mode = Mode.SBL_ALL
    flag_enabled: bool = False
    lambda_l2r: float = 0.5
    lambda_r2l: float = 0.5
    gamma: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        for name in ("n_blocks", "n_heads", "d_model", "d_k", "d_v", "d_ff"):
            if getattr(self, name) < 1:
                raise ConfigError(f"decoder {name} must be >= 1")
        if self.lambda_l2r < 0 or self.lambda_r2l < 0:
            raise ConfigError("loss weights must be non-negative")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError(f"teacher forcing rate must lie in [0, 1], got {self.gamma}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def bidirectional(self) -> bool:
        return self.mode is not Mode.UNIDIR_L2R

    @property
    def any_fusion(self) -> bool:
        return self.mode in (Mode.SBL_ALL, Mode.SBL_FIRST)

    def fuses(self, block: int) -> bool:
        if self.mode is Mode.SBL_ALL:
            return True
        return self.mode is Mode.SBL_FIRST and block == 0


@dataclass
class SblBlockOutput:
    branch_l2r: Tensor
    branch_r2l: Tensor | None
    fused: Tensor | None


class BranchBlock(Module):
    """Causal self-attention, attention over encoder memory, feed-forward; post-norm."""

    def __init__(self, cfg: SblDecoderConfig, rng: np.random.Generator, stream: RngStream):
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.mem_attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, cfg.d_k, cfg.d_v, rng)
        self.norm2 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.d_ff, rng)
        self.norm3 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout, stream)

    def __call__(self, x: Tensor, memory: EncoderMemory) -> Tensor:
        steps = x.shape[1]
        x = self.norm1(x + self.drop(self.self_attn(x, x, x, causal_mask(steps))))
        mem = memory.states
        x = self.norm2(x + self.drop(self.mem_attn(x, mem, mem, memory.mask[:, None, :])))
        return self.norm3(x + self.drop(self.ffn(x)))


class SblDecoder(Module):
    def __init__(self, cfg: SblDecoderConfig, vocab_size: int, rng: np.random.Generator, stream: RngStream):
        self.cfg = cfg
        self.vocab_size = vocab_size
        self.embed_l2r = Embedding(vocab_size, cfg.d_model, rng)
        self.blocks_l2r = [BranchBlock(cfg, rng, stream) for _ in range(cfg.n_blocks)]
        self.head_l2r = Linear(cfg.d_model, vocab_size, rng)
        if cfg.bidirectional:
            self.embed_r2l = Embedding(vocab_size, cfg.d_model, rng)
            self.blocks_r2l = [BranchBlock(cfg, rng, stream) for _ in range(cfg.n_blocks)]
            self.head_r2l = Linear(cfg.d_model, vocab_size, rng)
        self.drop = Dropout(cfg.dropout, stream)

    def _embed(self, embedding: Embedding, ctx: np.ndarray) -> Tensor:
        steps = ctx.shape[1]
        x = nx.scale(embedding(ctx), math.sqrt(self.cfg.d_model)) + positional_encoding(steps, self.cfg.d_model)
        return self.drop(x)

    def _block(self, k: int, x_l2r: Tensor, x_r2l: Tensor | None, memory, lengths) -> SblBlockOutput:
        y_l2r = self.blocks_l2r[k](x_l2r, memory)
        y_r2l = self.blocks_r2l[k](x_r2l, memory) if x_r2l is not None else None
        fused = None
        if self.cfg.fuses(k):
            fused = y_l2r + nx.reverse_time(y_r2l, lengths)
        return SblBlockOutput(y_l2r, y_r2l, fused)

    def first_block_forward(
        self, ctx_l2r: np.ndarray, ctx_r2l: np.ndarray | None, memory: EncoderMemory, lengths=None
    ) -> SblBlockOutput:
        """Embed both token contexts (plus positions) and run block 0."""
        ctx_l2r = np.atleast_2d(ctx_l2r)
        x_r2l = None
        if self.cfg.bidirectional:
            if ctx_r2l is None:
                raise ContractError("bidirectional decoding needs a right-to-left context")
            ctx_r2l = np.atleast_2d(ctx_r2l)
            if ctx_r2l.shape != ctx_l2r.shape:
                raise ContractError(f"context lengths differ: {ctx_l2r.shape} vs {ctx_r2l.shape}")
            x_r2l = self._embed(self.embed_r2l, ctx_r2l)
        return self._block(0, self._embed(self.embed_l2r, ctx_l2r), x_r2l, memory, lengths)

    def later_block_forward(self, k: int, prev: SblBlockOutput, memory: EncoderMemory, lengths=None) -> SblBlockOutput:
        """Block k >= 1. A fused input is fed forward to L2R and reversed for R2L."""
        if prev.fused is not None:
            if prev.fused.shape[-1] != self.cfg.d_model:
                raise ShapeError(f"fused input width {prev.fused.shape[-1]} != d_model {self.cfg.d_model}")
            x_l2r, x_r2l = prev.fused, nx.reverse_time(prev.fused, lengths)
        else:
            x_l2r, x_r2l = prev.branch_l2r, prev.branch_r2l
        return self._block(k, x_l2r, x_r2l, memory, lengths)

    def run_blocks(self, ctx_l2r, ctx_r2l, memory: EncoderMemory, lengths=None) -> list[SblBlockOutput]:
        outputs = [self.first_block_forward(ctx_l2r, ctx_r2l, memory, lengths)]
        for k in range(1, self.cfg.n_blocks):
            outputs.append(self.later_block_forward(k, outputs[-1], memory, lengths))
        return outputs

    def _heads(self, last: SblBlockOutput) -> tuple[Tensor, Tensor | None]:
        # The last block's fusion is not used: each head reads its own branch.
        logits_l2r = self.head_l2r(last.branch_l2r)
        logits_r2l = self.head_r2l(last.branch_r2l) if last.branch_r2l is not None else None
        return logits_l2r, logits_r2l

    def forward(self, in_l2r: np.ndarray, in_r2l: np.ndarray | None, memory: EncoderMemory):
        """Teacher-forced logits ``(N, L, V)`` for both heads (R2L in its own order).

        ``in_*`` are shifted contexts starting with BOS. When blocks fuse, each
        target position i becomes a prefix instance of length i+1 so the
        reversal spans exactly the context that exists at that decoding step.
        """
        in_l2r = np.asarray(in_l2r, dtype=np.int64)
        n, steps = in_l2r.shape
        if memory.states.shape[0] != n:
            raise ShapeError(f"batch of {n} contexts vs memory batch {memory.states.shape[0]}")
        if not self.cfg.any_fusion:
            last = self.run_blocks(in_l2r, in_r2l, memory)[-1]
            return self._heads(last)

        if self.cfg.n_blocks == 1:
            return self._heads(self.run_blocks(in_l2r, in_r2l, memory)[-1])
        inst = np.repeat(np.arange(n), steps)
        pos = np.tile(np.arange(steps), n)
        lengths = pos + 1
        # Block 0 sees only token contexts, and causal attention makes each
        # branch output independent of the prefix cut, so it runs once on the
        # full batch; the fused prefix instances are gathered from it.
        first = self.first_block_forward(in_l2r, in_r2l, memory)
        rev = nx.reversal_index(steps, lengths)
        fused = nx.take(first.branch_l2r, inst) + nx.take(first.branch_r2l, (inst[:, None], rev))
        prev = SblBlockOutput(None, None, fused)
        expanded = EncoderMemory(nx.take(memory.states, inst), memory.mask[inst])
        for k in range(1, self.cfg.n_blocks):
            prev = self.later_block_forward(k, prev, expanded, lengths)
        last = prev
        rows = np.arange(n * steps)
        h_l2r = nx.reshape(nx.take(last.branch_l2r, (rows, pos)), (n, steps, self.cfg.d_model))
        h_r2l = nx.reshape(nx.take(last.branch_r2l, (rows, pos)), (n, steps, self.cfg.d_model))
        return self._heads(SblBlockOutput(h_l2r, h_r2l, None))

    def next_token_logits(self, ctx_l2r, ctx_r2l, memory: EncoderMemory):
        """Logits for the token after the current (equal-length) contexts."""
        last = self.run_blocks(ctx_l2r, ctx_r2l, memory)[-1]
        logits_l2r, logits_r2l = self._heads(last)
        pick = (slice(None), -1)
        return logits_l2r.data[pick], None if logits_r2l is None else logits_r2l.data[pick]


# ---------------------------------------------------------------------------
# training pieces


def shift_right(targets: np.ndarray) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    ctx = np.empty_like(targets)
    ctx[:, 0] = BOS
    ctx[:, 1:] = targets[:, :-1]
    return ctx


def teacher_forcing_context(gt: np.ndarray, prev_pred: np.ndarray, gamma: float, rng: np.random.Generator) -> np.ndarray:
    """Per-position choice: ground truth with probability gamma, else the prediction."""
    gt = np.asarray(gt)
    prev_pred = np.asarray(prev_pred)
    if gt.shape != prev_pred.shape:
        raise ContractError(f"ground truth {gt.shape} and predictions {prev_pred.shape} differ")
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"teacher forcing rate must lie in [0, 1], got {gamma}")
    use_gt = rng.random(gt.shape) < gamma
    return np.where(use_gt, gt, prev_pred)


def mixed_contexts(decoder: SblDecoder, tgt_l2r, tgt_r2l, memory: EncoderMemory, gamma: float, rng):
    """Decoder inputs for one training step under probabilistic teacher forcing.

    A gradient-free teacher-forced pass supplies the model's own predictions;
    each non-PAD target position is then replaced by that prediction with
    probability 1 - gamma before shifting into the context.
    """
    tgt_l2r = np.asarray(tgt_l2r, dtype=np.int64)
    in_l2r = shift_right(tgt_l2r)
    in_r2l = shift_right(tgt_r2l) if tgt_r2l is not None else None
    if gamma >= 1.0:
        return in_l2r, in_r2l
    was_training = decoder.training
    decoder.eval()
    with nx.no_grad():
        logits_l2r, logits_r2l = decoder.forward(in_l2r, in_r2l, memory)
    decoder.train(was_training)

    def mix(tgt, logits):
        tgt = np.asarray(tgt, dtype=np.int64)
        pred = logits.data.argmax(axis=-1)
        mixed = np.where(tgt != PAD, teacher_forcing_context(tgt, pred, gamma, rng), tgt)
        return shift_right(mixed)

    return mix(tgt_l2r, logits_l2r), None if tgt_r2l is None else mix(tgt_r2l, logits_r2l)


def bidirectional_loss(logits_l2r, logits_r2l, tgt_l2r, tgt_r2l, lambda_l2r=0.5, lambda_r2l=0.5) -> Tensor:
    """``lambda_l2r * CE(L2R) + lambda_r2l * CE(R2L)``, each averaged over non-PAD positions."""
    tgt_l2r = np.asarray(tgt_l2r, dtype=np.int64)
    total = nx.scale(nx.cross_entropy(logits_l2r, tgt_l2r, tgt_l2r != PAD), lambda_l2r)
    if logits_r2l is not None and lambda_r2l != 0.0:
        tgt_r2l = np.asarray(tgt_r2l, dtype=np.int64)
        total = total + nx.scale(nx.cross_entropy(logits_r2l, tgt_r2l, tgt_r2l != PAD), lambda_r2l)
    return total


# ---------------------------------------------------------------------------
# inference and combination


def entropy(dist) -> float:
    """Shannon entropy in nats, with 0 ln 0 taken as 0."""
    p = np.asarray(dist, dtype=np.float64)
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise ContractError("entropy needs a probability vector")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def _entropies(dists: np.ndarray) -> np.ndarray:
    return np.array([entropy(d) for d in dists])


@dataclass
class BidiPrediction:
    """Per-position distributions of one sample, both aligned to left-to-right order."""

    dist_l2r: np.ndarray
    dist_r2l: np.ndarray | None = None
    flag_l2r: np.ndarray | None = None
    flag_r2l: np.ndarray | None = None
    trace: list[tuple[str, int, int, float]] = field(default_factory=list)

    def __post_init__(self):
        self.dist_l2r = np.asarray(self.dist_l2r, dtype=np.float64)
        if self.dist_r2l is not None:
            self.dist_r2l = np.asarray(self.dist_r2l, dtype=np.float64)
        for d in (self.dist_l2r, self.dist_r2l):
            if d is not None and d.ndim != 2:
                raise ShapeError(f"branch distributions must be (steps, vocab), got {d.shape}")

    @property
    def tokens_l2r(self) -> list[int]:
        return [int(t) for t in self.dist_l2r.argmax(axis=-1)] if len(self.dist_l2r) else []

    @property
    def tokens_r2l(self) -> list[int]:
        if self.dist_r2l is None:
            return []
        return [int(t) for t in self.dist_r2l.argmax(axis=-1)] if len(self.dist_r2l) else []

    @property
    def entropy_l2r(self) -> np.ndarray:
        return _entropies(self.dist_l2r)

    @property
    def entropy_r2l(self) -> np.ndarray:
        return _entropies(self.dist_r2l) if self.dist_r2l is not None else np.zeros(0)

    @property
    def has_flags(self) -> bool:
        return self.flag_l2r is not None and self.flag_r2l is not None

    @property
    def combined(self) -> list[int]:
        if self.dist_r2l is None:
            return self.tokens_l2r
        return combine_with_flag(self) if self.has_flags else combine_bidirectional(self)


def combine_bidirectional(pred: BidiPrediction) -> list[int]:
    """Per position keep the branch whose distribution has strictly lower entropy (ties: L2R).

    Where only one branch produced a position (unequal hypothesis lengths)
    that branch is used.
    """
    if pred.dist_r2l is None:
        raise ContractError("combination needs both branch distributions")
    if len(pred.dist_l2r) and len(pred.dist_r2l) and pred.dist_l2r.shape[1] != pred.dist_r2l.shape[1]:
        raise ContractError(f"branch vocabularies differ: {pred.dist_l2r.shape[1]} vs {pred.dist_r2l.shape[1]}")
    tok_l, tok_r = pred.tokens_l2r, pred.tokens_r2l
    h_l, h_r = pred.entropy_l2r, pred.entropy_r2l
    out = []
    for i in range(max(len(tok_l), len(tok_r))):
        if i >= len(tok_r):
            out.append(tok_l[i])
        elif i >= len(tok_l):
            out.append(tok_r[i])
        else:
            out.append(tok_r[i] if h_r[i] < h_l[i] else tok_l[i])
    return out


def combine_with_flag(pred: BidiPrediction) -> list[int]:
    """Entropy combination when both branches agree on the language flag.

    On disagreement the whole hypothesis comes from the branch whose flag
    distribution has the lower entropy (ties: L2R).
    """
    if not pred.has_flags:
        raise ContractError("flag arbitration needs a flag distribution from both branches")
    flag_l = int(np.argmax(pred.flag_l2r))
    flag_r = int(np.argmax(pred.flag_r2l))
    if flag_l == flag_r:
        return combine_bidirectional(pred)
    if entropy(pred.flag_r2l) < entropy(pred.flag_l2r):
        return pred.tokens_r2l
    return pred.tokens_l2r


def combined_flag(pred: BidiPrediction) -> int | None:
    """The language flag the combined hypothesis commits to."""
    if not pred.has_flags:
        return None if pred.flag_l2r is None else int(np.argmax(pred.flag_l2r))
    flag_l = int(np.argmax(pred.flag_l2r))
    flag_r = int(np.argmax(pred.flag_r2l))
    if flag_l != flag_r and entropy(pred.flag_r2l) < entropy(pred.flag_l2r):
        return flag_r
    return flag_l


def _restricted_softmax(logits: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    masked = np.where(allowed[None, :], logits, -np.inf)
    masked = masked - masked.max(axis=-1, keepdims=True)
    e = np.where(allowed[None, :], np.exp(masked), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_synchronous_decode(
    decoder: SblDecoder, memory: EncoderMemory, inventory: PhonemeInventory, max_len: int
) -> list[BidiPrediction]:
    """Greedy decoding of both branches in lock-step, one shared forward per step.

    Each branch stops at its own EOS and afterwards feeds PAD so the two
    contexts stay the same length. Distributions are renormalised over the
    tokens that are legal at that step (flags at the flag slot, phonemes or
    EOS elsewhere), so every recorded argmax is the emitted token.
    """
    if max_len < 2:
        raise ConfigError(f"max_len must be >= 2, got {max_len}")
    if decoder.vocab_size != inventory.vocab_size:
        raise ConfigError(f"decoder vocabulary {decoder.vocab_size} != inventory {inventory.vocab_size}")
    n = memory.states.shape[0]
    branches = ("l2r", "r2l") if decoder.cfg.bidirectional else ("l2r",)
    vocab = inventory.vocab_size
    payload_ok = np.zeros(vocab, dtype=bool)
    payload_ok[list(inventory.phoneme_ids)] = True
    payload_ok[EOS] = True
    flag_ok = np.zeros(vocab, dtype=bool)
    flag_ok[list(inventory.flag_ids.values())] = True

    ctx = {b: np.full((n, 1), BOS, dtype=np.int64) for b in branches}
    done = {b: np.zeros(n, dtype=bool) for b in branches}
    dists = {b: [[] for _ in range(n)] for b in branches}
    flags = {b: [None] * n for b in branches}
    traces: list[list[tuple[str, int, int, float]]] = [[] for _ in range(n)]

    was_training = decoder.training
    decoder.eval()
    with nx.no_grad():
        for step in range(max_len):
            logits_l2r, logits_r2l = decoder.next_token_logits(ctx["l2r"], ctx.get("r2l"), memory)
            step_logits = {"l2r": logits_l2r, "r2l": logits_r2l}
            flag_step = decoder.cfg.flag_enabled and step == 0
            for b in branches:
                probs = _restricted_softmax(step_logits[b], flag_ok if flag_step else payload_ok)
                tokens = probs.argmax(axis=-1)
                tokens[done[b]] = PAD
                for i in np.flatnonzero(~done[b]):
                    tok = int(tokens[i])
                    traces[i].append((b, step, tok, entropy(probs[i])))
                    if flag_step:
                        flags[b][i] = probs[i]
                    elif tok == EOS:
                        done[b][i] = True
                    else:
                        dists[b][i].append(probs[i])
                ctx[b] = np.concatenate([ctx[b], tokens[:, None]], axis=1)
            if all(done[b].all() for b in branches):
                break
    decoder.train(was_training)

    out = []
    empty = np.zeros((0, vocab))
    for i in range(n):
        dist_l2r = np.array(dists["l2r"][i]) if dists["l2r"][i] else empty
        dist_r2l = None
        if "r2l" in ctx:
            dist_r2l = np.array(dists["r2l"][i][::-1]) if dists["r2l"][i] else empty
        out.append(
            BidiPrediction(
                dist_l2r,
                dist_r2l,
                flag_l2r=flags["l2r"][i],
                flag_r2l=flags["r2l"][i] if "r2l" in ctx else None,
                trace=traces[i],
            )
        )
    return out


def write_hypotheses(path: str | Path, sample_ids: Sequence[str], preds: Sequence[BidiPrediction], inventory) -> None:
    """TSV dump: ``sample_id, branch, step, token, entropy`` per decoding step."""
    lines = []
    for sid, pred in zip(sample_ids, preds):
        for branch, step, tok, ent in pred.trace:
            lines.append(f"{sid}\t{branch}\t{step}\t{inventory.symbol(tok)}\t{ent:.6f}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

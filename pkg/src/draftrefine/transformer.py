"""Shared encoders, per-pass refinement decoders and decoding.

Every pass k owns a decoder that reads the code states H, the keyword
states P and the encoded previous draft R^{k-1}. The three encoders are
shared by all passes and by the evaluator.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import nn

from . import nncore as F
from .config import ModelConfig
from .corpus import BOS, EOS, PAD

ENCODER_PREFIXES = ("code_encoder.", "keyword_encoder.", "comment_encoder.")


@functools.lru_cache(maxsize=64)
def _pe_table(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=F.DTYPE).unsqueeze(1)
    rates = torch.pow(10000.0, -torch.arange(0, d, 2, dtype=F.DTYPE) / d)
    pe = torch.zeros(length, d, dtype=F.DTYPE)
    pe[:, 0::2] = torch.sin(pos * rates)
    pe[:, 1::2] = torch.cos(pos * rates)[:, : d // 2]
    return pe


def positional_encoding(length: int, d: int) -> torch.Tensor:
    """Sinusoidal encodings: sin on even dims, cos on odd dims."""
    return _pe_table(length, d)


def embed_with_position(ids: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
    n_vocab, d = embedding.shape
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= n_vocab):
        raise ValueError(f"token id out of range for vocabulary of {n_vocab}")
    return embedding[ids] + positional_encoding(ids.shape[-1], d)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, gen: torch.Generator, bias: bool = True):
        super().__init__()
        self.weight = nn.Parameter(F.xavier_uniform(d_in, d_out, gen))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=F.DTYPE)) if bias else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = F.matmul(x, self.weight)
        return y if self.bias is None else F.add(y, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, d: int):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d, dtype=F.DTYPE))
        self.bias = nn.Parameter(torch.zeros(d, dtype=F.DTYPE))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.layer_norm(x, self.gain, self.bias)


class Dropout(nn.Module):
    def __init__(self, rate: float, gen: torch.Generator):
        super().__init__()
        self.rate = rate
        self.gen = gen

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return F.dropout(x, self.rate, self.training, self.gen)


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, gen: torch.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.d_head = d // n_heads
        self.wq = Linear(d, d, gen)
        self.wk = Linear(d, d, gen)
        self.wv = Linear(d, d, gen)
        self.wo = Linear(d, d, gen)
        self.last_weights: torch.Tensor | None = None

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, n, _ = x.shape
        return x.reshape(b, n, self.n_heads, self.d_head).transpose(1, 2)

    def forward(
        self, query: torch.Tensor, memory: torch.Tensor, key_mask: torch.Tensor, causal: bool = False
    ) -> torch.Tensor:
        """Attend from ``query`` [B, Lq, d] over ``memory`` [B, Lk, d].

        ``key_mask`` [B, Lk] is true at real positions. A query row with no
        visible key yields a zero context vector.
        """
        b, lq, _ = query.shape
        lk = memory.shape[1]
        q, k, v = self._heads(self.wq(query)), self._heads(self.wk(memory)), self._heads(self.wv(memory))
        logits = F.scale(F.matmul(q, k.transpose(-1, -2)), 1.0 / math.sqrt(self.d_head))
        visible = key_mask[:, None, None, :].expand(b, 1, lq, lk)
        if causal:
            visible = visible & torch.ones(lq, lk, dtype=torch.bool).tril()
        any_visible = visible.any(dim=-1, keepdim=True)
        logits = logits.masked_fill(~visible, -math.inf).masked_fill(~any_visible, 0.0)
        weights = F.softmax(logits, axis=-1) * any_visible
        self.last_weights = weights.detach()
        ctx = F.matmul(weights, v).transpose(1, 2).reshape(b, lq, self.n_heads * self.d_head)
        return self.wo(ctx)


class FeedForward(nn.Module):
    def __init__(self, d: int, hidden: int, gen: torch.Generator):
        super().__init__()
        self.inner = Linear(d, hidden, gen)
        self.outer = Linear(hidden, d, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.outer(F.relu(self.inner(x)))


class EncoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.attn = MultiHeadAttention(cfg.d_model, cfg.n_heads, gen)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_hidden, gen)
        self.norm2 = LayerNorm(cfg.d_model)
        self.drop = Dropout(cfg.dropout_rate, gen)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        h = self.norm1(F.add(x, self.drop(self.attn(x, x, mask))))
        return self.norm2(F.add(h, self.drop(self.ffn(h))))


class Encoder(nn.Module):
    def __init__(self, vocab_size: int, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.embedding = nn.Parameter(F.embedding_normal(vocab_size, cfg.d_model, gen))
        self.blocks = nn.ModuleList(EncoderBlock(cfg, gen) for _ in range(cfg.n_blocks))
        self.drop = Dropout(cfg.dropout_rate, gen)

    def forward(self, ids: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        x = self.drop(embed_with_position(ids, self.embedding))
        for block in self.blocks:
            x = block(x, mask)
        return x


class DecoderBlock(nn.Module):
    """Causal self-attention, gated code/keyword attention, draft attention, FFN."""

    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        d = cfg.d_model
        self.self_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.norm1 = LayerNorm(d)
        self.code_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.keyword_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.gate = Linear(2 * d, 1, gen, bias=False)
        self.norm2 = LayerNorm(d)
        self.draft_attn = MultiHeadAttention(d, cfg.n_heads, gen)
        self.norm3 = LayerNorm(d)
        self.ffn = FeedForward(d, cfg.ffn_hidden, gen)
        self.norm4 = LayerNorm(d)
        self.drop = Dropout(cfg.dropout_rate, gen)
        self.last_gate: torch.Tensor | None = None

    def forward(self, x, tgt_mask, src: "SourceStates", draft: "DraftStates") -> torch.Tensor:
        s1 = self.norm1(F.add(x, self.drop(self.self_attn(x, x, tgt_mask, causal=True))))
        a = self.code_attn(s1, src.code, src.code_mask)
        b = self.keyword_attn(s1, src.keywords, src.keyword_mask)
        beta = F.sigmoid(self.gate(F.concat([a, b], axis=-1)))
        self.last_gate = beta.detach()
        blended = F.add(beta * a, (1.0 - beta) * b)
        s2 = self.norm2(F.add(s1, self.drop(blended)))
        s3 = self.norm3(F.add(s2, self.drop(self.draft_attn(s2, draft.states, draft.mask))))
        return self.norm4(F.add(s3, self.drop(self.ffn(s3))))


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig, gen: torch.Generator):
        super().__init__()
        self.embedding = nn.Parameter(F.embedding_normal(cfg.comment_vocab_size, cfg.d_model, gen))
        self.blocks = nn.ModuleList(DecoderBlock(cfg, gen) for _ in range(cfg.n_blocks))
        self.out = Linear(cfg.d_model, cfg.comment_vocab_size, gen)
        self.drop = Dropout(cfg.dropout_rate, gen)

    def forward(self, tgt_in, tgt_mask, src: "SourceStates", draft: "DraftStates") -> torch.Tensor:
        """Return pre-softmax logits [B, Lt, V]."""
        if draft is None:
            raise ValueError("decoder requires the encoded previous draft")
        s = self.drop(embed_with_position(tgt_in, self.embedding))
        for block in self.blocks:
            s = block(s, tgt_mask, src, draft)
        return self.out(s)


class EvaluatorHead(nn.Module):
    """Two-layer ReLU FFN applied to mean-pooled hidden states."""

    def __init__(self, d: int, gen: torch.Generator):
        super().__init__()
        self.inner = Linear(d, d, gen)
        self.outer = Linear(d, d, gen)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.outer(F.relu(self.inner(pooled)))


@dataclass
class SourceStates:
    code: torch.Tensor
    code_mask: torch.Tensor
    keywords: torch.Tensor
    keyword_mask: torch.Tensor

    def select(self, rows) -> "SourceStates":
        return SourceStates(self.code[rows], self.code_mask[rows], self.keywords[rows], self.keyword_mask[rows])

    def repeat(self, n: int) -> "SourceStates":
        """Tile a single-example state ``n`` times along the batch axis."""
        return SourceStates(
            self.code.expand(n, -1, -1),
            self.code_mask.expand(n, -1),
            self.keywords.expand(n, -1, -1),
            self.keyword_mask.expand(n, -1),
        )


@dataclass
class DraftStates:
    states: torch.Tensor
    mask: torch.Tensor

    def select(self, rows) -> "DraftStates":
        return DraftStates(self.states[rows], self.mask[rows])

    def repeat(self, n: int) -> "DraftStates":
        return DraftStates(self.states.expand(n, -1, -1), self.mask.expand(n, -1))


def pad_batch(seqs: Sequence[Sequence[int]], min_len: int = 1) -> tuple[torch.Tensor, torch.Tensor]:
    """Right-pad id lists into ``(ids [B, L], mask [B, L])``."""
    width = max([min_len] + [len(s) for s in seqs])
    ids = torch.full((len(seqs), width), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        if s:
            ids[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    mask = torch.zeros(len(seqs), width, dtype=torch.bool)
    for i, s in enumerate(seqs):
        mask[i, : len(s)] = True
    return ids, mask


class DeliberationModel(nn.Module):
    """Three shared encoders, ``k_max`` decoders and the evaluator head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.gen = torch.Generator().manual_seed(seed)
        self.code_encoder = Encoder(cfg.code_vocab_size, cfg, self.gen)
        self.keyword_encoder = Encoder(cfg.code_vocab_size, cfg, self.gen)
        self.comment_encoder = Encoder(cfg.comment_vocab_size, cfg, self.gen)
        self.decoders = nn.ModuleList(Decoder(cfg, self.gen) for _ in range(cfg.k_max))
        self.evaluator = EvaluatorHead(cfg.d_model, self.gen)
        # passes (1-based) whose training phase has completed
        self.trained_passes: set[int] = set()
        self.evaluator_trained = False
        self.optimizer_steps = 0

    # -- encoders ---------------------------------------------------------
    def encode_source(self, code_ids, code_mask, keyword_ids, keyword_mask) -> SourceStates:
        return SourceStates(
            self.code_encoder(code_ids, code_mask),
            code_mask,
            self.keyword_encoder(keyword_ids, keyword_mask),
            keyword_mask,
        )

    def encode_draft(self, draft_ids, draft_mask) -> DraftStates:
        return DraftStates(self.comment_encoder(draft_ids, draft_mask), draft_mask)

    # -- decoders ---------------------------------------------------------
    def decoder(self, k: int) -> Decoder:
        if not 1 <= k <= self.cfg.k_max:
            raise ValueError(f"pass index {k} outside 1..{self.cfg.k_max}")
        return self.decoders[k - 1]

    def logits(self, k: int, tgt_in, tgt_mask, src: SourceStates, draft: DraftStates) -> torch.Tensor:
        return self.decoder(k)(tgt_in, tgt_mask, src, draft)

    # -- evaluator --------------------------------------------------------
    def represent(self, hidden: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        from .evaluator import pool_and_project

        return pool_and_project(hidden, mask, self.evaluator)

    def code_vector(self, src: SourceStates) -> torch.Tensor:
        return self.represent(src.code, src.code_mask)

    def comment_vector(self, comment_ids, comment_mask) -> torch.Tensor:
        return self.represent(self.comment_encoder(comment_ids, comment_mask), comment_mask)

    # -- parameter groups -------------------------------------------------
    def encoder_param_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith(ENCODER_PREFIXES)]

    def decoder_param_names(self, k: int) -> list[str]:
        prefix = f"decoders.{k - 1}."
        return [n for n, _ in self.named_parameters() if n.startswith(prefix)]

    def evaluator_param_names(self) -> list[str]:
        return [n for n, _ in self.named_parameters() if n.startswith("evaluator.")]

    def trainable_names_for(self, phase: str, k: int | None = None) -> list[str]:
        """Parameters a training phase may update."""
        if phase == "step1_joint":
            return self.encoder_param_names() + self.decoder_param_names(1) + self.evaluator_param_names()
        if phase == "step1_sequential":
            return self.decoder_param_names(k)
        if phase == "step2_global":
            return [n for n, _ in self.named_parameters()]
        raise ValueError(f"unknown training phase {phase!r}")

    @property
    def fully_trained(self) -> bool:
        return self.trained_passes >= set(range(1, self.cfg.k_max + 1)) and self.evaluator_trained


# --------------------------------------------------------------------------
# decoding

StepFn = Callable[[torch.Tensor], torch.Tensor]


def greedy_search(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> list[int]:
    """Argmax decoding. ``step`` maps prefixes [n, t] to log-probs [n, V]."""
    seq = [bos]
    for _ in range(max_len):
        tok = int(torch.argmax(step(torch.tensor([seq]))[0]))
        if tok == eos:
            break
        seq.append(tok)
    return seq[1:]


def beam_search(
    step: StepFn, beam_size: int, max_len: int, bos: int = BOS, eos: int = EOS
) -> tuple[list[int], float]:
    """Beam search ranked at the end by mean per-token log-probability.

    Each step keeps the ``beam_size`` best expansions by cumulative
    log-probability; those ending in ``eos`` retire. Returns the tokens
    (without BOS/EOS) and the normalized score.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    alive: list[tuple[list[int], float]] = [([bos], 0.0)]
    finished: list[tuple[list[int], float]] = []
    for _ in range(max_len):
        logp = step(torch.tensor([seq for seq, _ in alive]))
        base = torch.tensor([s for _, s in alive], dtype=logp.dtype)
        cand = (base[:, None] + logp).reshape(-1)
        order = torch.sort(cand, descending=True, stable=True).indices[:beam_size]
        vocab = logp.shape[1]
        nxt = []
        for flat in order.tolist():
            row, tok = divmod(flat, vocab)
            hyp = (alive[row][0] + [tok], float(cand[flat]))
            (finished if tok == eos else nxt).append(hyp)
        # once enough hypotheses have finished, unfinished ones drop out
        alive = nxt if len(finished) < beam_size else []
        if not alive:
            break
    pool = finished + alive
    best, best_score = [], -math.inf
    for seq, total in pool:
        n_scored = len(seq) - 1
        norm = total / n_scored if n_scored else 0.0
        if norm > best_score:
            best, best_score = seq, norm
    body = best[1:]
    if body and body[-1] == eos:
        body = body[:-1]
    return body, best_score


def _decoding_log_probs(logits: torch.Tensor) -> torch.Tensor:
    # PAD and BOS are never valid outputs
    logits = logits.clone()
    logits[..., PAD] = -math.inf
    logits[..., BOS] = -math.inf
    return F.log_softmax(logits, axis=-1)


def _pass_step(model: DeliberationModel, k: int, src: SourceStates, draft: DraftStates) -> StepFn:
    def step(prefixes: torch.Tensor) -> torch.Tensor:
        n = prefixes.shape[0]
        mask = torch.ones_like(prefixes, dtype=torch.bool)
        logits = model.logits(k, prefixes, mask, src.repeat(n), draft.repeat(n))
        return _decoding_log_probs(logits[:, -1])

    return step


@torch.no_grad()
def greedy_decode(model: DeliberationModel, k: int, src: SourceStates, draft: DraftStates, max_len: int) -> list[int]:
    """Greedy pass-``k`` output for a single example (batch of one)."""
    return greedy_search(_pass_step(model, k, src, draft), max_len)


@torch.no_grad()
def beam_decode(
    model: DeliberationModel, k: int, src: SourceStates, draft: DraftStates, beam_size: int, max_len: int
) -> list[int]:
    return beam_search(_pass_step(model, k, src, draft), beam_size, max_len)[0]


@torch.no_grad()
def greedy_decode_batch(
    model: DeliberationModel, k: int, src: SourceStates, draft: DraftStates, max_len: int
) -> list[list[int]]:
    """Greedy decoding of a whole batch at once; used for training drafts."""
    b = src.code.shape[0]
    seqs = torch.full((b, 1), BOS, dtype=torch.long)
    done = torch.zeros(b, dtype=torch.bool)
    for _ in range(max_len):
        mask = torch.ones_like(seqs, dtype=torch.bool)
        logp = _decoding_log_probs(model.logits(k, seqs, mask, src, draft)[:, -1])
        nxt = torch.argmax(logp, dim=-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        seqs = torch.cat([seqs, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if bool(done.all()):
            break
    out = []
    for row in seqs[:, 1:].tolist():
        body = []
        for tok in row:
            if tok in (EOS, PAD):
                break
            body.append(tok)
        out.append(body)
    return out

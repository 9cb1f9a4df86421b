"""Prediction: retrieve a draft, refine it pass by pass, stop on the score."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch

from .config import ModelConfig
from .corpus import Vocabulary, decode, encode, extract_keywords
from .evaluator import quality_score
from .retrieval import RetrievalIndex, retrieve_top1
from .trainer import wrap_comment
from .transformer import DeliberationModel, beam_decode, pad_batch


class StopReason(str, enum.Enum):
    SCORE_NOT_IMPROVED = "ScoreNotImproved"
    MAX_PASSES_REACHED = "MaxPassesReached"


class Mode(str, enum.Enum):
    FULL = "full"
    NO_MULTIPASS = "no_multipass"
    NO_EVALUATOR = "no_evaluator"


@dataclass
class DeliberationState:
    """Trace of one query: drafts z^0..z^k and their scores Q^0..Q^k."""

    drafts: list[list]
    scores: list[float]
    passes_run: int
    selected_index: int
    stop_reason: StopReason
    retrieved_doc: int | None = None
    draft_tokens: list[list[str]] = field(default_factory=list)

    @property
    def selected(self) -> list:
        return self.drafts[self.selected_index]

    @property
    def selected_tokens(self) -> list[str]:
        return self.draft_tokens[self.selected_index] if self.draft_tokens else list(self.selected)

    def to_json(self) -> dict:
        return {
            "drafts": [list(map(str, d)) for d in (self.draft_tokens or self.drafts)],
            "scores": self.scores,
            "passes_run": self.passes_run,
            "selected_index": self.selected_index,
            "stop_reason": self.stop_reason.value,
            "retrieved_doc": self.retrieved_doc,
        }


def run_deliberation(
    draft0: Sequence,
    generate: Callable[[int, Sequence], Sequence],
    score: Callable[[Sequence], float],
    k_max: int,
    mode: Mode | str = Mode.FULL,
) -> DeliberationState:
    """The refinement loop, independent of any model.

    ``generate(k, previous)`` produces z^k from z^{k-1}; ``score`` rates a
    draft. In full mode the loop stops at the first pass k >= 2 whose score
    is not higher than pass k-1's and keeps z^{k-1}; otherwise the last
    draft is kept. The retrieved draft is scored but never selected.
    """
    mode = Mode(mode)
    if k_max < 1:
        raise ValueError("k_max must be >= 1")
    limit = 1 if mode is Mode.NO_MULTIPASS else k_max
    drafts = [list(draft0)]
    scores = [float(score(draft0))]
    for k in range(1, limit + 1):
        drafts.append(list(generate(k, drafts[k - 1])))
        scores.append(float(score(drafts[k])))
        if mode is Mode.FULL and k >= 2 and scores[k] <= scores[k - 1]:
            return DeliberationState(drafts, scores, k, k - 1, StopReason.SCORE_NOT_IMPROVED)
    return DeliberationState(drafts, scores, limit, limit, StopReason.MAX_PASSES_REACHED)


class Deliberator:
    """Binds a trained model, its vocabularies and the retrieval index."""

    def __init__(
        self,
        model: DeliberationModel,
        code_vocab: Vocabulary,
        comment_vocab: Vocabulary,
        index: RetrievalIndex,
        cfg: ModelConfig | None = None,
        language: str = "generic",
    ):
        self.model = model
        self.cfg = cfg or model.cfg
        self.code_vocab = code_vocab
        self.comment_vocab = comment_vocab
        self.index = index
        self.language = language

    @torch.no_grad()
    def deliberate(
        self,
        code_tokens: Sequence[str],
        mode: Mode | str = Mode.FULL,
        keyword_tokens: Sequence[str] | None = None,
    ) -> DeliberationState:
        m, cfg = self.model, self.cfg
        if not m.fully_trained:
            raise ValueError("deliberate needs a model whose passes and evaluator are trained")
        m.eval()
        if keyword_tokens is None:
            keyword_tokens = extract_keywords(code_tokens, self.language)
        hit, _, doc_id = retrieve_top1(code_tokens, self.index, cfg.bm25)

        code_ids, code_mask = pad_batch([encode(code_tokens, self.code_vocab, cfg.max_code_len)])
        kw = encode(keyword_tokens, self.code_vocab, cfg.max_keyword_len) if keyword_tokens else []
        kw_ids, kw_mask = pad_batch([kw])
        src = m.encode_source(code_ids, code_mask, kw_ids, kw_mask)
        v_code = m.code_vector(src)

        def encode_draft(ids):
            return pad_batch([wrap_comment(ids, cfg.max_comment_len)])

        def generate(k, previous):
            draft = m.encode_draft(*encode_draft(previous))
            return beam_decode(m, k, src, draft, cfg.beam_size, cfg.max_comment_len)

        def score(ids):
            return quality_score(v_code, m.comment_vector(*encode_draft(ids)))

        draft0 = encode(hit.comment_tokens, self.comment_vocab, cfg.max_comment_len)
        state = run_deliberation(draft0, generate, score, cfg.k_max, mode)
        state.retrieved_doc = doc_id
        state.draft_tokens = [decode(d, self.comment_vocab) for d in state.drafts]
        return state


def deliberate(
    code_tokens: Sequence[str],
    model: DeliberationModel,
    index: RetrievalIndex,
    config: ModelConfig | None = None,
    *,
    code_vocab: Vocabulary,
    comment_vocab: Vocabulary,
    mode: Mode | str = Mode.FULL,
    language: str = "generic",
) -> DeliberationState:
    return Deliberator(model, code_vocab, comment_vocab, index, config, language).deliberate(code_tokens, mode)


def ablation_mode(mode: Mode | str, code_tokens, model, index, config=None, **kwargs) -> DeliberationState:
    return deliberate(code_tokens, model, index, config, mode=mode, **kwargs)

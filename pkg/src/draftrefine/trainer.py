"""Two-step training of the deliberation passes and the evaluator.

Step 1 trains pass 1 jointly with the evaluator, then freezes the shared
encoders and trains passes 2..K one at a time on drafts produced by the
already trained passes. Step 2 fine-tunes everything together at a lower
learning rate. Each phase early-stops on validation loss and ends with the
best weights restored.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import nncore as F
from .config import ModelConfig
from .corpus import BOS, EOS, PAD, CodeCommentPair, Vocabulary, encode
from .evaluator import circle_loss
from .retrieval import RetrievalIndex, retrieve_top1
from .transformer import DeliberationModel, DraftStates, SourceStates, greedy_decode_batch, pad_batch

log = logging.getLogger(__name__)

STEP1_JOINT = "step1_joint"
STEP1_SEQUENTIAL = "step1_sequential"
STEP2_GLOBAL = "step2_global"
INFERENCE_BATCH = 64


@dataclass
class Example:
    """Id-encoded training example; ``draft0`` is the retrieved comment."""

    code: list[int]
    keywords: list[int]
    target: list[int]
    draft0: list[int]


@dataclass
class TrainData:
    train: list[Example]
    valid: list[Example]


@dataclass
class TrainReport:
    phase: str
    pass_index: int | None = None
    lr: float = 0.0
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    best_valid_loss: float = math.inf
    stopped_early: bool = False
    steps: int = 0

    @property
    def epochs_run(self) -> int:
        return len(self.epochs)

    def to_dict(self) -> dict:
        return {
            "phase": self.phase,
            "pass_index": self.pass_index,
            "lr": self.lr,
            "epochs": self.epochs,
            "epochs_run": self.epochs_run,
            "best_epoch": self.best_epoch,
            "best_valid_loss": self.best_valid_loss,
            "stopped_early": self.stopped_early,
            "steps": self.steps,
        }


def prepare_examples(
    pairs: Sequence[CodeCommentPair],
    code_vocab: Vocabulary,
    comment_vocab: Vocabulary,
    index: RetrievalIndex,
    cfg: ModelConfig,
    exclude_self: bool = False,
) -> list[Example]:
    """Encode pairs and attach their retrieved drafts.

    With ``exclude_self`` the pairs must be the indexed corpus in order, and
    pair ``i`` never retrieves document ``i``.
    """
    if exclude_self and len(pairs) != index.n_docs:
        raise ValueError("exclude_self needs the pairs the index was built from")
    out = []
    for i, pair in enumerate(pairs):
        hit, _, _ = retrieve_top1(pair.code_tokens, index, cfg.bm25, exclude=i if exclude_self else None)
        out.append(
            Example(
                code=encode(pair.code_tokens, code_vocab, cfg.max_code_len),
                keywords=encode(pair.keyword_tokens, code_vocab, cfg.max_keyword_len) if pair.keyword_tokens else [],
                target=encode(pair.comment_tokens, comment_vocab, cfg.max_comment_len),
                draft0=encode(hit.comment_tokens, comment_vocab, cfg.max_comment_len),
            )
        )
    return out


def wrap_comment(ids: Sequence[int], limit: int) -> list[int]:
    return [BOS] + list(ids[:limit]) + [EOS]


def deliberation_loss(logits: torch.Tensor, target_ids: torch.Tensor) -> torch.Tensor:
    """Summed negative log-likelihood of the targets; PAD targets are skipped.

    ``logits`` is [..., L, V] and ``target_ids`` is [..., L].
    """
    if tuple(logits.shape[:-1]) != tuple(target_ids.shape):
        raise ValueError(
            f"deliberation_loss: logits {tuple(logits.shape)} do not match targets {tuple(target_ids.shape)}"
        )
    logp = F.log_softmax(logits, axis=-1)
    picked = logp.gather(-1, target_ids.unsqueeze(-1)).squeeze(-1)
    return -(picked * (target_ids != PAD).to(logp.dtype)).sum()


class _Batch:
    """Tensors for a list of examples plus per-level drafts."""

    def __init__(self, examples: Sequence[Example], drafts: Sequence[Sequence[list[int]]], cfg: ModelConfig):
        self.size = len(examples)
        self.code, self.code_mask = pad_batch([e.code for e in examples])
        self.kw, self.kw_mask = pad_batch([e.keywords for e in examples])
        self.tgt_in, self.tgt_mask = pad_batch([[BOS] + e.target for e in examples])
        self.tgt_out, _ = pad_batch([e.target + [EOS] for e in examples])
        self.truth, self.truth_mask = pad_batch([wrap_comment(e.target, cfg.max_comment_len) for e in examples])
        # drafts[level][i] -> ids of z^level for example i
        self.drafts = [pad_batch([wrap_comment(d, cfg.max_comment_len) for d in level]) for level in drafts]


class _Phase:
    def __init__(self, model: DeliberationModel, cfg: ModelConfig, name: str, passes: Sequence[int], use_eval: bool):
        self.model = model
        self.cfg = cfg
        self.name = name
        self.passes = list(passes)
        self.use_eval = use_eval
        self.levels = max(self.passes) if use_eval else max(self.passes) - 1

    def drafts(self, examples: Sequence[Example]) -> list[list[list[int]]]:
        """z^0..z^levels for every example, greedy and without dropout."""
        was_training = self.model.training
        self.model.eval()
        levels = [[e.draft0 for e in examples]]
        bs = max(self.cfg.batch_size, INFERENCE_BATCH)
        for k in range(1, self.levels + 1):
            produced: list[list[int]] = []
            for start in range(0, len(examples), bs):
                chunk = examples[start : start + bs]
                b = _Batch(chunk, [levels[k - 1][start : start + bs]], self.cfg)
                with torch.no_grad():
                    src = self.model.encode_source(b.code, b.code_mask, b.kw, b.kw_mask)
                    draft = self.model.encode_draft(*b.drafts[0])
                    produced.extend(greedy_decode_batch(self.model, k, src, draft, self.cfg.max_comment_len))
            levels.append(produced)
        self.model.train(was_training)
        return levels

    def losses(self, b: _Batch) -> dict[str, torch.Tensor]:
        m = self.model
        src: SourceStates = m.encode_source(b.code, b.code_mask, b.kw, b.kw_mask)
        out: dict[str, torch.Tensor] = {}
        for k in self.passes:
            draft: DraftStates = m.encode_draft(*b.drafts[k - 1])
            logits = m.logits(k, b.tgt_in, b.tgt_mask, src, draft)
            out[f"delib_{k}"] = deliberation_loss(logits, b.tgt_out) / b.size
        if self.use_eval:
            v_code = m.code_vector(src)
            v_truth = m.comment_vector(b.truth, b.truth_mask)
            terms = []
            for k in self.passes:
                v_gen = m.comment_vector(*b.drafts[k])
                terms.append(circle_loss(v_code, v_gen, v_truth, self.cfg.lambda_circle).mean())
            out["eval"] = torch.stack(terms).mean()
        return out

    def total(self, parts: dict[str, torch.Tensor]) -> torch.Tensor:
        loss = sum(parts[f"delib_{k}"] for k in self.passes)
        if self.use_eval:
            loss = loss + self.cfg.alpha_e * parts["eval"]
        return loss

    def total_float(self, parts: dict[str, float]) -> float:
        loss = sum(parts[f"delib_{k}"] for k in self.passes)
        if self.use_eval:
            loss += self.cfg.alpha_e * parts["eval"]
        return loss

    @torch.no_grad()
    def validation_loss(self, examples: Sequence[Example], drafts=None) -> tuple[float, list]:
        """Per-example mean of the phase objective, computed in eval mode.

        Also returns the drafts it decoded so callers can reuse them.
        """
        was_training = self.model.training
        self.model.eval()
        if drafts is None:
            drafts = self.drafts(examples)
        total, bs = 0.0, max(self.cfg.batch_size, INFERENCE_BATCH)
        for start in range(0, len(examples), bs):
            chunk = examples[start : start + bs]
            b = _Batch(chunk, [lvl[start : start + bs] for lvl in drafts], self.cfg)
            total += float(self.total(self.losses(b))) * b.size
        self.model.train(was_training)
        return total / len(examples), drafts


def _run_phase(
    phase: _Phase,
    data: TrainData,
    lr: float,
    max_epochs: int,
    patience: int,
    seed: int,
    pass_index: int | None = None,
) -> TrainReport:
    model, cfg = phase.model, phase.cfg
    if not data.train:
        raise ValueError("empty training data")
    valid = data.valid or data.train
    reuse_valid_drafts = valid is data.train
    store = F.ParamStore.from_module(model)
    trainable = set(model.trainable_names_for(phase.name, pass_index))
    store.freeze_all_except(lambda n: n in trainable)
    adam = F.AdamState(lr=lr)
    order_rng = random.Random(seed)
    report = TrainReport(phase=phase.name, pass_index=pass_index, lr=lr)
    best_state = store.snapshot()
    bad_epochs = 0
    # a phase whose upstream is frozen sees the same drafts every epoch
    static_drafts = phase.drafts(data.train) if phase.name == STEP1_SEQUENTIAL else None
    pending = None
    try:
        for epoch in range(1, max_epochs + 1):
            model.train()
            if static_drafts is not None:
                drafts = static_drafts
            else:
                # validation drafts of the previous epoch came from these same weights
                drafts = pending if pending is not None else phase.drafts(data.train)
            order = list(range(len(data.train)))
            order_rng.shuffle(order)
            sums: dict[str, float] = {}
            for start in range(0, len(order), cfg.batch_size):
                rows = order[start : start + cfg.batch_size]
                b = _Batch([data.train[i] for i in rows], [[lvl[i] for i in rows] for lvl in drafts], cfg)
                parts = phase.losses(b)
                loss = phase.total(parts)
                store.zero_grad()
                F.backward(loss, store)
                F.adam_step(store, adam)
                report.steps += 1
                for key, v in parts.items():
                    sums[key] = sums.get(key, 0.0) + float(v.detach()) * b.size
            train_parts = {k: v / len(order) for k, v in sorted(sums.items())}
            train_parts["total"] = phase.total_float(train_parts)
            valid_loss, valid_drafts = phase.validation_loss(
                valid, static_drafts if reuse_valid_drafts else None
            )
            pending = valid_drafts if reuse_valid_drafts else None
            report.epochs.append({"epoch": epoch, "train": train_parts, "valid_loss": valid_loss})
            log.info("%s epoch %d train %.4f valid %.4f", phase.name, epoch, train_parts["total"], valid_loss)
            if valid_loss < report.best_valid_loss:
                report.best_valid_loss = valid_loss
                report.best_epoch = epoch
                best_state = store.snapshot()
                bad_epochs = 0
            else:
                bad_epochs += 1
                if bad_epochs >= patience:
                    report.stopped_early = True
                    break
    finally:
        store.restore(best_state)
        store.unfreeze_all()
        model.eval()
    model.optimizer_steps = getattr(model, "optimizer_steps", 0) + report.steps
    return report


def train_step1_joint(
    model: DeliberationModel,
    data: TrainData,
    cfg: ModelConfig | None = None,
    *,
    max_epochs: int | None = None,
    lr: float | None = None,
    seed: int = 0,
) -> TrainReport:
    """Pass 1 deliberation loss plus ``alpha_e`` times the evaluator loss."""
    cfg = cfg or model.cfg
    phase = _Phase(model, cfg, STEP1_JOINT, passes=[1], use_eval=True)
    report = _run_phase(
        phase, data, cfg.lr_step1 if lr is None else lr, max_epochs or cfg.max_epochs, cfg.patience, seed, 1
    )
    model.trained_passes.add(1)
    model.evaluator_trained = True
    return report


def train_step1_sequential(
    model: DeliberationModel,
    k: int,
    data: TrainData,
    cfg: ModelConfig | None = None,
    *,
    max_epochs: int | None = None,
    lr: float | None = None,
    seed: int = 0,
) -> TrainReport:
    """Train decoder ``k`` alone; everything else stays frozen."""
    cfg = cfg or model.cfg
    if k < 2:
        raise ValueError("sequential training starts at pass 2; pass 1 is trained jointly")
    if k > cfg.k_max:
        raise ValueError(f"pass {k} exceeds k_max={cfg.k_max}")
    missing = set(range(1, k)) - model.trained_passes
    if missing:
        raise ValueError(f"passes {sorted(missing)} must be trained before pass {k}")
    phase = _Phase(model, cfg, STEP1_SEQUENTIAL, passes=[k], use_eval=False)
    report = _run_phase(
        phase, data, cfg.lr_step1 if lr is None else lr, max_epochs or cfg.max_epochs, cfg.patience, seed, k
    )
    model.trained_passes.add(k)
    return report


def train_step2_global(
    model: DeliberationModel,
    data: TrainData,
    cfg: ModelConfig | None = None,
    *,
    max_epochs: int | None = None,
    lr: float | None = None,
    seed: int = 0,
) -> TrainReport:
    """Fine-tune all passes and the evaluator together, nothing frozen."""
    cfg = cfg or model.cfg
    if not model.fully_trained:
        raise ValueError("step 2 needs every pass and the evaluator trained by step 1")
    passes = list(range(1, cfg.k_max + 1))
    phase = _Phase(model, cfg, STEP2_GLOBAL, passes=passes, use_eval=True)
    return _run_phase(
        phase, data, cfg.lr_step2 if lr is None else lr, max_epochs or cfg.max_epochs, cfg.patience, seed
    )


def train_step1(model: DeliberationModel, data: TrainData, cfg: ModelConfig | None = None, *, seed: int = 0, epochs=None):
    """Joint pass-1 phase followed by the sequential phases for passes 2..K.

    ``epochs`` optionally gives per-phase epoch caps, e.g. ``[80, 60]``.
    """
    cfg = cfg or model.cfg
    caps = list(epochs) if epochs is not None else [None] * cfg.k_max
    reports = [train_step1_joint(model, data, cfg, max_epochs=caps[0], seed=seed)]
    for k in range(2, cfg.k_max + 1):
        reports.append(train_step1_sequential(model, k, data, cfg, max_epochs=caps[k - 1], seed=seed + k))
    return reports

"""Train the toy model through both steps and score it per mode."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

from draftrefine import trainer as T
from draftrefine.config import ModelConfig
from draftrefine.corpus import build_vocabulary
from draftrefine.engine import Deliberator, Mode
from draftrefine.metrics import bleu
from draftrefine.retrieval import build_index
from draftrefine.toydata import toy_corpus
from draftrefine.transformer import DeliberationModel

MODES = [m.value for m in Mode]


@dataclass
class ToyRun:
    seed: int
    train_bleu4: dict[str, float] = field(default_factory=dict)
    heldout_bleu4: dict[str, float] = field(default_factory=dict)
    epochs_run: int = 0
    seconds: float = 0.0


def toy_setup():
    train, held = toy_corpus()
    code_vocab = build_vocabulary([p.code_tokens + p.keyword_tokens for p in train], 2000)
    comment_vocab = build_vocabulary([p.comment_tokens for p in train], 2000)
    cfg = ModelConfig.toy(code_vocab_size=len(code_vocab), comment_vocab_size=len(comment_vocab))
    return train, held, code_vocab, comment_vocab, cfg


def run_toy(seed: int) -> ToyRun:
    start = time.perf_counter()
    train, held, code_vocab, comment_vocab, cfg = toy_setup()
    index = build_index(train)
    examples = T.prepare_examples(train, code_vocab, comment_vocab, index, cfg, exclude_self=True)
    data = T.TrainData(examples, examples)
    e_joint, e_seq, e_global = ModelConfig.TOY_EPOCHS
    model = DeliberationModel(cfg, seed=seed)
    reports = T.train_step1(model, data, cfg, seed=seed, epochs=[e_joint] + [e_seq] * (cfg.k_max - 1))
    reports.append(T.train_step2_global(model, data, cfg, seed=seed, max_epochs=e_global))
    delib = Deliberator(model, code_vocab, comment_vocab, index, cfg, language="java")
    run = ToyRun(seed=seed, epochs_run=sum(r.epochs_run for r in reports))
    for mode in MODES:
        for name, pairs, out in (("train", train, run.train_bleu4), ("held", held, run.heldout_bleu4)):
            hyps = [delib.deliberate(p.code_tokens, mode, p.keyword_tokens).selected_tokens for p in pairs]
            out[mode] = bleu(hyps, [p.comment_tokens for p in pairs])["bleu_4"]
    run.seconds = time.perf_counter() - start
    return run

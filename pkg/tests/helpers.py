"""Tiny models, inputs and workspaces shared across the tests."""

from __future__ import annotations

import json
from pathlib import Path

import torch

from draftrefine.config import ModelConfig
from draftrefine.corpus import BOS, EOS
from draftrefine.transformer import DeliberationModel, pad_batch


def tiny_config(**overrides) -> ModelConfig:
    base = dict(
        d_model=16,
        n_heads=2,
        n_blocks=2,
        k_max=2,
        code_vocab_size=20,
        comment_vocab_size=15,
        dropout_rate=0.0,
        max_comment_len=6,
        beam_size=3,
    )
    base.update(overrides)
    return ModelConfig.toy(**base)


def tiny_model(seed: int = 0, **overrides) -> DeliberationModel:
    model = DeliberationModel(tiny_config(**overrides), seed=seed)
    model.eval()
    return model


def tiny_batch(seed: int = 0, batch: int = 2):
    """Random code/keyword/draft/target ids for ``batch`` examples."""
    g = torch.Generator().manual_seed(seed)

    def ids(n, hi, lo=4):
        return torch.randint(lo, hi, (n,), generator=g).tolist()

    code = [ids(5 + i, 20) for i in range(batch)]
    kws = [ids(2 + i, 20) for i in range(batch)]
    drafts = [[BOS] + ids(3 + i, 15) + [EOS] for i in range(batch)]
    targets = [ids(4 - (i % 2), 15) for i in range(batch)]
    return code, kws, drafts, targets


def tiny_forward(model: DeliberationModel, k: int, code, kws, drafts, targets):
    src = model.encode_source(*pad_batch(code), *pad_batch(kws))
    draft = model.encode_draft(*pad_batch(drafts))
    tgt_in, tgt_mask = pad_batch([[BOS] + t for t in targets])
    return model.logits(k, tgt_in, tgt_mask, src, draft), src, draft


def toy_problem(n_train: int = 20, **overrides):
    """Toy corpus encoded for a small model: returns (cfg, pairs, examples, vocabs, index)."""
    from draftrefine import trainer as T
    from draftrefine.corpus import build_vocabulary
    from draftrefine.retrieval import build_index
    from draftrefine.toydata import toy_corpus

    train, _ = toy_corpus(n_train=20, n_heldout=10)
    train = train[:n_train]
    code_vocab = build_vocabulary([p.code_tokens + p.keyword_tokens for p in train], 2000)
    comment_vocab = build_vocabulary([p.comment_tokens for p in train], 2000)
    base = dict(code_vocab_size=len(code_vocab), comment_vocab_size=len(comment_vocab), max_comment_len=12)
    base.update(overrides)
    cfg = tiny_config(**base)
    index = build_index(train)
    examples = T.prepare_examples(train, code_vocab, comment_vocab, index, cfg, exclude_self=True)
    return cfg, train, examples, (code_vocab, comment_vocab), index


NOUNS = ("user", "name", "file", "socket", "buffer", "count", "index", "value", "path", "token")
VERBS = (("get", "returns the"), ("set", "sets the"), ("reset", "clears the"), ("close", "closes the"))


def write_raw(path, n: int = 40) -> list[dict]:
    """``n`` distinct raw code/comment records as JSONL."""
    rows = []
    for i in range(n):
        (verb, phrase), noun = VERBS[i % len(VERBS)], NOUNS[(i // len(VERBS)) % len(NOUNS)]
        ident = verb + noun.capitalize() + (str(i // 40) if i >= 40 else "")
        rows.append({"id": f"r{i}", "code": f"void {ident}(int {noun}) {{ this.{noun} = {noun}; }}", "comment": f"{phrase} {noun}"})
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")
    return rows


def write_config(directory, n_raw: int = 40, **overrides) -> Path:
    """A small pipeline workspace under ``directory``; returns the config path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_raw(directory / "raw.jsonl", n_raw)
    body = {
        "raw": "raw.jsonl",
        "data_dir": "data",
        "index_dir": "index",
        "checkpoint_dir": "ckpt",
        "report_dir": "reports",
        "language": "java",
        "epochs": [2, 1, 1],
        "model": {"d_model": 16, "n_heads": 2, "n_blocks": 1, "max_comment_len": 8, "beam_size": 2},
    }
    body.update(overrides)
    path = directory / "config.json"
    path.write_text(json.dumps(body, indent=2))
    return path

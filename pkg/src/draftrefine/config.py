"""Model and training hyperparameters."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from .retrieval import Bm25Params


@dataclass
class ModelConfig:
    """Every knob of the model, its training schedule and decoding.

    Defaults are the full-size settings; :meth:`toy` gives a laptop-sized
    variant with the same structure.
    """

    d_model: int = 512
    n_heads: int = 8
    n_blocks: int = 6
    ffn_hidden: int = 0  # 0 means 4 * d_model
    k_max: int = 3
    dropout_rate: float = 0.2
    code_vocab_size: int = 50_000
    comment_vocab_size: int = 50_000
    max_code_len: int = 300
    max_keyword_len: int = 300
    max_comment_len: int = 30
    beam_size: int = 5
    alpha_e: float = 0.1
    lambda_circle: float = 10.0
    bm25_k1: float = 1.2
    bm25_b: float = 0.75
    batch_size: int = 32
    lr_step1: float = 1e-4
    lr_step2: float = 1e-5
    max_epochs: int = 100
    patience: int = 20

    def __post_init__(self) -> None:
        if self.ffn_hidden == 0:
            self.ffn_hidden = 4 * self.d_model
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.beam_size < 1 or self.batch_size < 1:
            raise ValueError("beam_size and batch_size must be >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.lambda_circle <= 0:
            raise ValueError("lambda_circle must be > 0")
        Bm25Params(self.bm25_k1, self.bm25_b)

    # toy schedule: epochs for step-1 joint, each sequential pass, step 2
    TOY_EPOCHS = (90, 60, 50)

    @classmethod
    def toy(cls, **overrides: Any) -> "ModelConfig":
        base = dict(
            d_model=64,
            n_heads=4,
            n_blocks=2,
            code_vocab_size=2000,
            comment_vocab_size=2000,
            max_code_len=100,
            max_keyword_len=100,
            max_comment_len=30,
            k_max=2,
            dropout_rate=0.0,
            batch_size=2,
            lr_step1=1e-3,
            lr_step2=1e-4,
        )
        base.update(overrides)
        return cls(**base)

    @property
    def bm25(self) -> Bm25Params:
        return Bm25Params(self.bm25_k1, self.bm25_b)

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**values)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ModelConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def stable_hash(obj: Any) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


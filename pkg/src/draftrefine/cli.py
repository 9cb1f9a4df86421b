"""Command-line pipeline: preprocess, build-index, train, generate, evaluate.

Every stage writes a ``meta.json`` (or checkpoint manifest) carrying the hash
of the configuration that produced it. Consumers refuse artifacts whose hash
differs from the current configuration unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import random
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import torch

from . import trainer as T
from .config import ModelConfig, stable_hash
from .corpus import (
    CodeCommentPair,
    Vocabulary,
    build_vocabulary,
    read_jsonl,
    read_pairs,
    read_raw_pairs,
    write_jsonl,
    write_pairs,
)
from .engine import Deliberator, Mode
from .metrics import evaluate_corpus
from .nncore import load_checkpoint, save_checkpoint
from .retrieval import RetrievalIndex, build_index
from .transformer import DeliberationModel

log = logging.getLogger("draftrefine")

SEED_ENV = "DELIB_SEED"
META_FILE = "meta.json"
SPLITS = ("train", "valid", "test")
CODE_VOCAB = "code.vocab"
COMMENT_VOCAB = "comment.vocab"
INDEX_FILE = "index.json"
STEP1_DIR = "step1"
STEP2_DIR = "step2"
HYP_FILE = "hyp.jsonl"
TRACE_FILE = "trace.jsonl"
REPORT_FILE = "report.json"


class CliError(RuntimeError):
    """A stage failed in a way the user can fix (bad input, missing artifact)."""


@dataclass
class PipelineConfig:
    """Paths, model settings, seed and split ratios for one pipeline run.

    ``epochs`` optionally caps the three training phases (step-1 joint, each
    step-1 sequential pass, step 2); ``None`` uses ``model.max_epochs``.
    """

    raw: str = "raw.jsonl"
    data_dir: str = "work/data"
    index_dir: str = "work/index"
    checkpoint_dir: str = "work/checkpoints"
    report_dir: str = "work/reports"
    model: ModelConfig = field(default_factory=ModelConfig.toy)
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    language: str = "generic"
    dedup_test: bool = False
    epochs: tuple[int, int, int] | None = None
    mode: str = Mode.FULL.value

    def __post_init__(self) -> None:
        self.split = tuple(float(r) for r in self.split)
        if len(self.split) != 3 or any(r < 0 for r in self.split):
            raise ValueError(f"split must be three nonnegative ratios, got {self.split}")
        if not math.isclose(sum(self.split), 1.0, abs_tol=1e-9):
            raise ValueError(f"split ratios must sum to 1, got {sum(self.split)}")
        dirs = [self.raw, self.data_dir, self.index_dir, self.checkpoint_dir, self.report_dir]
        if len({os.path.normpath(p) for p in dirs}) != len(dirs):
            raise ValueError("pipeline paths must be distinct")
        if self.epochs is not None:
            self.epochs = tuple(int(e) for e in self.epochs)
            if len(self.epochs) != 3 or min(self.epochs) < 1:
                raise ValueError("epochs must list three positive caps")
        Mode(self.mode)

    @property
    def paths(self) -> dict[str, str]:
        return {
            "raw": self.raw,
            "data_dir": self.data_dir,
            "index_dir": self.index_dir,
            "checkpoint_dir": self.checkpoint_dir,
            "report_dir": self.report_dir,
        }

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["model"] = self.model.to_dict()
        out["split"] = list(self.split)
        out["epochs"] = list(self.epochs) if self.epochs is not None else None
        return out

    def content_hash(self) -> str:
        """Hash of everything but the paths, so relocating a run keeps it valid."""
        body = self.to_dict()
        for key in self.paths:
            body.pop(key)
        return stable_hash(body)

    @classmethod
    def from_dict(cls, values: dict[str, Any], base_dir: str | Path | None = None) -> "PipelineConfig":
        values = dict(values)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown pipeline config keys: {sorted(unknown)}")
        model = values.pop("model", None)
        values["model"] = ModelConfig.toy(**model) if isinstance(model, dict) else ModelConfig.toy()
        if base_dir is not None:
            for key in ("raw", "data_dir", "index_dir", "checkpoint_dir", "report_dir"):
                if key in values and not os.path.isabs(values[key]):
                    values[key] = str(Path(base_dir) / values[key])
        return cls(**values)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        try:
            values = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise CliError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        cfg = cls.from_dict(values, base_dir=path.parent)
        env_seed = os.environ.get(SEED_ENV)
        if env_seed is not None:
            try:
                cfg.seed = int(env_seed)
            except ValueError:
                raise CliError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None
        return cfg


# --------------------------------------------------------------------------
# artifact bookkeeping


def _write_json(path: Path, obj: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _read_meta(directory: Path, stage: str) -> dict:
    meta = directory / META_FILE
    if not meta.exists():
        raise CliError(f"missing {meta}; run the {stage} stage first")
    return json.loads(meta.read_text(encoding="utf-8"))


def _check_hash(found: str | None, expected: str, what: str, force: bool) -> None:
    if found != expected:
        if not force:
            raise CliError(f"{what} was built with config hash {found}, current is {expected}; rerun it or pass --force")
        log.warning("using %s with mismatched config hash %s (forced)", what, found)


def _stage_done(directory: Path, expected_hash: str, files: Sequence[str]) -> bool:
    meta = directory / META_FILE
    if not meta.exists() or not all((directory / f).exists() for f in files):
        return False
    return json.loads(meta.read_text(encoding="utf-8")).get("config_hash") == expected_hash


# --------------------------------------------------------------------------
# stages


def split_pairs(
    pairs: Sequence[CodeCommentPair], ratios: Sequence[float], seed: int
) -> tuple[list[CodeCommentPair], list[CodeCommentPair], list[CodeCommentPair]]:
    order = list(range(len(pairs)))
    random.Random(seed).shuffle(order)
    n_train = int(round(len(pairs) * ratios[0]))
    n_valid = min(int(round(len(pairs) * ratios[1])), len(pairs) - n_train)
    picked = [pairs[i] for i in order]
    return picked[:n_train], picked[n_train : n_train + n_valid], picked[n_train + n_valid :]


def dedup_pairs(pairs: Sequence[CodeCommentPair]) -> list[CodeCommentPair]:
    """Drop exact repeats of an earlier (code, comment) pair, keeping the first."""
    seen = set()
    out = []
    for p in pairs:
        key = (p.raw_code, p.raw_comment) if p.raw_code else (p.code_tokens, p.comment_tokens)
        if key not in seen:
            seen.add(key)
            out.append(p)
    return out


def cmd_preprocess(cfg: PipelineConfig, raw: str | Path | None = None) -> dict:
    raw = Path(raw or cfg.raw)
    if not raw.exists():
        raise CliError(f"raw input {raw} not found")
    try:
        pairs = read_raw_pairs(raw, cfg.language)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if not pairs:
        raise CliError(f"{raw}: no pairs")
    train, valid, test = split_pairs(pairs, cfg.split, cfg.seed)
    if not train:
        raise CliError("training split is empty")
    removed = 0
    if cfg.dedup_test:
        before = len(test)
        test = dedup_pairs(test)
        removed = before - len(test)
    out = Path(cfg.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(SPLITS, (train, valid, test)):
        write_pairs(out / f"{name}.jsonl", part)
    m = cfg.model
    build_vocabulary([p.code_tokens + p.keyword_tokens for p in train], m.code_vocab_size).save(out / CODE_VOCAB)
    build_vocabulary([p.comment_tokens for p in train], m.comment_vocab_size).save(out / COMMENT_VOCAB)
    meta = {
        "stage": "preprocess",
        "config_hash": cfg.content_hash(),
        "counts": {"train": len(train), "valid": len(valid), "test": len(test)},
        "test_duplicates_removed": removed,
    }
    _write_json(out / META_FILE, meta)
    return meta


def _load_split(cfg: PipelineConfig, name: str) -> list[CodeCommentPair]:
    path = Path(cfg.data_dir) / f"{name}.jsonl"
    if not path.exists():
        raise CliError(f"missing {path}; run the preprocess stage first")
    return read_pairs(path)


def cmd_build_index(cfg: PipelineConfig, force: bool = False) -> dict:
    meta = _read_meta(Path(cfg.data_dir), "preprocess")
    _check_hash(meta.get("config_hash"), cfg.content_hash(), "preprocessed data", force)
    train = _load_split(cfg, "train")
    index = build_index(train)
    out = Path(cfg.index_dir)
    out.mkdir(parents=True, exist_ok=True)
    index.save(out / INDEX_FILE)
    meta = {"stage": "build-index", "config_hash": cfg.content_hash(), "n_docs": index.n_docs}
    _write_json(out / META_FILE, meta)
    return meta


def _effective_model_config(cfg: PipelineConfig, code_vocab: Vocabulary, comment_vocab: Vocabulary) -> ModelConfig:
    return dataclasses.replace(cfg.model, code_vocab_size=len(code_vocab), comment_vocab_size=len(comment_vocab))


def _train_data(cfg: PipelineConfig, model_cfg: ModelConfig, code_vocab, comment_vocab, index) -> T.TrainData:
    train = _load_split(cfg, "train")
    valid = _load_split(cfg, "valid")
    return T.TrainData(
        T.prepare_examples(train, code_vocab, comment_vocab, index, model_cfg, exclude_self=True),
        T.prepare_examples(valid, code_vocab, comment_vocab, index, model_cfg) if valid else [],
    )


def save_model(directory: Path, model: DeliberationModel, code_vocab: Vocabulary, comment_vocab: Vocabulary, extra: dict) -> None:
    manifest = {
        "config_hash": extra.get("config_hash"),
        "optimizer_steps": model.optimizer_steps,
        "trained_passes": sorted(model.trained_passes),
        "evaluator_trained": model.evaluator_trained,
        "k_max": model.cfg.k_max,
        **{k: v for k, v in extra.items() if k != "config_hash"},
    }
    save_checkpoint(directory, dict(model.named_parameters()), manifest)
    model.cfg.save(directory / "config.json")
    code_vocab.save(directory / CODE_VOCAB)
    comment_vocab.save(directory / COMMENT_VOCAB)


def load_model(directory: str | Path) -> tuple[DeliberationModel, Vocabulary, Vocabulary, dict]:
    directory = Path(directory)
    if not (directory / "params.bin").exists():
        raise CliError(f"no checkpoint at {directory}; run the train stage first")
    params, manifest = load_checkpoint(directory)
    model_cfg = ModelConfig.load(directory / "config.json")
    model = DeliberationModel(model_cfg)
    own = dict(model.named_parameters())
    if set(own) != set(params):
        raise CliError(f"{directory}: checkpoint parameters do not match the model")
    with torch.no_grad():
        for name, p in own.items():
            if tuple(p.shape) != tuple(params[name].shape):
                raise CliError(f"{directory}: parameter {name} has shape {tuple(params[name].shape)}")
            p.copy_(params[name])
    model.trained_passes = set(manifest.get("trained_passes", []))
    model.evaluator_trained = bool(manifest.get("evaluator_trained", False))
    model.optimizer_steps = int(manifest.get("optimizer_steps", 0))
    model.eval()
    return model, Vocabulary.load(directory / CODE_VOCAB), Vocabulary.load(directory / COMMENT_VOCAB), manifest


def cmd_train(
    cfg: PipelineConfig,
    phase: str,
    out: str | Path | None = None,
    init: str | Path | None = None,
    force: bool = False,
) -> dict:
    if phase not in ("step1", "step2"):
        raise CliError(f"unknown phase {phase!r}; expected step1 or step2")
    expected = cfg.content_hash()
    data_meta = _read_meta(Path(cfg.data_dir), "preprocess")
    _check_hash(data_meta.get("config_hash"), expected, "preprocessed data", force)
    index_meta = _read_meta(Path(cfg.index_dir), "build-index")
    _check_hash(index_meta.get("config_hash"), expected, "retrieval index", force)
    index = RetrievalIndex.load(Path(cfg.index_dir) / INDEX_FILE)
    caps = cfg.epochs or (cfg.model.max_epochs,) * 3
    ckpt_root = Path(cfg.checkpoint_dir)

    if phase == "step1":
        code_vocab = Vocabulary.load(Path(cfg.data_dir) / CODE_VOCAB)
        comment_vocab = Vocabulary.load(Path(cfg.data_dir) / COMMENT_VOCAB)
        model_cfg = _effective_model_config(cfg, code_vocab, comment_vocab)
        model = DeliberationModel(model_cfg, seed=cfg.seed)
        data = _train_data(cfg, model_cfg, code_vocab, comment_vocab, index)
        reports = T.train_step1(model, data, model_cfg, seed=cfg.seed, epochs=[caps[0]] + [caps[1]] * (model_cfg.k_max - 1))
        target = Path(out) if out else ckpt_root / STEP1_DIR
    else:
        source = Path(init) if init else ckpt_root / STEP1_DIR
        model, code_vocab, comment_vocab, manifest = load_model(source)
        _check_hash(manifest.get("config_hash"), expected, f"checkpoint {source}", force)
        data = _train_data(cfg, model.cfg, code_vocab, comment_vocab, index)
        try:
            reports = [T.train_step2_global(model, data, model.cfg, seed=cfg.seed, max_epochs=caps[2])]
        except ValueError as exc:
            raise CliError(f"{exc}; run train --phase step1 first") from None
        target = Path(out) if out else ckpt_root / STEP2_DIR
    body = {"config_hash": expected, "phase": phase, "reports": [r.to_dict() for r in reports]}
    save_model(target, model, code_vocab, comment_vocab, body)
    return body


def cmd_generate(
    checkpoint: str | Path,
    index_path: str | Path,
    input_path: str | Path,
    out: str | Path,
    trace: str | Path | None = None,
    mode: str = Mode.FULL.value,
    language: str = "generic",
    force: bool = False,
    bm25: tuple[float | None, float | None] = (None, None),
) -> list[dict]:
    model, code_vocab, comment_vocab, manifest = load_model(checkpoint)
    k1, b = bm25
    if k1 is not None or b is not None:
        model.cfg = dataclasses.replace(
            model.cfg, bm25_k1=model.cfg.bm25_k1 if k1 is None else k1, bm25_b=model.cfg.bm25_b if b is None else b
        )
    index_path = Path(index_path)
    if index_path.is_dir():
        index_meta = _read_meta(index_path, "build-index")
        _check_hash(index_meta.get("config_hash"), manifest.get("config_hash"), "retrieval index", force)
        index_path = index_path / INDEX_FILE
    if not index_path.exists():
        raise CliError(f"missing {index_path}; run the build-index stage first")
    index = RetrievalIndex.load(index_path)
    if not Path(input_path).exists():
        raise CliError(f"input {input_path} not found")
    pairs = read_pairs(input_path)
    delib = Deliberator(model, code_vocab, comment_vocab, index, model.cfg, language)
    hyps, traces = [], []
    for p in pairs:
        state = delib.deliberate(p.code_tokens, mode, keyword_tokens=p.keyword_tokens)
        hyps.append({"id": p.source_id, "tokens": state.selected_tokens})
        traces.append({"id": p.source_id, "mode": Mode(mode).value, **state.to_json()})
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, hyps)
    if trace:
        write_jsonl(trace, traces)
    return hyps


def parse_buckets(specs: Sequence[str]) -> dict[str, list[float]]:
    """``["code:0,10,20", "comment:0,5"]`` -> edge lists keyed by axis."""
    out: dict[str, list[float]] = {}
    for spec in specs:
        axis, sep, edges = spec.partition(":")
        if not sep or axis not in ("code", "comment"):
            raise CliError(f"bad bucket spec {spec!r}; expected code:E1,E2,... or comment:E1,E2,...")
        try:
            out[axis] = [float(e) for e in edges.split(",") if e]
        except ValueError:
            raise CliError(f"bad bucket edges in {spec!r}") from None
        if not out[axis]:
            raise CliError(f"bucket spec {spec!r} lists no edges")
    return out


def cmd_evaluate(
    hyp: str | Path,
    ref: str | Path,
    report: str | Path,
    buckets: Sequence[str] = (),
    per_example: bool = False,
) -> dict:
    for path in (hyp, ref):
        if not Path(path).exists():
            raise CliError(f"{path} not found")
    hyps = list(read_jsonl(hyp))
    refs = read_pairs(ref)
    if len(hyps) != len(refs):
        raise CliError(f"{len(hyps)} hypotheses but {len(refs)} references")
    for h, r in zip(hyps, refs):
        if str(h.get("id", "")) != r.source_id:
            raise CliError(f"hypothesis id {h.get('id')!r} does not match reference id {r.source_id!r}")
    edges = parse_buckets(buckets)
    result = evaluate_corpus(
        [h["tokens"] for h in hyps],
        [r.comment_tokens for r in refs],
        code_lengths=[len(r.code_tokens) for r in refs] if edges else None,
        code_edges=edges.get("code"),
        comment_edges=edges.get("comment"),
        per_example=per_example,
    ).to_dict()
    _write_json(Path(report), result)
    return result


def cmd_pipeline(cfg: PipelineConfig, force: bool = False) -> dict:
    """Run every stage in order, skipping those whose artifacts are current."""
    h = cfg.content_hash()
    data_dir, index_dir, ckpt = Path(cfg.data_dir), Path(cfg.index_dir), Path(cfg.checkpoint_dir)
    split_files = [f"{s}.jsonl" for s in SPLITS] + [CODE_VOCAB, COMMENT_VOCAB]
    fresh = False
    if not _stage_done(data_dir, h, split_files):
        log.info("preprocess")
        cmd_preprocess(cfg)
        fresh = True
    if fresh or not _stage_done(index_dir, h, [INDEX_FILE]):
        log.info("build-index")
        cmd_build_index(cfg, force)
        fresh = True
    for phase, sub in (("step1", STEP1_DIR), ("step2", STEP2_DIR)):
        if fresh or not _checkpoint_done(ckpt / sub, h):
            log.info("train %s", phase)
            cmd_train(cfg, phase, force=force)
            fresh = True
    reports = Path(cfg.report_dir)
    log.info("generate")
    cmd_generate(
        ckpt / STEP2_DIR,
        index_dir,
        data_dir / "test.jsonl",
        reports / HYP_FILE,
        trace=reports / TRACE_FILE,
        mode=cfg.mode,
        language=cfg.language,
        force=force,
    )
    log.info("evaluate")
    return cmd_evaluate(reports / HYP_FILE, data_dir / "test.jsonl", reports / REPORT_FILE, per_example=True)


def _checkpoint_done(directory: Path, expected_hash: str) -> bool:
    manifest = directory / "manifest.json"
    if not manifest.exists() or not (directory / "params.bin").exists():
        return False
    return json.loads(manifest.read_text(encoding="utf-8")).get("config_hash") == expected_hash


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="draftrefine", description="Retrieve-and-refine code comment generation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def bm25_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--bm25-k1", type=float, help="override the BM25 k1 parameter")
        p.add_argument("--bm25-b", type=float, help="override the BM25 b parameter")

    p = sub.add_parser("preprocess", help="tokenize raw pairs, split them and build vocabularies")
    p.add_argument("--config", required=True)
    p.add_argument("--input", help="raw JSONL with code/comment fields (defaults to the config's raw path)")
    p.add_argument("--dedup-test", action="store_true", help="drop exact duplicate pairs from the test split")

    p = sub.add_parser("build-index", help="build the BM25 index over the training split")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    bm25_flags(p)

    p = sub.add_parser("train", help="run step 1 or step 2 of training")
    p.add_argument("--config", required=True)
    p.add_argument("--phase", choices=["step1", "step2"], required=True)
    p.add_argument("--data", help="preprocessed data directory (defaults to the config's)")
    p.add_argument("--out", help="checkpoint directory to write")
    p.add_argument("--init", help="step-1 checkpoint to start step 2 from")
    p.add_argument("--force", action="store_true")
    bm25_flags(p)

    p = sub.add_parser("generate", help="produce comments for tokenized pairs")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--index", required=True, help="index directory or index.json")
    p.add_argument("--input", required=True, help="tokenized pairs JSONL")
    p.add_argument("--out", required=True, help="hypotheses JSONL to write")
    p.add_argument("--trace", help="write per-example pass drafts and scores here")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.FULL.value)
    p.add_argument("--language", default="generic", choices=["generic", "java", "python"])
    p.add_argument("--force", action="store_true")
    bm25_flags(p)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hyp", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--buckets", nargs="*", default=[], help="e.g. code:0,10,20 comment:0,5,10")
    p.add_argument("--per-example", action="store_true")

    p = sub.add_parser("pipeline", help="run every stage, resuming from current artifacts")
    p.add_argument("--config", required=True)
    p.add_argument("--force", action="store_true")
    bm25_flags(p)
    return parser


def _load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    overrides = {}
    if getattr(args, "bm25_k1", None) is not None:
        overrides["bm25_k1"] = args.bm25_k1
    if getattr(args, "bm25_b", None) is not None:
        overrides["bm25_b"] = args.bm25_b
    if overrides:
        cfg.model = dataclasses.replace(cfg.model, **overrides)
    if getattr(args, "data", None):
        cfg.data_dir = args.data
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "preprocess":
            cfg = _load_config(args)
            if args.dedup_test:
                cfg.dedup_test = True
            result = cmd_preprocess(cfg, args.input)
        elif args.command == "build-index":
            result = cmd_build_index(_load_config(args), args.force)
        elif args.command == "train":
            result = cmd_train(_load_config(args), args.phase, args.out, args.init, args.force)
            result = {k: v for k, v in result.items() if k != "reports"}
        elif args.command == "generate":
            hyps = cmd_generate(
                args.ckpt,
                args.index,
                args.input,
                args.out,
                args.trace,
                args.mode,
                args.language,
                args.force,
                bm25=(args.bm25_k1, args.bm25_b),
            )
            result = {"generated": len(hyps), "out": args.out}
        elif args.command == "evaluate":
            result = cmd_evaluate(args.hyp, args.ref, args.report, args.buckets, args.per_example)
            result = {k: result[k] for k in ("bleu_1", "bleu_2", "bleu_3", "bleu_4", "rouge_l", "meteor", "cider")}
        else:
            result = cmd_pipeline(_load_config(args), args.force)
            result = {k: result[k] for k in ("bleu_4", "rouge_l", "meteor", "cider", "n_examples")}
    except (CliError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(result, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())

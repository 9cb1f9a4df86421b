"""Dataset ingestion: code tokenization, identifier keywords, vocabularies.

Code is tokenized lexically (no parser). Identifier tokens are split into
lowercase subtokens on CamelCase and snake_case boundaries; those subtokens
are the keywords fed to the keyword encoder.
"""

from __future__ import annotations

import json
import keyword as _pykeyword
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

PAD, UNK, BOS, EOS = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<unk>", "<s>", "</s>")
N_SPECIALS = len(SPECIAL_TOKENS)

JAVA_RESERVED = frozenset(
    """
    abstract assert boolean break byte case catch char class const continue
    default do double else enum extends final finally float for goto if
    implements import instanceof int interface long native new package private
    protected public return short static strictfp super switch synchronized
    this throw throws transient try void volatile while true false null var
    record yield sealed permits
    """.split()
)
PYTHON_RESERVED = frozenset(_pykeyword.kwlist) | frozenset(getattr(_pykeyword, "softkwlist", ()))
GENERIC_RESERVED = JAVA_RESERVED | PYTHON_RESERVED

RESERVED_WORDS = {
    "java": JAVA_RESERVED,
    "python": PYTHON_RESERVED,
    "generic": GENERIC_RESERVED,
}

_IDENTIFIER = re.compile(r"[A-Za-z_$][A-Za-z0-9_$]*\Z")
_SEPARATORS = re.compile(r"[_$]+")
# An uppercase run that precedes Capitalized text ends one char early:
# "HTTPServer" -> "HTTP", "Server". Trailing digits stay with their run.
_SUBTOKEN = re.compile(r"[A-Z]+[0-9]*(?=[A-Z][a-z])|[A-Z]?[a-z]+[0-9]*|[A-Z]+[0-9]*|[0-9]+")

_CODE_TOKEN = re.compile(
    r"""
    "(?:\\.|[^"\\\n])*"          # double-quoted string
    | '(?:\\.|[^'\\\n])*'        # single-quoted string / char
    | [A-Za-z_$][A-Za-z0-9_$]*   # identifier or keyword
    | \d+(?:\.\d+)?[A-Za-z]*     # number with optional suffix
    | >>>=|<<=|>>=|>>>|\*\*=|//=|->|::|\+\+|--|&&|\|\||==|!=|<=|>=|<<|>>
    | \*\*|//|\+=|-=|\*=|/=|%=|&=|\|=|\^=
    | \S                         # any other single symbol
    """,
    re.VERBOSE,
)
_LINE_COMMENT = {"java": r"//[^\n]*", "python": r"#[^\n]*", "generic": r"//[^\n]*"}
_BLOCK_COMMENT = r"/\*.*?\*/"


@dataclass(frozen=True)
class CodeCommentPair:
    """One code snippet with its keywords and reference comment."""

    code_tokens: tuple[str, ...]
    keyword_tokens: tuple[str, ...]
    comment_tokens: tuple[str, ...]
    source_id: str = ""
    raw_code: str = ""
    raw_comment: str = ""

    def __post_init__(self) -> None:
        if not self.code_tokens:
            raise ValueError(f"pair {self.source_id!r}: code_tokens must be nonempty")
        if not self.comment_tokens:
            raise ValueError(f"pair {self.source_id!r}: comment_tokens must be nonempty")
        # tolerate lists from callers
        object.__setattr__(self, "code_tokens", tuple(self.code_tokens))
        object.__setattr__(self, "keyword_tokens", tuple(self.keyword_tokens))
        object.__setattr__(self, "comment_tokens", tuple(self.comment_tokens))

    def to_json(self) -> dict:
        return {
            "id": self.source_id,
            "code_tokens": list(self.code_tokens),
            "keyword_tokens": list(self.keyword_tokens),
            "comment_tokens": list(self.comment_tokens),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "CodeCommentPair":
        return cls(
            code_tokens=tuple(obj["code_tokens"]),
            keyword_tokens=tuple(obj.get("keyword_tokens", ())),
            comment_tokens=tuple(obj["comment_tokens"]),
            source_id=str(obj.get("id", "")),
        )


@dataclass(frozen=True)
class LengthLimits:
    max_code_len: int = 300
    max_comment_len: int = 30

    def __post_init__(self) -> None:
        if self.max_code_len < 1 or self.max_comment_len < 1:
            raise ValueError("length limits must be >= 1")


@dataclass
class Vocabulary:
    """Token/id map. Ids 0-3 are PAD, UNK, BOS, EOS."""

    id_to_token: list[str]
    max_size: int
    token_to_id: dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        if tuple(self.id_to_token[:N_SPECIALS]) != SPECIAL_TOKENS:
            raise ValueError("vocabulary must start with the special tokens")
        if len(self.id_to_token) > self.max_size:
            raise ValueError(f"vocabulary of {len(self.id_to_token)} exceeds max_size {self.max_size}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def save(self, path: str | Path) -> None:
        body = "".join(tok + "\n" for tok in self.id_to_token[N_SPECIALS:])
        Path(path).write_text(body, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, max_size: int | None = None) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        tokens = list(SPECIAL_TOKENS) + lines
        return cls(tokens, max_size if max_size is not None else len(tokens))


def split_identifier(token: str) -> list[str]:
    """Split an identifier into lowercase subtokens.

    >>> split_identifier("parseHTTPResponse")
    ['parse', 'http', 'response']
    >>> split_identifier("set_value")
    ['set', 'value']

    Tokens that are not identifiers come back as a single lowercased item.
    """
    if not token:
        raise ValueError("split_identifier requires a nonempty token")
    if not _IDENTIFIER.match(token):
        return [token.lower()]
    parts: list[str] = []
    for chunk in _SEPARATORS.split(token):
        if chunk:
            parts.extend(m.group(0).lower() for m in _SUBTOKEN.finditer(chunk))
    return parts or [token.lower()]


def is_identifier(token: str, language: str = "generic") -> bool:
    try:
        reserved = RESERVED_WORDS[language]
    except KeyError:
        raise ValueError(f"unknown language {language!r}; expected one of {sorted(RESERVED_WORDS)}") from None
    return bool(_IDENTIFIER.match(token)) and token not in reserved


def extract_keywords(code_tokens: Sequence[str], language: str = "generic") -> list[str]:
    """Subtokens of user-defined identifiers, duplicates kept, in order."""
    if not code_tokens:
        raise ValueError("extract_keywords requires nonempty code_tokens")
    out: list[str] = []
    for tok in code_tokens:
        if is_identifier(tok, language):
            out.extend(s for s in split_identifier(tok) if s.strip("_$"))
    return out


def subtokenize_code(code_tokens: Iterable[str]) -> list[str]:
    """Flatten code into subtokens; non-identifiers pass through lowercased."""
    return [s for tok in code_tokens for s in split_identifier(tok)]


def tokenize_code(code: str, language: str = "generic") -> list[str]:
    if language not in RESERVED_WORDS:
        raise ValueError(f"unknown language {language!r}")
    text = code
    if language != "python":
        text = re.sub(_BLOCK_COMMENT, " ", text, flags=re.DOTALL)
    text = re.sub(_LINE_COMMENT[language], " ", text)
    return _CODE_TOKEN.findall(text)


def tokenize_comment(comment: str) -> list[str]:
    return comment.lower().split()


def make_pair(code: str, comment: str, source_id: str = "", language: str = "generic") -> CodeCommentPair:
    code_tokens = tokenize_code(code, language)
    if not code_tokens:
        raise ValueError(f"pair {source_id!r}: code has no tokens")
    return CodeCommentPair(
        code_tokens=tuple(code_tokens),
        keyword_tokens=tuple(extract_keywords(code_tokens, language)),
        comment_tokens=tuple(tokenize_comment(comment)),
        source_id=source_id,
        raw_code=code,
        raw_comment=comment,
    )


def build_vocabulary(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """Most frequent tokens first, ties broken lexicographically."""
    if max_size <= N_SPECIALS:
        raise ValueError(f"max_size must exceed {N_SPECIALS}, got {max_size}")
    counts: Counter[str] = Counter()
    for seq in corpus:
        counts.update(seq)
    for special in SPECIAL_TOKENS:
        counts.pop(special, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - N_SPECIALS]]
    return Vocabulary(list(SPECIAL_TOKENS) + kept, max_size)


def encode(tokens: Sequence[str], vocab: Vocabulary, limit: int, add_bos_eos: bool = False) -> list[int]:
    if limit < 1:
        raise ValueError("limit must be >= 1")
    ids = [vocab.lookup(t) for t in tokens[:limit]]
    if add_bos_eos:
        ids = [BOS] + ids + [EOS]
    return ids


def decode(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Map ids back to tokens, dropping PAD/BOS and stopping at EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.id_to_token[i])
    return out


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            yield obj


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, sort_keys=True) + "\n")


def read_raw_pairs(path: str | Path, language: str = "generic") -> list[CodeCommentPair]:
    """Load ``{"code", "comment", "id"?}`` lines into tokenized pairs."""
    pairs = []
    for lineno, obj in enumerate(read_jsonl(path), start=1):
        if "code" not in obj or "comment" not in obj:
            raise ValueError(f"{path}: record {lineno} lacks 'code' or 'comment'")
        pairs.append(make_pair(obj["code"], obj["comment"], str(obj.get("id", lineno - 1)), language))
    return pairs


def read_pairs(path: str | Path) -> list[CodeCommentPair]:
    return [CodeCommentPair.from_json(obj) for obj in read_jsonl(path)]


def write_pairs(path: str | Path, pairs: Iterable[CodeCommentPair]) -> None:
    write_jsonl(path, (p.to_json() for p in pairs))

"""Synthetic Java methods with templated comments for smoke runs.

Each pair comes from a (template, field) combination. Held-out pairs use
combinations absent from training whose template and field both occur in
training, so they are solvable by recombination.
"""

from __future__ import annotations

import random

from .corpus import CodeCommentPair, make_pair

FIELDS = [
    ("count", "int"),
    ("name", "String"),
    ("size", "int"),
    ("color", "Color"),
    ("width", "double"),
    ("user name", "String"),
    ("file path", "Path"),
    ("max value", "long"),
]

TEMPLATES = [
    ("public {T} get{F}() {{ return this.{f}; }}", "returns the {w}"),
    ("public void set{F}({T} {f}) {{ this.{f} = {f}; }}", "sets the {w}"),
    ("public boolean has{F}() {{ return this.{f} != null; }}", "checks whether the {w} is set"),
    ("public void reset{F}() {{ this.{f} = DEFAULT_{U}; }}", "resets the {w} to its default"),
    ("public void print{F}() {{ System.out.println(this.{f}); }}", "prints the {w} to standard output"),
]


def _render(template: int, field: int, idx: str) -> CodeCommentPair:
    words, jtype = FIELDS[field]
    parts = words.split()
    camel_upper = "".join(p.capitalize() for p in parts)
    camel_lower = parts[0] + "".join(p.capitalize() for p in parts[1:])
    code_t, comment_t = TEMPLATES[template]
    code = code_t.format(T=jtype, F=camel_upper, f=camel_lower, U="_".join(p.upper() for p in parts))
    return make_pair(code, comment_t.format(w=words), source_id=idx, language="java")


def toy_corpus(n_train: int = 20, n_heldout: int = 10, seed: int = 7) -> tuple[list[CodeCommentPair], list[CodeCommentPair]]:
    combos = [(t, f) for t in range(len(TEMPLATES)) for f in range(len(FIELDS))]
    if n_train + n_heldout > len(combos):
        raise ValueError(f"only {len(combos)} distinct pairs available")
    rng = random.Random(seed)
    rng.shuffle(combos)
    train = combos[:n_train]
    seen_t = {t for t, _ in train}
    seen_f = {f for _, f in train}
    rest = [c for c in combos[n_train:] if c[0] in seen_t and c[1] in seen_f]
    if len(rest) < n_heldout:
        raise ValueError("not enough held-out combinations covered by the training templates")
    held = rest[:n_heldout]
    return (
        [_render(t, f, f"train-{i}") for i, (t, f) in enumerate(train)],
        [_render(t, f, f"heldout-{i}") for i, (t, f) in enumerate(held)],
    )

"""Deterministic desk-scale surrogates for the four code-analysis tasks.

The generators emit records in the same JSONL schemas the real corpora use,
so the loaders are exercised end to end.

* clone  - snippet pairs; positives are identifier-renamed copies, negatives
  share no statement kind with their source.
* defect - snippets with or without a planted unsafe-call motif.
* flaky  - test bodies with or without a nondeterminism motif, labels flipped
  with probability ``label_noise``.
* search - (query, code) pairs; the query is a shuffled subset of the code's
  salient words.
"""

from __future__ import annotations

import json
import string
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError

TASK_NAMES = ("clone", "defect", "flaky", "search")

# name -> (kind, metric, schema)
TASK_LAYOUT = {
    "clone": ("pair_classification", "f1", "code_pair_with_index"),
    "defect": ("binary_classification", "accuracy", "single_function"),
    "flaky": ("binary_classification", "f1", "single_function"),
    "search": ("retrieval", "mrr", "query_code"),
}

_IDENT = string.ascii_lowercase

# every statement kind carries its own keyword
STATEMENTS = (
    "{0}=ADD({1},{2});",
    "{0}=MUL({1},{2});",
    "IF({0}<{1}){0}={1};",
    "FOR({0}<{1}){2}++;",
    "RET {0};",
    "PUT({0},{1},{2});",
    "{0}=FN({1});",
    "WHILE({0}){0}--;",
    "{0}=SUB({1},{2});",
    "{0}=DIV({1},{2});",
)

BUG_MOTIFS = (
    "GETS({0});",
    "STRCPY({0},{1});",
    "FREE({0});FREE({0});",
    "MEMCPY({0},{1},99);",
)

TEST_STATEMENTS = (
    "ASSERT({0}=={1});",
    "{0}=NEW({1});",
    "CHECK({0});",
    "{0}.ADD({1});",
    "{0}={1}.GET();",
)

FLAKY_MOTIFS = (
    "SLEEP(9);",
    "{0}=RAND();",
    "{0}=NOW();",
    "SPAWN({0});",
)


@dataclass
class SyntheticSpec:
    train_size: int = 1000
    valid_size: int = 200
    test_size: int = 200
    rename_rate: float = 1.0
    label_noise: float = 0.1
    positive_rate: float = 0.5
    max_chars: int = 60

    def validate(self) -> SyntheticSpec:
        for name in ("train_size", "valid_size", "test_size"):
            if getattr(self, name) < 32:
                raise ConfigError(f"synthetic.{name}", "must be >= 32")
        for name in ("rename_rate", "label_noise", "positive_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"synthetic.{name}", "must lie in [0, 1]")
        if self.max_chars < 40:
            raise ConfigError("synthetic.max_chars", "must be >= 40")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> SyntheticSpec:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"synthetic.{unknown[0]}", "unknown field")
        return cls(**data).validate()


def _ident(rng) -> str:
    n = 1 if rng.random() < 0.6 else 2
    return "".join(rng.choice(list(_IDENT), size=n))


def _fill(template: str, names: list[str]) -> str:
    return template.format(*names)


def _snippet(rng, n_statements: int = 2, exclude=()) -> tuple[list[str], list[str]]:
    """Distinct statement kinds, none of them in ``exclude``."""
    pool = [t for t in STATEMENTS if t not in exclude]
    templates = [pool[i] for i in rng.choice(len(pool), size=n_statements, replace=False)]
    slots = [[_ident(rng) for _ in range(3)] for _ in templates]
    return templates, slots


def _render(templates, slots) -> str:
    return "".join(_fill(t, s) for t, s in zip(templates, slots))


def _rename(slots: list[list[str]], rate: float, rng) -> list[list[str]]:
    """Consistently rename each distinct identifier with probability ``rate``."""
    mapping = {}
    for name in dict.fromkeys(n for s in slots for n in s):
        if rng.random() < rate:
            new = _ident(rng)
            while new == name:
                new = _ident(rng)
            mapping[name] = new
    return [[mapping.get(n, n) for n in s] for s in slots]


def _clone_split(rng, size, spec: SyntheticSpec, start_idx: int):
    index, pairs = [], []
    nxt = start_idx
    for _ in range(size):
        label = int(rng.random() < spec.positive_rate)
        while True:
            templates, slots = _snippet(rng)
            a = _render(templates, slots)
            if label:
                b = _render(templates, _rename(slots, spec.rename_rate, rng))
            else:
                b = _render(*_snippet(rng, exclude=templates))
            # both snippets must fit one sequence untruncated
            if len(a) + len(b) <= spec.max_chars:
                break
        index.append({"idx": str(nxt), "func": a})
        index.append({"idx": str(nxt + 1), "func": b})
        pairs.append({"id1": str(nxt), "id2": str(nxt + 1), "label": label})
        nxt += 2
    return index, pairs, nxt


def _motif_split(rng, size, spec: SyntheticSpec, pool, motifs, noise: float):
    records = []
    for _ in range(size):
        n = int(rng.integers(2, 4))
        parts = [_fill(pool[rng.integers(len(pool))], [_ident(rng) for _ in range(3)]) for _ in range(n)]
        label = int(rng.random() < spec.positive_rate)
        if label:
            motif = _fill(motifs[rng.integers(len(motifs))], [_ident(rng) for _ in range(3)])
            while len(parts) > 1 and sum(map(len, parts)) + len(motif) > spec.max_chars:
                parts.pop()
            parts.insert(int(rng.integers(0, len(parts) + 1)), motif)
        else:
            while len(parts) > 1 and sum(map(len, parts)) > spec.max_chars:
                parts.pop()
        if noise and rng.random() < noise:
            label = 1 - label
        records.append({"func": "".join(parts), "target": label})
    return records


def _word_list(rng, n: int = 400) -> list[str]:
    consonants, vowels = "bcdfghklmnprstvz", "aeiou"
    words = set()
    while len(words) < n:
        length = int(rng.integers(2, 4))
        words.add("".join(rng.choice(list(consonants)) + rng.choice(list(vowels)) for _ in range(length)))
    return sorted(words)


def _search_split(rng, size, words):
    records = []
    for _ in range(size):
        picked = [words[i] for i in rng.choice(len(words), size=3, replace=False)]
        arg = _ident(rng)
        code = f"DEF {picked[0]}({arg}){{RET {picked[1]}({arg})+{picked[2]};}}"
        k = int(rng.integers(2, 4))
        subset = [picked[i] for i in rng.permutation(3)[:k]]
        records.append({"query": " ".join(subset), "code": code})
    return records


def generate_synthetic_tasks(spec: SyntheticSpec, seed: int) -> dict[str, dict]:
    """Return ``{task: {split: records}}``; clone also carries an ``index``."""
    spec.validate()
    sizes = {"train": spec.train_size, "valid": spec.valid_size, "test": spec.test_size}
    out: dict[str, dict] = {}

    rng = np.random.default_rng([seed, 1])
    clone = {"index": []}
    nxt = 0
    for split, n in sizes.items():
        index, pairs, nxt = _clone_split(rng, n, spec, nxt)
        clone["index"].extend(index)
        clone[split] = pairs
    out["clone"] = clone

    rng = np.random.default_rng([seed, 2])
    out["defect"] = {s: _motif_split(rng, n, spec, STATEMENTS, BUG_MOTIFS, 0.0) for s, n in sizes.items()}

    rng = np.random.default_rng([seed, 3])
    out["flaky"] = {s: _motif_split(rng, n, spec, TEST_STATEMENTS, FLAKY_MOTIFS, spec.label_noise)
                    for s, n in sizes.items()}

    rng = np.random.default_rng([seed, 4])
    words = _word_list(rng)
    out["search"] = {s: _search_split(rng, n, words) for s, n in sizes.items()}
    return out


def canonical_records(corpus: dict[str, dict], task: str, split: str) -> list[dict]:
    """Records in the form :func:`mtpeft.data.build_dataset` consumes."""
    if task == "clone":
        code = {r["idx"]: r["func"] for r in corpus["clone"]["index"]}
        return [{"code1": code[p["id1"]], "code2": code[p["id2"]], "label": p["label"]}
                for p in corpus["clone"][split]]
    return corpus[task][split]


def _write_jsonl(path: Path, records) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def write_synthetic_tasks(corpus: dict[str, dict], out_dir) -> dict[str, dict]:
    """Write each task in its distributed layout; return the file map."""
    out_dir = Path(out_dir)
    files: dict[str, dict] = {}
    for task in TASK_NAMES:
        if task not in corpus:
            continue
        tdir = out_dir / task
        tdir.mkdir(parents=True, exist_ok=True)
        entry = {"schema": TASK_LAYOUT[task][2]}
        for split in ("train", "valid", "test"):
            p = tdir / f"{split}.jsonl"
            _write_jsonl(p, corpus[task][split])
            entry[split] = str(p)
        if task == "clone":
            p = tdir / "index.jsonl"
            _write_jsonl(p, corpus[task]["index"])
            entry["index"] = str(p)
        files[task] = entry
    return files

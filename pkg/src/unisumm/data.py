"""Examples, datasets, JSONL ingestion and synthetic summarization tasks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .vocab import SEP

SPLITS = ("train_pool", "test")


def derive_seed(*parts):
    """Stable 63-bit seed from any JSON-serializable parts."""
    digest = hashlib.sha256(json.dumps(parts, sort_keys=True).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass(frozen=True)
class Example:
    id: str
    document: str
    summary: tuple
    query: str | None = None

    def __post_init__(self):
        summary = (self.summary,) if isinstance(self.summary, str) else tuple(self.summary)
        object.__setattr__(self, "summary", summary)
        if not self.document.strip():
            raise DataError(f"example {self.id!r} has an empty document")
        if not summary or not all(s.strip() for s in summary):
            raise DataError(f"example {self.id!r} needs at least one non-empty summary")

    @property
    def source_text(self):
        """Model input: the query (if any) and document joined by a separator."""
        if self.query:
            return f"{self.query} {SEP} {self.document}"
        return self.document

    @property
    def target_text(self):
        return self.summary[0]

    def to_record(self):
        rec = {"id": self.id, "document": self.document,
               "summary": self.summary[0] if len(self.summary) == 1 else list(self.summary)}
        if self.query is not None:
            rec["query"] = self.query
        return rec


@dataclass
class Dataset:
    task_id: str
    split: str
    examples: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"split must be one of {SPLITS}, got {self.split!r}")
        self.examples = tuple(self.examples)
        seen = set()
        for ex in self.examples:
            if ex.id in seen:
                raise DataError(f"duplicate example id {ex.id!r} in task {self.task_id!r}")
            seen.add(ex.id)
        self._by_id = {ex.id: ex for ex in self.examples}

    def __len__(self):
        return len(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __iter__(self):
        return iter(self.examples)

    @property
    def ids(self):
        return [ex.id for ex in self.examples]

    def get(self, example_id):
        return self._by_id[example_id]

    def to_jsonl(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for ex in self.examples:
                fh.write(json.dumps(ex.to_record(), sort_keys=True) + "\n")


def check_disjoint(train, test):
    overlap = set(train.ids) & set(test.ids)
    if overlap:
        raise DataError(f"train_pool and test share ids: {sorted(overlap)[:5]}")


def load_jsonl(path, task_id=None, split="train_pool"):
    """Read line-delimited ``{id, document, summary[, query]}`` records.

    ``summary`` may be a string or a list of reference strings.

    Raises:
        DataError: on a malformed line (message carries the line number) or
            a duplicate id.
        FileNotFoundError: if ``path`` does not exist.
    """
    path = Path(path)
    examples, seen = [], set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ex = Example(
                    id=str(rec["id"]),
                    document=rec["document"],
                    summary=rec["summary"],
                    query=rec.get("query"),
                )
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError, DataError) as err:
                raise DataError(f"{path}:{lineno}: malformed record ({err})") from None
            if ex.id in seen:
                raise DataError(f"{path}:{lineno}: duplicate id {ex.id!r}")
            seen.add(ex.id)
            examples.append(ex)
    return Dataset(task_id or path.stem, split, examples)


# ---------------------------------------------------------------- synthetic tasks

WORD_POOL = tuple(f"w{i:02d}" for i in range(64))
MARKERS = ("mk1", "mk2", "mk3", "mk4")
DELIM = "."
KINDS = ("lead-k", "keyword-after-marker", "copy")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Recipe for a synthetic task whose summary is a function of the document.

    ``vocab_seed`` picks the task's word subset, so tasks with different
    seeds read like different domains.
    """

    task_id: str
    kind: str
    vocab_seed: int = 0
    seed: int = 0
    n_train: int = 200
    n_test: int = 40
    marker: str = "mk1"
    lead_k: int = 1
    keyword_len: int = 3
    domain_words: int = 40
    n_sentences: tuple = (2, 4)
    sentence_len: tuple = (4, 7)

    def validate(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown synthetic kind {self.kind!r}; choose from {KINDS}")
        if self.sentence_len[0] < self.keyword_len + 1:
            raise DataError("sentences too short to hold a marker and its keywords")
        if self.kind == "lead-k" and self.lead_k > self.n_sentences[0]:
            raise DataError("lead_k exceeds the minimum sentence count")
        return self


def _synthetic_example(spec, words, rng, ex_id):
    lo, hi = spec.n_sentences
    n_sent = 1 if spec.kind == "copy" else int(rng.integers(lo, hi + 1))
    sents = [list(rng.choice(words, size=int(rng.integers(spec.sentence_len[0],
                                                         spec.sentence_len[1] + 1))))
             for _ in range(n_sent)]
    if spec.kind == "lead-k":
        summary = f" {DELIM} ".join(" ".join(s) for s in sents[: spec.lead_k])
    elif spec.kind == "copy":
        summary = " ".join(sents[0])
    else:
        which = int(rng.integers(n_sent))
        sent = sents[which]
        pos = int(rng.integers(0, len(sent) - spec.keyword_len + 1))
        summary = " ".join(sent[pos:pos + spec.keyword_len])
        sent.insert(pos, spec.marker)
    document = " ".join(" ".join(s) + f" {DELIM}" for s in sents)
    return Example(ex_id, document, summary)


def make_synthetic_task(spec):
    """Generate ``(train_pool, test)`` datasets for ``spec`` deterministically."""
    spec.validate()
    words = list(np.random.default_rng(spec.vocab_seed).choice(
        WORD_POOL, size=spec.domain_words, replace=False))
    rng = np.random.default_rng(derive_seed("synthetic", spec.task_id, spec.seed))
    train = [_synthetic_example(spec, words, rng, f"{spec.task_id}-train-{i:05d}")
             for i in range(spec.n_train)]
    test = [_synthetic_example(spec, words, rng, f"{spec.task_id}-test-{i:05d}")
            for i in range(spec.n_test)]
    return Dataset(spec.task_id, "train_pool", train), Dataset(spec.task_id, "test", test)


def synthetic_vocabulary_tokens():
    return list(WORD_POOL) + list(MARKERS) + [DELIM]

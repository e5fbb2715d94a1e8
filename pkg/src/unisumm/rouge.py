"""ROUGE-1/2/L F1 and score aggregation."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def tokenize_norm(text, stem=False):
    """Lowercase and split on runs of non-alphanumeric characters."""
    tokens = [t for t in _NON_ALNUM.split(text.lower()) if t]
    if stem:
        tokens = [_light_stem(t) for t in tokens]
    return tokens


def _light_stem(token):
    # suffix stripping only; not a Porter stemmer
    for suffix in ("ing", "ed", "es", "s"):
        if len(token) > len(suffix) + 2 and token.endswith(suffix):
            return token[: -len(suffix)]
    return token


@dataclass(frozen=True)
class PRF:
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0

    @classmethod
    def from_counts(cls, overlap, hyp_total, ref_total):
        if hyp_total == 0 or ref_total == 0:
            return cls()
        p = overlap / hyp_total
        r = overlap / ref_total
        return cls(p, r, 2 * p * r / (p + r) if p + r > 0 else 0.0)

    def as_dict(self):
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class RougeScore:
    rouge1: PRF = field(default_factory=PRF)
    rouge2: PRF = field(default_factory=PRF)
    rougeL: PRF = field(default_factory=PRF)

    def as_dict(self):
        return {"rouge1": self.rouge1.as_dict(), "rouge2": self.rouge2.as_dict(),
                "rougeL": self.rougeL.as_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: PRF(**v) for k, v in d.items()})


def _as_tokens(x, stem=False):
    return tokenize_norm(x, stem) if isinstance(x, str) else list(x)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def rouge_n(ref, hyp, n, stem=False):
    """Clipped n-gram overlap. ``ref``/``hyp`` are strings or token lists."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ref_ng = ngrams(_as_tokens(ref, stem), n)
    hyp_ng = ngrams(_as_tokens(hyp, stem), n)
    overlap = sum((ref_ng & hyp_ng).values())
    return PRF.from_counts(overlap, sum(hyp_ng.values()), sum(ref_ng.values()))


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(ref, hyp, stem=False):
    """Summary-level LCS over the whole tokenized texts (no sentence split)."""
    r, h = _as_tokens(ref, stem), _as_tokens(hyp, stem)
    return PRF.from_counts(lcs_length(r, h), len(h), len(r))


def score(ref, hyp, stem=False):
    """All three ROUGE variants. A list of references is scored per reference
    and averaged component-wise."""
    if isinstance(ref, (list, tuple)) and ref and isinstance(ref[0], str):
        scores = [score(r, hyp, stem) for r in ref]
        return mean_scores(scores)
    r, h = _as_tokens(ref, stem), _as_tokens(hyp, stem)
    return RougeScore(rouge_n(r, h, 1), rouge_n(r, h, 2), rouge_l(r, h))


def mean_scores(scores):
    scores = list(scores)
    if not scores:
        raise ValueError("cannot average an empty list of scores")

    def avg(metric):
        parts = [getattr(s, metric) for s in scores]
        return PRF(*(math.fsum(getattr(p, a) for p in parts) / len(parts)
                     for a in ("precision", "recall", "f1")))

    return RougeScore(avg("rouge1"), avg("rouge2"), avg("rougeL"))


@dataclass(frozen=True)
class Aggregate:
    per_set: tuple
    mean: float
    std: float | None

    def as_dict(self):
        return {"per_set": list(self.per_set), "mean": self.mean, "std": self.std}


def aggregate(values):
    """Mean and sample (n-1) standard deviation; std is None for one value."""
    values = [float(v) for v in values]
    if not values:
        raise ValueError("aggregate needs at least one score")
    mu = math.fsum(values) / len(values)
    std = None
    if len(values) > 1:
        std = math.sqrt(math.fsum((v - mu) ** 2 for v in values) / (len(values) - 1))
    return Aggregate(tuple(values), mu, std)


def aggregate_scores(per_set_scores):
    """Aggregate a list of RougeScore into {metric: Aggregate} over F1."""
    per_set_scores = list(per_set_scores)
    if not per_set_scores:
        raise ValueError("aggregate needs at least one score")
    return {m: aggregate(getattr(s, m).f1 for s in per_set_scores)
            for m in ("rouge1", "rouge2", "rougeL")}

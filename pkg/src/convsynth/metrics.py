"""Deterministic lexical metrics.

Text normalization (case folding, punctuation stripping, stopword removal,
stemming), clipped-count unigram precision/recall/F1, answer faithfulness
against the grounding document, full-extraction detection, no-answer
detection, and harmonic-mean aggregation.

All functions are pure. Scores are fractions in [0, 1]; report renderers are
responsible for turning them into percentages.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable

from .core import Document
from .porter import stem

#: Multiset of normalized unigrams.
TokenBag = Counter

_TOKEN_RE = re.compile(r"[a-z0-9]+(?:'[a-z]+)*")


def load_stopwords(path: str | Path) -> frozenset[str]:
    """Load a stopword list: one token per line, UTF-8, blank lines ignored."""
    words = Path(path).read_text(encoding="utf-8").split("\n")
    return frozenset(w.strip() for w in words if w.strip())


def _default_stopwords() -> frozenset[str]:
    text = resources.files("convsynth").joinpath("data/stopwords.txt").read_text("utf-8")
    return frozenset(w.strip() for w in text.split("\n") if w.strip())


DEFAULT_STOPWORDS: frozenset[str] = _default_stopwords()

#: Patterns treated as explicit no-answer responses (exact match after
#: trimming, case-insensitive).
DEFAULT_NO_ANSWER_PATTERNS: tuple[str, ...] = ("CANNOTANSWER",)


def _stem_fixed(token: str) -> str:
    """Stem to a fixed point so that normalization is idempotent (a single
    stemming pass is not, e.g. agreed -> agre -> agr)."""
    current = token
    for _ in range(5):
        nxt = stem(current)
        if nxt == current:
            return current
        current = nxt
    return current


def normalize(text: str, stopwords: frozenset[str] = DEFAULT_STOPWORDS) -> TokenBag:
    """Normalize text into a bag of lowercase, stopword-free, stemmed unigrams.

    Stopwords are filtered both before and after stemming so no token in the
    returned bag is ever a stopword.
    """
    lowered = text.casefold().replace("’", "'")
    bag: TokenBag = Counter()
    for token in _TOKEN_RE.findall(lowered):
        if token.endswith("'s"):
            token = token[:-2]
        token = token.rstrip("'")
        if not token or token in stopwords:
            continue
        stemmed = _stem_fixed(token)
        if stemmed and stemmed not in stopwords:
            bag[stemmed] += 1
    return bag


def unigram_prf(candidate: TokenBag, reference: TokenBag) -> tuple[float, float, float]:
    """Clipped-count unigram precision, recall and F1 of candidate vs reference."""
    overlap = sum((candidate & reference).values())
    total_c = sum(candidate.values())
    total_r = sum(reference.values())
    p = overlap / total_c if total_c else 0.0
    r = overlap / total_r if total_r else 0.0
    f1 = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f1


def faithfulness_precision(
    answer: str, doc: Document, stopwords: frozenset[str] = DEFAULT_STOPWORDS
) -> float:
    """Lexical precision of an answer against its grounding document.

    Callers must filter out no-answer responses first; this measures
    hallucination in actual answers only. An answer with no contentful
    tokens after normalization has nothing to hallucinate and scores 1.0
    (see :func:`is_empty_after_normalization` to flag such cases).
    """
    bag = normalize(answer, stopwords)
    if not bag:
        return 1.0
    doc_bag = normalize(doc.text, stopwords)
    overlap = sum((bag & doc_bag).values())
    return overlap / sum(bag.values())


def is_empty_after_normalization(
    text: str, stopwords: frozenset[str] = DEFAULT_STOPWORDS
) -> bool:
    return not normalize(text, stopwords)


def is_no_answer(text: str, patterns: Iterable[str] = DEFAULT_NO_ANSWER_PATTERNS) -> bool:
    """True iff the trimmed text equals one of the configured no-answer
    patterns, case-insensitively. Deliberately an exact match: hedged
    answers that merely mention inability do not count."""
    probe = text.strip().casefold()
    return any(probe == p.strip().casefold() for p in patterns)


def _squash_whitespace(text: str) -> str:
    return " ".join(text.split()).casefold()


def is_fully_extracted(answer: str, doc: Document) -> bool:
    """True iff the answer occurs verbatim (modulo whitespace and case) as a
    contiguous, word-aligned substring of the document text.

    Word alignment matters: a match that starts or ends mid-word is a
    fragment, not an extraction, and would also break the guarantee that
    extracted answers are perfectly faithful.
    """
    probe = _squash_whitespace(answer)
    if not probe:
        return False
    haystack = _squash_whitespace(doc.text)
    start = 0
    while True:
        idx = haystack.find(probe, start)
        if idx < 0:
            return False
        end = idx + len(probe)
        left_aligned = idx == 0 or not (haystack[idx - 1].isalnum() and probe[0].isalnum())
        right_aligned = end == len(haystack) or not (
            haystack[end].isalnum() and probe[-1].isalnum()
        )
        if left_aligned and right_aligned:
            return True
        start = idx + 1


def harmonic_mean(a: float, b: float) -> float:
    """2ab/(a+b), defined as 0 when both inputs are 0. Inputs must share a
    unit (both fractions or both percentages)."""
    if a + b == 0:
        return 0.0
    return 2 * a * b / (a + b)


@dataclass(frozen=True)
class ClassScores:
    """Per-class F1 and classification accuracy with their harmonic means.

    ``a`` is the class of turns the reference answered, ``ua`` the class it
    declined. All values are fractions in [0, 1]; a class with no turns
    scores 0.0 and reports its count as 0.
    """

    f1_answerable: float
    f1_unanswerable: float
    f1_hm: float
    cls_acc_a: float
    cls_acc_ua: float
    cls_acc_hm: float
    n_a: int
    n_ua: int

    @classmethod
    def from_parts(
        cls,
        f1_answerable: float,
        f1_unanswerable: float,
        cls_acc_a: float,
        cls_acc_ua: float,
        n_a: int,
        n_ua: int,
    ) -> "ClassScores":
        return cls(
            f1_answerable=f1_answerable,
            f1_unanswerable=f1_unanswerable,
            f1_hm=harmonic_mean(f1_answerable, f1_unanswerable),
            cls_acc_a=cls_acc_a,
            cls_acc_ua=cls_acc_ua,
            cls_acc_hm=harmonic_mean(cls_acc_a, cls_acc_ua),
            n_a=n_a,
            n_ua=n_ua,
        )

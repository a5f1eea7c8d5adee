"""Evaluation: keyword disease labeling, clinical metrics, NLG metrics, recall@k."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from importlib import resources

from .errors import UsageError

DISEASES = (
    "No Finding",
    "Enlarged Cardiomediastinum",
    "Cardiomegaly",
    "Lung Lesion",
    "Lung Opacity",
    "Edema",
    "Consolidation",
    "Pneumonia",
    "Atelectasis",
    "Pneumothorax",
    "Pleural Effusion",
    "Pleural Other",
    "Fracture",
    "Support Devices",
)

_TOKEN_RE = re.compile(r"[a-z0-9]+")

#: single-token negation cues; "negative for" is handled as a bigram
_NEGATION_SINGLE = ("no", "without")
_NEGATION_WINDOW = 3


def _tokens(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def load_keyword_table(path=None) -> dict[str, list[str]]:
    """Disease -> trigger phrases; defaults to the packaged table."""
    if path is None:
        raw = resources.files("cvse.data").joinpath("chexpert_keywords.json").read_text("utf-8")
    else:
        with open(path, "r", encoding="utf-8") as fh:
            raw = fh.read()
    return json.loads(raw)


def _validate_table(table: dict[str, list[str]]) -> None:
    if not table:
        raise UsageError("keyword table is empty")
    for disease in DISEASES[1:]:
        if not table.get(disease):
            raise UsageError(f"keyword table has no trigger phrases for {disease!r}")


def _has_unnegated_match(tokens: list[str], phrase: list[str]) -> bool:
    m = len(phrase)
    if m == 0:
        return False
    for i in range(len(tokens) - m + 1):
        if tokens[i:i + m] != phrase:
            continue
        window = tokens[max(0, i - _NEGATION_WINDOW):i]
        negated = any(cue in window for cue in _NEGATION_SINGLE)
        if not negated:
            for j in range(len(window) - 1):
                if window[j] == "negative" and window[j + 1] == "for":
                    negated = True
                    break
        if not negated:
            return True
    return False


def label_diseases(sentences: list[str], table: dict[str, list[str]]) -> tuple[int, ...]:
    """14 binary flags in the fixed DISEASES order.

    A disease is positive iff some sentence contains one of its trigger
    phrases as a contiguous token run with no negation cue ("no", "without",
    "negative for") within the 3 tokens before the match. "No Finding" is
    positive iff every other class is negative.
    """
    _validate_table(table)
    token_lists = [_tokens(s) for s in sentences]
    flags = {}
    for disease in DISEASES[1:]:
        phrases = [_tokens(p) for p in table[disease]]
        flags[disease] = int(any(
            _has_unnegated_match(toks, phrase) for toks in token_lists for phrase in phrases
        ))
    flags["No Finding"] = int(not any(flags[d] for d in DISEASES[1:]))
    return tuple(flags[d] for d in DISEASES)


@dataclass(frozen=True)
class ClinicalReport:
    per_disease: dict[str, dict[str, float]]
    macro_accuracy: float
    macro_precision: float
    macro_recall: float

    def to_dict(self) -> dict:
        return {
            "per_disease": self.per_disease,
            "macro": {
                "accuracy": self.macro_accuracy,
                "precision": self.macro_precision,
                "recall": self.macro_recall,
            },
        }


def clinical_metrics(predicted: list[tuple[int, ...]], gold: list[tuple[int, ...]]) -> ClinicalReport:
    """Per-disease accuracy/precision/recall plus unweighted macro averages.

    Precision and recall are defined as 0 when their denominator is 0.
    """
    if len(predicted) != len(gold) or not predicted:
        raise UsageError("predicted and gold label lists must be aligned and non-empty")
    for row in list(predicted) + list(gold):
        if len(row) != len(DISEASES):
            raise UsageError(f"label rows must have {len(DISEASES)} entries")
    per_disease = {}
    for j, disease in enumerate(DISEASES):
        tp = sum(1 for p, g in zip(predicted, gold) if p[j] and g[j])
        tn = sum(1 for p, g in zip(predicted, gold) if not p[j] and not g[j])
        fp = sum(1 for p, g in zip(predicted, gold) if p[j] and not g[j])
        fn = sum(1 for p, g in zip(predicted, gold) if not p[j] and g[j])
        per_disease[disease] = {
            "accuracy": (tp + tn) / len(gold),
            "precision": tp / (tp + fp) if tp + fp else 0.0,
            "recall": tp / (tp + fn) if tp + fn else 0.0,
        }
    n = len(DISEASES)
    return ClinicalReport(
        per_disease=per_disease,
        macro_accuracy=sum(v["accuracy"] for v in per_disease.values()) / n,
        macro_precision=sum(v["precision"] for v in per_disease.values()) / n,
        macro_recall=sum(v["recall"] for v in per_disease.values()) / n,
    )


# ---------------------------------------------------------------------------
# NLG metrics

def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidates: list[list[str]], references: list[list[str]], max_n: int = 4) -> float:
    """Corpus-level BLEU with modified n-gram precision and brevity penalty.

    Geometric mean of clipped n-gram precisions for n = 1..max_n over the
    whole corpus, times exp(1 - r/c) when the candidate corpus is shorter
    than the reference corpus. Returns 0 if any n-gram precision is 0.
    """
    if not candidates or len(candidates) != len(references):
        raise UsageError("bleu needs aligned, non-empty candidate and reference corpora")
    if not 1 <= max_n <= 4:
        raise UsageError("max_n must be between 1 and 4")
    clipped = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            cand_counts = _ngrams(cand, n)
            ref_counts = _ngrams(ref, n)
            totals[n - 1] += sum(cand_counts.values())
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
    if any(t == 0 or c == 0 for t, c in zip(totals, clipped)):
        return 0.0
    log_precision = sum(math.log(c / t) for c, t in zip(clipped, totals)) / max_n
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_precision)


def _lcs_length(a: list[str], b: list[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(candidate: list[str], reference: list[str], beta: float = 1.2) -> float:
    """LCS-based F-score; 0 when either side is empty or the LCS is empty."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return (1 + beta * beta) * p * r / (r + beta * beta * p)


def rouge_l_corpus(candidates: list[list[str]], references: list[list[str]], beta: float = 1.2) -> float:
    if not candidates or len(candidates) != len(references):
        raise UsageError("rouge_l_corpus needs aligned, non-empty corpora")
    return sum(rouge_l(c, r, beta) for c, r in zip(candidates, references)) / len(candidates)


def _prefix_stem_match(a: str, b: str) -> bool:
    # one token is a >=4-letter prefix of the other ("effusion" ~ "effusions")
    if a == b:
        return False
    shorter, longer = (a, b) if len(a) <= len(b) else (b, a)
    return len(shorter) >= 4 and longer.startswith(shorter)


def meteor(candidate: list[str], reference: list[str]) -> float:
    """Simplified unigram METEOR without synonym resources.

    Alignment is one-to-one, exact matches first, then prefix-stem matches;
    each candidate token greedily takes the reference position that continues
    the previous chunk, else the leftmost free one. Score is
    ``F_mean * (1 - 0.5 * (chunks / matches)^3)`` with F_mean = 10PR/(R+9P).
    """
    if not candidate or not reference:
        return 0.0
    align: list[int | None] = [None] * len(candidate)
    used = [False] * len(reference)
    for predicate in (lambda a, b: a == b, _prefix_stem_match):
        for i, tok in enumerate(candidate):
            if align[i] is not None:
                continue
            options = [j for j, ref_tok in enumerate(reference)
                       if not used[j] and predicate(tok, ref_tok)]
            if not options:
                continue
            prev = align[i - 1] if i > 0 else None
            if prev is not None and prev + 1 in options:
                j = prev + 1
            else:
                j = options[0]
            align[i] = j
            used[j] = True
    matches = sum(1 for j in align if j is not None)
    if matches == 0:
        return 0.0
    chunks = 0
    for i, j in enumerate(align):
        if j is None:
            continue
        if i == 0 or align[i - 1] is None or align[i - 1] + 1 != j:
            chunks += 1
    p = matches / len(candidate)
    r = matches / len(reference)
    f_mean = 10.0 * p * r / (r + 9.0 * p)
    penalty = 0.5 * (chunks / matches) ** 3
    return f_mean * (1.0 - penalty)


def meteor_corpus(candidates: list[list[str]], references: list[list[str]]) -> float:
    if not candidates or len(candidates) != len(references):
        raise UsageError("meteor_corpus needs aligned, non-empty corpora")
    return sum(meteor(c, r) for c, r in zip(candidates, references)) / len(candidates)


# ---------------------------------------------------------------------------
# retrieval metric

def recall_at_k(retrieved: list[list], gold: list[set], k: int) -> float:
    """Mean over studies of |top-k retrieved ∩ gold| / |gold|.

    Studies with empty gold sets are excluded; raises if every gold set is
    empty or some retrieved list has fewer than k entries.
    """
    if len(retrieved) != len(gold):
        raise UsageError("retrieved and gold lists must be aligned")
    scores = []
    for ids, want in zip(retrieved, gold):
        if not want:
            continue
        if len(ids) < k:
            raise UsageError(f"retrieved list has {len(ids)} entries, need at least k={k}")
        scores.append(len(set(ids[:k]) & set(want)) / len(want))
    if not scores:
        raise UsageError("every gold set is empty")
    return sum(scores) / len(scores)

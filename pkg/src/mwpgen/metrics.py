"""Automatic generation metrics: BLEU-2, ROUGE-L, Dist-n, number recall.

All functions take aligned lists of token sequences (one candidate per
reference). Strings are accepted too and run through the problem
tokenizer first.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .dataset import tokenize_problem
from .equations import canonical_number

ROUGE_BETA = 1.2


def _as_tokens(seq):
    return tokenize_problem(seq) if isinstance(seq, str) else list(seq)


def _ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def _check_aligned(candidates, references):
    if len(candidates) != len(references):
        raise ValueError("candidates and references must be aligned lists")
    if not candidates:
        raise ValueError("no examples to score")
    return ([_as_tokens(c) for c in candidates], [_as_tokens(r) for r in references])


def bleu2(candidates, references):
    """Corpus BLEU with uniform 1/2-gram weights and brevity penalty.

    Modified n-gram precision is pooled over the corpus (clipped counts
    summed before dividing), the standard corpus-level formulation.
    """
    cands, refs = _check_aligned(candidates, references)
    matches = [0, 0]
    totals = [0, 0]
    cand_len = 0
    ref_len = 0
    for cand, ref in zip(cands, refs):
        cand_len += len(cand)
        ref_len += len(ref)
        for n in (1, 2):
            cand_counts = Counter(_ngrams(cand, n))
            ref_counts = Counter(_ngrams(ref, n))
            matches[n - 1] += sum(min(c, ref_counts[g]) for g, c in cand_counts.items())
            totals[n - 1] += sum(cand_counts.values())
    if cand_len == 0:
        return 0.0
    precisions = [m / t if t else 0.0 for m, t in zip(matches, totals)]
    if min(precisions) == 0.0:
        return 0.0
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(0.5 * math.log(precisions[0]) + 0.5 * math.log(precisions[1]))


def _lcs_length(a, b):
    # One-row DP; O(len(a)*len(b)).
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_single(candidate, reference, beta=ROUGE_BETA):
    """ROUGE-L F-measure for one pair; empty pair scores 0."""
    cand, ref = _as_tokens(candidate), _as_tokens(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    b2 = beta * beta
    return (1 + b2) * recall * precision / (recall + b2 * precision)


def rouge_l(candidates, references, beta=ROUGE_BETA):
    """Mean per-example ROUGE-L F over the corpus."""
    cands, refs = _check_aligned(candidates, references)
    return sum(rouge_l_single(c, r, beta) for c, r in zip(cands, refs)) / len(cands)


def dist_n(candidates, n):
    """Distinct n-grams across all candidates over total n-gram count."""
    if n not in (1, 2):
        raise ValueError("n must be 1 or 2")
    seen = set()
    total = 0
    for cand in candidates:
        grams = _ngrams(_as_tokens(cand), n)
        seen.update(grams)
        total += len(grams)
    return len(seen) / total if total else 0.0


def _number_values(tokens):
    vals = []
    for tok in tokens:
        v = canonical_number(tok)
        if v is not None:
            vals.append(v)
    return vals


def number_recall(candidates, references, equation_numbers=None):
    """Micro-averaged fraction of reference numbers present in candidates.

    With equation_numbers (per-example lists of values) the denominator
    switches to equation numbers instead of reference numbers. Returns
    (recall, defined); defined is False when no example contributes any
    number to the denominator.
    """
    cands, refs = _check_aligned(candidates, references)
    hit = 0
    total = 0
    for i, (cand, ref) in enumerate(zip(cands, refs)):
        if equation_numbers is not None:
            wanted = [canonical_number(str(v)) if not hasattr(v, "as_tuple") else v
                      for v in equation_numbers[i]]
        else:
            wanted = _number_values(ref)
        if not wanted:
            continue
        have = set()
        for v in _number_values(cand):
            have.add(v)
        total += len(wanted)
        hit += sum(1 for v in wanted if v in have)
    if total == 0:
        return 0.0, False
    return hit / total, True


@dataclass
class MetricReport:
    """Corpus metric values plus a per-example breakdown."""

    bleu2: float
    rouge_l: float
    dist1: float
    dist2: float
    number_recall: float
    number_recall_defined: bool = True
    rouge_beta: float = ROUGE_BETA
    per_example: list = field(default_factory=list)

    def to_json(self):
        return json.dumps(
            {
                "bleu2": self.bleu2,
                "rouge_l": self.rouge_l,
                "dist1": self.dist1,
                "dist2": self.dist2,
                "number_recall": self.number_recall,
                "number_recall_defined": self.number_recall_defined,
                "rouge_beta": self.rouge_beta,
                "per_example": self.per_example,
            },
            sort_keys=True,
            indent=2,
        )

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            bleu2=d["bleu2"],
            rouge_l=d["rouge_l"],
            dist1=d["dist1"],
            dist2=d["dist2"],
            number_recall=d["number_recall"],
            number_recall_defined=d["number_recall_defined"],
            rouge_beta=d.get("rouge_beta", ROUGE_BETA),
            per_example=d.get("per_example", []),
        )


def evaluate(candidates, references, equation_numbers=None):
    """Compute every metric and bundle a per-example breakdown."""
    cands, refs = _check_aligned(candidates, references)
    nr, defined = number_recall(cands, refs, equation_numbers)
    per_example = []
    for i, (c, r) in enumerate(zip(cands, refs)):
        row = {
            "index": i,
            "bleu2": bleu2([c], [r]),
            "rouge_l": rouge_l_single(c, r),
        }
        nr_i, def_i = number_recall(
            [c], [r], None if equation_numbers is None else [equation_numbers[i]]
        )
        row["number_recall"] = nr_i if def_i else None
        per_example.append(row)
    return MetricReport(
        bleu2=bleu2(cands, refs),
        rouge_l=rouge_l(cands, refs),
        dist1=dist_n(cands, 1),
        dist2=dist_n(cands, 2),
        number_recall=nr,
        number_recall_defined=defined,
        per_example=per_example,
    )

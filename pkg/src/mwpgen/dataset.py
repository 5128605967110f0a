"""Dataset ingestion: problem tokenization, vocabularies, number alignment.

The dataset file format is JSON lines, one record per example:
{"equations": ["0.5*x+0.3*y=10", ...], "problem": "...", "id": optional}.
Preprocessing drops over-long problems, normalizes equation variables,
aligns numbers for the copy mechanism and reports what happened.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources

from .equations import (
    EquationSequence,
    EquationSyntaxError,
    canonical_number,
    normalize_variables,
    tokenize_equation_set,
)

PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN = "<pad>", "<unk>", "<bos>", "<eos>"
RESERVED_TOKENS = (PAD_TOKEN, UNK_TOKEN, BOS_TOKEN, EOS_TOKEN, "[M]")
PAD_ID, UNK_ID, BOS_ID, EOS_ID, MASK_ID = range(5)

MAX_PROBLEM_TOKENS = 45

_WORD_RE = re.compile(r"\d+\.\d+|\d+|[a-z]+(?:'[a-z]+)?|\S")


class DataError(ValueError):
    """Unreadable or schema-violating input data."""


def tokenize_problem(text):
    """Lowercase, keep numerals whole, split words and punctuation."""
    return _WORD_RE.findall(text.lower())


class Vocabulary:
    """Token to id mapping with fixed low ids for PAD/UNK/BOS/EOS/[M].

    Tokens below the frequency threshold are absorbed by UNK. Non-reserved
    ids are assigned by descending frequency, ties alphabetical, so a
    rebuilt vocabulary over the same corpus is identical.
    """

    def __init__(self, tokens):
        self.itos = list(RESERVED_TOKENS) + [t for t in tokens if t not in RESERVED_TOKENS]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise DataError("duplicate tokens in vocabulary")

    @classmethod
    def from_corpus(cls, corpus, min_freq=2):
        counts = Counter()
        for tokens in corpus:
            counts.update(tokens)
        kept = [t for t, c in counts.items() if c >= min_freq and t not in RESERVED_TOKENS]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept)

    def id(self, token):
        return self.stoi.get(token, UNK_ID)

    def ids(self, tokens):
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def token(self, idx):
        return self.itos[idx]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def to_json(self):
        return json.dumps({"tokens": self.itos[len(RESERVED_TOKENS):]}, sort_keys=True)

    @classmethod
    def from_json(cls, text):
        return cls(json.loads(text)["tokens"])

    def sha256(self):
        return hashlib.sha256(self.to_json().encode("utf-8")).hexdigest()


def build_vocab(corpus, min_freq=2):
    """Vocabulary over token lists; frequency < min_freq maps to UNK."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    return Vocabulary.from_corpus(corpus, min_freq=min_freq)


@dataclass
class TrainingExample:
    """One preprocessed equation set / problem pair.

    topic_id is 1-based once assigned by the topic model; 0 means not yet
    assigned. copy_alignment maps problem token positions to the equation
    token position holding the same number value.
    """

    id: str
    eq_texts: list[str]
    equations: EquationSequence
    problem: list[str]
    topic_id: int = 0
    copy_alignment: dict[int, int] = field(default_factory=dict)

    def to_record(self):
        return {
            "id": self.id,
            "equations": self.eq_texts,
            "problem_tokens": self.problem,
            "topic": self.topic_id,
            "copy_alignment": {str(k): v for k, v in self.copy_alignment.items()},
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            id=rec["id"],
            eq_texts=list(rec["equations"]),
            equations=tokenize_equation_set(rec["equations"]),
            problem=list(rec["problem_tokens"]),
            topic_id=int(rec.get("topic", 0)),
            copy_alignment={int(k): v for k, v in rec.get("copy_alignment", {}).items()},
        )


def align_numbers(equations, problem):
    """Map each matching problem number to the first equal equation number.

    Values compare exactly after canonicalization ("0.50" aligns to 0.5);
    unmatched problem numbers are simply left out.
    """
    eq_values = equations.number_values()
    alignment = {}
    for pos, tok in enumerate(problem):
        value = canonical_number(tok)
        if value is None:
            continue
        for eq_pos in sorted(eq_values):
            if eq_values[eq_pos] == value:
                alignment[pos] = eq_pos
                break
    return alignment


def corrupt_problem(problem, mask_rate, delete_rate, rng):
    """Noise a token list: mask to UNK, then drop survivors at random.

    Each position is independently replaced by UNK with mask_rate, then
    independently deleted with delete_rate. At least one token always
    survives (the first post-mask token is kept as a fallback).
    """
    if not 0 <= mask_rate < 1 or not 0 <= delete_rate < 1:
        raise ValueError("corruption rates must lie in [0, 1)")
    if not problem:
        return []
    n = len(problem)
    masked = [UNK_TOKEN if rng.random() < mask_rate else tok for tok in problem]
    kept = [tok for tok in masked if rng.random() >= delete_rate]
    if not kept:
        kept = [masked[0]]
    return kept


@dataclass
class PreprocessReport:
    total: int = 0
    kept: int = 0
    dropped_long: int = 0
    malformed: list = field(default_factory=list)
    unk_rate: float | None = None
    max_problem_len: int = MAX_PROBLEM_TOKENS

    def to_text(self):
        lines = [
            "preprocessing report",
            f"records read:    {self.total}",
            f"kept:            {self.kept}",
            f"dropped (>{self.max_problem_len}):   {self.dropped_long}",
            f"malformed:       {len(self.malformed)}",
        ]
        if self.unk_rate is not None:
            lines.append(f"unk rate:        {self.unk_rate:.4f}")
        for lineno, reason in self.malformed:
            lines.append(f"  line {lineno}: {reason}")
        return "\n".join(lines) + "\n"


def preprocess_dataset(records, max_problem_len=MAX_PROBLEM_TOKENS):
    """Turn raw {"equations", "problem"} dicts into TrainingExamples.

    Problems longer than max_problem_len tokens are dropped (the boundary
    length itself is kept). Malformed records are skipped and reported
    with their 1-based position.
    """
    examples = []
    report = PreprocessReport(max_problem_len=max_problem_len)
    for default_lineno, rec in enumerate(records, start=1):
        # read_jsonl yields (lineno, record) pairs; plain records also work.
        if isinstance(rec, tuple) and len(rec) == 2 and isinstance(rec[0], int):
            lineno, rec = rec
        else:
            lineno = default_lineno
        report.total += 1
        try:
            if isinstance(rec, DataError):
                raise rec
            if not isinstance(rec, dict):
                raise DataError("record is not an object")
            eqs = rec.get("equations")
            problem_text = rec.get("problem")
            if not eqs or not isinstance(eqs, list) or not all(isinstance(e, str) for e in eqs):
                raise DataError("missing or invalid 'equations'")
            if not problem_text or not isinstance(problem_text, str):
                raise DataError("missing or invalid 'problem'")
            problem = tokenize_problem(problem_text)
            if not problem:
                raise DataError("problem text tokenizes to nothing")
            if len(problem) > max_problem_len:
                report.dropped_long += 1
                continue
            norm = normalize_variables(eqs)
            seq = tokenize_equation_set(norm)
            ex = TrainingExample(
                id=str(rec.get("id", f"ex{lineno:04d}")),
                eq_texts=norm,
                equations=seq,
                problem=problem,
                copy_alignment=align_numbers(seq, problem),
            )
            examples.append(ex)
            report.kept += 1
        except (DataError, EquationSyntaxError) as exc:
            report.malformed.append((lineno, str(exc)))
    return examples, report


def read_jsonl(path):
    """Parse a JSONL file into (lineno, object) pairs; bad lines become DataError objects."""
    rows = []
    try:
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rows.append((lineno, json.loads(line)))
                except json.JSONDecodeError as exc:
                    rows.append((lineno, DataError(f"invalid JSON: {exc}")))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    return rows


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def unk_rate(corpus, vocab):
    """Fraction of corpus tokens that fall back to UNK under vocab."""
    total = 0
    unk = 0
    for tokens in corpus:
        for tok in tokens:
            total += 1
            if tok not in vocab:
                unk += 1
    return unk / total if total else 0.0


def sample_problems():
    """Records of the bundled toy corpus of equation/problem pairs."""
    text = resources.files("mwpgen").joinpath(
        "data/sample_problems.jsonl").read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def sample_edges_path():
    """Filesystem path of the bundled concept edge list."""
    return str(resources.files("mwpgen").joinpath("data/sample_concept_edges.tsv"))

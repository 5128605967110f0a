"""Equation lexing, templates and variable normalization.

Equations are sequences of typed math tokens: operators drawn from
+ - * / ^ = ( ), numbers (maximal-munch, so "0.5" is one token) and
single-letter variables. The template of an equation is the same token
sequence with every number replaced by the mask token [M]; the mask
drives the generalization gate in the encoder.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation

OPERATOR_CHARS = "+-*/^=()"
MASK_TOKEN = "[M]"

KIND_OPERATOR = "operator"
KIND_NUMBER = "number"
KIND_VARIABLE = "variable"
KIND_MASK = "mask"  # only produced when lexing already-masked template text

_NUMBER_RE = re.compile(r"\d+\.\d+|\d+|\.\d+")


class EquationSyntaxError(ValueError):
    """Raised for text that is not a lexable equation."""


@dataclass
class TypedToken:
    """One math token: surface text, kind, and numeric value for numbers."""

    surface: str
    kind: str
    value: float | None = None


@dataclass
class EquationSequence:
    """Token sequence for one or more equations plus its masked template.

    `template` is a parallel list of surfaces differing from the tokens
    only at number positions, where it holds [M]. `boundaries` lists the
    token index at which each equation after the first starts.
    """

    tokens: list[TypedToken]
    template: list[str]
    boundaries: list[int] = field(default_factory=list)

    def __len__(self):
        return len(self.tokens)

    def surfaces(self):
        return [t.surface for t in self.tokens]

    def number_positions(self):
        return [i for i, t in enumerate(self.tokens) if t.kind == KIND_NUMBER]

    def number_values(self):
        """Canonical (Decimal) value at each number position."""
        return {i: canonical_number(self.tokens[i].surface) for i in self.number_positions()}


def canonical_number(surface):
    """Decimal value of a number surface, or None if it is not a number.

    Decimal equality ignores trailing zeros, so "0.50" and "0.5" compare
    equal while "10" and "0.1" stay distinct. Only plain digit strings
    qualify; Decimal spellings like "nan" or "1e3" do not.
    """
    if not _NUMBER_RE.fullmatch(surface):
        return None
    try:
        return Decimal(surface)
    except InvalidOperation:
        return None


def _lex(raw):
    """Tokenize with character spans. Returns list of (TypedToken, start, end)."""
    if not raw or not raw.strip():
        raise EquationSyntaxError("empty equation")
    out = []
    depth = 0
    i, n = 0, len(raw)
    while i < n:
        ch = raw[i]
        if ch.isspace():
            i += 1
            continue
        if ch in OPERATOR_CHARS:
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth < 0:
                    raise EquationSyntaxError(f"unbalanced parentheses near index {i}")
            out.append((TypedToken(ch, KIND_OPERATOR), i, i + 1))
            i += 1
            continue
        if ch.isdigit() or ch == ".":
            m = _NUMBER_RE.match(raw, i)
            if not m:
                raise EquationSyntaxError(f"illegal character {ch!r} at index {i}")
            surf = m.group(0)
            out.append((TypedToken(surf, KIND_NUMBER, value=float(surf)), i, m.end()))
            i = m.end()
            continue
        if ch.isalpha() and ch.isascii():
            if i + 1 < n and raw[i + 1].isalpha():
                raise EquationSyntaxError(
                    f"multi-letter identifier starting at index {i}; variables are single letters"
                )
            out.append((TypedToken(ch, KIND_VARIABLE), i, i + 1))
            i += 1
            continue
        if raw.startswith(MASK_TOKEN, i):
            out.append((TypedToken(MASK_TOKEN, KIND_MASK), i, i + len(MASK_TOKEN)))
            i += len(MASK_TOKEN)
            continue
        raise EquationSyntaxError(f"illegal character {ch!r} at index {i}")
    if depth != 0:
        raise EquationSyntaxError("unbalanced parentheses")
    if not out:
        raise EquationSyntaxError("empty equation")
    return out


def tokenize_equation(raw):
    """Lex one equation into an EquationSequence (template built in the same pass)."""
    tokens = [t for t, _, _ in _lex(raw)]
    template = [MASK_TOKEN if t.kind == KIND_NUMBER else t.surface for t in tokens]
    return EquationSequence(tokens=tokens, template=template)


def tokenize_equation_set(texts):
    """Lex several equations into one concatenated sequence with boundaries."""
    if not texts:
        raise EquationSyntaxError("empty equation set")
    tokens = []
    template = []
    boundaries = []
    for k, raw in enumerate(texts):
        seq = tokenize_equation(raw)
        if k > 0:
            boundaries.append(len(tokens))
        tokens.extend(seq.tokens)
        template.extend(seq.template)
    return EquationSequence(tokens=tokens, template=template, boundaries=boundaries)


def detokenize(tokens):
    """Render tokens back to text, one space between surfaces (round-trips the lexer)."""
    return " ".join(t.surface for t in tokens)


def mask_numbers(raw):
    """Raw text with every number spliced out for the [M] mask token."""
    spans = _lex(raw)
    pieces = []
    pos = 0
    for tok, start, end in spans:
        pieces.append(raw[pos:start])
        pieces.append(MASK_TOKEN if tok.kind == KIND_NUMBER else raw[start:end])
        pos = end
    pieces.append(raw[pos:])
    return "".join(pieces)


def normalize_variables(equations):
    """Rename variables to x, y, z in first-appearance order across the set.

    Substitution is simultaneous (token-level), so already-used names like
    a trailing x cannot collide. Spacing in the input text is preserved.
    """
    canon = ("x", "y", "z")
    lexed = [_lex(raw) for raw in equations]
    mapping = {}
    for spans in lexed:
        for tok, _, _ in spans:
            if tok.kind == KIND_VARIABLE and tok.surface not in mapping:
                if len(mapping) == len(canon):
                    raise EquationSyntaxError(
                        f"more than {len(canon)} distinct variables in equation set"
                    )
                mapping[tok.surface] = canon[len(mapping)]
    out = []
    for raw, spans in zip(equations, lexed):
        pieces = []
        pos = 0
        for tok, start, end in spans:
            pieces.append(raw[pos:start])
            if tok.kind == KIND_VARIABLE:
                pieces.append(mapping[tok.surface])
            else:
                pieces.append(raw[start:end])
            pos = end
        pieces.append(raw[pos:])
        out.append("".join(pieces))
    return out

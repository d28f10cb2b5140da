"""Model formula grammar.

::

    formula  := response '~' rhs
    rhs      := term (('+' term) | ('-' '1'))*
    term     := name | '1' | '0' | '(' reterms '|' group ('/' group)* ')'
    reterms  := '1' | '1' '+' name
    group    := name (':' name)*

Names match ``[A-Za-z_.][A-Za-z0-9_.]*``; whitespace is ignored anywhere.
``(1|A/B)`` expands to ``(1|A) + (1|A:B)``. Interactions (``a*b``,
``a:b`` outside a grouping), function calls such as ``offset(x)`` and
other operators raise :class:`~poolprev.errors.UnknownConstructError`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from ..errors import FormulaSyntaxError, UnknownConstructError
from ..model_core import Link

_TOKEN = re.compile(
    r"(?P<ws>\s+)|(?P<name>[A-Za-z_.][A-Za-z0-9_.]*)|(?P<num>\d+(?:\.\d*)?)|(?P<op>[~+\-()|/*:^%])"
)


@dataclass(frozen=True)
class RandomTerm:
    grouping: tuple[str, ...]
    slopes: tuple[str, ...] = ()

    @property
    def group_key(self) -> str:
        return ":".join(self.grouping)

    @property
    def inner(self) -> tuple[str, ...]:
        return ("1",) + self.slopes

    @property
    def level_name(self) -> str:
        return self.grouping[-1]

    def __str__(self):
        inner = " + ".join(self.inner)
        return f"({inner}|{self.group_key})"


@dataclass(frozen=True)
class ModelFormula:
    response: str
    fixed_terms: tuple[str, ...]
    random_terms: tuple[RandomTerm, ...] = ()
    intercept: bool = True
    link: Link = Link.LOGIT
    text: str = ""

    @property
    def columns(self) -> set[str]:
        cols = set(self.fixed_terms)
        for t in self.random_terms:
            cols.update(t.grouping)
            cols.update(t.slopes)
        return cols

    def __str__(self):
        if self.text:
            return self.text
        parts = [("1" if self.intercept else "0")] + list(self.fixed_terms)
        parts += [str(t) for t in self.random_terms]
        return f"{self.response} ~ " + " + ".join(parts)


def _tokenize(text):
    pos = 0
    out = []
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise FormulaSyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            out.append((kind, m.group(kind), pos))
        pos = m.end()
    out.append(("end", "", len(text)))
    return out


class _Parser:
    def __init__(self, text):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    def peek(self, k=0):
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self):
        tok = self.toks[self.i]
        self.i += 1
        return tok

    def expect(self, kind, value=None):
        tok = self.next()
        if tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            got = tok[1] or "end of formula"
            raise FormulaSyntaxError(f"expected {want!r}, found {got!r}", tok[2])
        return tok

    def parse(self, link):
        response = self.expect("name")[1]
        self.expect("op", "~")
        fixed, random, intercept = [], [], True
        sign = "+"
        first = True
        while True:
            if not first:
                tok = self.peek()
                if tok[0] == "end":
                    break
                op = self.next()
                if op[0] != "op" or op[1] not in "+-":
                    self._unknown_or_syntax(op)
                sign = op[1]
            first = False
            if sign == "-":
                t = self.next()
                if t[0] == "num" and t[1] in ("1", "0"):
                    intercept = False
                    continue
                raise UnknownConstructError(f"- {t[1]}", t[2])
            self._term(fixed, random)
            if self._last_intercept is not None:
                intercept = self._last_intercept
        return ModelFormula(response, tuple(fixed), tuple(random), intercept, link, self.text.strip())

    _last_intercept = None

    def _unknown_or_syntax(self, tok):
        if tok[0] == "op" and tok[1] in "*:^%/":
            prev = self.toks[self.i - 2][1] if self.i >= 2 else ""
            nxt = self.peek()[1]
            raise UnknownConstructError(f"{prev}{tok[1]}{nxt}", tok[2])
        raise FormulaSyntaxError(f"unexpected {tok[1] or 'end of formula'!r}", tok[2])

    def _term(self, fixed, random):
        self._last_intercept = None
        tok = self.next()
        kind, value, pos = tok
        if kind == "num":
            if value == "1":
                self._last_intercept = True
            elif value == "0":
                self._last_intercept = False
            else:
                raise UnknownConstructError(value, pos)
        elif kind == "name":
            nxt = self.peek()
            if nxt[0] == "op" and nxt[1] == "(":
                depth, j = 0, self.i
                while j < len(self.toks) - 1:
                    if self.toks[j][1] == "(":
                        depth += 1
                    elif self.toks[j][1] == ")":
                        depth -= 1
                        if depth == 0:
                            break
                    j += 1
                end = self.toks[j][2] + 1 if j < len(self.toks) - 1 else len(self.text)
                raise UnknownConstructError(self.text[pos:end].strip(), pos)
            if nxt[0] == "op" and nxt[1] in "*:^%/":
                self.next()
                raise UnknownConstructError(f"{value}{nxt[1]}{self.peek()[1]}", pos)
            if value not in fixed:
                fixed.append(value)
        elif kind == "op" and value == "(":
            random.extend(self._random())
        else:
            raise FormulaSyntaxError(f"unexpected {value or 'end of formula'!r}", pos)

    def _random(self):
        tok = self.next()
        if tok[0] != "num" or tok[1] != "1":
            raise UnknownConstructError(f"random-effect part starting with {tok[1]!r}", tok[2])
        slopes = []
        if self.peek()[1] == "+":
            self.next()
            slopes.append(self.expect("name")[1])
        bar = self.next()
        if bar[1] != "|":
            if bar[0] == "op" and bar[1] == "+":
                raise UnknownConstructError("more than one random slope", bar[2])
            raise FormulaSyntaxError(f"expected '|', found {bar[1] or 'end of formula'!r}", bar[2])
        groups = [self._group()]
        while self.peek()[1] == "/":
            self.next()
            groups.append(self._group())
        self.expect("op", ")")
        terms = []
        path: list[str] = []
        for g in groups:
            path = path + list(g)
            terms.append(RandomTerm(tuple(path), tuple(slopes)))
        return terms

    def _group(self):
        parts = [self.expect("name")[1]]
        while self.peek()[1] == ":":
            self.next()
            parts.append(self.expect("name")[1])
        return parts


def parse_formula(text: str, link="logit") -> ModelFormula:
    """Parse a model formula such as ``"Result ~ Region + Year + (1|Village/Site)"``."""
    if not isinstance(text, str):
        raise FormulaSyntaxError("formula must be a string", 0)
    return _Parser(text).parse(Link.parse(link))

"""A tiny RASP interpreter used as the behavioural oracle for the forged models.

Programs are DAGs of per-position sequence ops. ``Select(keys, queries, pred)``
builds a selector with ``sel[q, k] = pred(keys[k], queries[q])``; ``Aggregate``
averages the selected values (exact ``Fraction`` arithmetic).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Sequence


class SOp:
    """A per-position sequence value."""

    name: str = "sop"

    def named(self, name: str) -> "SOp":
        self.name = name
        return self


@dataclass(eq=False)
class Tokens(SOp):
    name: str = "tokens"


@dataclass(eq=False)
class Indices(SOp):
    name: str = "indices"


@dataclass(eq=False)
class Length(SOp):
    name: str = "length"


@dataclass(eq=False)
class Map(SOp):
    fn: Callable
    inner: SOp
    name: str = "map"


@dataclass(eq=False)
class SequenceMap(SOp):
    fn: Callable
    left: SOp
    right: SOp
    name: str = "sequence_map"


@dataclass(eq=False)
class Select:
    keys: SOp
    queries: SOp
    predicate: Callable
    name: str = "select"

    def named(self, name: str) -> "Select":
        self.name = name
        return self


@dataclass(eq=False)
class Aggregate(SOp):
    selector: Select
    values: SOp
    default: object = 0
    name: str = "aggregate"


COMPARISONS: dict[str, Callable] = {
    "EQ": lambda k, q: k == q,
    "LT": lambda k, q: k < q,
    "LEQ": lambda k, q: k <= q,
    "GT": lambda k, q: k > q,
    "GEQ": lambda k, q: k >= q,
    "TRUE": lambda k, q: True,
}


@dataclass
class RaspLiteProgram:
    output: SOp
    alphabet: tuple[str, ...]
    name: str = "program"

    def ops(self) -> list:
        """Every op the output depends on, dependencies first."""
        seen: list = []

        def visit(op):
            if any(op is s for s in seen):
                return
            for child in _children(op):
                visit(child)
            seen.append(op)

        visit(self.output)
        return seen


def _children(op) -> list:
    if isinstance(op, Map):
        return [op.inner]
    if isinstance(op, SequenceMap):
        return [op.left, op.right]
    if isinstance(op, Select):
        return [op.keys, op.queries]
    if isinstance(op, Aggregate):
        return [op.selector, op.values]
    return []


def _numeric(v):
    return Fraction(v) if isinstance(v, (int, Fraction)) and not isinstance(v, bool) else Fraction(int(v))


def rasp_eval(program: RaspLiteProgram, tokens: Sequence[str]) -> list:
    tokens = list(tokens)
    for t in tokens:
        if t not in program.alphabet:
            raise ValueError(f"token {t!r} not in alphabet {program.alphabet}")
    n = len(tokens)
    memo: dict[int, object] = {}

    def ev(op):
        key = id(op)
        if key in memo:
            return memo[key]
        if isinstance(op, Tokens):
            val = list(tokens)
        elif isinstance(op, Indices):
            val = list(range(n))
        elif isinstance(op, Length):
            val = [n] * n
        elif isinstance(op, Map):
            val = [op.fn(x) for x in ev(op.inner)]
        elif isinstance(op, SequenceMap):
            val = [op.fn(a, b) for a, b in zip(ev(op.left), ev(op.right))]
        elif isinstance(op, Select):
            keys, queries = ev(op.keys), ev(op.queries)
            val = [[bool(op.predicate(keys[k], queries[q])) for k in range(n)] for q in range(n)]
        elif isinstance(op, Aggregate):
            sel, vals = ev(op.selector), ev(op.values)
            val = []
            for q in range(n):
                chosen = [vals[k] for k in range(n) if sel[q][k]]
                if not chosen:
                    val.append(op.default)
                elif all(isinstance(c, str) for c in chosen):
                    # categorical aggregate: defined only when the selection is unanimous
                    if len(set(chosen)) != 1:
                        raise ValueError(f"{op.name}: categorical aggregate over mixed values {chosen}")
                    val.append(chosen[0])
                else:
                    val.append(sum(_numeric(c) for c in chosen) / len(chosen))
        else:
            raise TypeError(f"unknown op {op!r}")
        memo[key] = val
        return val

    return ev(program.output)


def make_x_proportion() -> RaspLiteProgram:
    """Fraction of tokens so far (current one included) that are 'x'."""
    is_x = Map(lambda t: 1 if t == "x" else 0, Tokens()).named("is_x")
    prevs = Select(Indices(), Indices(), COMPARISONS["LEQ"]).named("prevs")
    frac = Aggregate(prevs, is_x, default=0).named("frac_x")
    return RaspLiteProgram(frac, ("w", "x", "y", "z"), "xproportion")


def make_reverse() -> RaspLiteProgram:
    length = Length()
    opp = SequenceMap(lambda n, i: n - i - 1, length, Indices()).named("opp_idx")
    flip = Select(Indices(), opp, COMPARISONS["EQ"]).named("reverse_selector")
    rev = Aggregate(flip, Tokens()).named("reverse")
    return RaspLiteProgram(rev, ("0", "1", "2"), "reverse")

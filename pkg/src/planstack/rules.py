"""Bounded temporal-logic rules: parser, quantitative robustness evaluator,
and big-M compilation into linear constraints for the mixed-integer stage.

Grammar::

    phi  := term ("|" term)*
    term := atom ("&" atom)*
    atom := pred | "G[" a "," b "](" phi ")" | "F[" a "," b "](" phi ")" | "(" phi ")"
    pred := affine cmp number        e.g.  "n <= 1.5",  "vs - 0.5*as >= 0"

`&` binds tighter than `|`. Interval bounds a, b are integer step indices.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence, Union


class RuleSyntaxError(ValueError):
    """Parse failure; carries the character position."""

    def __init__(self, msg: str, pos: int):
        super().__init__(f"{msg} (at position {pos})")
        self.pos = pos


class EncodingError(ValueError):
    """Formula cannot be encoded against the given binding/horizon."""


@dataclass(frozen=True)
class Pred:
    coeffs: tuple[tuple[str, float], ...]   # (signal name, coefficient)
    relation: str                           # "<=" | ">="
    rhs: float


@dataclass(frozen=True)
class And:
    children: tuple["Formula", ...]


@dataclass(frozen=True)
class Or:
    children: tuple["Formula", ...]


@dataclass(frozen=True)
class Always:
    a: int
    b: int
    child: "Formula"


@dataclass(frozen=True)
class Eventually:
    a: int
    b: int
    child: "Formula"


Formula = Union[Pred, And, Or, Always, Eventually]


# ---------------------------------------------------------------------------
# Parsing

_NUM = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?")
_NAME = re.compile(r"[A-Za-z_][A-Za-z_0-9]*")
_WS = re.compile(r"\s*")


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def _skip_ws(self):
        self.pos = _WS.match(self.text, self.pos).end()

    def peek(self) -> str:
        self._skip_ws()
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, lit: str):
        self._skip_ws()
        if not self.text.startswith(lit, self.pos):
            raise RuleSyntaxError(f"expected {lit!r}", self.pos)
        self.pos += len(lit)

    def parse(self) -> Formula:
        phi = self.parse_or()
        self._skip_ws()
        if self.pos != len(self.text):
            raise RuleSyntaxError("trailing input", self.pos)
        return phi

    def parse_or(self) -> Formula:
        children = [self.parse_and()]
        while self.peek() == "|":
            self.expect("|")
            children.append(self.parse_and())
        return children[0] if len(children) == 1 else Or(tuple(children))

    def parse_and(self) -> Formula:
        children = [self.parse_atom()]
        while self.peek() == "&":
            self.expect("&")
            children.append(self.parse_atom())
        return children[0] if len(children) == 1 else And(tuple(children))

    def parse_atom(self) -> Formula:
        self._skip_ws()
        rest = self.text[self.pos:]
        if rest.startswith("G[") or rest.startswith("F["):
            op = rest[0]
            self.pos += 2
            a = self.parse_int()
            self.expect(",")
            b = self.parse_int()
            self.expect("]")
            self.expect("(")
            child = self.parse_or()
            self.expect(")")
            if a < 0 or b < a:
                raise RuleSyntaxError(f"bad interval [{a},{b}]", self.pos)
            return Always(a, b, child) if op == "G" else Eventually(a, b, child)
        if rest.startswith("("):
            self.expect("(")
            phi = self.parse_or()
            self.expect(")")
            return phi
        return self.parse_pred()

    def parse_int(self) -> int:
        self._skip_ws()
        m = re.match(r"\d+", self.text[self.pos:])
        if not m:
            raise RuleSyntaxError("expected integer bound", self.pos)
        self.pos += m.end()
        return int(m.group())

    def parse_pred(self) -> Pred:
        coeffs: dict[str, float] = {}
        sign = 1.0
        first = True
        while True:
            self._skip_ws()
            ch = self.peek()
            if ch == "+":
                self.expect("+")
            elif ch == "-":
                self.expect("-")
                sign = -sign
            elif not first:
                break
            self._skip_ws()
            m = _NUM.match(self.text, self.pos)
            coef = 1.0
            if m and not self.text[self.pos] in "+-":
                coef = float(m.group())
                self.pos = m.end()
                self._skip_ws()
                if self.peek() == "*":
                    self.expect("*")
                    self._skip_ws()
            nm = _NAME.match(self.text, self.pos)
            if nm is None:
                raise RuleSyntaxError("expected signal name", self.pos)
            self.pos = nm.end()
            name = nm.group()
            coeffs[name] = coeffs.get(name, 0.0) + sign * coef
            sign = 1.0
            first = False
            self._skip_ws()
            if self.peek() not in "+-":
                break
        self._skip_ws()
        if self.text.startswith("<=", self.pos):
            rel = "<="
        elif self.text.startswith(">=", self.pos):
            rel = ">="
        else:
            raise RuleSyntaxError("expected '<=' or '>='", self.pos)
        self.pos += 2
        self._skip_ws()
        m = _NUM.match(self.text, self.pos)
        if not m:
            raise RuleSyntaxError("expected numeric right-hand side", self.pos)
        self.pos = m.end()
        return Pred(tuple(sorted(coeffs.items())), rel, float(m.group()))


def parse_rule(text: str) -> Formula:
    """Parse a single rule formula."""
    return _Parser(text).parse()


def format_rule(phi: Formula) -> str:
    """Pretty-print a formula so that parse(format(phi)) == phi."""
    if isinstance(phi, Pred):
        parts = []
        for i, (name, c) in enumerate(phi.coeffs):
            ssign = "-" if c < 0 else ("+" if i else "")
            mag = abs(c)
            term = name if mag == 1.0 else f"{mag!r}*{name}"
            parts.append(f"{ssign} {term}" if i else f"{ssign}{term}")
        return f"{' '.join(parts)} {phi.relation} {phi.rhs!r}"
    if isinstance(phi, And):
        return " & ".join(_wrap(c, parent="and") for c in phi.children)
    if isinstance(phi, Or):
        return " | ".join(_wrap(c, parent="or") for c in phi.children)
    op = "G" if isinstance(phi, Always) else "F"
    return f"{op}[{phi.a},{phi.b}]({format_rule(phi.child)})"


def _wrap(phi: Formula, parent: str) -> str:
    s = format_rule(phi)
    # parens preserve nesting that the flat grammar would otherwise merge
    if parent == "and" and isinstance(phi, (And, Or)):
        return f"({s})"
    if parent == "or" and isinstance(phi, Or):
        return f"({s})"
    return s


def load_rules(text: str) -> list[Formula]:
    """Load a rule file: one formula per line, '#' comments, blank lines ok."""
    out = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.append(parse_rule(line))
    return out


# ---------------------------------------------------------------------------
# Quantitative semantics

def _pred_value(pred: Pred, trace: Mapping[str, Sequence[float]], k: int) -> float:
    v = 0.0
    for name, c in pred.coeffs:
        if name not in trace:
            raise EncodingError(f"unknown signal {name!r}")
        v += c * trace[name][k]
    return v


def robustness(phi: Formula, trace: Mapping[str, Sequence[float]], k: int = 0) -> float:
    """Quantitative satisfaction degree at step k; positive iff satisfied."""
    if isinstance(phi, Pred):
        v = _pred_value(phi, trace, k)
        return phi.rhs - v if phi.relation == "<=" else v - phi.rhs
    if isinstance(phi, And):
        return min(robustness(c, trace, k) for c in phi.children)
    if isinstance(phi, Or):
        return max(robustness(c, trace, k) for c in phi.children)
    steps = range(k + phi.a, k + phi.b + 1)
    vals = (robustness(phi.child, trace, j) for j in steps)
    return min(vals) if isinstance(phi, Always) else max(vals)


def satisfied(phi: Formula, trace: Mapping[str, Sequence[float]], k: int = 0) -> bool:
    """Boolean semantics by direct recursion (test oracle for robustness)."""
    if isinstance(phi, Pred):
        v = _pred_value(phi, trace, k)
        return v <= phi.rhs if phi.relation == "<=" else v >= phi.rhs
    if isinstance(phi, And):
        return all(satisfied(c, trace, k) for c in phi.children)
    if isinstance(phi, Or):
        return any(satisfied(c, trace, k) for c in phi.children)
    steps = range(k + phi.a, k + phi.b + 1)
    if isinstance(phi, Always):
        return all(satisfied(phi.child, trace, j) for j in steps)
    return any(satisfied(phi.child, trace, j) for j in steps)


def horizon_of(phi: Formula) -> int:
    """Largest step index the formula can reference from step 0."""
    if isinstance(phi, Pred):
        return 0
    if isinstance(phi, (And, Or)):
        return max(horizon_of(c) for c in phi.children)
    return phi.b + horizon_of(phi.child)


# ---------------------------------------------------------------------------
# Big-M encoding against MILP columns

@dataclass(frozen=True)
class SignalBinding:
    """Maps a signal name and timestep to an affine expression over columns:
    (coeff per column dict, constant offset), plus a [lo, hi] range bound used
    to size big-M."""
    exprs: Mapping[str, Sequence[tuple[dict[int, float], float]]]
    ranges: Mapping[str, tuple[float, float]]

    def expr(self, name: str, k: int) -> tuple[dict[int, float], float]:
        if name not in self.exprs:
            raise EncodingError(f"unknown signal {name!r}")
        seq = self.exprs[name]
        if k >= len(seq):
            raise EncodingError(f"signal {name!r} not bound at step {k}")
        return seq[k]


@dataclass
class EncodedRule:
    """Linear rows over (existing columns + new binary columns).

    Row form: sum(coeffs) relation rhs, where coeffs maps column index to
    coefficient; new binary columns are indexed starting at first_new_col.
    """
    rows: list[tuple[dict[int, float], str, float]] = field(default_factory=list)
    n_new_binaries: int = 0
    root_literal: int = -1        # new-binary index of the root satisfaction variable

    def new_binary(self) -> int:
        i = self.n_new_binaries
        self.n_new_binaries += 1
        return i


EPSILON = 1e-4   # slack separating satisfied/violated at the boolean boundary


def encode_rule(phi: Formula, binding: SignalBinding, n_steps: int,
                first_new_col: int) -> EncodedRule:
    """Compile a formula to big-M rows; the root satisfaction literal is
    constrained to 1. New binary columns are first_new_col, first_new_col+1, ...
    """
    enc = EncodedRule()
    memo: dict[tuple[int, int], int] = {}

    def lit(node: Formula, k: int) -> int:
        key = (id(node), k)
        if key in memo:
            return memo[key]
        z = enc.new_binary()
        memo[key] = z
        zc = first_new_col + z
        if isinstance(node, Pred):
            coeffs: dict[int, float] = {}
            const = 0.0
            lo = hi = 0.0
            for name, c in node.coeffs:
                e_coeffs, e_const = binding.expr(name, k)
                for col, v in e_coeffs.items():
                    coeffs[col] = coeffs.get(col, 0.0) + c * v
                const += c * e_const
                r_lo, r_hi = binding.ranges[name]
                lo += min(c * r_lo, c * r_hi)
                hi += max(c * r_lo, c * r_hi)
            if node.relation == ">=":
                coeffs = {col: -v for col, v in coeffs.items()}
                const, lo, hi = -const, -hi, -lo
                rhs = -node.rhs
            else:
                rhs = node.rhs
            big_m = max(hi - rhs, rhs - lo, 0.0) + EPSILON + 1.0
            # z=1 => expr <= rhs ;  z=0 => expr >= rhs + EPSILON
            enc.rows.append(({**coeffs, zc: big_m}, "<=", rhs - const + big_m))
            enc.rows.append(({**coeffs, zc: big_m}, ">=", rhs - const + EPSILON))
        elif isinstance(node, (And, Always)):
            if isinstance(node, And):
                kids = [(c, k) for c in node.children]
            else:
                _check_interval(node, k, n_steps)
                kids = [(node.child, j) for j in range(k + node.a, k + node.b + 1)]
            for child, j in kids:
                zi = first_new_col + lit(child, j)
                enc.rows.append(({zc: 1.0, zi: -1.0}, "<=", 0.0))
        elif isinstance(node, (Or, Eventually)):
            if isinstance(node, Or):
                kids = [(c, k) for c in node.children]
            else:
                _check_interval(node, k, n_steps)
                kids = [(node.child, j) for j in range(k + node.a, k + node.b + 1)]
            row = {zc: 1.0}
            for child, j in kids:
                zi = first_new_col + lit(child, j)
                row[zi] = row.get(zi, 0.0) - 1.0
            enc.rows.append((row, "<=", 0.0))
        else:
            raise EncodingError(f"unsupported node {type(node).__name__}")
        return z

    root = lit(phi, 0)
    enc.root_literal = root
    enc.rows.append(({first_new_col + root: 1.0}, "=", 1.0))
    return enc


def _check_interval(node, k: int, n_steps: int) -> None:
    if k + node.b > n_steps:
        raise EncodingError(
            f"interval [{node.a},{node.b}] at step {k} exceeds horizon {n_steps}")

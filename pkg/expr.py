"""expr.py — univariate coefficient expressions: parse, render, evaluate, differentiate.

Grammar (whitespace-insensitive):

    expr   := term (("+" | "-") term)*
    term   := factor (("*" | "/") factor)*
    factor := "-"? power
    power  := atom ("^" factor)?          exponent must be free of x
    atom   := number | "x" | "pi" | "e" | func "(" expr ")" | "(" expr ")"
    func   := sin | cos | tan | atan | exp | ln | sqrt | abs | tanh

Trees are immutable; any number of threads may evaluate them concurrently.
"""

import logging
import math
import re
from dataclasses import dataclass

import numpy as np

from errors import DomainError, ExprSyntaxError, UnknownIdentifier

_logger = logging.getLogger("driftmle.expr")

FUNCTIONS = ("sin", "cos", "tan", "atan", "exp", "ln", "sqrt", "abs", "tanh")
CONSTANTS = {"pi": math.pi, "e": math.e}
VARIABLE = "x"

# Binding strength used by render() to decide where parentheses go.
_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}
_ATOM_PREC = 5


# ── Tree ─────────────────────────────────────────────────────────────────────

class Expr:
    """Base node. Subclasses are frozen dataclasses."""

    def __str__(self):
        return render(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float
    name: str = ""          # "pi" / "e" when parsed from a named constant


@dataclass(frozen=True)
class Var(Expr):
    pass


@dataclass(frozen=True)
class Unary(Expr):
    op: str                 # "neg" or one of FUNCTIONS
    child: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str                 # + - * / ^
    left: Expr
    right: Expr


ZERO = Const(0.0)
ONE = Const(1.0)
TWO = Const(2.0)
X = Var()


def free_of_x(e):
    """True when the tree contains no occurrence of the variable."""
    if isinstance(e, Var):
        return False
    if isinstance(e, Const):
        return True
    if isinstance(e, Unary):
        return free_of_x(e.child)
    return free_of_x(e.left) and free_of_x(e.right)


# ── Parsing ──────────────────────────────────────────────────────────────────

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>[-+*/^()])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Token:
    kind: str               # num / ident / op / end
    text: str
    offset: int             # byte offset into the UTF-8 source


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        offset = len(source[:pos].encode("utf-8"))
        if not m:
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", offset,
                                  {"number", "x", "pi", "e", "function", "(", "-"})
        if m.lastgroup != "ws":
            tokens.append(_Token(m.lastgroup, m.group(), offset))
        pos = m.end()
    tokens.append(_Token("end", "", len(source.encode("utf-8"))))
    return tokens


class _Parser:
    """Recursive-descent parser over the token list."""

    _ATOM_START = {"number", "x", "pi", "e", "function", "("}

    def __init__(self, source):
        self.tokens = _tokenize(source)
        self.i = 0

    @property
    def tok(self):
        return self.tokens[self.i]

    def _advance(self):
        t = self.tokens[self.i]
        self.i += 1
        return t

    def _expect_op(self, text, expected):
        if self.tok.kind == "op" and self.tok.text == text:
            return self._advance()
        found = self.tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", self.tok.offset, expected)

    def parse(self):
        node = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset,
                                  {"+", "-", "*", "/", "^", "end of input"})
        return node

    def expr(self):
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self._advance().text
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self._advance().text
            node = Binary(op, node, self.factor())
        return node

    def factor(self):
        if self.tok.kind == "op" and self.tok.text == "-":
            self._advance()
            return Unary("neg", self.power())
        return self.power()

    def power(self):
        base = self.atom()
        if self.tok.kind == "op" and self.tok.text == "^":
            caret = self._advance()
            exponent = self.factor()
            if not free_of_x(exponent):
                raise ExprSyntaxError("exponent must not depend on x", caret.offset,
                                      {"constant exponent"})
            return Binary("^", base, exponent)
        return base

    def atom(self):
        t = self.tok
        if t.kind == "num":
            self._advance()
            value = float(t.text)
            if not math.isfinite(value):
                raise ExprSyntaxError(f"numeric literal {t.text!r} overflows", t.offset)
            return Const(value)
        if t.kind == "ident":
            self._advance()
            if t.text == VARIABLE:
                return X
            if t.text in CONSTANTS:
                return Const(CONSTANTS[t.text], t.text)
            if t.text in FUNCTIONS:
                self._expect_op("(", {"("})
                arg = self.expr()
                self._expect_op(")", {")", "+", "-", "*", "/", "^"})
                return Unary(t.text, arg)
            raise UnknownIdentifier(t.text, t.offset)
        if t.kind == "op" and t.text == "(":
            self._advance()
            inner = self.expr()
            self._expect_op(")", {")", "+", "-", "*", "/", "^"})
            return inner
        found = t.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", t.offset, self._ATOM_START)


def parse(source):
    """Parse coefficient text into an Expr tree."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return _Parser(source).parse()


def as_expr(value):
    """Accept an Expr, coefficient text, or a bare number."""
    if isinstance(value, Expr):
        return value
    if isinstance(value, (int, float)):
        return Const(float(value))
    return parse(str(value))


# ── Rendering ────────────────────────────────────────────────────────────────

def _prec(e):
    if isinstance(e, Binary):
        return _PREC[e.op]
    if isinstance(e, Unary) and e.op == "neg":
        return _PREC["neg"]
    if isinstance(e, Const) and not e.name and (e.value < 0 or math.copysign(1.0, e.value) < 0):
        return _PREC["neg"]
    return _ATOM_PREC


def _wrap(text, cond):
    return f"({text})" if cond else text


def render(e):
    """Canonical text form; parse(render(e)) rebuilds the same evaluation order."""
    if isinstance(e, Var):
        return VARIABLE
    if isinstance(e, Const):
        if e.name:
            return e.name
        if e.value < 0 or math.copysign(1.0, e.value) < 0:
            return f"-{-e.value!r}"
        return repr(e.value)
    if isinstance(e, Unary):
        if e.op == "neg":
            return "-" + _wrap(render(e.child), _prec(e.child) < _PREC["^"])
        return f"{e.op}({render(e.child)})"
    p = _PREC[e.op]
    left, right = render(e.left), render(e.right)
    if e.op == "^":
        return (_wrap(left, _prec(e.left) <= p) + "^"
                + _wrap(right, _prec(e.right) < _PREC["neg"]))
    return (_wrap(left, _prec(e.left) < p) + e.op
            + _wrap(right, _prec(e.right) <= p))


# ── Scalar evaluation ────────────────────────────────────────────────────────

_MATH_FUNCS = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "atan": math.atan,
    "exp": math.exp, "ln": math.log, "sqrt": math.sqrt, "abs": abs,
    "tanh": math.tanh,
}


def _scalar(e, x):
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        return x
    if isinstance(e, Unary):
        v = _scalar(e.child, x)
        if e.op == "neg":
            return -v
        if e.op == "ln" and v <= 0.0:
            raise DomainError(e, v, "logarithm of a non-positive value")
        if e.op == "sqrt" and v < 0.0:
            raise DomainError(e, v, "square root of a negative value")
        try:
            out = _MATH_FUNCS[e.op](v)
        except (OverflowError, ValueError) as exc:
            raise DomainError(e, v, str(exc)) from None
    else:
        u = _scalar(e.left, x)
        v = _scalar(e.right, x)
        if e.op == "+":
            out = u + v
        elif e.op == "-":
            out = u - v
        elif e.op == "*":
            out = u * v
        elif e.op == "/":
            if v == 0.0:
                raise DomainError(e, u, "division by zero")
            out = u / v
        else:
            try:
                out = math.pow(u, v)
            except (OverflowError, ValueError, ZeroDivisionError) as exc:
                raise DomainError(e, u, str(exc) or "invalid power") from None
    if not math.isfinite(out):
        raise DomainError(e, x, "non-finite result")
    return out


def evaluate(e, x):
    """Value of `e` at the finite point x, in plain IEEE double arithmetic."""
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"evaluation point must be finite, got {x!r}")
    return _scalar(as_expr(e), x)


# ── Vectorized evaluation ────────────────────────────────────────────────────

_NP_FUNCS = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "atan": np.arctan,
    "exp": np.exp, "ln": np.log, "sqrt": np.sqrt, "abs": np.abs,
    "tanh": np.tanh,
}


_NP_ARITH = {"+": np.add, "-": np.subtract, "*": np.multiply}


def _first_bad(arr, mask):
    """First offending argument, for error messages."""
    arr = np.asarray(arr)
    if arr.ndim == 0:
        return float(arr)
    return float(np.broadcast_to(arr, np.shape(mask))[mask].flat[0])


def _check_finite(node, out, arg):
    bad = ~np.isfinite(out)
    if np.any(bad):
        raise DomainError(node, _first_bad(arg, bad), "non-finite result")
    return out


def _compile(e):
    if isinstance(e, Const):
        value = e.value
        return lambda x: value + np.zeros_like(x, dtype=float)
    if isinstance(e, Var):
        return lambda x: x
    if isinstance(e, Unary):
        child = _compile(e.child)
        if e.op == "neg":
            return lambda x: -child(x)
        fn = _NP_FUNCS[e.op]
        if e.op == "ln":
            def ln(x):
                v = child(x)
                bad = v <= 0.0
                if np.any(bad):
                    raise DomainError(e, _first_bad(v, bad), "logarithm of a non-positive value")
                return np.log(v)
            return ln
        if e.op == "sqrt":
            def sqrt(x):
                v = child(x)
                bad = v < 0.0
                if np.any(bad):
                    raise DomainError(e, _first_bad(v, bad), "square root of a negative value")
                return np.sqrt(v)
            return sqrt

        def unary(x):
            v = child(x)
            with np.errstate(all="ignore"):
                out = fn(v)
            return _check_finite(e, out, v)
        return unary

    left, right = _compile(e.left), _compile(e.right)
    if e.op == "/":
        def div(x):
            u, v = left(x), right(x)
            bad = v == 0.0
            if np.any(bad):
                raise DomainError(e, _first_bad(x, bad), "division by zero")
            with np.errstate(all="ignore"):
                out = u / v
            return _check_finite(e, out, x)
        return div
    if e.op in _NP_ARITH:
        fn = _NP_ARITH[e.op]

        def arith(x):
            with np.errstate(all="ignore"):
                out = fn(left(x), right(x))
            return _check_finite(e, out, x)
        return arith

    exponent = _scalar(e.right, 0.0)
    integral = float(exponent).is_integer()

    def power(x):
        u = left(x)
        if not integral and np.any(u < 0.0):
            raise DomainError(e, _first_bad(u, u < 0.0), "fractional power of a negative value")
        if exponent < 0.0 and np.any(u == 0.0):
            raise DomainError(e, 0.0, "negative power of zero")
        with np.errstate(all="ignore"):
            out = np.power(u, exponent)
        return _check_finite(e, out, u)
    return power


def compile_expr(e):
    """Return f(x) evaluating `e` elementwise on floats or numpy arrays.

    Raises DomainError instead of producing NaN or infinity.
    """
    fn = _compile(as_expr(e))

    def evaluator(x):
        arr = np.asarray(x, dtype=float)
        out = fn(arr)
        if np.ndim(out) == 0:
            return float(out)
        return np.asarray(out, dtype=float)
    evaluator.expr = as_expr(e)
    return evaluator


# ── Simplification & differentiation ─────────────────────────────────────────

def _is_const(e, value=None):
    return isinstance(e, Const) and (value is None or e.value == value)


def _fold(e):
    try:
        return Const(_scalar(e, 0.0))
    except DomainError:
        return e


def simplify(e):
    """Best-effort constant folding; never changes the function represented."""
    if isinstance(e, (Const, Var)):
        return e
    if isinstance(e, Unary):
        child = simplify(e.child)
        if e.op == "neg":
            if isinstance(child, Unary) and child.op == "neg":
                return child.child
            if _is_const(child):
                return Const(-child.value)
        node = Unary(e.op, child)
        return _fold(node) if _is_const(child) else node

    left, right = simplify(e.left), simplify(e.right)
    op = e.op
    if _is_const(left) and _is_const(right):
        return _fold(Binary(op, left, right))
    if op == "+":
        if _is_const(left, 0.0):
            return right
        if _is_const(right, 0.0):
            return left
    elif op == "-":
        if _is_const(right, 0.0):
            return left
        if _is_const(left, 0.0):
            return simplify(Unary("neg", right))
    elif op == "*":
        if _is_const(left, 0.0) or _is_const(right, 0.0):
            return ZERO
        if _is_const(left, 1.0):
            return right
        if _is_const(right, 1.0):
            return left
    elif op == "/":
        if _is_const(left, 0.0):
            return ZERO
        if _is_const(right, 1.0):
            return left
    elif op == "^":
        if _is_const(right, 1.0):
            return left
        if _is_const(right, 0.0):
            return ONE
    return Binary(op, left, right)


def _d(e):
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Unary):
        u, du = e.child, _d(e.child)
        op = e.op
        if op == "neg":
            return Unary("neg", du)
        if op == "sin":
            outer = Unary("cos", u)
        elif op == "cos":
            outer = Unary("neg", Unary("sin", u))
        elif op == "tan":
            outer = Binary("/", ONE, Binary("^", Unary("cos", u), TWO))
        elif op == "atan":
            outer = Binary("/", ONE, Binary("+", ONE, Binary("^", u, TWO)))
        elif op == "exp":
            outer = e
        elif op == "ln":
            outer = Binary("/", ONE, u)
        elif op == "sqrt":
            outer = Binary("/", ONE, Binary("*", TWO, e))
        elif op == "abs":
            # sign(u); evaluation raises DomainError at the kink
            outer = Binary("/", u, e)
        elif op == "tanh":
            outer = Binary("-", ONE, Binary("^", e, TWO))
        else:
            raise ValueError(f"no derivative rule for {op}")
        return Binary("*", outer, du)

    u, v = e.left, e.right
    du, dv = _d(u), _d(v)
    if e.op in "+-":
        return Binary(e.op, du, dv)
    if e.op == "*":
        return Binary("+", Binary("*", du, v), Binary("*", u, dv))
    if e.op == "/":
        return Binary("/", Binary("-", Binary("*", du, v), Binary("*", u, dv)),
                      Binary("^", v, TWO))
    # u ^ k with k free of x
    k = v
    return Binary("*", Binary("*", k, Binary("^", u, Binary("-", k, ONE))), du)


def differentiate(e):
    """d e / d x, simplified."""
    return simplify(_d(as_expr(e)))

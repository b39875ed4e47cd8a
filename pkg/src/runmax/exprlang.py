"""Small arithmetic language for coefficient and test-function expressions.

Grammar (precedence high to low)::

    primary  := NUMBER | VAR | FUNC '(' expr ')' | '(' expr ')'
    power    := primary ('^' unary)?          # right associative
    unary    := '-' unary | '+' unary | power
    term     := unary (('*' | '/') unary)*
    expr     := term (('+' | '-') term)*

Variables are ``x1`` .. ``x9`` plus ``m`` (the running-maximum slot used by
test functions over ``(m, x)``).  Expressions evaluate on scalars or numpy
arrays and are differentiated symbolically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

FUNCTIONS = ("sin", "cos", "tanh", "exp", "sqrt", "abs")
# produced by differentiation; accepted by the parser so derivatives print and re-parse
_DERIVED_FUNCTIONS = ("log", "sign")

ArrayLike = Union[float, np.ndarray]


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, offset: int, expected: Sequence[str], found: str = ""):
        self.offset = offset
        self.expected = tuple(expected)
        self.found = found
        msg = f"syntax error at offset {offset}: expected {' or '.join(self.expected)}"
        if found:
            msg += f", found {found!r}"
        super().__init__(msg)


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(f"unknown identifier {name!r} at offset {offset}")


class EvaluationError(ExprError, ArithmeticError):
    """Division by zero, domain violation, missing variable or non-finite result."""


# ---------------------------------------------------------------------------
# AST


class Node:
    __slots__ = ()

    def __add__(self, other):
        return Add(self, _lift(other))

    def __radd__(self, other):
        return Add(_lift(other), self)

    def __sub__(self, other):
        return Sub(self, _lift(other))

    def __rsub__(self, other):
        return Sub(_lift(other), self)

    def __mul__(self, other):
        return Mul(self, _lift(other))

    def __rmul__(self, other):
        return Mul(_lift(other), self)

    def __truediv__(self, other):
        return Div(self, _lift(other))

    def __neg__(self):
        return Neg(self)


def _lift(v) -> Node:
    if isinstance(v, Node):
        return v
    return Num(float(v))


@dataclass(frozen=True)
class Num(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str  # "m" or "x<k>"

    @property
    def index(self) -> int:
        """0 for ``m``, k for ``xk``."""
        return 0 if self.name == "m" else int(self.name[1:])


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class Add(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Sub(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Mul(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Div(Node):
    left: Node
    right: Node


@dataclass(frozen=True)
class Pow(Node):
    base: Node
    exponent: Node


@dataclass(frozen=True)
class Call(Node):
    func: str
    arg: Node


# ---------------------------------------------------------------------------
# Tokenizer + recursive descent parser


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, ident, op, end
    text: str
    offset: int


def _tokenize(src: str) -> list[_Tok]:
    toks: list[_Tok] = []
    raw = src.encode("utf-8")
    i, n = 0, len(raw)
    while i < n:
        c = chr(raw[i])
        if c in " \t\r\n":
            i += 1
        elif c.isdigit() or (c == "." and i + 1 < n and chr(raw[i + 1]).isdigit()):
            j = i
            while j < n and (chr(raw[j]).isdigit() or chr(raw[j]) == "."):
                j += 1
            if j < n and chr(raw[j]) in "eE":
                k = j + 1
                if k < n and chr(raw[k]) in "+-":
                    k += 1
                if k < n and chr(raw[k]).isdigit():
                    j = k
                    while j < n and chr(raw[j]).isdigit():
                        j += 1
            text = raw[i:j].decode()
            try:
                float(text)
            except ValueError:
                raise ExprSyntaxError(i, ["number"], text) from None
            toks.append(_Tok("num", text, i))
            i = j
        elif c.isalpha() or c == "_":
            j = i
            while j < n and (chr(raw[j]).isalnum() or chr(raw[j]) == "_"):
                j += 1
            toks.append(_Tok("ident", raw[i:j].decode(), i))
            i = j
        elif c in "+-*/^()":
            toks.append(_Tok("op", c, i))
            i += 1
        else:
            # report the offending byte sequence as found text
            raise ExprSyntaxError(i, ["expression"], raw[i:i + 1].decode("utf-8", "replace"))
    toks.append(_Tok("end", "", n))
    return toks


class _Parser:
    def __init__(self, src: str):
        self.toks = _tokenize(src)
        self.pos = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.pos]

    def _advance(self) -> _Tok:
        t = self.toks[self.pos]
        self.pos += 1
        return t

    def _expect(self, text: str) -> None:
        if self.tok.kind == "op" and self.tok.text == text:
            self._advance()
            return
        raise ExprSyntaxError(self.tok.offset, [repr(text)], self.tok.text)

    def parse(self) -> Node:
        node = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(self.tok.offset, ["operator", "end of input"], self.tok.text)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self._advance().text
            rhs = self.term()
            node = Add(node, rhs) if op == "+" else Sub(node, rhs)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self._advance().text
            rhs = self.unary()
            node = Mul(node, rhs) if op == "*" else Div(node, rhs)
        return node

    def unary(self) -> Node:
        if self.tok.kind == "op" and self.tok.text == "-":
            self._advance()
            return Neg(self.unary())
        if self.tok.kind == "op" and self.tok.text == "+":
            self._advance()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.primary()
        if self.tok.kind == "op" and self.tok.text == "^":
            self._advance()
            # -x^2 parses as -(x^2); x^-2 is allowed
            return Pow(base, self.unary())
        return base

    def primary(self) -> Node:
        t = self.tok
        if t.kind == "num":
            self._advance()
            return Num(float(t.text))
        if t.kind == "ident":
            self._advance()
            name = t.text
            if name in FUNCTIONS or name in _DERIVED_FUNCTIONS:
                self._expect("(")
                arg = self.expr()
                self._expect(")")
                return Call(name, arg)
            if name == "m" or (len(name) == 2 and name[0] == "x" and name[1] in "123456789"):
                return Var(name)
            if name == "pi":
                return Num(math.pi)
            raise UnknownIdentifierError(name, t.offset)
        if t.kind == "op" and t.text == "(":
            self._advance()
            node = self.expr()
            self._expect(")")
            return node
        raise ExprSyntaxError(t.offset, ["expression"], t.text)


# ---------------------------------------------------------------------------
# Evaluation


def _check(value: ArrayLike, what: str) -> ArrayLike:
    if not np.all(np.isfinite(value)):
        raise EvaluationError(f"non-finite value produced by {what}")
    return value


def _eval(node: Node, env: dict) -> ArrayLike:
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        try:
            return env[node.name]
        except KeyError:
            raise EvaluationError(f"missing variable {node.name}") from None
    if isinstance(node, Neg):
        return -_eval(node.arg, env)
    if isinstance(node, Add):
        return _eval(node.left, env) + _eval(node.right, env)
    if isinstance(node, Sub):
        return _eval(node.left, env) - _eval(node.right, env)
    if isinstance(node, Mul):
        return _eval(node.left, env) * _eval(node.right, env)
    if isinstance(node, Div):
        num = _eval(node.left, env)
        den = _eval(node.right, env)
        if np.any(np.asarray(den) == 0):
            raise EvaluationError("division by zero")
        return num / den
    if isinstance(node, Pow):
        base = _eval(node.base, env)
        ex = _eval(node.exponent, env)
        b = np.asarray(base)
        e = np.asarray(ex)
        if np.any((b < 0) & (e != np.round(e))):
            raise EvaluationError("domain error: fractional power of a negative number")
        if np.any((b == 0) & (e < 0)):
            raise EvaluationError("division by zero in power")
        with np.errstate(all="ignore"):
            out = np.power(np.asarray(base, dtype=float), ex)
        return _check(out if np.ndim(out) else float(out), "power")
    if isinstance(node, Call):
        a = _eval(node.arg, env)
        if node.func == "sqrt":
            if np.any(np.asarray(a) < 0):
                raise EvaluationError("domain error: sqrt of negative number")
            return np.sqrt(a)
        # log and sign only occur in derivative trees
        if node.func == "log":
            if np.any(np.asarray(a) <= 0):
                raise EvaluationError("domain error: log of nonpositive number")
            return np.log(a)
        if node.func == "sign":
            return np.sign(a)
        with np.errstate(over="ignore", invalid="ignore"):
            out = getattr(np, node.func)(a)
        return _check(out, node.func)
    raise TypeError(f"unknown node {node!r}")


# ---------------------------------------------------------------------------
# Symbolic differentiation (no simplification beyond trivial constant folding)


def _d(node: Node, var: str) -> Node:
    if isinstance(node, Num):
        return Num(0.0)
    if isinstance(node, Var):
        return Num(1.0 if node.name == var else 0.0)
    if isinstance(node, Neg):
        return Neg(_d(node.arg, var))
    if isinstance(node, Add):
        return Add(_d(node.left, var), _d(node.right, var))
    if isinstance(node, Sub):
        return Sub(_d(node.left, var), _d(node.right, var))
    if isinstance(node, Mul):
        u, v = node.left, node.right
        return Add(Mul(_d(u, var), v), Mul(u, _d(v, var)))
    if isinstance(node, Div):
        u, v = node.left, node.right
        return Div(Sub(Mul(_d(u, var), v), Mul(u, _d(v, var))), Pow(v, Num(2.0)))
    if isinstance(node, Pow):
        u, e = node.base, node.exponent
        if not _depends(e, var):
            # d(u^c) = c u^(c-1) u'
            return Mul(Mul(e, Pow(u, Sub(e, Num(1.0)))), _d(u, var))
        # d(u^e) = u^e (e' log u + e u'/u); only valid for u > 0
        return Mul(node, Add(Mul(_d(e, var), Call("log", u)), Div(Mul(e, _d(u, var)), u)))
    if isinstance(node, Call):
        u = node.arg
        du = _d(u, var)
        f = node.func
        if f == "sin":
            outer: Node = Call("cos", u)
        elif f == "cos":
            outer = Neg(Call("sin", u))
        elif f == "tanh":
            outer = Sub(Num(1.0), Pow(Call("tanh", u), Num(2.0)))
        elif f == "exp":
            outer = Call("exp", u)
        elif f == "sqrt":
            outer = Div(Num(0.5), Call("sqrt", u))
        elif f == "abs":
            outer = Call("sign", u)
        elif f == "log":
            outer = Div(Num(1.0), u)
        elif f == "sign":
            return Num(0.0)
        else:
            raise TypeError(f)
        return Mul(outer, du)
    raise TypeError(f"unknown node {node!r}")


def _depends(node: Node, var: str) -> bool:
    if isinstance(node, Num):
        return False
    if isinstance(node, Var):
        return node.name == var
    return any(_depends(c, var) for c in _children(node))


def _children(node: Node) -> tuple:
    if isinstance(node, (Neg, Call)):
        return (node.arg,)
    if isinstance(node, Pow):
        return (node.base, node.exponent)
    if isinstance(node, (Add, Sub, Mul, Div)):
        return (node.left, node.right)
    return ()


def _vars(node: Node) -> set:
    if isinstance(node, Var):
        return {node.name}
    out: set = set()
    for c in _children(node):
        out |= _vars(c)
    return out


def to_source(node: Node) -> str:
    """Fully parenthesized source text that parses back to an equivalent tree."""
    if isinstance(node, Num):
        return repr(node.value) if node.value >= 0 else f"(-{repr(-node.value)})"
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"(-{to_source(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({to_source(node.arg)})"
    sym = {Add: "+", Sub: "-", Mul: "*", Div: "/"}
    if isinstance(node, Pow):
        return f"({to_source(node.base)}^{to_source(node.exponent)})"
    return f"({to_source(node.left)}{sym[type(node)]}{to_source(node.right)})"


# ---------------------------------------------------------------------------
# Public wrapper


class CoeffExpr:
    """Parsed expression; immutable and safe to share between threads."""

    __slots__ = ("ast", "source")

    def __init__(self, ast: Node, source: str | None = None):
        object.__setattr__(self, "ast", ast)
        object.__setattr__(self, "source", source)

    def __setattr__(self, key, value):
        raise AttributeError("CoeffExpr is immutable")

    def __repr__(self) -> str:
        return f"CoeffExpr({self.source or to_source(self.ast)!r})"

    @property
    def variables(self) -> set:
        return _vars(self.ast)

    @property
    def max_index(self) -> int:
        xs = [int(v[1:]) for v in self.variables if v != "m"]
        return max(xs, default=0)

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def eval(self, point: Sequence[float], m: float | None = None) -> float:
        """Evaluate at one point; ``point[k-1]`` is the value of ``xk``."""
        if len(point) < self.max_index:
            raise EvaluationError(
                f"point has {len(point)} coordinates, expression uses x{self.max_index}")
        env = {f"x{k + 1}": float(v) for k, v in enumerate(point)}
        if m is not None:
            env["m"] = float(m)
        return float(self._run(env))

    def evaluate(self, x: np.ndarray | Sequence[np.ndarray], m: ArrayLike | None = None) -> np.ndarray:
        """Vectorized evaluation; ``x[k-1]`` holds the array of ``xk`` values.

        The result is broadcast to the common shape of the inputs.
        """
        xs = [np.asarray(c, dtype=float) for c in x]
        if len(xs) < self.max_index:
            raise EvaluationError(
                f"{len(xs)} coordinates supplied, expression uses x{self.max_index}")
        env = {f"x{k + 1}": c for k, c in enumerate(xs)}
        arrays = list(xs)
        if m is not None:
            env["m"] = np.asarray(m, dtype=float)
            arrays.append(env["m"])
        out = self._run(env)
        shape = np.broadcast_shapes(*[a.shape for a in arrays]) if arrays else ()
        return np.broadcast_to(np.asarray(out, dtype=float), shape).copy()

    def _run(self, env: dict) -> ArrayLike:
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            out = _eval(self.ast, env)
        return _check(out, "expression")

    def differentiate(self, var: int | str) -> "CoeffExpr":
        """Exact symbolic derivative; ``var`` is a 1-based x index or ``"m"``."""
        name = var if isinstance(var, str) else f"x{int(var)}"
        if name != "m" and not (name.startswith("x") and 1 <= int(name[1:]) <= 9):
            raise ValueError(f"invalid variable {var!r}")
        return CoeffExpr(_d(self.ast, name))

    def to_source(self) -> str:
        return to_source(self.ast)


def parse(source: str) -> CoeffExpr:
    """Parse expression text into a :class:`CoeffExpr`."""
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    return CoeffExpr(_Parser(source).parse(), source)


def eval(expr: CoeffExpr | str, point: Sequence[float]) -> float:  # noqa: A001
    if isinstance(expr, str):
        expr = parse(expr)
    return expr.eval(point)


def differentiate(expr: CoeffExpr | str, var: int | str) -> CoeffExpr:
    if isinstance(expr, str):
        expr = parse(expr)
    return expr.differentiate(var)

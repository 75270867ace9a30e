"""
ClassAd-style matchmaking
Attribute ads, a small expression language, and symmetric requirements/rank matching
"""

import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Mapping, Optional, Tuple, Union

from typing_extensions import Self

from errors import AdError, ExpressionSyntaxError

logger = logging.getLogger(__name__)

MAX_DEPTH = 64


class Undefined:
    """The ClassAd UNDEFINED value; a singleton"""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "undefined"

    def __reduce__(self):
        return (Undefined, ())


UNDEFINED = Undefined()

Value = Union[bool, int, float, str, Undefined]


class AdKind(str, Enum):
    RESOURCE = "resource"
    JOB = "job"


# Syntax tree


class Expr:
    __slots__ = ()


@dataclass(frozen=True, eq=False)
class Literal(Expr):
    value: Value

    def __eq__(self, other):
        # True == 1 in Python; literals of different types are different trees
        return (
            isinstance(other, Literal)
            and type(self.value) is type(other.value)
            and self.value == other.value
        )

    def __hash__(self):
        return hash((type(self.value).__name__, self.value))


@dataclass(frozen=True)
class AttrRef(Expr):
    scope: Optional[str]  # "my", "other" or None for my-then-other
    name: str


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    operand: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


COMPARISONS = ("==", "!=", "<", "<=", ">", ">=")

PRECEDENCE = {"||": 1, "&&": 2, "+": 4, "-": 4, "*": 5, "/": 5}
PRECEDENCE.update({op: 3 for op in COMPARISONS})
UNARY_LEVEL = 6
ATOM_LEVEL = 7


# Tokenizer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<real>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<name>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>==|!=|<=|>=|&&|\|\||[<>!+\-*/().])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> List[Token]:
    tokens: List[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            ch = text[pos]
            if ch == '"':
                raise ExpressionSyntaxError("unterminated string", pos)
            raise ExpressionSyntaxError(f"unknown operator '{ch}'", pos)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append(Token(kind, m.group(), pos))
        pos = m.end()
    tokens.append(Token("eof", "", len(text)))
    return tokens


def _unescape(body: str) -> str:
    out = []
    i = 0
    while i < len(body):
        ch = body[i]
        if ch == "\\" and i + 1 < len(body):
            out.append(body[i + 1])
            i += 2
        else:
            out.append(ch)
            i += 1
    return "".join(out)


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.tokens[self.i]

    def _take(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> Expr:
        expr = self._binary(1)
        if self.tok.kind != "eof":
            raise ExpressionSyntaxError(f"unexpected '{self.tok.text}'", self.tok.pos)
        return expr

    def _binary(self, level: int) -> Expr:
        if level >= UNARY_LEVEL:
            return self._unary()
        left = self._binary(level + 1)
        while self.tok.kind == "op" and PRECEDENCE.get(self.tok.text) == level:
            op = self._take().text
            right = self._binary(level + 1)
            left = Binary(op, left, right)
        return left

    def _unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text in ("!", "-"):
            op = self._take().text
            return Unary(op, self._unary())
        return self._primary()

    def _primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "int":
            self._take()
            return Literal(int(tok.text))
        if tok.kind == "real":
            self._take()
            value = float(tok.text)
            if value in (float("inf"), float("-inf")):
                raise ExpressionSyntaxError("real literal out of range", tok.pos)
            return Literal(value)
        if tok.kind == "string":
            self._take()
            return Literal(_unescape(tok.text[1:-1]))
        if tok.kind == "name":
            self._take()
            word = tok.text.lower()
            if word == "true":
                return Literal(True)
            if word == "false":
                return Literal(False)
            if word == "undefined":
                return Literal(UNDEFINED)
            if word in ("my", "other") and self.tok.kind == "op" and self.tok.text == ".":
                self._take()
                if self.tok.kind != "name":
                    raise ExpressionSyntaxError("expected attribute name", self.tok.pos)
                return AttrRef(word, self._take().text)
            return AttrRef(None, tok.text)
        if tok.kind == "op" and tok.text == "(":
            self._take()
            inner = self._binary(1)
            if not (self.tok.kind == "op" and self.tok.text == ")"):
                raise ExpressionSyntaxError("expected ')'", self.tok.pos)
            self._take()
            return inner
        if tok.kind == "eof":
            raise ExpressionSyntaxError("expected operand", tok.pos)
        raise ExpressionSyntaxError(f"unexpected '{tok.text}'", tok.pos)


def parse_expression(text: str) -> Expr:
    """Parse expression text; raises ExpressionSyntaxError with the offending position"""
    return _Parser(text).parse()


# Canonical printer


def _level(expr: Expr) -> int:
    if isinstance(expr, Binary):
        return PRECEDENCE[expr.op]
    if isinstance(expr, Unary):
        return UNARY_LEVEL
    return ATOM_LEVEL


def _literal_text(value: Value) -> str:
    if value is UNDEFINED:
        return "undefined"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(value)


def to_text(expr: Expr) -> str:
    """Print with the minimal parentheses the precedence table requires"""
    if isinstance(expr, Literal):
        return _literal_text(expr.value)
    if isinstance(expr, AttrRef):
        return f"{expr.scope}.{expr.name}" if expr.scope else expr.name
    if isinstance(expr, Unary):
        inner = to_text(expr.operand)
        if _level(expr.operand) < UNARY_LEVEL:
            inner = f"({inner})"
        return f"{expr.op}{inner}"
    if isinstance(expr, Binary):
        level = PRECEDENCE[expr.op]
        left = to_text(expr.left)
        right = to_text(expr.right)
        if _level(expr.left) < level:
            left = f"({left})"
        # left-associative: an equal-level right operand needs parentheses
        if _level(expr.right) <= level:
            right = f"({right})"
        return f"{left} {expr.op} {right}"
    raise TypeError(f"not an expression: {expr!r}")


# Ads


_MISSING = object()


def _coerce(name: str, value: Any) -> Union[Value, Expr]:
    if isinstance(value, Expr):
        return value
    if value is None or value is UNDEFINED:
        return UNDEFINED
    if isinstance(value, str):
        if value.startswith("expr:"):
            try:
                return parse_expression(value[5:])
            except ExpressionSyntaxError as e:
                raise AdError(f"attribute '{name}': {e}") from e
        return value
    if isinstance(value, (bool, int, float)):
        return value
    raise AdError(f"attribute '{name}' has unsupported value type {type(value).__name__}")


class Ad:
    """An attribute map; names are case-insensitive, values case-sensitive"""

    def __init__(self, kind: Union[AdKind, str], attributes: Optional[Mapping[str, Any]] = None):
        self.kind = AdKind(kind)
        self._attrs: Dict[str, Tuple[str, Union[Value, Expr]]] = {}
        for name, value in (attributes or {}).items():
            key = name.lower()
            if key in self._attrs:
                raise AdError(f"duplicate attribute '{name}'")
            self._attrs[key] = (name, _coerce(name, value))
        if "requirements" not in self._attrs:
            if self.kind is AdKind.JOB:
                raise AdError("job ad must define requirements")
            self._attrs["requirements"] = ("Requirements", True)

    def __contains__(self, name: str) -> bool:
        return name.lower() in self._attrs

    def __iter__(self) -> Iterator[str]:
        return (original for original, _ in self._attrs.values())

    def __repr__(self) -> str:
        return f"Ad({self.kind.value}, {self.to_json()})"

    def lookup(self, name: str) -> Any:
        entry = self._attrs.get(name.lower())
        return _MISSING if entry is None else entry[1]

    def expression(self, name: str) -> Optional[Expr]:
        value = self.lookup(name)
        if value is _MISSING:
            return None
        return value if isinstance(value, Expr) else Literal(value)

    def to_json(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {}
        for original, value in self._attrs.values():
            if isinstance(value, Expr):
                out[original] = "expr:" + to_text(value)
            elif value is UNDEFINED:
                out[original] = None
            else:
                out[original] = value
        return out

    @classmethod
    def from_json(cls, data: Union[str, Mapping[str, Any]], kind: Union[AdKind, str]) -> Self:
        if isinstance(data, str):
            try:
                data = json.loads(data)
            except json.JSONDecodeError as e:
                raise AdError(f"ad is not valid JSON (line {e.lineno}): {e.msg}") from e
        if not isinstance(data, Mapping):
            raise AdError("ad must be a JSON object")
        return cls(kind, data)


def load_ad(path: Union[str, Path], kind: Union[AdKind, str]) -> Ad:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise AdError(f"cannot read ad file {path}: {e.strerror}") from e
    return Ad.from_json(text, kind)


_EMPTY = Ad(AdKind.RESOURCE, {})


# Evaluation


def _is_number(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _truth(v: Any) -> Any:
    """Logical operands other than booleans count as undefined"""
    return v if isinstance(v, bool) else UNDEFINED


def _compare(op: str, a: Any, b: Any) -> Value:
    if a is UNDEFINED or b is UNDEFINED:
        return UNDEFINED
    if _is_number(a) and _is_number(b):
        pass
    elif isinstance(a, str) and isinstance(b, str):
        pass
    elif isinstance(a, bool) and isinstance(b, bool):
        if op not in ("==", "!="):
            return UNDEFINED
    else:
        return UNDEFINED
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def _arith(op: str, a: Any, b: Any) -> Value:
    if not (_is_number(a) and _is_number(b)):
        return UNDEFINED
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if b == 0:
        return UNDEFINED
    if isinstance(a, int) and isinstance(b, int):
        q = abs(a) // abs(b)
        return q if (a >= 0) == (b >= 0) else -q
    return a / b


def _eval(expr: Expr, my: Ad, other: Ad, depth: int) -> Value:
    if isinstance(expr, Literal):
        return expr.value
    if isinstance(expr, AttrRef):
        if expr.scope == "my":
            holder, peer = my, other
        elif expr.scope == "other":
            holder, peer = other, my
        elif expr.name in my:
            holder, peer = my, other
        else:
            holder, peer = other, my
        value = holder.lookup(expr.name)
        if value is _MISSING:
            return UNDEFINED
        if isinstance(value, Expr):
            if depth >= MAX_DEPTH:
                return UNDEFINED
            # attribute expressions run in the scope of the ad holding them
            return _eval(value, holder, peer, depth + 1)
        return value
    if isinstance(expr, Unary):
        v = _eval(expr.operand, my, other, depth)
        if expr.op == "!":
            return (not v) if isinstance(v, bool) else UNDEFINED
        return -v if _is_number(v) else UNDEFINED
    if isinstance(expr, Binary):
        op = expr.op
        if op == "&&":
            left = _truth(_eval(expr.left, my, other, depth))
            if left is False:
                return False
            right = _truth(_eval(expr.right, my, other, depth))
            if right is False:
                return False
            if left is True and right is True:
                return True
            return UNDEFINED
        if op == "||":
            left = _truth(_eval(expr.left, my, other, depth))
            if left is True:
                return True
            right = _truth(_eval(expr.right, my, other, depth))
            if right is True:
                return True
            if left is False and right is False:
                return False
            return UNDEFINED
        a = _eval(expr.left, my, other, depth)
        b = _eval(expr.right, my, other, depth)
        if op in COMPARISONS:
            return _compare(op, a, b)
        return _arith(op, a, b)
    return UNDEFINED


def evaluate(expr: Union[Expr, str], my: Optional[Ad] = None, other: Optional[Ad] = None) -> Value:
    """Evaluate in the (my, other) context; never raises, failures are UNDEFINED"""
    if isinstance(expr, str):
        expr = parse_expression(expr)
    try:
        return _eval(expr, my or _EMPTY, other or _EMPTY, 0)
    except (RecursionError, OverflowError, TypeError, ValueError) as e:
        logger.debug(f"evaluation of {to_text(expr)} degraded to undefined: {e}")
        return UNDEFINED


def symmetric_match(job: Ad, resource: Ad) -> bool:
    """Both sides' requirements must be literally true; undefined is no match"""
    job_req = job.expression("requirements")
    res_req = resource.expression("requirements")
    if job_req is None or res_req is None:
        return False
    return evaluate(job_req, job, resource) is True and evaluate(res_req, resource, job) is True


def rank_score(job: Ad, resource: Ad) -> float:
    rank = job.expression("rank")
    if rank is None:
        return 0.0
    value = evaluate(rank, job, resource)
    if not _is_number(value) or value != value:
        return 0.0
    return float(value)


def select_best(job: Ad, candidates: Iterable[Tuple[int, Ad]]) -> Optional[int]:
    """Highest-ranked matching candidate; equal ranks go to the smaller NodeId"""
    best: Optional[Tuple[float, int]] = None
    for node_id, ad in candidates:
        if not symmetric_match(job, ad):
            continue
        key = (-rank_score(job, ad), node_id)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


def check_match(job: Ad, resource: Ad) -> Dict[str, Any]:
    matched = symmetric_match(job, resource)
    return {"match": matched, "rank": rank_score(job, resource) if matched else 0.0}

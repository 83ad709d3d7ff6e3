"""Expression trees: protected evaluation, random generation, genetic operators.

Trees are immutable. Internal nodes are one of six operators
(add, sub, mul, div, sqrt, log); leaves are feature references or
floating-point constants. Division, square root and logarithm are
protected so that evaluation never raises and never produces NaN or
infinity on sanely-ranged inputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

ARITY = {"add": 2, "sub": 2, "mul": 2, "div": 2, "sqrt": 1, "log": 1}
OPERATORS = tuple(ARITY)

# Magnitudes below this are treated as zero by the protected operators.
PROTECT_EPS = 1e-3


class ExpressionError(ValueError):
    """Malformed expression tree (bad arity, unknown operator)."""


class ExpressionParseError(ValueError):
    """Syntax or arity error while parsing an s-expression."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


@dataclass(frozen=True)
class Feature:
    """Leaf referencing input feature ``index`` (token ``x<index>``)."""

    index: int


@dataclass(frozen=True)
class Constant:
    """Leaf holding a fixed real value."""

    value: float


@dataclass(frozen=True)
class Function:
    op: str
    children: tuple

    def __post_init__(self):
        if self.op not in ARITY:
            raise ExpressionError(f"unknown operator {self.op!r}")
        if len(self.children) != ARITY[self.op]:
            raise ExpressionError(
                f"operator {self.op!r} takes {ARITY[self.op]} children, "
                f"got {len(self.children)}"
            )


Node = Function | Feature | Constant


class Expression:
    """An immutable operator tree over features and constants.

    Structural equality is by tree shape and exact leaf values. Size,
    depth and the postorder node list are computed lazily and cached,
    so expressions are cheap to share between individuals.
    """

    __slots__ = ("root", "_postorder", "_size", "_depth")

    def __init__(self, root: Node):
        self.root = root
        self._postorder = None
        self._size = None
        self._depth = None

    def __eq__(self, other):
        return isinstance(other, Expression) and self.root == other.root

    def __hash__(self):
        return hash(self.root)

    def __repr__(self):
        return f"Expression({serialize(self)!r})"

    @property
    def size(self) -> int:
        """Total node count."""
        if self._size is None:
            self._size = len(self.postorder())
        return self._size

    @property
    def depth(self) -> int:
        """Longest root-to-leaf path counted in nodes; a lone leaf is 1."""
        if self._depth is None:
            depth = 0
            stack = [(self.root, 1)]
            while stack:
                node, d = stack.pop()
                if d > depth:
                    depth = d
                if isinstance(node, Function):
                    stack.extend((c, d + 1) for c in node.children)
            self._depth = depth
        return self._depth

    def postorder(self) -> list:
        """Nodes in postorder (children before parents); cached."""
        if self._postorder is None:
            out = []
            stack = [self.root]
            while stack:  # preorder, reversed at the end
                node = stack.pop()
                out.append(node)
                if isinstance(node, Function):
                    stack.extend(node.children)
            out.reverse()
            self._postorder = out
        return self._postorder

    def max_feature_index(self) -> int:
        """Largest feature ordinal referenced, or -1 if none."""
        idx = -1
        for node in self.postorder():
            if isinstance(node, Feature) and node.index > idx:
                idx = node.index
        return idx


@dataclass(frozen=True)
class GpConfig:
    """Evolution schedule and expression-generation parameters."""

    population_size: int = 200
    max_generations: int = 500
    init_depth_min: int = 2
    init_depth_max: int = 6
    p_crossover: float = 0.9
    p_mutation: float = 0.01
    tournament_size: int = 20
    parsimony_coefficient: float = 1e-3
    constant_range: tuple[float, float] = (-1000.0, 1000.0)
    seed: int = 0
    run_selection_metric: str = "rmse"  # how best_of_runs picks its winner

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError("population_size must be >= 2")
        if self.max_generations < 0:
            raise ValueError("max_generations must be >= 0")
        if not 1 <= self.init_depth_min <= self.init_depth_max:
            raise ValueError("need 1 <= init_depth_min <= init_depth_max")
        if self.p_crossover < 0 or self.p_mutation < 0:
            raise ValueError("operator probabilities must be >= 0")
        if self.p_crossover + self.p_mutation > 1.0 + 1e-12:
            raise ValueError("p_crossover + p_mutation must be <= 1")
        if self.tournament_size < 1:
            raise ValueError("tournament_size must be >= 1")
        if self.parsimony_coefficient < 0:
            raise ValueError("parsimony_coefficient must be >= 0")
        lo, hi = self.constant_range
        if not lo <= hi:
            raise ValueError("constant_range must be a non-empty interval")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")
        if self.run_selection_metric not in ("rmse", "mae"):
            raise ValueError("run_selection_metric must be 'rmse' or 'mae'")

    def with_seed(self, seed: int) -> "GpConfig":
        return replace(self, seed=int(seed))


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def _apply_op(op: str, a, b=None):
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    if op == "div":
        near_zero = np.abs(b) < PROTECT_EPS
        safe = np.where(near_zero, 1.0, b)
        return np.where(near_zero, 1.0, a / safe)
    if op == "sqrt":
        return np.sqrt(np.abs(a))
    # log
    mag = np.abs(a)
    small = mag < PROTECT_EPS
    return np.where(small, 0.0, np.log(np.where(small, 1.0, mag)))


def evaluate_batch(expr: Expression, X: np.ndarray) -> np.ndarray:
    """Evaluate ``expr`` on every row of ``X`` (shape n x d).

    Uses an explicit value stack over the cached postorder, so arbitrarily
    deep trees evaluate without recursion. Returns a length-n vector.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("X must be a 2-d matrix (rows = samples)")
    n, d = X.shape
    stack = []
    with np.errstate(over="ignore", invalid="ignore"):
        for node in expr.postorder():
            if isinstance(node, Feature):
                if node.index >= d:
                    raise ExpressionError(
                        f"feature x{node.index} out of range for {d} feature(s)"
                    )
                stack.append(X[:, node.index])
            elif isinstance(node, Constant):
                stack.append(node.value)
            elif ARITY[node.op] == 2:
                b = stack.pop()
                a = stack.pop()
                stack.append(_apply_op(node.op, a, b))
            else:
                stack.append(_apply_op(node.op, stack.pop()))
    result = stack.pop()
    if np.ndim(result) == 0:  # constant-only tree
        return np.full(n, float(result))
    return np.asarray(result, dtype=np.float64)


def evaluate(expr: Expression, features) -> float:
    """Evaluate ``expr`` for one feature vector."""
    row = np.asarray(features, dtype=np.float64).reshape(1, -1)
    return float(evaluate_batch(expr, row)[0])


# ---------------------------------------------------------------------------
# Random generation
# ---------------------------------------------------------------------------


def _random_terminal(n_features: int, const_lo: float, const_hi: float, rng) -> Node:
    # Uniform over the terminal set: each feature plus one constant slot.
    choice = int(rng.integers(0, n_features + 1))
    if choice < n_features:
        return Feature(choice)
    return Constant(float(rng.uniform(const_lo, const_hi)))


def _grow_node(depth: int, target: int, n_features: int, lo: float, hi: float, rng) -> Node:
    if depth >= target:
        return _random_terminal(n_features, lo, hi, rng)
    if depth > 1:  # below the root, terminals may appear early
        n_terminals = n_features + 1
        pick = int(rng.integers(0, len(OPERATORS) + n_terminals))
        if pick >= len(OPERATORS):
            return _random_terminal(n_features, lo, hi, rng)
        op = OPERATORS[pick]
    else:
        op = OPERATORS[int(rng.integers(0, len(OPERATORS)))]
    children = tuple(
        _grow_node(depth + 1, target, n_features, lo, hi, rng)
        for _ in range(ARITY[op])
    )
    return Function(op, children)


def _full_node(depth: int, target: int, n_features: int, lo: float, hi: float, rng) -> Node:
    if depth >= target:
        return _random_terminal(n_features, lo, hi, rng)
    op = OPERATORS[int(rng.integers(0, len(OPERATORS)))]
    children = tuple(
        _full_node(depth + 1, target, n_features, lo, hi, rng)
        for _ in range(ARITY[op])
    )
    return Function(op, children)


def grow_expression(config: GpConfig, n_features: int, rng, target_depth: int | None = None) -> Expression:
    """Grow method: terminals may appear at any depth past the root."""
    if target_depth is None:
        target_depth = int(rng.integers(config.init_depth_min, config.init_depth_max + 1))
    lo, hi = config.constant_range
    return Expression(_grow_node(1, target_depth, n_features, lo, hi, rng))


def full_expression(config: GpConfig, n_features: int, rng, target_depth: int | None = None) -> Expression:
    """Full method: every branch reaches exactly the target depth."""
    if target_depth is None:
        target_depth = int(rng.integers(config.init_depth_min, config.init_depth_max + 1))
    lo, hi = config.constant_range
    return Expression(_full_node(1, target_depth, n_features, lo, hi, rng))


def random_expression(config: GpConfig, n_features: int, rng) -> Expression:
    """Half-and-half initialization: a fair coin picks full vs grow."""
    if rng.random() < 0.5:
        return full_expression(config, n_features, rng)
    return grow_expression(config, n_features, rng)


# ---------------------------------------------------------------------------
# Genetic operators
# ---------------------------------------------------------------------------


def _paths(root: Node) -> list[tuple[int, ...]]:
    """Preorder paths (tuples of child indices) to every node."""
    out = []
    stack = [((), root)]
    while stack:
        path, node = stack.pop()
        out.append(path)
        if isinstance(node, Function):
            for i in reversed(range(len(node.children))):
                stack.append((path + (i,), node.children[i]))
    return out


def _node_at(root: Node, path: tuple[int, ...]) -> Node:
    node = root
    for i in path:
        node = node.children[i]
    return node


def _replace_at(root: Node, path: tuple[int, ...], new: Node) -> Node:
    if not path:
        return new
    i = path[0]
    children = list(root.children)
    children[i] = _replace_at(children[i], path[1:], new)
    return Function(root.op, tuple(children))


def crossover(parent_a: Expression, parent_b: Expression, rng) -> Expression:
    """Swap a uniformly chosen subtree of a copy of ``parent_a`` for a
    uniformly chosen subtree of ``parent_b``. Parents are untouched."""
    paths_a = _paths(parent_a.root)
    paths_b = _paths(parent_b.root)
    target = paths_a[int(rng.integers(0, len(paths_a)))]
    donor = _node_at(parent_b.root, paths_b[int(rng.integers(0, len(paths_b)))])
    return Expression(_replace_at(parent_a.root, target, donor))


def mutate(parent: Expression, config: GpConfig, n_features: int, rng) -> Expression:
    """Replace a uniformly chosen subtree with a freshly grown one whose
    target depth is drawn from the init range."""
    paths = _paths(parent.root)
    target = paths[int(rng.integers(0, len(paths)))]
    subtree = grow_expression(config, n_features, rng)
    return Expression(_replace_at(parent.root, target, subtree.root))


# ---------------------------------------------------------------------------
# S-expression serialization
# ---------------------------------------------------------------------------


def _format_constant(v: float) -> str:
    if math.isfinite(v) and v == int(v) and abs(v) < 1e16:
        return str(int(v))
    return repr(v)


def serialize(expr: Expression) -> str:
    """Prefix s-expression text, e.g. ``(add x0 (mul 2.0 x1))``."""
    parts = []
    stack = [expr.root]
    while stack:
        node = stack.pop()
        if node is _CLOSE:
            parts.append(")")
        elif isinstance(node, Feature):
            parts.append(f"x{node.index}")
        elif isinstance(node, Constant):
            parts.append(_format_constant(node.value))
        else:
            parts.append(f"({node.op}")
            stack.append(_CLOSE)
            stack.extend(reversed(node.children))
    # join with spaces, but no space before a closing paren
    text = []
    for i, p in enumerate(parts):
        if i and p != ")" and not text[-1].endswith("("):
            text.append(" ")
        elif i and p != ")" and text[-1].endswith("("):
            pass
        text.append(p)
    return "".join(text)


_CLOSE = object()


def _tokenize(text: str):
    tokens = []  # (token, position)
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
        elif c in "()":
            tokens.append((c, i))
            i += 1
        else:
            j = i
            while j < len(text) and not text[j].isspace() and text[j] not in "()":
                j += 1
            tokens.append((text[i:j], i))
            i = j
    return tokens


def parse(text: str) -> Expression:
    """Parse the s-expression grammar produced by :func:`serialize`."""
    tokens = _tokenize(text)
    if not tokens:
        raise ExpressionParseError("empty input", 0)
    pos = 0

    def parse_node() -> Node:
        nonlocal pos
        if pos >= len(tokens):
            raise ExpressionParseError("unexpected end of input", len(text))
        tok, at = tokens[pos]
        if tok == "(":
            pos += 1
            if pos >= len(tokens):
                raise ExpressionParseError("missing operator", at)
            op, op_at = tokens[pos]
            if op not in ARITY:
                raise ExpressionParseError(f"unknown operator {op!r}", op_at)
            pos += 1
            children = []
            while pos < len(tokens) and tokens[pos][0] != ")":
                children.append(parse_node())
            if pos >= len(tokens):
                raise ExpressionParseError("missing ')'", len(text))
            pos += 1  # consume ')'
            if len(children) != ARITY[op]:
                raise ExpressionParseError(
                    f"operator {op!r} takes {ARITY[op]} argument(s), got {len(children)}",
                    op_at,
                )
            return Function(op, tuple(children))
        if tok == ")":
            raise ExpressionParseError("unexpected ')'", at)
        pos += 1
        if tok.startswith("x") and tok[1:].isdigit():
            return Feature(int(tok[1:]))
        try:
            return Constant(float(tok))
        except ValueError:
            raise ExpressionParseError(f"bad token {tok!r}", at) from None

    root = parse_node()
    if pos != len(tokens):
        raise ExpressionParseError("trailing input", tokens[pos][1])
    return Expression(root)

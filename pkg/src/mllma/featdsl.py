"""Closed S-expression DSL for image-derived layout features.

Expressions read one of three source rasters (macro, rudy, rudy_pin), pass
them through grid transforms, reduce to a scalar exactly once per branch, and
optionally rescale.  The interpreter is total: degenerate numerics produce 0.0
plus a flag instead of raising.

Grammar:  expr := "(" op arg* ")" | source | number
Ops with a numeric parameter take it as their first argument, e.g.
``(fraction_above 1.5 (box_blur 5 rudy_pin))``.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from scipy import ndimage

from .layout import Grid, LayoutSample, macro_boundary_band, topk_mean

MAX_DEPTH = 8
MAX_NODES = 32

SOURCES = ("macro", "rudy", "rudy_pin")

# op name -> (param kind or None, expression arity)
# param kinds: "int" (>= minimum), "float" (>= 0), "number" (any real)
GRID_OPS = {
    "sobel_mag": (None, 1),
    "box_blur": (("int", 1), 1),
    "threshold_rel": (("float", 0.0), 1),
    "normalize": (None, 1),
    "multiply": (None, 2),
    "subtract_abs": (None, 2),
    "boundary_mask": (("int", 1), 1),
}
REDUCERS = {
    "mean": (None, 1),
    "std": (None, 1),
    "max": (None, 1),
    "kurtosis": (None, 1),
    "fraction_above": (("float", 0.0), 1),
    "topk_mean": (("int", 1), 1),
    "gradient_mean": (None, 1),
}
SCALAR_OPS = {
    "scale": (("number", None), 1),
    "add": (("number", None), 1),
}
COMMUTATIVE = {"multiply", "subtract_abs"}

_ALL_OPS = {**GRID_OPS, **REDUCERS, **SCALAR_OPS}


class DslError(ValueError):
    """Base for DSL parse/validation failures."""


class DslParseError(DslError):
    """Malformed expression text; message carries a character position."""


class DslValidationError(DslError):
    """Structurally parseable but violates typing, arity, or size caps."""


@dataclass(frozen=True)
class Expr:
    """One DSL node: an operator or source, optional numeric parameter, children."""

    op: str
    param: float | None = None
    args: tuple["Expr", ...] = ()

    def is_source(self) -> bool:
        return self.op in SOURCES

    def node_count(self) -> int:
        return 1 + sum(a.node_count() for a in self.args)

    def depth(self) -> int:
        return 1 + max((a.depth() for a in self.args), default=0)


def _result_kind(op: str) -> str:
    if op in SOURCES or op in GRID_OPS:
        return "grid"
    return "scalar"


def _format_param(op: str, value: float) -> str:
    kind = _ALL_OPS[op][0][0]
    if kind == "int":
        return str(int(value))
    return repr(float(value))


def to_string(expr: Expr) -> str:
    """Plain printed form; `parse_expr(to_string(e))` reproduces the tree."""
    if expr.is_source():
        return expr.op
    parts = [expr.op]
    if expr.param is not None:
        parts.append(_format_param(expr.op, expr.param))
    parts.extend(to_string(a) for a in expr.args)
    return "(" + " ".join(parts) + ")"


# ---------------------------------------------------------------------------
# Parsing

_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")
_NUMBER_RE = re.compile(r"[+-]?(\d+\.?\d*|\.\d+)([eE][+-]?\d+)?$")
_IDENT_RE = re.compile(r"[a-z][a-z0-9_]*$")


def _tokenize(text: str) -> list[tuple[str, int]]:
    return [(m.group(0), m.start()) for m in _TOKEN_RE.finditer(text)]


def parse_expr(text: str) -> Expr:
    """Parse and validate one expression; raises DslParseError/DslValidationError."""
    tokens = _tokenize(text)
    if not tokens:
        raise DslParseError("empty expression at position 0")
    expr, idx = _parse(tokens, 0, text)
    if idx != len(tokens):
        tok, pos = tokens[idx]
        raise DslParseError(f"trailing input {tok!r} at position {pos}")
    validate(expr)
    return expr


def _parse(tokens, idx, text) -> tuple[Expr, int]:
    tok, pos = tokens[idx]
    if tok == ")":
        raise DslParseError(f"unexpected ')' at position {pos}")
    if tok != "(":
        if tok in SOURCES:
            return Expr(tok), idx + 1
        if _NUMBER_RE.match(tok):
            raise DslParseError(
                f"bare number {tok!r} at position {pos}: numbers are only valid as op parameters"
            )
        if tok in _ALL_OPS:
            raise DslParseError(f"operator {tok!r} at position {pos} needs parentheses")
        raise DslParseError(f"unknown node {tok!r} at position {pos}")
    # compound form
    if idx + 1 >= len(tokens):
        raise DslParseError(f"unclosed '(' at position {pos}")
    op, op_pos = tokens[idx + 1]
    if op in ("(", ")"):
        raise DslParseError(f"expected operator name at position {op_pos}")
    if op not in _ALL_OPS:
        if op in SOURCES:
            raise DslParseError(f"source {op!r} at position {op_pos} takes no parentheses")
        raise DslParseError(f"unknown node {op!r} at position {op_pos}")
    param_spec, arity = _ALL_OPS[op]
    idx += 2
    param = None
    if param_spec is not None:
        if idx >= len(tokens):
            raise DslParseError(f"missing parameter for {op!r} at position {op_pos}")
        ptok, ppos = tokens[idx]
        if not _NUMBER_RE.match(ptok):
            raise DslParseError(f"{op!r} expects a numeric parameter, got {ptok!r} at position {ppos}")
        param = float(ptok)
        kind, minimum = param_spec
        if kind == "int":
            if param != int(param):
                raise DslValidationError(f"{op!r} parameter must be an integer, got {ptok}")
            if int(param) < minimum:
                raise DslValidationError(f"{op!r} parameter must be >= {minimum}, got {ptok}")
            param = float(int(param))
        elif kind == "float" and param < minimum:
            raise DslValidationError(f"{op!r} parameter must be >= {minimum}, got {ptok}")
        idx += 1
    args = []
    for _ in range(arity):
        if idx >= len(tokens) or tokens[idx][0] == ")":
            got = len(args)
            raise DslParseError(
                f"arity mismatch for {op!r} at position {op_pos}: expected {arity} operands, got {got}"
            )
        sub, idx = _parse(tokens, idx, text)
        args.append(sub)
    if idx >= len(tokens):
        raise DslParseError(f"unclosed '(' at position {pos}")
    if tokens[idx][0] != ")":
        tok2, pos2 = tokens[idx]
        raise DslParseError(
            f"arity mismatch for {op!r} at position {op_pos}: unexpected extra operand {tok2!r} at position {pos2}"
        )
    return Expr(op, param, tuple(args)), idx + 1


def validate(expr: Expr) -> None:
    """Enforce typing (one reducer per branch, scalar root) and size caps."""
    if expr.depth() > MAX_DEPTH:
        raise DslValidationError(f"depth {expr.depth()} exceeds cap {MAX_DEPTH}")
    if expr.node_count() > MAX_NODES:
        raise DslValidationError(f"node count {expr.node_count()} exceeds cap {MAX_NODES}")
    if _check_types(expr) != "scalar":
        raise DslValidationError(f"expression root must reduce to a scalar: {to_string(expr)}")


def _check_types(expr: Expr) -> str:
    for a in expr.args:
        kind = _check_types(a)
        want = "grid" if (expr.op in GRID_OPS or expr.op in REDUCERS) else "scalar"
        if kind != want:
            raise DslValidationError(
                f"{expr.op!r} expects a {want} operand, got a {kind}: {to_string(a)}"
            )
    return _result_kind(expr.op)


# ---------------------------------------------------------------------------
# Canonical form


def _canonical_tree(expr: Expr) -> Expr:
    args = tuple(_canonical_tree(a) for a in expr.args)
    e = Expr(expr.op, expr.param, args)
    if e.op == "scale" and e.param == 1.0:
        return args[0]
    if e.op == "add" and e.param == 0.0:
        return args[0]
    if e.op in COMMUTATIVE:
        args = tuple(sorted(args, key=canonicalize_tree_string))
        e = Expr(e.op, e.param, args)
    return e


def canonicalize_tree_string(expr: Expr) -> str:
    if expr.is_source():
        return expr.op
    parts = [expr.op]
    if expr.param is not None:
        parts.append(_format_param(expr.op, expr.param))
    parts.extend(canonicalize_tree_string(a) for a in expr.args)
    return "(" + " ".join(parts) + ")"


def canonicalize(expr: Expr) -> str:
    """Normalized printing: sorted commutative operands, unit-scale elision,
    stable number formatting.  Equal canonical strings imply equal values."""
    return canonicalize_tree_string(_canonical_tree(expr))


# ---------------------------------------------------------------------------
# Evaluation

_SOBEL_D = np.array([-1.0, -2.0, 0.0, 2.0, 1.0])
_SOBEL_S = np.array([1.0, 4.0, 6.0, 4.0, 1.0])


def sobel_magnitude(arr: np.ndarray) -> np.ndarray:
    """5x5 separable Sobel gradient magnitude with edge replication."""
    gx = ndimage.correlate1d(arr, _SOBEL_D, axis=1, mode="nearest")
    gx = ndimage.correlate1d(gx, _SOBEL_S, axis=0, mode="nearest")
    gy = ndimage.correlate1d(arr, _SOBEL_D, axis=0, mode="nearest")
    gy = ndimage.correlate1d(gy, _SOBEL_S, axis=1, mode="nearest")
    return np.hypot(gx, gy)


class _EvalState:
    __slots__ = ("degenerate",)

    def __init__(self):
        self.degenerate = False


def _scrub(x, state: _EvalState):
    # Total-evaluation policy: non-finite intermediates become 0 with a flag.
    if isinstance(x, np.ndarray):
        bad = ~np.isfinite(x)
        if bad.any():
            state.degenerate = True
            x = np.where(bad, 0.0, x)
        return x
    if not np.isfinite(x):
        state.degenerate = True
        return 0.0
    return float(x)


def _eval(expr: Expr, grids: dict[str, np.ndarray], state: _EvalState):
    op = expr.op
    if op in SOURCES:
        return grids[op]
    a = [_eval(sub, grids, state) for sub in expr.args]
    p = expr.param
    if op == "sobel_mag":
        out = sobel_magnitude(a[0])
    elif op == "box_blur":
        out = ndimage.uniform_filter(a[0], size=int(p), mode="nearest")
    elif op == "threshold_rel":
        out = (a[0] > p * a[0].mean()).astype(np.float64)
    elif op == "normalize":
        lo, hi = float(a[0].min()), float(a[0].max())
        if hi == lo:
            state.degenerate = True
            out = np.zeros_like(a[0])
        else:
            out = (a[0] - lo) / (hi - lo)
    elif op == "multiply":
        out = a[0] * a[1]
    elif op == "subtract_abs":
        out = np.abs(a[0] - a[1])
    elif op == "boundary_mask":
        out = macro_boundary_band(a[0], int(p))
    elif op == "mean":
        out = float(a[0].mean())
    elif op == "std":
        out = float(a[0].std())
    elif op == "max":
        out = float(a[0].max())
    elif op == "kurtosis":
        m = a[0].mean()
        s2 = float(((a[0] - m) ** 2).mean())
        if s2 == 0.0:
            state.degenerate = True
            out = 0.0
        else:
            out = float(((a[0] - m) ** 4).mean() / (s2 * s2) - 3.0)
    elif op == "fraction_above":
        out = float((a[0] > p * a[0].mean()).mean())
    elif op == "topk_mean":
        out = topk_mean(a[0].reshape(-1), int(p))
    elif op == "gradient_mean":
        out = float(sobel_magnitude(a[0]).mean())
    elif op == "scale":
        out = p * a[0]
    elif op == "add":
        out = p + a[0]
    else:  # pragma: no cover - closed op table
        raise DslValidationError(f"unknown op {op!r}")
    return _scrub(out, state)


def eval_feature_info(expr: Expr, sample: LayoutSample) -> tuple[float, bool]:
    """Evaluate to (value, degenerate_flag); never raises on numeric trouble."""
    grids = {name: getattr(sample, name).data for name in SOURCES}
    state = _EvalState()
    value = _eval(expr, grids, state)
    return float(value), state.degenerate


def eval_feature(expr: Expr, sample: LayoutSample) -> float:
    return eval_feature_info(expr, sample)[0]


def saliency_grid(expr: Expr, sample: LayoutSample) -> np.ndarray | None:
    """Pre-reduction grid feeding the expression's reducer, or None.

    Order-preserving scalar wrappers (any shift, positive scales) are
    transparent; a non-positive scale flips or flattens the region
    ordering, so no saliency is claimed there.
    """
    node = expr
    while node.op in SCALAR_OPS:
        if node.op == "scale" and (node.param is None or node.param <= 0):
            return None
        node = node.args[0]
    if node.op not in REDUCERS:
        return None
    grids = {name: getattr(sample, name).data for name in SOURCES}
    state = _EvalState()
    return np.asarray(_eval(node.args[0], grids, state), dtype=np.float64)


# ---------------------------------------------------------------------------
# Feature specs and pools


class Provenance(str, enum.Enum):
    SEED = "seed"
    MUTATION = "mutation"
    CROSSOVER = "crossover"


_NAME_RE = re.compile(r"[a-z][a-z0-9_]*$")


@dataclass(frozen=True)
class FeatureSpec:
    """A named feature: identifier, one-line description, DSL expression."""

    name: str
    description: str
    expr: Expr
    origin: Provenance = Provenance.SEED
    round_index: int = 0

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"feature name must be lower_snake_case, got {self.name!r}")
        if not self.description.strip():
            raise ValueError(f"{self.name}: description must be non-empty")
        if "\n" in self.description:
            raise ValueError(f"{self.name}: description must be one line")

    @property
    def canonical(self) -> str:
        return canonicalize(self.expr)


def make_spec(name: str, description: str, expr_text: str,
              origin: Provenance = Provenance.SEED, round_index: int = 0) -> FeatureSpec:
    return FeatureSpec(name, description, parse_expr(expr_text), origin, round_index)


# ---------------------------------------------------------------------------
# Feature manifests (line-oriented text, versioned)

MANIFEST_VERSION = "feature-manifest v1"


def save_feature_manifest(specs: list[FeatureSpec], path: str | Path) -> None:
    lines = [f"# {MANIFEST_VERSION}"]
    for s in specs:
        lines.append(
            "\t".join([s.name, to_string(s.expr), s.description, s.origin.value, str(s.round_index)])
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_feature_manifest(path: str | Path) -> list[FeatureSpec]:
    specs = []
    text = Path(path).read_text(encoding="utf-8")
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        cols = line.split("\t")
        if len(cols) == 3:
            name, expr_text, desc = cols
            origin, rnd = Provenance.SEED, 0
        elif len(cols) == 5:
            name, expr_text, desc, origin_s, rnd_s = cols
            origin, rnd = Provenance(origin_s), int(rnd_s)
        else:
            raise ValueError(f"{path}:{ln}: expected 3 or 5 tab-separated fields, got {len(cols)}")
        try:
            specs.append(FeatureSpec(name, desc, parse_expr(expr_text), origin, rnd))
        except DslError as exc:
            raise ValueError(f"{path}:{ln}: {exc}") from exc
    names = [s.name for s in specs]
    if len(set(names)) != len(names):
        raise ValueError(f"{path}: duplicate feature names")
    return specs


def seed_pool() -> list[FeatureSpec]:
    """The 23 stock image features shipped with the package."""
    ref = resources.files("mllma").joinpath("data/seed_features.tsv")
    with resources.as_file(ref) as p:
        return load_feature_manifest(p)


# ---------------------------------------------------------------------------
# Reference extractors kept as plain callables (their filled-region step is
# outside the DSL's closed op set).


def builtin_high_density_rudy_ratio(sample: LayoutSample) -> float:
    """Fraction of RUDY cells strictly above the RUDY mean."""
    arr = sample.rudy.data
    return float((arr > arr.mean()).mean())


def builtin_macro_density_gradient(sample: LayoutSample, tiles_size: float = 2.25) -> float:
    """Mean 5x5 Sobel magnitude of the filled, binarized macro raster, scaled
    by the tile size factor."""
    b = sample.macro.data > 0.5
    filled = ndimage.binary_fill_holes(b)
    density = filled.astype(np.float64)
    return float(sobel_magnitude(density).mean() * tiles_size)


# ---------------------------------------------------------------------------
# Table extraction


@dataclass
class FeatureTable:
    """Realized features: one row per sample, one column per feature."""

    feature_names: list[str]
    sample_ids: list[str]
    rows: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        n, k = self.rows.shape
        if len(self.feature_names) != k:
            raise ValueError("feature_names length must match row width")
        if len(self.sample_ids) != n or self.labels.shape != (n,):
            raise ValueError("sample_ids/labels length must match row count")
        if not np.isfinite(self.rows).all() or not np.isfinite(self.labels).all():
            raise ValueError("table entries must be finite")

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.feature_names.index(name)]


class FeatureValueCache:
    """Memo of (canonical expression, sample id) -> (value, degenerate).

    Safe to share across runs and pools, provided sample ids are unique
    across every dataset that flows through one cache instance (synthetic
    ids carry a config fingerprint for exactly this reason).
    """

    def __init__(self):
        self._store: dict[tuple[str, str], tuple[float, bool]] = {}
        self.hits = 0
        self.misses = 0

    def get(self, spec: FeatureSpec, sample: LayoutSample) -> tuple[float, bool]:
        key = (spec.canonical, sample.id)
        got = self._store.get(key)
        if got is None:
            self.misses += 1
            got = eval_feature_info(spec.expr, sample)
            self._store[key] = got
        else:
            self.hits += 1
        return got


def extract_table(
    pool: list[FeatureSpec],
    dataset: list[LayoutSample],
    cache: FeatureValueCache | None = None,
) -> FeatureTable:
    """Evaluate every pool feature on every labeled sample."""
    if not pool:
        raise ValueError("feature pool is empty")
    if not dataset:
        raise ValueError("dataset is empty")
    names = [s.name for s in pool]
    if len(set(names)) != len(names):
        raise ValueError("feature pool has duplicate names")
    labels = []
    for s in dataset:
        if s.label is None:
            raise ValueError(f"sample {s.id} has no label; extraction needs labeled data")
        labels.append(s.label)
    rows = np.empty((len(dataset), len(pool)), dtype=np.float64)
    for j, spec in enumerate(pool):
        for i, sample in enumerate(dataset):
            if cache is not None:
                value, _ = cache.get(spec, sample)
            else:
                value, _ = eval_feature_info(spec.expr, sample)
            rows[i, j] = value
    return FeatureTable(names, [s.id for s in dataset], rows, np.array(labels))

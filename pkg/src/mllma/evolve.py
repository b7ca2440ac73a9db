"""Evolutionary search over the feature pool.

Each round scores the current pool with a forest fit, keeps the top-k
features, asks a generator for mutated or crossed-over offspring, filters
near-duplicates, and extends the pool. The generator is pluggable: the
deterministic mock below serves tests and offline runs, and a
language-model client can implement the same request/response protocol.
"""

from __future__ import annotations

import enum
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .featdsl import (
    GRID_OPS,
    REDUCERS,
    SCALAR_OPS,
    SOURCES,
    DslError,
    Expr,
    FeatureSpec,
    FeatureValueCache,
    Provenance,
    canonicalize,
    extract_table,
    make_spec,
    save_feature_manifest,
    seed_pool,
    to_string,
    validate,
)
from .forest import ForestParams, cross_validate, fit
from .layout import LayoutSample, pooled_context

logger = logging.getLogger(__name__)


class EvolveError(ValueError):
    pass


class Mode(str, enum.Enum):
    GENETIC = "genetic"
    CROSSOVER_ONLY = "crossover_only"
    MUTATION_ONLY = "mutation_only"


@dataclass(frozen=True)
class EvolveConfig:
    """Knobs for one evolutionary run.

    ``fitness_cv_blend`` mixes forest importances with normalized
    per-feature |label correlation|; 0 means importances alone drive
    selection while CV stays a reporting signal.
    """

    n_rounds: int = 5
    pool_cap: int = 20
    p_mutation: float = 0.5
    mode: Mode = Mode.GENETIC
    dedup_threshold: float = 0.6
    batch_size: int = 8
    few_shot: int = 5
    retry_budget: int = 3
    use_dedup_judge: bool = False
    fitness_cv_blend: float = 0.0
    cv_folds: int = 5
    forest_params: ForestParams = ForestParams()
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_rounds < 0:
            raise EvolveError("n_rounds must be >= 0")
        if self.pool_cap < 1:
            raise EvolveError("pool_cap must be >= 1")
        for name in ("p_mutation", "dedup_threshold", "fitness_cv_blend"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise EvolveError(f"{name} must be in [0, 1]")
        if self.batch_size < 1:
            raise EvolveError("batch_size must be >= 1")
        if self.few_shot < 1:
            raise EvolveError("few_shot must be >= 1")
        if self.retry_budget < 1:
            raise EvolveError("retry_budget must be >= 1")
        if self.cv_folds < 2:
            raise EvolveError("cv_folds must be >= 2")


@dataclass
class RoundRecord:
    """Pool state at one point of the run plus the step taken from it.

    ``round_index`` 0 is the seed pool; the last record is the final pool
    and carries no operation. CV scores describe the pool as listed here,
    before any selection or extension of that round.
    """

    round_index: int
    pool_size: int
    cv_r2: float
    cv_plcc: float
    pool: tuple[FeatureSpec, ...]
    importance: tuple[float, ...]
    operation: str = "none"
    n_generated: int = 0
    n_accepted: int = 0
    rejections: list[tuple[str, str]] = field(default_factory=list)


@dataclass
class FeaturePool:
    """Final pool with its fitness vector and the per-round history."""

    specs: list[FeatureSpec]
    importance: np.ndarray
    history: list[RoundRecord]

    def __post_init__(self):
        self.importance = np.asarray(self.importance, dtype=np.float64)
        names = [s.name for s in self.specs]
        if len(set(names)) != len(names):
            raise EvolveError("pool names must be unique")
        if self.importance.shape != (len(self.specs),):
            raise EvolveError("importance must align 1:1 with specs")


# ---------------------------------------------------------------------------
# Selection

def mutation_probs(n_features: int) -> np.ndarray:
    """Per-rank mutation probability e^(-r/N), rank 1 = most important."""
    if n_features < 1:
        raise EvolveError("n_features must be >= 1")
    ranks = np.arange(1, n_features + 1, dtype=np.float64)
    return np.exp(-ranks / n_features)


def _rank_indices(specs, importances) -> list[int]:
    # importance desc, then earlier round, then name
    return sorted(
        range(len(specs)),
        key=lambda i: (-importances[i], specs[i].round_index, specs[i].name),
    )


def select_top(specs: list[FeatureSpec], importances, k: int):
    """Keep the min(k, n) highest-importance specs, in original pool order."""
    importances = np.asarray(importances, dtype=np.float64)
    if importances.shape != (len(specs),):
        raise EvolveError("importances must align 1:1 with specs")
    kept = sorted(_rank_indices(specs, importances)[: min(k, len(specs))])
    return [specs[i] for i in kept], importances[kept]


def choose_operation(p_mutation: float, rng, mode: Mode = Mode.GENETIC) -> Provenance:
    """Draw mutation-vs-crossover; ablation modes force one branch."""
    if mode is Mode.MUTATION_ONLY:
        return Provenance.MUTATION
    if mode is Mode.CROSSOVER_ONLY:
        return Provenance.CROSSOVER
    return Provenance.MUTATION if rng.random() < p_mutation else Provenance.CROSSOVER


def pick_mutation_parents(specs: list[FeatureSpec], importances, rng) -> list[FeatureSpec]:
    """Bernoulli-select parents with rank-decayed probabilities, never empty."""
    if not specs:
        raise EvolveError("pool is empty")
    order = _rank_indices(specs, np.asarray(importances, dtype=np.float64))
    probs = mutation_probs(len(specs))
    chosen = [specs[i] for r, i in enumerate(order) if rng.random() < probs[r]]
    if not chosen:
        chosen = [specs[order[0]]]
    return chosen


# ---------------------------------------------------------------------------
# Deduplication

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def description_tokens(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def jaccard(a: set[str], b: set[str]) -> float:
    if not a and not b:
        return 1.0
    if not a or not b:
        return 0.0
    return len(a & b) / len(a | b)


_JUDGE_MARGIN = 0.1


def dedupe(pool: list[FeatureSpec], candidates: list[FeatureSpec],
           threshold: float, judge=None):
    """Filter candidates that repeat the pool or each other.

    Checks, in order: name collision, canonical-expression equality, then
    description-token Jaccard against the pool and already-accepted
    candidates. When a ``judge`` generator is given, similarities within
    ±0.1 of the threshold are deferred to its keep/drop verdict.
    Returns (accepted, rejections) where each rejection is (name, reason).
    """
    accepted: list[FeatureSpec] = []
    rejections: list[tuple[str, str]] = []
    names = {s.name for s in pool}
    canon = {s.canonical for s in pool}
    seen = [(s, description_tokens(s.description)) for s in pool]
    for cand in candidates:
        if cand.name in names:
            rejections.append((cand.name, "duplicate name"))
            continue
        if cand.canonical in canon:
            rejections.append((cand.name, "duplicate expression"))
            continue
        toks = description_tokens(cand.description)
        nearest, nearest_sim = None, -1.0
        for other, other_toks in seen:
            sim = jaccard(toks, other_toks)
            if sim > nearest_sim:
                nearest, nearest_sim = other, sim
        verdict_keep = nearest_sim < threshold
        if judge is not None and abs(nearest_sim - threshold) <= _JUDGE_MARGIN:
            verdict_keep = _ask_judge(judge, pool + accepted, cand)
        if not verdict_keep:
            rejections.append(
                (cand.name,
                 f"similar description (jaccard {nearest_sim:.2f} vs {nearest.name})")
            )
            continue
        accepted.append(cand)
        names.add(cand.name)
        canon.add(cand.canonical)
        seen.append((cand, toks))
    return accepted, rejections


def _ask_judge(judge, context: list[FeatureSpec], cand: FeatureSpec) -> bool:
    request = GeneratorRequest(
        role=Role.DEDUP_JUDGE,
        parents=(cand,),
        pool=tuple(context),
        context_digests=(),
        n_candidates=1,
        round_index=cand.round_index,
        seed=0,
    )
    response = judge(request)
    for name, keep, _reason in response.verdicts or []:
        if name == cand.name:
            return keep
    return True


# ---------------------------------------------------------------------------
# Generator protocol

class Role(str, enum.Enum):
    MUTATOR = "mutator"
    CROSSOVER = "crossover"
    DEDUP_JUDGE = "dedup_judge"


@dataclass(frozen=True)
class GeneratorRequest:
    """One generator call.

    ``parents`` holds the mutation parents, the few-shot exemplars for
    crossover, or the candidates under review for the dedup judge.
    ``context_digests`` are pooled raster statistics standing in for the
    sample images a multimodal generator would see.
    """

    role: Role
    parents: tuple[FeatureSpec, ...]
    pool: tuple[FeatureSpec, ...]
    context_digests: tuple[tuple[float, ...], ...]
    n_candidates: int
    round_index: int
    seed: int


@dataclass
class Candidate:
    name: str
    description: str
    expr_text: str


@dataclass
class GeneratorResponse:
    candidates: list[Candidate] = field(default_factory=list)
    verdicts: list[tuple[str, bool, str]] | None = None
    error: str | None = None


# ---------------------------------------------------------------------------
# Mock generator: seeded random edits of real parse trees

_PLAIN_REDUCERS = ("mean", "std", "max", "kurtosis", "gradient_mean")
_PLAIN_UNARY = ("sobel_mag", "normalize")
_PAIR_GRID = ("multiply", "subtract_abs")
_SCALAR_WRAP = ("scale", "add")
_ALL_OPS = {**GRID_OPS, **REDUCERS, **SCALAR_OPS}

_SUFFIX_RE = re.compile(r"(?:_[mx]\d+_\d+)+$")


def _stem(name: str) -> str:
    return _SUFFIX_RE.sub("", name)


def _nodes(expr: Expr) -> list[Expr]:
    out = [expr]
    for a in expr.args:
        out.extend(_nodes(a))
    return out


def _replace_at(expr: Expr, index: int, new: Expr) -> Expr:
    """Rebuild with the preorder-``index`` node swapped for ``new``."""
    counter = [-1]

    def go(node: Expr) -> Expr:
        counter[0] += 1
        if counter[0] == index:
            return new
        args = tuple(go(a) for a in node.args)
        return node if args == node.args else Expr(node.op, node.param, args)

    return go(expr)


def _kind(node: Expr) -> str:
    return "grid" if node.op in SOURCES or node.op in GRID_OPS else "scalar"


def _jitter(op: str, value: float, rng) -> float:
    kind, minimum = _ALL_OPS[op][0]
    factor = 0.8 + 0.4 * rng.random()
    if kind == "int":
        new = max(int(minimum), int(round(value * factor)))
        if new == value:
            new = int(value) + 1
        return float(new)
    new = value * factor
    if new == value:
        new = value + 0.1
    if kind == "float":
        new = max(float(minimum), new)
    return new


def _random_edit(node: Expr, rng) -> tuple[Expr, str] | None:
    """One-node rewrite keeping all children; returns (node, phrase)."""
    ops = []
    if node.param is not None:
        ops.append("jitter")
    for group in (SOURCES, _PLAIN_REDUCERS, _PLAIN_UNARY, _PAIR_GRID, _SCALAR_WRAP):
        if node.op in group and len(group) > 1:
            ops.append("swap")
            swaps = [o for o in group if o != node.op]
            break
    if not ops:
        return None
    choice = ops[int(rng.integers(len(ops)))]
    if choice == "jitter":
        new_param = _jitter(node.op, node.param, rng)
        shown = int(new_param) if _ALL_OPS[node.op][0][0] == "int" else round(new_param, 3)
        return Expr(node.op, new_param, node.args), f"retunes {node.op} parameter to {shown}"
    target = swaps[int(rng.integers(len(swaps)))]
    if node.op in SOURCES:
        return Expr(target), f"reads {target} instead of {node.op}"
    return Expr(target, node.param, node.args), f"swaps {node.op} for {target}"


def _mutate_once(parent: FeatureSpec, rng) -> tuple[Expr, str] | None:
    for _ in range(50):
        nodes = _nodes(parent.expr)
        idx = int(rng.integers(len(nodes)))
        edit = _random_edit(nodes[idx], rng)
        if edit is None:
            continue
        new_node, phrase = edit
        expr = _replace_at(parent.expr, idx, new_node)
        try:
            validate(expr)
        except DslError:
            continue
        if canonicalize(expr) == parent.canonical:
            continue
        return expr, phrase
    return None


def _cross_once(parents: list[FeatureSpec], rng) -> tuple[Expr, FeatureSpec, FeatureSpec, str] | None:
    for _ in range(50):
        donor_spec = parents[int(rng.integers(len(parents)))]
        host_spec = parents[int(rng.integers(len(parents)))]
        donors = [n for n in _nodes(donor_spec.expr) if _kind(n) == "grid"]
        host_nodes = _nodes(host_spec.expr)
        sites = [i for i, n in enumerate(host_nodes) if _kind(n) == "grid"]
        if not donors or not sites:
            continue
        donor = donors[int(rng.integers(len(donors)))]
        site = sites[int(rng.integers(len(sites)))]
        expr = _replace_at(host_spec.expr, site, donor)
        try:
            validate(expr)
        except DslError:
            continue
        if canonicalize(expr) in (donor_spec.canonical, host_spec.canonical):
            continue
        phrase = f"grafts a {donor.op} branch into the {host_nodes[site].op} slot"
        return expr, donor_spec, host_spec, phrase
    return None


def mock_generate(request: GeneratorRequest) -> GeneratorResponse:
    """Deterministic offline generator implementing every role."""
    rng = np.random.default_rng(request.seed)
    if request.role is Role.DEDUP_JUDGE:
        verdicts = [(s.name, True, "distinct focus") for s in request.parents]
        return GeneratorResponse(verdicts=verdicts)
    if not request.parents:
        return GeneratorResponse(error="no parents supplied")
    out: list[Candidate] = []
    for i in range(request.n_candidates):
        if request.role is Role.MUTATOR:
            parent = request.parents[int(rng.integers(len(request.parents)))]
            made = _mutate_once(parent, rng)
            if made is None:
                continue
            expr, phrase = made
            name = f"{_stem(parent.name)}_m{request.round_index}_{i}"
            desc = f"Mutant of {parent.name}: {phrase} (r{request.round_index} c{i})."
        else:
            made = _cross_once(list(request.parents), rng)
            if made is None:
                continue
            expr, donor_spec, host_spec, phrase = made
            name = f"{_stem(host_spec.name)}_x{request.round_index}_{i}"
            desc = (f"Cross of {donor_spec.name} and {host_spec.name}: "
                    f"{phrase} (r{request.round_index} c{i}).")
        out.append(Candidate(name, desc, to_string(expr)))
    return GeneratorResponse(candidates=out)


# ---------------------------------------------------------------------------
# The round loop

def _fitness(model_importances: np.ndarray, table, blend: float) -> np.ndarray:
    if blend == 0.0:
        return model_importances
    rel = np.zeros(table.rows.shape[1])
    for j in range(table.rows.shape[1]):
        try:
            rel[j] = abs(metrics.plcc(table.rows[:, j], table.labels))
        except ValueError:
            rel[j] = 0.0
    total = rel.sum()
    rel = rel / total if total > 0 else np.full_like(rel, 1.0 / len(rel))
    return (1.0 - blend) * model_importances + blend * rel


def _evaluate(pool, dataset, config, cache):
    table = extract_table(pool, dataset, cache)
    model = fit(table, config.forest_params)
    cv = cross_validate(table, config.forest_params, config.cv_folds)
    scores = _fitness(model.importances, table, config.fitness_cv_blend)
    return table, scores, cv


def _parse_batch(response: GeneratorResponse, origin: Provenance, round_index: int):
    specs, rejected = [], []
    for raw in response.candidates:
        try:
            specs.append(make_spec(raw.name, raw.description, raw.expr_text,
                                   origin, round_index))
        except (DslError, ValueError) as exc:
            rejected.append((raw.name, f"invalid candidate: {exc}"))
    return specs, rejected


def run(config: EvolveConfig, dataset: list[LayoutSample],
        pool: list[FeatureSpec] | None = None, generator=None,
        cache: FeatureValueCache | None = None) -> FeaturePool:
    """Run the full loop and return the final pool with its history.

    The history gains one record per round plus a closing record for the
    final pool, so ``history[0]`` scores the seed pool and
    ``history[-1]`` the result. Fixed config and a deterministic
    generator make the whole run reproducible.
    """
    if pool is None:
        pool = seed_pool()
    if not pool:
        raise EvolveError("seed pool is empty")
    if generator is None:
        generator = mock_generate
    judge = generator if config.use_dedup_judge else None
    rng = np.random.default_rng(config.rng_seed)
    digests = tuple(
        tuple(round(float(v), 6) for v in pooled_context(s))
        for s in dataset[:3]
    )
    history: list[RoundRecord] = []
    for r in range(config.n_rounds):
        _table, scores, cv = _evaluate(pool, dataset, config, cache)
        record = RoundRecord(r, len(pool), cv.mean_r2, cv.mean_plcc,
                             tuple(pool), tuple(float(v) for v in scores))
        retained, retained_scores = select_top(pool, scores, config.pool_cap)
        operation = choose_operation(config.p_mutation, rng, config.mode)
        record.operation = operation.value
        if operation is Provenance.MUTATION:
            role = Role.MUTATOR
            parents = pick_mutation_parents(retained, retained_scores, rng)
        else:
            role = Role.CROSSOVER
            order = _rank_indices(retained, retained_scores)
            parents = [retained[i] for i in order[: config.few_shot]]
        specs, parse_rejects = [], []
        for _attempt in range(config.retry_budget):
            request = GeneratorRequest(
                role=role,
                parents=tuple(parents),
                pool=tuple(retained),
                context_digests=digests,
                n_candidates=config.batch_size,
                round_index=r + 1,
                seed=int(rng.integers(2**63)),
            )
            response = generator(request)
            if response.error is not None:
                continue
            specs, parse_rejects = _parse_batch(response, operation, r + 1)
            if specs or not response.candidates:
                break
        else:
            logger.warning("round %d: generator failed %d times; skipping",
                           r + 1, config.retry_budget)
            history.append(record)
            continue
        accepted, dedup_rejects = dedupe(retained, specs,
                                         config.dedup_threshold, judge)
        record.n_generated = len(response.candidates)
        record.n_accepted = len(accepted)
        record.rejections = parse_rejects + dedup_rejects
        history.append(record)
        pool = retained + accepted
    _table, scores, cv = _evaluate(pool, dataset, config, cache)
    history.append(RoundRecord(config.n_rounds, len(pool), cv.mean_r2,
                               cv.mean_plcc, tuple(pool),
                               tuple(float(v) for v in scores)))
    return FeaturePool(list(pool), scores, history)


# ---------------------------------------------------------------------------
# Run artifacts

def write_run_artifacts(result: FeaturePool, out_dir: str | Path) -> None:
    """Drop pool snapshots, importances, and a score table into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for record in result.history:
        tag = f"round_{record.round_index:02d}"
        save_feature_manifest(list(record.pool), out / f"{tag}_pool.tsv")
        with open(out / f"{tag}_importance.tsv", "w", encoding="utf-8") as fh:
            for spec, value in zip(record.pool, record.importance):
                fh.write(f"{spec.name}\t{value!r}\n")
    with open(out / "scores.csv", "w", encoding="utf-8") as fh:
        fh.write("round,pool_size,cv_r2,cv_plcc\n")
        for record in result.history:
            fh.write(f"{record.round_index},{record.pool_size},"
                     f"{record.cv_r2!r},{record.cv_plcc!r}\n")
    save_feature_manifest(result.specs, out / "final_pool.tsv")

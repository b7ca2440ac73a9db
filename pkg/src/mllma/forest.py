"""From-scratch random-forest regressor over feature tables.

Bagged binary regression trees with variance-reduction splits.  Feature
importances (total variance reduction per feature, normalized to sum 1) drive
feature selection during evolution; k-fold cross-validation reports pool
quality.  Everything is deterministic given (table, params): per-tree RNG
streams derive from (rng_seed, tree index) and the split search breaks ties
toward the lowest feature index, then the lowest threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics
from .featdsl import FeatureTable


class ForestError(ValueError):
    """Bad inputs to forest training or prediction."""


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 100
    max_depth: int = 12
    min_samples_leaf: int = 2
    features_per_split: float = 1.0 / 3.0
    bootstrap: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ForestError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ForestError("max_depth must be >= 1")
        if self.min_samples_leaf < 1:
            raise ForestError("min_samples_leaf must be >= 1")
        if not (0.0 < self.features_per_split <= 1.0):
            raise ForestError("features_per_split must be in (0, 1]")


@dataclass
class Tree:
    """Flat node arrays; feature == -1 marks a leaf."""

    feature: np.ndarray  # int32
    threshold: np.ndarray  # float64
    left: np.ndarray  # int32
    right: np.ndarray  # int32
    value: np.ndarray  # float64


@dataclass
class ForestModel:
    trees: list[Tree]
    importances: np.ndarray
    n_features: int
    params: ForestParams
    feature_names: list[str] = field(default_factory=list)


def _n_candidates(fraction: float, n_features: int) -> int:
    # round-half-up so 1/3 of 6 features is 2, not the truncated 1
    return max(1, min(n_features, int(fraction * n_features + 0.5)))


class _Builder:
    def __init__(self, X, y, params, rng, gains):
        self.X = X
        self.y = y
        self.params = params
        self.rng = rng
        self.gains = gains  # accumulated per-feature variance reduction
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []

    def _new_node(self) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(0.0)
        return len(self.feature) - 1

    def build(self, idx: np.ndarray, depth: int) -> int:
        node = self._new_node()
        ysub = self.y[idx]
        self.value[node] = float(ysub.mean())
        min_leaf = self.params.min_samples_leaf
        if depth >= self.params.max_depth or idx.size < 2 * min_leaf or np.all(ysub == ysub[0]):
            return node
        n_feat = self.X.shape[1]
        c = _n_candidates(self.params.features_per_split, n_feat)
        feats = np.sort(self.rng.choice(n_feat, size=c, replace=False))
        split = self._best_split(idx, feats, min_leaf)
        if split is None:
            return node
        f, thr, gain = split
        self.feature[node] = int(f)
        self.threshold[node] = float(thr)
        self.gains[f] += gain
        mask = self.X[idx, f] < thr
        self.left[node] = self.build(idx[mask], depth + 1)
        self.right[node] = self.build(idx[~mask], depth + 1)
        return node

    def _best_split(self, idx, feats, min_leaf):
        A = self.X[np.ix_(idx, feats)]  # (m, c)
        m = A.shape[0]
        order = np.argsort(A, axis=0, kind="stable")
        As = np.take_along_axis(A, order, axis=0)
        ys = self.y[idx][order]
        csum = np.cumsum(ys, axis=0)
        csq = np.cumsum(ys * ys, axis=0)
        total_sum = csum[-1]
        total_sq = csq[-1]
        total_dev = total_sq - total_sum * total_sum / m
        # candidate split after sorted position i: left size i+1
        ln = np.arange(1, m, dtype=np.float64)[:, None]
        rn = m - ln
        lsum = csum[:-1]
        lsq = csq[:-1]
        ldev = lsq - lsum * lsum / ln
        rsum = total_sum - lsum
        rsq = total_sq - lsq
        rdev = rsq - rsum * rsum / rn
        gains = total_dev - (ldev + rdev)
        valid = (As[:-1] < As[1:]) & (ln >= min_leaf) & (rn >= min_leaf)
        gains = np.where(valid, gains, -np.inf)
        if not np.isfinite(gains).any():
            return None
        # column-major first-max keeps the tie-break: lowest feature index
        # (feats are sorted), then lowest threshold (ascending positions)
        flat = np.argmax(gains.T)
        col, pos = divmod(flat, m - 1)
        best = float(gains[pos, col])
        if best <= 0.0:
            return None
        a, b = As[pos, col], As[pos + 1, col]
        thr = (a + b) / 2.0
        if not (a < thr):
            # midpoint rounded onto the lower value; use the upper value so
            # the strict x < thr test still realizes this split
            thr = b
        return int(feats[col]), float(thr), best


def _check_table(table: FeatureTable):
    n, k = table.rows.shape
    if n < 2:
        raise ForestError(f"need at least 2 rows to fit, got {n}")
    if k < 1:
        raise ForestError("need at least 1 feature")
    return table.rows, table.labels


def fit(table: FeatureTable, params: ForestParams = ForestParams()) -> ForestModel:
    """Train a forest; identical (table, params) gives identical model bits."""
    X, y = _check_table(table)
    n, k = X.shape
    gains = np.zeros(k, dtype=np.float64)
    trees = []
    for t in range(params.n_trees):
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.rng_seed, t])))
        if params.bootstrap:
            idx = np.sort(rng.integers(0, n, size=n))
        else:
            idx = np.arange(n)
        b = _Builder(X, y, params, rng, gains)
        b.build(idx, 0)
        trees.append(
            Tree(
                feature=np.array(b.feature, dtype=np.int32),
                threshold=np.array(b.threshold, dtype=np.float64),
                left=np.array(b.left, dtype=np.int32),
                right=np.array(b.right, dtype=np.int32),
                value=np.array(b.value, dtype=np.float64),
            )
        )
    total = gains.sum()
    if total > 0.0:
        importances = gains / total
    else:
        # constant labels: no split ever helps, fall back to uniform
        importances = np.full(k, 1.0 / k)
    return ForestModel(
        trees=trees,
        importances=importances,
        n_features=k,
        params=params,
        feature_names=list(table.feature_names),
    )


def _tree_predict(tree: Tree, X: np.ndarray) -> np.ndarray:
    pos = np.zeros(X.shape[0], dtype=np.int32)
    while True:
        feats = tree.feature[pos]
        internal = feats >= 0
        if not internal.any():
            break
        rows = np.nonzero(internal)[0]
        f = feats[rows]
        go_left = X[rows, f] < tree.threshold[pos[rows]]
        nxt = np.where(go_left, tree.left[pos[rows]], tree.right[pos[rows]])
        pos[rows] = nxt
    return tree.value[pos]


def predict(model: ForestModel, rows: np.ndarray) -> np.ndarray:
    """Mean of per-tree leaf values; accepts one row (k,) or a batch (n, k)."""
    X = np.asarray(rows, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ForestError(
            f"expected rows with {model.n_features} features, got shape {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ForestError("prediction rows must be finite")
    out = np.zeros(X.shape[0], dtype=np.float64)
    for tree in model.trees:
        out += _tree_predict(tree, X)
    out /= len(model.trees)
    return out[0] if single else out


@dataclass
class CvResult:
    r2: list[float]
    plcc: list[float]

    @property
    def mean_r2(self) -> float:
        return float(np.mean(self.r2))

    @property
    def mean_plcc(self) -> float:
        return float(np.mean(self.plcc))


def cross_validate(table: FeatureTable, params: ForestParams = ForestParams(),
                   folds: int = 5) -> CvResult:
    """Deterministic k-fold CV; every row lands in exactly one validation fold."""
    X, y = _check_table(table)
    n = X.shape[0]
    if folds < 2:
        raise ForestError("folds must be >= 2")
    if n < folds:
        raise ForestError(f"need at least {folds} rows for {folds}-fold CV, got {n}")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([params.rng_seed, 10_000])))
    perm = rng.permutation(n)
    r2s, plccs = [], []
    for f in range(folds):
        val = np.sort(perm[f::folds])
        train = np.sort(np.setdiff1d(perm, val))
        sub = FeatureTable(
            table.feature_names,
            [table.sample_ids[i] for i in train],
            X[train],
            y[train],
        )
        model = fit(sub, params)
        pred = predict(model, X[val])
        truth = y[val]
        ss_tot = float(((truth - truth.mean()) ** 2).sum())
        if ss_tot == 0.0:
            r2s.append(0.0)
        else:
            ss_res = float(((truth - pred) ** 2).sum())
            r2s.append(1.0 - ss_res / ss_tot)
        try:
            plccs.append(metrics.plcc(pred, truth))
        except ValueError:
            plccs.append(0.0)
    return CvResult(r2s, plccs)


# ---------------------------------------------------------------------------
# Serialization: versioned line-oriented text

FOREST_FORMAT = "forest-model v1"


def _fmt(v) -> str:
    # shortest round-trip decimal; plain float keeps numpy repr wrappers out
    return repr(float(v))


def save_forest(model: ForestModel, path: str | Path) -> None:
    lines = [f"# {FOREST_FORMAT}"]
    p = model.params
    lines.append(
        f"params\t{p.n_trees}\t{p.max_depth}\t{p.min_samples_leaf}\t"
        f"{_fmt(p.features_per_split)}\t{int(p.bootstrap)}\t{p.rng_seed}"
    )
    lines.append("features\t" + "\t".join(model.feature_names))
    lines.append("importances\t" + "\t".join(_fmt(v) for v in model.importances))
    for i, t in enumerate(model.trees):
        lines.append(f"tree\t{i}\t{len(t.feature)}")
        for j in range(len(t.feature)):
            lines.append(
                f"{t.feature[j]}\t{_fmt(t.threshold[j])}\t{t.left[j]}\t{t.right[j]}\t{_fmt(t.value[j])}"
            )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_forest(path: str | Path) -> ForestModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != f"# {FOREST_FORMAT}":
        raise ForestError(f"{path}: not a {FOREST_FORMAT} file")
    params_cols = lines[1].split("\t")
    if params_cols[0] != "params":
        raise ForestError(f"{path}: missing params line")
    params = ForestParams(
        n_trees=int(params_cols[1]),
        max_depth=int(params_cols[2]),
        min_samples_leaf=int(params_cols[3]),
        features_per_split=float(params_cols[4]),
        bootstrap=bool(int(params_cols[5])),
        rng_seed=int(params_cols[6]),
    )
    feat_cols = lines[2].split("\t")
    feature_names = feat_cols[1:]
    imp_cols = lines[3].split("\t")
    importances = np.array([float(v) for v in imp_cols[1:]], dtype=np.float64)
    trees = []
    i = 4
    while i < len(lines):
        head = lines[i].split("\t")
        if head[0] != "tree":
            raise ForestError(f"{path}: expected tree header at line {i + 1}")
        count = int(head[2])
        rows = [lines[i + 1 + j].split("\t") for j in range(count)]
        trees.append(
            Tree(
                feature=np.array([int(r[0]) for r in rows], dtype=np.int32),
                threshold=np.array([float(r[1]) for r in rows], dtype=np.float64),
                left=np.array([int(r[2]) for r in rows], dtype=np.int32),
                right=np.array([int(r[3]) for r in rows], dtype=np.int32),
                value=np.array([float(r[4]) for r in rows], dtype=np.float64),
            )
        )
        i += 1 + count
    return ForestModel(
        trees=trees,
        importances=importances,
        n_features=len(feature_names),
        params=params,
        feature_names=feature_names,
    )

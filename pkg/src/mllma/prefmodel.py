"""Interpretable congestion preference model.

Two small heads share a pooled-context vector: an affine regression head
that predicts normalized feature values, and a gating MLP that turns
context plus the current feature vector into per-feature weights. The
score is the weighted sum of normalized features, so every prediction
decomposes exactly into per-feature contributions.

Also hosts the patch-linear congestion-map baseline: one shared ridge
regression from local raster patches to the center congestion value.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .layout import Grid, LayoutSample, pooled_context

logger = logging.getLogger(__name__)


class PrefError(ValueError):
    pass


class Gating(str, enum.Enum):
    IDENTITY = "identity"
    SOFTMAX = "softmax"


class GatePolicy(str, enum.Enum):
    FROZEN_GATING = "frozen_gating"
    REFRESH_GATING = "refresh_gating"


@dataclass(frozen=True)
class PrefConfig:
    hidden: tuple[int, ...] = (64, 64, 64)
    gating: Gating = Gating.IDENTITY
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 200
    feature_loss_weight: float = 1.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise PrefError("learning_rate must be positive")
        if self.feature_loss_weight < 0:
            raise PrefError("feature_loss_weight must be >= 0")
        if self.weight_decay < 0:
            raise PrefError("weight_decay must be >= 0")
        if self.batch_size < 1:
            raise PrefError("batch_size must be >= 1")
        if self.epochs < 0:
            raise PrefError("epochs must be >= 0")
        if any(h < 1 for h in self.hidden):
            raise PrefError("hidden sizes must be >= 1")


@dataclass
class PreferenceModel:
    """Trained weights plus the normalization stats they assume.

    Both the feature columns and the pooled context are z-scored with
    training-set stats; the stats live on the model so serving cannot
    drift from training. Normalizing the context keeps the optimizer
    conditioned (raw pooled stats mix scales from 1e-2 to 1e2).
    """

    feature_names: list[str]
    mu: np.ndarray
    sigma: np.ndarray
    ctx_mu: np.ndarray
    ctx_sigma: np.ndarray
    head_w: np.ndarray            # (k, context)
    head_b: np.ndarray            # (k,)
    gate_ws: list[np.ndarray]     # each (out, in)
    gate_bs: list[np.ndarray]
    gating: Gating = Gating.IDENTITY
    curve: list[float] = field(default_factory=list)

    @property
    def k(self) -> int:
        return len(self.feature_names)

    @property
    def context_dim(self) -> int:
        return self.head_w.shape[1]


@dataclass
class Prediction:
    score: float
    weights: np.ndarray
    feature_pred: np.ndarray      # head output, normalized space
    normalized: np.ndarray        # the vector actually scored


@dataclass
class AttributionItem:
    name: str
    raw: float
    normalized: float
    weight: float
    contribution: float


@dataclass
class Attribution:
    """Per-feature contributions, largest |contribution| first."""

    items: list[AttributionItem]
    score: float

    def by_name(self, name: str) -> AttributionItem:
        for item in self.items:
            if item.name == name:
                return item
        raise PrefError(f"unknown feature {name!r}")


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _gate_forward(model: PreferenceModel, g_in: np.ndarray) -> np.ndarray:
    h = g_in
    last = len(model.gate_ws) - 1
    for l, (W, b) in enumerate(zip(model.gate_ws, model.gate_bs)):
        z = h @ W.T + b
        h = z if l == last else np.maximum(z, 0.0)
    return _softmax(h) if model.gating is Gating.SOFTMAX else h


# ---------------------------------------------------------------------------
# Loss and analytic gradients (shared by training and the gradient check)

def loss_and_grads(params: dict[str, np.ndarray], n_layers: int,
                   ctx: np.ndarray, f_norm: np.ndarray, y: np.ndarray,
                   lam: float, gating: Gating):
    """Full-batch loss and exact gradients for every parameter."""
    B, k = f_norm.shape
    f_hat = ctx @ params["head_w"].T + params["head_b"]
    g_in = np.concatenate([ctx, f_norm], axis=1)
    hs = [g_in]
    zs = []
    h = g_in
    for l in range(n_layers):
        z = h @ params[f"gw{l}"].T + params[f"gb{l}"]
        zs.append(z)
        h = z if l == n_layers - 1 else np.maximum(z, 0.0)
        hs.append(h)
    w = _softmax(zs[-1]) if gating is Gating.SOFTMAX else zs[-1]
    score = (w * f_norm).sum(axis=1)
    resid = score - y
    loss = float(resid @ resid) / B
    if lam > 0:
        loss += lam * float(((f_hat - f_norm) ** 2).mean())
    grads: dict[str, np.ndarray] = {}
    d_fhat = (2.0 * lam / (B * k)) * (f_hat - f_norm)
    grads["head_w"] = d_fhat.T @ ctx
    grads["head_b"] = d_fhat.sum(axis=0)
    d_w = (2.0 / B) * resid[:, None] * f_norm
    if gating is Gating.SOFTMAX:
        d_z = w * (d_w - (d_w * w).sum(axis=1, keepdims=True))
    else:
        d_z = d_w
    for l in reversed(range(n_layers)):
        grads[f"gw{l}"] = d_z.T @ hs[l]
        grads[f"gb{l}"] = d_z.sum(axis=0)
        if l > 0:
            d_z = (d_z @ params[f"gw{l}"]) * (zs[l - 1] > 0.0)
    return loss, grads


def _init_params(context_dim: int, k: int, hidden: tuple[int, ...], rng):
    params: dict[str, np.ndarray] = {
        "head_w": np.zeros((k, context_dim)),
        "head_b": np.zeros(k),
    }
    dims = [context_dim + k, *hidden, k]
    last = len(dims) - 2
    for l in range(len(dims) - 1):
        fan_in, fan_out = dims[l], dims[l + 1]
        if l == last:
            # zero-init output keeps the initial score at 0 in identity mode
            params[f"gw{l}"] = np.zeros((fan_out, fan_in))
        else:
            params[f"gw{l}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                                          size=(fan_out, fan_in))
        params[f"gb{l}"] = np.zeros(fan_out)
    return params


def train(dataset: list[LayoutSample], table, cfg: PrefConfig = PrefConfig()) -> PreferenceModel:
    """Fit both heads by mini-batch AdamW; deterministic under rng_seed."""
    rows = np.asarray(table.rows, dtype=np.float64)
    labels = np.asarray(table.labels, dtype=np.float64)
    n = rows.shape[0]
    if n == 0:
        raise PrefError("training table is empty")
    if len(dataset) != n or [s.id for s in dataset] != list(table.sample_ids):
        raise PrefError("dataset and table rows must align by sample id")
    if labels.std() == 0.0:
        raise PrefError("labels are constant; nothing to fit")
    mu = rows.mean(axis=0)
    sigma = rows.std(axis=0)
    # mean roundoff leaves ~1e-15 residual std on constant columns
    keep = sigma > 1e-12 * np.maximum(1.0, np.abs(mu))
    if not keep.all():
        dropped = [table.feature_names[j] for j in np.flatnonzero(~keep)]
        logger.warning("dropping constant features: %s", ", ".join(dropped))
    if not keep.any():
        raise PrefError("every feature is constant; nothing to fit")
    names = [table.feature_names[j] for j in np.flatnonzero(keep)]
    mu, sigma = mu[keep], sigma[keep]
    f_norm = (rows[:, keep] - mu) / sigma
    k = len(names)
    if n < 2 * k:
        logger.warning("only %d rows for %d features; expect a rough fit", n, k)
    ctx = np.array([pooled_context(s) for s in dataset], dtype=np.float64)
    ctx_mu = ctx.mean(axis=0)
    ctx_sigma = ctx.std(axis=0)
    ctx_sigma[ctx_sigma == 0.0] = 1.0   # constant dims normalize to zero
    ctx = (ctx - ctx_mu) / ctx_sigma
    rng = np.random.default_rng(cfg.rng_seed)
    params = _init_params(ctx.shape[1], k, cfg.hidden, rng)
    n_layers = len(cfg.hidden) + 1

    beta1, beta2, eps = 0.9, 0.999, 1e-8
    m = {key: np.zeros_like(v) for key, v in params.items()}
    v = {key: np.zeros_like(val) for key, val in params.items()}
    step = 0
    curve: list[float] = []
    for _epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(
                params, n_layers, ctx[idx], f_norm[idx], labels[idx],
                cfg.feature_loss_weight, cfg.gating,
            )
            losses.append(loss)
            step += 1
            for key, g in grads.items():
                m[key] = beta1 * m[key] + (1 - beta1) * g
                v[key] = beta2 * v[key] + (1 - beta2) * g * g
                m_hat = m[key] / (1 - beta1**step)
                v_hat = v[key] / (1 - beta2**step)
                params[key] -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
                is_weight = key == "head_w" or key.startswith("gw")
                if is_weight and cfg.weight_decay > 0:
                    # decay weights only, never biases
                    params[key] -= cfg.learning_rate * cfg.weight_decay * params[key]
        curve.append(float(np.mean(losses)) if losses else 0.0)
    return PreferenceModel(
        feature_names=names,
        mu=mu.copy(),
        sigma=sigma.copy(),
        ctx_mu=ctx_mu,
        ctx_sigma=ctx_sigma,
        head_w=params["head_w"],
        head_b=params["head_b"],
        gate_ws=[params[f"gw{l}"] for l in range(n_layers)],
        gate_bs=[params[f"gb{l}"] for l in range(n_layers)],
        gating=cfg.gating,
        curve=curve,
    )


# ---------------------------------------------------------------------------
# Inference

def _context_of(model: PreferenceModel, sample: LayoutSample) -> np.ndarray:
    ctx = np.asarray(pooled_context(sample), dtype=np.float64)
    if ctx.shape != (model.context_dim,):
        raise PrefError(
            f"context has {ctx.shape[0]} entries, model expects {model.context_dim}"
        )
    return (ctx - model.ctx_mu) / model.ctx_sigma


def _normalize_row(model: PreferenceModel, feature_row) -> np.ndarray:
    row = np.asarray(feature_row, dtype=np.float64)
    if row.shape != (model.k,):
        raise PrefError(f"feature row must have {model.k} entries, got {row.shape}")
    return (row - model.mu) / model.sigma


def predict(model: PreferenceModel, sample: LayoutSample,
            feature_row=None) -> Prediction:
    """Score one sample; measured features override the head when given."""
    ctx = _context_of(model, sample)
    f_hat = model.head_w @ ctx + model.head_b
    f_norm = f_hat if feature_row is None else _normalize_row(model, feature_row)
    w = _gate_forward(model, np.concatenate([ctx, f_norm]))
    score = float((w * f_norm).sum())
    return Prediction(score, w, f_hat, f_norm)


def attribution(model: PreferenceModel, sample: LayoutSample,
                feature_row=None) -> Attribution:
    pred = predict(model, sample, feature_row)
    if feature_row is None:
        raw = pred.feature_pred * model.sigma + model.mu
    else:
        raw = np.asarray(feature_row, dtype=np.float64)
    contributions = pred.weights * pred.normalized
    items = [
        AttributionItem(
            name=model.feature_names[i],
            raw=float(raw[i]),
            normalized=float(pred.normalized[i]),
            weight=float(pred.weights[i]),
            contribution=float(contributions[i]),
        )
        for i in range(model.k)
    ]
    items.sort(key=lambda it: -abs(it.contribution))
    return Attribution(items, float(contributions.sum()))


@dataclass
class WhatIfRow:
    name: str
    before_raw: float
    after_raw: float
    before_contribution: float
    after_contribution: float


@dataclass
class WhatIfReport:
    rows: list[WhatIfRow]
    score_before: float
    score_after: float

    @property
    def delta(self) -> float:
        return self.score_after - self.score_before


def whatif(model: PreferenceModel, sample: LayoutSample,
           overrides: dict[str, float], feature_row=None,
           policy: GatePolicy = GatePolicy.FROZEN_GATING) -> WhatIfReport:
    """Before/after comparison with selected raw feature values replaced."""
    for name in overrides:
        if name not in model.feature_names:
            raise PrefError(f"unknown feature {name!r}")
    ctx = _context_of(model, sample)
    if feature_row is None:
        f_hat = model.head_w @ ctx + model.head_b
        base_raw = f_hat * model.sigma + model.mu
    else:
        base_raw = np.asarray(feature_row, dtype=np.float64)
        if base_raw.shape != (model.k,):
            raise PrefError(f"feature row must have {model.k} entries")
    after_raw = base_raw.copy()
    for name, value in overrides.items():
        after_raw[model.feature_names.index(name)] = float(value)
    before_norm = (base_raw - model.mu) / model.sigma
    after_norm = (after_raw - model.mu) / model.sigma
    w_before = _gate_forward(model, np.concatenate([ctx, before_norm]))
    if policy is GatePolicy.FROZEN_GATING:
        w_after = w_before
    else:
        w_after = _gate_forward(model, np.concatenate([ctx, after_norm]))
    before_c = w_before * before_norm
    after_c = w_after * after_norm
    rows = [
        WhatIfRow(
            name=model.feature_names[i],
            before_raw=float(base_raw[i]),
            after_raw=float(after_raw[i]),
            before_contribution=float(before_c[i]),
            after_contribution=float(after_c[i]),
        )
        for i in range(model.k)
    ]
    rows.sort(key=lambda r: -abs(r.before_contribution))
    return WhatIfReport(rows, float(before_c.sum()), float(after_c.sum()))


@dataclass
class ConsistencyResult:
    rate: float
    n_pairs: int


def consistency_rate(model: PreferenceModel, dataset: list[LayoutSample],
                     table) -> ConsistencyResult:
    """Sign agreement between gating and label differences on matched pairs.

    A pair matches on feature i when that normalized feature moves by at
    least one training sigma while every other feature moves by less than
    a quarter sigma. Pairs with exactly equal labels are skipped: they
    carry no direction to agree or disagree with.
    """
    if len(dataset) != len(table.sample_ids):
        raise PrefError("dataset and table rows must align")
    cols = np.column_stack([table.column(name) for name in model.feature_names])
    f_norm = (cols - model.mu) / model.sigma
    labels = np.asarray(table.labels, dtype=np.float64)
    weights = np.array([
        predict(model, s, cols[i]).weights for i, s in enumerate(dataset)
    ])
    n = len(dataset)
    agree = 0
    total = 0
    for a in range(n):
        for b in range(a + 1, n):
            d = f_norm[a] - f_norm[b]
            moved = np.abs(d) >= 1.0
            if moved.sum() != 1:
                continue
            i = int(np.flatnonzero(moved)[0])
            rest = np.abs(np.delete(d, i))
            if not (rest < 0.25).all():
                continue
            dy = labels[a] - labels[b]
            if dy == 0.0:
                continue
            w_bar = 0.5 * (weights[a, i] + weights[b, i])
            total += 1
            if np.sign(w_bar * d[i]) == np.sign(dy):
                agree += 1
    return ConsistencyResult(agree / total if total else 0.0, total)


# ---------------------------------------------------------------------------
# Checkpoint format: versioned line-oriented text

PREF_FORMAT = "pref-model v1"


def _fmt_vec(vec: np.ndarray) -> str:
    return " ".join(repr(float(v)) for v in vec)


def save_pref(model: PreferenceModel, path: str | Path) -> None:
    lines = [PREF_FORMAT, f"gating {model.gating.value}",
             f"context {model.context_dim}", f"features {model.k}"]
    for i, name in enumerate(model.feature_names):
        lines.append(f"{name} {float(model.mu[i])!r} {float(model.sigma[i])!r}")
    lines.append("ctx_mu " + _fmt_vec(model.ctx_mu))
    lines.append("ctx_sigma " + _fmt_vec(model.ctx_sigma))
    lines.append(f"head {model.k} {model.context_dim}")
    for row in model.head_w:
        lines.append(_fmt_vec(row))
    lines.append("head_bias " + _fmt_vec(model.head_b))
    lines.append(f"gate_layers {len(model.gate_ws)}")
    for W, b in zip(model.gate_ws, model.gate_bs):
        lines.append(f"gate {W.shape[0]} {W.shape[1]}")
        for row in W:
            lines.append(_fmt_vec(row))
        lines.append("gate_bias " + _fmt_vec(b))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_pref(path: str | Path) -> PreferenceModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    it = iter(lines)

    def next_line() -> str:
        try:
            return next(it)
        except StopIteration:
            raise PrefError("truncated checkpoint") from None

    if next_line() != PREF_FORMAT:
        raise PrefError(f"not a {PREF_FORMAT} checkpoint: {path}")
    gating = Gating(next_line().split()[1])
    context_dim = int(next_line().split()[1])
    k = int(next_line().split()[1])
    names, mus, sigmas = [], [], []
    for _ in range(k):
        name, mu_s, sigma_s = next_line().split()
        names.append(name)
        mus.append(float(mu_s))
        sigmas.append(float(sigma_s))
    ctx_mu = np.array([float(x) for x in next_line().split()[1:]])
    ctx_sigma = np.array([float(x) for x in next_line().split()[1:]])
    if ctx_mu.shape != (context_dim,) or ctx_sigma.shape != (context_dim,):
        raise PrefError("context stats disagree with header")
    head_rows, head_cols = (int(x) for x in next_line().split()[1:])
    if (head_rows, head_cols) != (k, context_dim):
        raise PrefError("head dimensions disagree with header")
    head_w = np.array([[float(x) for x in next_line().split()] for _ in range(k)])
    head_b = np.array([float(x) for x in next_line().split()[1:]])
    n_layers = int(next_line().split()[1])
    gate_ws, gate_bs = [], []
    for _ in range(n_layers):
        out_dim, in_dim = (int(x) for x in next_line().split()[1:])
        W = np.array([[float(x) for x in next_line().split()] for _ in range(out_dim)])
        if W.shape != (out_dim, in_dim):
            raise PrefError("gate matrix shape disagrees with header")
        gate_ws.append(W)
        gate_bs.append(np.array([float(x) for x in next_line().split()[1:]]))
    return PreferenceModel(names, np.array(mus), np.array(sigmas),
                           ctx_mu, ctx_sigma,
                           head_w, head_b, gate_ws, gate_bs, gating)


# ---------------------------------------------------------------------------
# Patch-linear congestion-map baseline

@dataclass
class MapPredictor:
    patch_size: int
    ridge: float
    coef: np.ndarray              # 3*P*P raster weights then the intercept


def _patch_matrix(sample: LayoutSample, patch: int) -> np.ndarray:
    pad = patch // 2
    blocks = []
    for grid in (sample.macro, sample.rudy, sample.rudy_pin):
        padded = np.pad(grid.data, pad, mode="edge")
        windows = sliding_window_view(padded, (patch, patch))
        blocks.append(windows.reshape(-1, patch * patch))
    return np.hstack(blocks)


def mappred_fit(dataset: list[LayoutSample], patch_size: int = 5,
                ridge: float = 1e-6) -> MapPredictor:
    """Closed-form ridge fit of center congestion from local patches."""
    if patch_size < 1 or patch_size % 2 == 0:
        raise PrefError("patch_size must be odd and >= 1")
    if not dataset:
        raise PrefError("dataset is empty")
    d = 3 * patch_size * patch_size + 1
    gram = np.zeros((d, d))
    moment = np.zeros(d)
    for sample in dataset:
        if sample.congestion is None:
            raise PrefError(f"sample {sample.id} has no congestion raster")
        X = np.hstack([
            _patch_matrix(sample, patch_size),
            np.ones((sample.macro.data.size, 1)),
        ])
        gram += X.T @ X
        moment += X.T @ sample.congestion.data.ravel()
    penalty = ridge * np.eye(d)
    penalty[-1, -1] = 0.0         # never shrink the intercept
    try:
        coef = np.linalg.solve(gram + penalty, moment)
    except np.linalg.LinAlgError as exc:
        raise PrefError(
            f"normal equations are singular; raise ridge above {ridge!r}"
        ) from exc
    return MapPredictor(patch_size, float(ridge), coef)


def mappred_predict(predictor: MapPredictor, sample: LayoutSample) -> Grid:
    X = np.hstack([
        _patch_matrix(sample, predictor.patch_size),
        np.ones((sample.macro.data.size, 1)),
    ])
    flat = X @ predictor.coef
    h, w = sample.macro.data.shape
    return Grid(np.clip(flat, 0.0, 1.0).reshape(h, w))


MAPPRED_FORMAT = "map-predictor v1"


def save_mappred(predictor: MapPredictor, path: str | Path) -> None:
    lines = [MAPPRED_FORMAT,
             f"patch {predictor.patch_size}",
             f"ridge {predictor.ridge!r}",
             "coef " + _fmt_vec(predictor.coef)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_mappred(path: str | Path) -> MapPredictor:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != MAPPRED_FORMAT:
        raise PrefError(f"not a {MAPPRED_FORMAT} checkpoint: {path}")
    patch = int(lines[1].split()[1])
    ridge = float(lines[2].split()[1])
    coef = np.array([float(x) for x in lines[3].split()[1:]])
    return MapPredictor(patch, ridge, coef)

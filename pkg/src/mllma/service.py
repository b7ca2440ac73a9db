"""Read-only HTTP face of the pipeline.

Loads one dataset and one trained scoring model at startup, then serves
sample listings, raster thumbnails, predictions, what-if case reports,
and suggestion decks as JSON. All state is immutable after startup, so
concurrent requests cannot disagree.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request, Response
from fastapi.staticfiles import StaticFiles

from . import __version__, deck as deckmod
from .colormap import to_png
from .featdsl import FeatureSpec, eval_feature, load_feature_manifest, seed_pool
from .layout import RASTER_NAMES, LayoutSample, load_dataset
from .manifest import canonical_json
from .prefmodel import (
    GatePolicy,
    PrefError,
    PreferenceModel,
    attribution,
    load_pref,
    whatif,
)


class ServiceError(ValueError):
    pass


_GATING_ALIASES = {
    "frozen": GatePolicy.FROZEN_GATING,
    "frozen_gating": GatePolicy.FROZEN_GATING,
    "refresh": GatePolicy.REFRESH_GATING,
    "refresh_gating": GatePolicy.REFRESH_GATING,
}


@dataclass
class AppState:
    """Everything a request handler may read; nothing it may write."""

    samples: dict[str, LayoutSample]
    rows: dict[str, np.ndarray] = field(default_factory=dict)
    model: PreferenceModel | None = None
    specs: dict[str, FeatureSpec] = field(default_factory=dict)
    rules: list = field(default_factory=lambda: list(deckmod.DEFAULT_RULES))
    deck_top: int = 5
    deck_window: int = 32
    webui_dir: str | None = None


def build_state(dataset_dir: str | Path,
                model_path: str | Path | None = None,
                pool_path: str | Path | None = None,
                deck_top: int = 5,
                deck_window: int = 32,
                webui_dir: str | Path | None = None) -> AppState:
    """Load artifacts once; base feature rows are precomputed per sample."""
    samples = {s.id: s for s in load_dataset(dataset_dir)}
    specs = {
        s.name: s
        for s in (load_feature_manifest(pool_path) if pool_path else seed_pool())
    }
    model = load_pref(model_path) if model_path else None
    rows: dict[str, np.ndarray] = {}
    if model is not None:
        missing = [n for n in model.feature_names if n not in specs]
        if missing:
            raise ServiceError(
                f"feature pool lacks expressions for model features: {missing}")
        ordered = [specs[n] for n in model.feature_names]
        for sid, sample in samples.items():
            rows[sid] = np.array(
                [eval_feature(sp.expr, sample) for sp in ordered])
    return AppState(samples=samples, rows=rows, model=model, specs=specs,
                    deck_top=deck_top, deck_window=deck_window,
                    webui_dir=str(webui_dir) if webui_dir else None)


def _json(obj, status: int = 200) -> Response:
    # one serializer everywhere so numbers render identically across interfaces
    return Response(content=canonical_json(obj),
                    media_type="application/json", status_code=status)


def _error(status: int, message: str) -> Response:
    return _json({"error": message}, status)


async def _body(request: Request) -> tuple[dict | None, Response | None]:
    try:
        payload = await request.json()
    except Exception:
        return None, _error(400, "request body is not valid JSON")
    if not isinstance(payload, dict):
        return None, _error(400, "request body must be a JSON object")
    return payload, None


def _overrides_of(payload: dict, key: str, model: PreferenceModel
                  ) -> tuple[dict[str, float] | None, Response | None]:
    raw = payload.get(key, {})
    if not isinstance(raw, dict):
        return None, _error(400, f"{key} must be an object of feature: value")
    overrides: dict[str, float] = {}
    for name, value in raw.items():
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            return None, _error(400, f"override {name!r} must be a number")
        if name not in model.feature_names:
            return None, _error(404, f"unknown feature {name!r}")
        overrides[name] = float(value)
    return overrides, None


def _raster_kinds(sample: LayoutSample) -> list[str]:
    kinds = list(RASTER_NAMES)
    if sample.congestion is not None:
        kinds.append("congestion")
    return kinds


def build_app(state: AppState) -> FastAPI:
    app = FastAPI(title="congestion what-if service", version=__version__)

    @app.get("/health")
    def health():
        return _json({
            "status": "ok",
            "version": __version__,
            "model_loaded": state.model is not None,
            "n_samples": len(state.samples),
        })

    @app.get("/samples")
    def samples():
        # per-feature ranges over the served dataset plus the model's
        # training sigma, so clients can build sensible slider bounds
        stats = {}
        if state.model is not None and state.rows:
            mat = np.stack([state.rows[sid] for sid in sorted(state.rows)])
            for i, name in enumerate(state.model.feature_names):
                stats[name] = {
                    "min": float(mat[:, i].min()),
                    "max": float(mat[:, i].max()),
                    "sigma": float(state.model.sigma[i]),
                }
        return _json({
            "samples": [
                {"id": sid, "label": s.label}
                for sid, s in sorted(state.samples.items())
            ],
            "feature_stats": stats,
        })

    @app.get("/samples/{sid}")
    def sample_detail(sid: str):
        sample = state.samples.get(sid)
        if sample is None:
            return _error(404, f"unknown sample {sid!r}")
        row = state.rows.get(sid)
        features = {}
        if row is not None and state.model is not None:
            features = {
                name: float(row[i])
                for i, name in enumerate(state.model.feature_names)
            }
        return _json({
            "id": sid,
            "label": sample.label,
            "height": sample.macro.height,
            "width": sample.macro.width,
            "rasters": _raster_kinds(sample),
            "features": features,
        })

    @app.get("/samples/{sid}/raster/{kind}")
    def raster(sid: str, kind: str):
        sample = state.samples.get(sid)
        if sample is None:
            return _error(404, f"unknown sample {sid!r}")
        if kind == "congestion":
            grid = sample.congestion
            if grid is None:
                return _error(404, f"sample {sid!r} has no congestion raster")
        elif kind in RASTER_NAMES:
            grid = getattr(sample, kind)
        else:
            return _error(404, f"unknown raster kind {kind!r}")
        return Response(content=to_png(grid.data, vmin=0.0, vmax=1.0),
                        media_type="image/png")

    @app.post("/predict")
    async def predict_route(request: Request):
        payload, err = await _body(request)
        if err is not None:
            return err
        if state.model is None:
            return _error(503, "no preference model loaded")
        sid = payload.get("sample_id")
        if not isinstance(sid, str):
            return _error(400, "sample_id must be a string")
        sample = state.samples.get(sid)
        if sample is None:
            return _error(404, f"unknown sample {sid!r}")
        overrides, err = _overrides_of(payload, "feature_overrides", state.model)
        if err is not None:
            return err
        row = state.rows[sid].copy()
        for name, value in overrides.items():
            row[state.model.feature_names.index(name)] = value
        att = attribution(state.model, sample, feature_row=row)
        return _json({
            "sample_id": sid,
            "score": att.score,
            "weights": {it.name: it.weight for it in att.items},
            "attributions": [
                {
                    "feature": it.name,
                    "raw": it.raw,
                    "normalized": it.normalized,
                    "weight": it.weight,
                    "contribution": it.contribution,
                }
                for it in att.items
            ],
        })

    @app.post("/whatif")
    async def whatif_route(request: Request):
        payload, err = await _body(request)
        if err is not None:
            return err
        if state.model is None:
            return _error(503, "no preference model loaded")
        sid = payload.get("sample_id")
        if not isinstance(sid, str):
            return _error(400, "sample_id must be a string")
        sample = state.samples.get(sid)
        if sample is None:
            return _error(404, f"unknown sample {sid!r}")
        gating_raw = payload.get("gating_mode", GatePolicy.FROZEN_GATING.value)
        gating = _GATING_ALIASES.get(gating_raw)
        if gating is None:
            return _error(400, f"unknown gating_mode {gating_raw!r}")
        overrides, err = _overrides_of(payload, "overrides", state.model)
        if err is not None:
            return err
        try:
            report = whatif(state.model, sample, overrides,
                            feature_row=state.rows[sid], policy=gating)
        except PrefError as exc:
            return _error(404, str(exc))
        return _json(deckmod.whatif_payload(sid, gating, report))

    @app.get("/deck/{sid}")
    def deck_route(sid: str):
        if state.model is None:
            return _error(503, "no preference model loaded")
        sample = state.samples.get(sid)
        if sample is None:
            return _error(404, f"unknown sample {sid!r}")
        att = attribution(state.model, sample, feature_row=state.rows[sid])
        d = deckmod.build_deck(att, sample, rules=state.rules, m=state.deck_top,
                               specs=state.specs, window=state.deck_window)
        return _json(deckmod.deck_to_dict(d))

    if state.webui_dir and Path(state.webui_dir).is_dir():
        app.mount("/", StaticFiles(directory=state.webui_dir, html=True),
                  name="webui")

    return app

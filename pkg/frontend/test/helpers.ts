import type {
  AttributionRow,
  DeckResponse,
  FeatureStats,
  PredictResponse,
  SampleDetail,
} from "../src/api.js";
import type { SessionState } from "../src/state.js";
import { initialState, reducer } from "../src/state.js";

export function attRow(
  feature: string,
  contribution: number,
  extra: Partial<AttributionRow> = {},
): AttributionRow {
  return {
    feature,
    raw: 0.5,
    normalized: 0.1,
    weight: contribution >= 0 ? 0.4 : -0.4,
    contribution,
    ...extra,
  };
}

export function prediction(
  score: number,
  rows: AttributionRow[],
): PredictResponse {
  return {
    sample_id: "s0000",
    score,
    weights: Object.fromEntries(rows.map((r) => [r.feature, r.weight])),
    attributions: rows,
  };
}

export function detail(features: Record<string, number>): SampleDetail {
  return {
    id: "s0000",
    label: 1.25,
    height: 64,
    width: 64,
    rasters: ["macro", "rudy", "rudy_pin", "congestion"],
    features,
  };
}

export function stats(
  min = 0,
  max = 1,
  sigma = 0.2,
): FeatureStats {
  return { min, max, sigma };
}

export function deck(items: DeckResponse["items"]): DeckResponse {
  return { format: "deck v1", sample_id: "s0000", score: -1.0, items };
}

/** A state with one sample loaded and a first prediction applied. */
export function loadedState(): SessionState {
  let s = initialState();
  s = reducer(s, {
    type: "samples-loaded",
    samples: [{ id: "s0000", label: 1.25 }],
    stats: { pin: stats(0, 1, 0.2), bnd: stats(-2, 2, 0.5) },
  });
  s = reducer(s, { type: "sample-loaded", detail: detail({ pin: 0.6, bnd: 0.1 }) });
  s = reducer(s, { type: "request-started", id: 1 });
  s = reducer(s, {
    type: "prediction-received",
    id: 1,
    prediction: prediction(1.5, [attRow("pin", 0.9), attRow("bnd", -0.3)]),
  });
  return s;
}

export function deepFreeze<T>(obj: T): T {
  if (obj && typeof obj === "object") {
    for (const v of Object.values(obj as object)) deepFreeze(v);
    Object.freeze(obj);
  }
  return obj;
}

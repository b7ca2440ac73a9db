/**
 * Session state and its reducer. Views render from this alone, so every
 * transition lives here and is unit-testable without a DOM.
 */

import type {
  DeckResponse,
  FeatureStats,
  GatingMode,
  PredictResponse,
  SampleDetail,
  SampleSummary,
} from "./api.js";

export interface BeforeSnapshot {
  readonly prediction: PredictResponse;
  readonly overrides: Readonly<Record<string, number>>;
}

export interface SessionState {
  samples: SampleSummary[];
  stats: Record<string, FeatureStats>;
  sampleId: string | null;
  detail: SampleDetail | null;
  baseFeatures: Record<string, number>;
  overrides: Record<string, number>;
  gating: GatingMode;
  unsafeRange: boolean;
  lastPrediction: PredictResponse | null;
  deck: DeckResponse | null;
  before: BeforeSnapshot | null;
  latestRequest: number;
  error: string | null;
  notFound: string | null;
}

export type Action =
  | { type: "samples-loaded"; samples: SampleSummary[]; stats: Record<string, FeatureStats> }
  | { type: "sample-loaded"; detail: SampleDetail }
  | { type: "sample-missing"; id: string }
  | { type: "deck-loaded"; deck: DeckResponse }
  | { type: "override-set"; name: string; value: number }
  | { type: "override-cleared"; name: string }
  | { type: "overrides-reset" }
  | { type: "gating-set"; mode: GatingMode }
  | { type: "unsafe-toggled" }
  | { type: "request-started"; id: number }
  | { type: "prediction-received"; id: number; prediction: PredictResponse }
  | { type: "request-failed"; id: number; message: string }
  | { type: "before-pinned" }
  | { type: "before-cleared" };

export function initialState(): SessionState {
  return {
    samples: [],
    stats: {},
    sampleId: null,
    detail: null,
    baseFeatures: {},
    overrides: {},
    gating: "frozen_gating",
    unsafeRange: false,
    lastPrediction: null,
    deck: null,
    before: null,
    latestRequest: 0,
    error: null,
    notFound: null,
  };
}

export function reducer(state: SessionState, action: Action): SessionState {
  switch (action.type) {
    case "samples-loaded":
      return { ...state, samples: action.samples, stats: action.stats };

    case "sample-loaded":
      // switching samples discards overrides, the pin, and stale results
      return {
        ...state,
        sampleId: action.detail.id,
        detail: action.detail,
        baseFeatures: { ...action.detail.features },
        overrides: {},
        lastPrediction: null,
        deck: null,
        before: null,
        error: null,
        notFound: null,
      };

    case "sample-missing":
      return { ...state, notFound: action.id, error: null };

    case "deck-loaded":
      return { ...state, deck: action.deck };

    case "override-set": {
      // overrides only for features the loaded sample actually has
      if (!(action.name in state.baseFeatures)) return state;
      if (!Number.isFinite(action.value)) return state;
      return {
        ...state,
        overrides: { ...state.overrides, [action.name]: action.value },
      };
    }

    case "override-cleared": {
      if (!(action.name in state.overrides)) return state;
      const overrides = { ...state.overrides };
      delete overrides[action.name];
      return { ...state, overrides };
    }

    case "overrides-reset":
      return { ...state, overrides: {} };

    case "gating-set":
      return { ...state, gating: action.mode };

    case "unsafe-toggled":
      return { ...state, unsafeRange: !state.unsafeRange };

    case "request-started":
      return { ...state, latestRequest: Math.max(state.latestRequest, action.id) };

    case "prediction-received":
      // latest-wins: a response from a superseded request is dropped
      if (action.id < state.latestRequest) return state;
      return { ...state, lastPrediction: action.prediction, error: null };

    case "request-failed":
      if (action.id < state.latestRequest) return state;
      // keep the last good prediction visible alongside the error
      return { ...state, error: action.message };

    case "before-pinned": {
      if (state.before !== null) return state;       // immutable once pinned
      if (state.lastPrediction === null) return state;
      const snapshot: BeforeSnapshot = Object.freeze({
        prediction: state.lastPrediction,
        overrides: Object.freeze({ ...state.overrides }),
      });
      return { ...state, before: snapshot };
    }

    case "before-cleared":
      return { ...state, before: null };
  }
}

export interface Bounds {
  lo: number;
  hi: number;
}

/**
 * Slider range for one feature: dataset min/max padded by one training
 * sigma. The unsafe toggle widens the pad to five sigma for deliberate
 * extrapolation; it never disables the slider entirely.
 */
export function sliderBounds(stats: FeatureStats, unsafe: boolean): Bounds {
  let margin = (unsafe ? 5 : 1) * stats.sigma;
  if (margin === 0) {
    // constant feature in training; give the slider some travel anyway
    margin = (stats.max - stats.min) / 2 || Math.max(1, Math.abs(stats.min) / 2);
  }
  return { lo: stats.min - margin, hi: stats.max + margin };
}

export function clampToBounds(value: number, bounds: Bounds): number {
  return Math.min(bounds.hi, Math.max(bounds.lo, value));
}

/** Displayed score delta vs the pinned snapshot, or null before pinning. */
export function scoreDelta(state: SessionState): number | null {
  if (state.before === null || state.lastPrediction === null) return null;
  return state.lastPrediction.score - state.before.prediction.score;
}

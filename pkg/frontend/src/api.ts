/**
 * Typed client for the scoring service. Every number shown anywhere in
 * the UI comes out of one of these responses; nothing is computed
 * locally beyond display arithmetic on returned values.
 *
 * Paths are origin-relative because the built assets are served by the
 * same process that answers the API.
 */

export interface SampleSummary {
  id: string;
  label: number | null;
}

export interface FeatureStats {
  min: number;
  max: number;
  sigma: number;
}

export interface SamplesResponse {
  samples: SampleSummary[];
  feature_stats: Record<string, FeatureStats>;
}

export interface SampleDetail {
  id: string;
  label: number | null;
  height: number;
  width: number;
  rasters: string[];
  features: Record<string, number>;
}

export interface AttributionRow {
  feature: string;
  raw: number;
  normalized: number;
  weight: number;
  contribution: number;
}

export interface PredictResponse {
  sample_id: string;
  score: number;
  weights: Record<string, number>;
  attributions: AttributionRow[];
}

export type GatingMode = "frozen_gating" | "refresh_gating";

export interface WhatIfRow {
  feature: string;
  before_value: number;
  after_value: number;
  before_contribution: number;
  after_contribution: number;
  impact: string;
}

export interface WhatIfResponse {
  sample_id: string;
  gating_mode: GatingMode;
  score_before: number;
  score_after: number;
  delta: number;
  rows: WhatIfRow[];
}

export interface DeckItem {
  feature: string;
  raw: number;
  normalized: number;
  weight: number;
  contribution: number;
  severity: string;
  suggestion: string;
  hotspot: number[] | null;
}

export interface DeckResponse {
  format: string;
  sample_id: string;
  score: number;
  items: DeckItem[];
}

export class ApiError extends Error {
  status: number;

  constructor(status: number, message: string) {
    super(message);
    this.status = status;
  }
}

async function reject(resp: Response): Promise<never> {
  let message = `HTTP ${resp.status}`;
  try {
    const body = (await resp.json()) as { error?: string };
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    // non-JSON error body; keep the status line
  }
  throw new ApiError(resp.status, message);
}

async function getJson<T>(path: string): Promise<T> {
  const resp = await fetch(path);
  if (!resp.ok) await reject(resp);
  return resp.json() as Promise<T>;
}

async function postJson<T>(path: string, body: unknown): Promise<T> {
  const resp = await fetch(path, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(body),
  });
  if (!resp.ok) await reject(resp);
  return resp.json() as Promise<T>;
}

export const fetchSamples = () => getJson<SamplesResponse>("/samples");

export const fetchSample = (id: string) =>
  getJson<SampleDetail>(`/samples/${encodeURIComponent(id)}`);

export const fetchDeck = (id: string) =>
  getJson<DeckResponse>(`/deck/${encodeURIComponent(id)}`);

export function rasterUrl(id: string, kind: string): string {
  return `/samples/${encodeURIComponent(id)}/raster/${encodeURIComponent(kind)}`;
}

export function predict(
  sampleId: string,
  overrides: Record<string, number>,
): Promise<PredictResponse> {
  return postJson<PredictResponse>("/predict", {
    sample_id: sampleId,
    feature_overrides: overrides,
  });
}

/**
 * The case report both as an object and as the verbatim response text.
 * Export hands the text to the download untouched, so the saved file is
 * byte-identical to what the service sent.
 */
export async function whatifRaw(
  sampleId: string,
  overrides: Record<string, number>,
  gating: GatingMode,
): Promise<{ data: WhatIfResponse; text: string }> {
  const resp = await fetch("/whatif", {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({
      sample_id: sampleId,
      overrides,
      gating_mode: gating,
    }),
  });
  if (!resp.ok) await reject(resp);
  const text = await resp.text();
  return { data: JSON.parse(text) as WhatIfResponse, text };
}

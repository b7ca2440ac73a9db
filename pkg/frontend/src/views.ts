/**
 * Pure view functions: SessionState in, HTML string out. No fetching,
 * no globals, so every view is testable (and snapshot-testable) in
 * plain node. main.ts owns mounting and event wiring.
 */

import type { AttributionRow } from "./api.js";
import { rasterUrl } from "./api.js";
import { renderAttributionChart, escapeXml } from "./chart.js";
import type { SessionState } from "./state.js";
import { scoreDelta, sliderBounds } from "./state.js";

const RASTER_ORDER = ["macro", "rudy", "rudy_pin", "congestion"];

function fmt(v: number, digits = 4): string {
  return v.toFixed(digits);
}

function signed(v: number, digits = 4): string {
  return v >= 0 ? `+${v.toFixed(digits)}` : v.toFixed(digits);
}

export function renderNotFound(id: string): string {
  return (
    `<div class="not-found">` +
    `<h2>Sample not found</h2>` +
    `<p>No sample named <code>${escapeXml(id)}</code> on this service.</p>` +
    `<button data-action="retry">Reload sample list</button>` +
    `</div>`
  );
}

export function renderErrorBanner(message: string): string {
  return (
    `<div class="error-banner" role="alert">` +
    `<span>${escapeXml(message)}</span>` +
    `<button data-action="retry">Retry</button>` +
    `</div>`
  );
}

export function renderSampleSelector(state: SessionState): string {
  const options = state.samples
    .map((s) => {
      const sel = s.id === state.sampleId ? " selected" : "";
      return `<option value="${escapeXml(s.id)}"${sel}>${escapeXml(s.id)}</option>`;
    })
    .join("");
  return (
    `<label class="selector">Sample ` +
    `<select id="sample-select">${options}</select></label>`
  );
}

export function renderRasters(state: SessionState): string {
  if (!state.detail) return "";
  const cells = RASTER_ORDER.filter((k) => state.detail!.rasters.includes(k))
    .map(
      (kind) =>
        `<figure class="raster">` +
        `<img src="${rasterUrl(state.detail!.id, kind)}" alt="${kind}" ` +
        `width="${state.detail!.width}" height="${state.detail!.height}">` +
        `<figcaption>${kind}</figcaption></figure>`,
    )
    .join("");
  return `<div class="rasters">${cells}</div>`;
}

export function renderScoreCard(state: SessionState): string {
  const score = state.lastPrediction
    ? fmt(state.lastPrediction.score)
    : "&mdash;";
  const delta = scoreDelta(state);
  let deltaHtml = "";
  if (delta !== null) {
    const cls = delta < 0 ? "delta neg" : delta > 0 ? "delta pos" : "delta zero";
    deltaHtml = `<span class="${cls}" id="score-delta">${signed(delta)}</span>`;
  }
  const pinned = state.before
    ? `<span class="pinned-note">before: ${fmt(state.before.prediction.score)}</span>`
    : "";
  return (
    `<div class="score-card">` +
    `<span class="score-label">predicted congestion score</span>` +
    `<span class="score-value" id="score-value">${score}</span>` +
    `${deltaHtml}${pinned}</div>`
  );
}

export function renderControls(state: SessionState): string {
  const frozen = state.gating === "frozen_gating";
  const exportDisabled = state.before === null ? " disabled" : "";
  const pinDisabled =
    state.before !== null || state.lastPrediction === null ? " disabled" : "";
  return (
    `<div class="controls">` +
    `<label>gating <select id="gating-select">` +
    `<option value="frozen_gating"${frozen ? " selected" : ""}>frozen</option>` +
    `<option value="refresh_gating"${frozen ? "" : " selected"}>refresh</option>` +
    `</select></label>` +
    `<label class="unsafe"><input type="checkbox" id="unsafe-toggle"` +
    `${state.unsafeRange ? " checked" : ""}> unsafe range</label>` +
    `<button id="pin-before" data-action="pin"${pinDisabled}>Pin before</button>` +
    `<button id="unpin-before" data-action="unpin"` +
    `${state.before === null ? " disabled" : ""}>Unpin</button>` +
    `<button id="reset-overrides" data-action="reset">Reset sliders</button>` +
    `<button id="export-report" data-action="export"${exportDisabled}>` +
    `Export case report</button>` +
    `</div>`
  );
}

/** Slider order follows the attribution ordering once a prediction exists. */
export function sliderOrder(state: SessionState): string[] {
  if (state.lastPrediction) {
    return state.lastPrediction.attributions.map((a) => a.feature);
  }
  return Object.keys(state.baseFeatures);
}

export function renderSliders(state: SessionState): string {
  const rows = sliderOrder(state)
    .map((name) => {
      const stats = state.stats[name];
      const base = state.baseFeatures[name];
      if (stats === undefined || base === undefined) return "";
      const bounds = sliderBounds(stats, state.unsafeRange);
      const value = state.overrides[name] ?? base;
      const step = (bounds.hi - bounds.lo) / 200 || 1e-6;
      const overridden = name in state.overrides;
      return (
        `<div class="slider-row${overridden ? " overridden" : ""}">` +
        `<span class="slider-name">${escapeXml(name)}</span>` +
        `<input type="range" data-feature="${escapeXml(name)}" ` +
        `min="${bounds.lo}" max="${bounds.hi}" step="${step}" ` +
        `value="${value}">` +
        `<span class="slider-value">${fmt(value)}</span>` +
        (overridden
          ? `<button class="slider-reset" data-reset="${escapeXml(name)}">` +
            `base ${fmt(base)}</button>`
          : "") +
        `</div>`
      );
    })
    .join("");
  return `<div class="sliders">${rows}</div>`;
}

export function renderDeck(state: SessionState): string {
  if (!state.deck || state.deck.items.length === 0) return "";
  const items = state.deck.items
    .map(
      (it) =>
        `<li class="deck-item sev-${escapeXml(it.severity)}">` +
        `<strong>${escapeXml(it.feature)}</strong> ` +
        `<span class="deck-sev">(${escapeXml(it.severity)})</span> ` +
        `${escapeXml(it.suggestion)}</li>`,
    )
    .join("");
  return `<div class="deck"><h3>Suggestions</h3><ol>${items}</ol></div>`;
}

export function renderChartSection(state: SessionState): string {
  const rows: AttributionRow[] = state.lastPrediction
    ? state.lastPrediction.attributions
    : [];
  return `<div class="chart-section">${renderAttributionChart(rows)}</div>`;
}

export function renderApp(state: SessionState): string {
  let body: string;
  if (state.notFound !== null) {
    body = renderNotFound(state.notFound);
  } else if (state.detail === null) {
    body = `<div class="empty-state">Pick a sample to begin.</div>`;
  } else {
    body =
      renderRasters(state) +
      renderScoreCard(state) +
      renderControls(state) +
      renderChartSection(state) +
      renderSliders(state) +
      renderDeck(state);
  }
  const banner = state.error !== null ? renderErrorBanner(state.error) : "";
  return (
    `<header><h1>What-if explorer</h1>${renderSampleSelector(state)}</header>` +
    banner +
    `<main>${body}</main>`
  );
}

/**
 * Attribution bar chart as an SVG string: horizontal diverging bars
 * around a zero axis, one row per feature, ordering exactly as the
 * service returned it (most influential first). Positive contributions
 * extend right, negative left, so a negatively gated feature is visually
 * distinct at a glance.
 */

import type { AttributionRow } from "./api.js";

const ROW_H = 24;
const LABEL_W = 190;
const VALUE_W = 64;
const PLOT_W = 360;
const PAD_TOP = 8;

export function escapeXml(s: string): string {
  return s
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function chartWidth(): number {
  return LABEL_W + PLOT_W + VALUE_W;
}

export function renderAttributionChart(rows: AttributionRow[]): string {
  const width = chartWidth();
  if (rows.length === 0) {
    return (
      `<svg class="att-chart" width="${width}" height="40" role="img">` +
      `<text x="8" y="24" class="chart-empty">no attributions</text></svg>`
    );
  }

  const height = PAD_TOP * 2 + rows.length * ROW_H;
  const x0 = LABEL_W + PLOT_W / 2;
  const maxAbs = Math.max(...rows.map((r) => Math.abs(r.contribution)), 1e-12);
  const half = PLOT_W / 2 - 4;

  const parts: string[] = [
    `<svg class="att-chart" width="${width}" height="${height}" role="img">`,
    `<line class="zero-axis" x1="${x0}" y1="${PAD_TOP}" x2="${x0}" ` +
      `y2="${height - PAD_TOP}"/>`,
  ];

  rows.forEach((row, i) => {
    const y = PAD_TOP + i * ROW_H;
    const len = (Math.abs(row.contribution) / maxAbs) * half;
    const neg = row.contribution < 0;
    const barX = neg ? x0 - len : x0;
    const cls = neg ? "bar neg" : "bar pos";
    const value = row.contribution >= 0
      ? `+${row.contribution.toFixed(3)}`
      : row.contribution.toFixed(3);
    parts.push(
      `<g class="att-row" data-feature="${escapeXml(row.feature)}">`,
      `<text class="bar-label" x="${LABEL_W - 6}" y="${y + ROW_H / 2 + 4}" ` +
        `text-anchor="end">${escapeXml(row.feature)}</text>`,
      `<rect class="${cls}" x="${barX.toFixed(2)}" y="${y + 4}" ` +
        `width="${Math.max(len, 0.5).toFixed(2)}" height="${ROW_H - 8}"/>`,
      `<text class="bar-value" x="${LABEL_W + PLOT_W + 4}" ` +
        `y="${y + ROW_H / 2 + 4}">${value}</text>`,
      `</g>`,
    );
  });

  parts.push("</svg>");
  return parts.join("");
}

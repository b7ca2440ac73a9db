/**
 * Mount point and event wiring. All logic lives in the tested modules:
 * state transitions in state.ts, request pacing in debounce.ts, markup
 * in views.ts. This file only moves data between them and the DOM.
 */

import * as api from "./api.js";
import { PredictScheduler } from "./debounce.js";
import type { Action, SessionState } from "./state.js";
import { initialState, reducer } from "./state.js";
import { renderApp } from "./views.js";

let state: SessionState = initialState();
const root = document.getElementById("app") as HTMLElement;

function dispatch(action: Action): void {
  state = reducer(state, action);
  render();
}

function render(): void {
  root.innerHTML = renderApp(state);
}

const scheduler = new PredictScheduler((overrides, id) => {
  if (state.sampleId === null) return;
  dispatch({ type: "request-started", id });
  api.predict(state.sampleId, overrides).then(
    (prediction) => dispatch({ type: "prediction-received", id, prediction }),
    (err) => dispatch({ type: "request-failed", id, message: String(err) }),
  );
});

async function loadSample(id: string): Promise<void> {
  try {
    const detail = await api.fetchSample(id);
    dispatch({ type: "sample-loaded", detail });
  } catch (err) {
    if (err instanceof api.ApiError && err.status === 404) {
      dispatch({ type: "sample-missing", id });
    } else {
      dispatch({ type: "request-failed", id: state.latestRequest, message: String(err) });
    }
    return;
  }
  // initial score and deck; deck failures are non-fatal
  scheduler.schedule({});
  scheduler.flush();
  api.fetchDeck(id).then(
    (deck) => dispatch({ type: "deck-loaded", deck }),
    () => undefined,
  );
}

async function boot(): Promise<void> {
  try {
    const listing = await api.fetchSamples();
    dispatch({
      type: "samples-loaded",
      samples: listing.samples,
      stats: listing.feature_stats,
    });
    if (listing.samples.length > 0) await loadSample(listing.samples[0].id);
  } catch (err) {
    dispatch({ type: "request-failed", id: 0, message: String(err) });
  }
}

function exportReport(): void {
  if (state.sampleId === null || state.before === null) return;
  api
    .whatifRaw(state.sampleId, state.overrides, state.gating)
    .then(({ text }) => {
      // verbatim response body -> the saved file matches the API byte for byte
      const blob = new Blob([text], { type: "application/json" });
      const a = document.createElement("a");
      a.href = URL.createObjectURL(blob);
      a.download = `case-report-${state.sampleId}.json`;
      a.click();
      URL.revokeObjectURL(a.href);
    })
    .catch((err) =>
      dispatch({ type: "request-failed", id: state.latestRequest, message: String(err) }),
    );
}

// one delegated listener set; innerHTML rewrites never drop handlers
root.addEventListener("input", (ev) => {
  const el = ev.target as HTMLElement;
  if (el instanceof HTMLInputElement && el.dataset.feature) {
    dispatch({
      type: "override-set",
      name: el.dataset.feature,
      value: Number(el.value),
    });
    scheduler.schedule(state.overrides);
  }
});

root.addEventListener("change", (ev) => {
  const el = ev.target as HTMLElement;
  if (el instanceof HTMLSelectElement && el.id === "sample-select") {
    scheduler.cancel();
    void loadSample(el.value);
  } else if (el instanceof HTMLSelectElement && el.id === "gating-select") {
    dispatch({ type: "gating-set", mode: el.value as api.GatingMode });
  } else if (el instanceof HTMLInputElement && el.id === "unsafe-toggle") {
    dispatch({ type: "unsafe-toggled" });
  }
});

root.addEventListener("click", (ev) => {
  const el = (ev.target as HTMLElement).closest("[data-action],[data-reset]");
  if (!(el instanceof HTMLElement)) return;
  const reset = el.dataset.reset;
  if (reset !== undefined) {
    dispatch({ type: "override-cleared", name: reset });
    scheduler.schedule(state.overrides);
    return;
  }
  switch (el.dataset.action) {
    case "pin":
      dispatch({ type: "before-pinned" });
      break;
    case "unpin":
      dispatch({ type: "before-cleared" });
      break;
    case "reset":
      dispatch({ type: "overrides-reset" });
      scheduler.schedule(state.overrides);
      break;
    case "export":
      exportReport();
      break;
    case "retry":
      void boot();
      break;
  }
});

void boot();

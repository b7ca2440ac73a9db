/**
 * Slider-drag request pacing.
 *
 * Trailing debounce with a max-wait ceiling: a lone adjustment fires one
 * request after `delay` ms of quiet; a continuous drag fires at most one
 * request every `maxWait` ms. With the defaults that caps the request
 * rate at 4/s no matter how fast the slider moves.
 *
 * Each fire gets a fresh monotonically increasing id so the reducer can
 * drop responses that a newer request has superseded (latest wins).
 */

export type SendFn = (overrides: Record<string, number>, id: number) => void;

export class PredictScheduler {
  private readonly send: SendFn;
  private readonly delay: number;
  private readonly maxWait: number;
  private pending: Record<string, number> | null = null;
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;
  private maxTimer: ReturnType<typeof setTimeout> | null = null;
  private nextId = 1;

  constructor(send: SendFn, opts: { delay?: number; maxWait?: number } = {}) {
    this.send = send;
    this.delay = opts.delay ?? 150;
    this.maxWait = opts.maxWait ?? 250;
  }

  schedule(overrides: Record<string, number>): void {
    this.pending = { ...overrides };
    if (this.debounceTimer !== null) clearTimeout(this.debounceTimer);
    this.debounceTimer = setTimeout(() => this.fire(), this.delay);
    if (this.maxTimer === null) {
      // ceiling timer runs from the first schedule of a burst
      this.maxTimer = setTimeout(() => this.fire(), this.maxWait);
    }
  }

  /** Issue immediately, skipping the quiet period. */
  flush(): void {
    if (this.pending !== null) this.fire();
  }

  cancel(): void {
    this.clearTimers();
    this.pending = null;
  }

  get lastIssuedId(): number {
    return this.nextId - 1;
  }

  private fire(): void {
    this.clearTimers();
    const overrides = this.pending;
    this.pending = null;
    if (overrides === null) return;
    this.send(overrides, this.nextId++);
  }

  private clearTimers(): void {
    if (this.debounceTimer !== null) {
      clearTimeout(this.debounceTimer);
      this.debounceTimer = null;
    }
    if (this.maxTimer !== null) {
      clearTimeout(this.maxTimer);
      this.maxTimer = null;
    }
  }
}

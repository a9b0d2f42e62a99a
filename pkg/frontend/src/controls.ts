/** Query orchestration: debounce, cancellation, and view retention.
 *
 * State changes that alter the query identity trigger one debounced fetch;
 * camera/selection changes never refetch. An in-flight request is aborted
 * when superseded, and the previous payload stays on screen until the new
 * one arrives. Framework-free so the logic is unit-testable.
 */

import { ApiClient, ServiceError } from "./api.js";
import { queryKey, type ViewState } from "./state.js";
import type { ProjectionResponse } from "./types.js";

export interface ControllerEvents {
  onData(payload: ProjectionResponse): void;
  onLoading(loading: boolean): void;
  onError(message: string | null): void;
}

export class QueryController {
  private api: ApiClient;
  private events: ControllerEvents;
  private debounceMs: number;
  private timer: ReturnType<typeof setTimeout> | null = null;
  private inflight: AbortController | null = null;
  private lastKey: string | null = null;
  private pendingState: ViewState | null = null;
  fetchCount = 0;

  constructor(api: ApiClient, events: ControllerEvents, debounceMs = 150) {
    this.api = api;
    this.events = events;
    this.debounceMs = debounceMs;
  }

  /** Called on every view-state change; fetches only when the query part
   * changed, after the debounce window. */
  update(state: ViewState): void {
    const key = queryKey(state);
    if (key === this.lastKey) return;
    this.pendingState = state;
    if (this.timer !== null) clearTimeout(this.timer);
    this.timer = setTimeout(() => {
      this.timer = null;
      void this.fire();
    }, this.debounceMs);
  }

  /** Immediately issue the pending query (used on startup and in tests). */
  async fire(): Promise<void> {
    if (this.pendingState === null) return;
    const state = this.pendingState;
    const key = queryKey(state);
    this.pendingState = null;
    this.lastKey = key;
    this.inflight?.abort();
    const ctl = new AbortController();
    this.inflight = ctl;
    this.events.onLoading(true);
    this.fetchCount += 1;
    try {
      const payload = await this.api.projection(state, ctl.signal);
      if (ctl.signal.aborted) return;
      this.events.onError(null);
      this.events.onData(payload);
    } catch (err) {
      if (ctl.signal.aborted) return;
      if (err instanceof ServiceError) {
        this.events.onError(`service error ${err.status}: ${JSON.stringify(err.detail)}`);
      } else {
        this.events.onError(`network failure: ${(err as Error).message}`);
      }
    } finally {
      if (this.inflight === ctl) {
        this.inflight = null;
        this.events.onLoading(false);
      }
    }
  }

  /** Force a retry of the last query (error-banner affordance). */
  retry(state: ViewState): void {
    this.lastKey = null;
    this.pendingState = state;
    void this.fire();
  }
}

import { describe, expect, it, vi } from "vitest";
import { ApiClient, isDocumentedEndpoint } from "../src/api.js";
import { QueryController, type ControllerEvents } from "../src/controls.js";
import { defaultViewState } from "../src/state.js";
import type { ProjectionResponse } from "../src/types.js";

function harness(options: { fail?: boolean; delayMs?: number } = {}) {
  const calls: string[] = [];
  const impl = async (url: string, init?: { signal?: AbortSignal }) => {
    calls.push(url);
    if (options.delayMs) {
      await new Promise((resolve) => setTimeout(resolve, options.delayMs));
    }
    if (init?.signal?.aborted) throw new Error("aborted");
    if (options.fail) {
      return { ok: false, status: 404,
               json: async () => ({ detail: { error: "unknown attribute" } }) };
    }
    const body: ProjectionResponse = {
      attribute: "merchant", method: "pca", dims: 2, color_by: null,
      explained_variance: [0.5, 0.2], groups: ["all"],
      points: [{ index: 0, token: "M0", coords: [0, 0], group: "all" }],
    };
    return { ok: true, status: 200, json: async () => body };
  };
  const api = new ApiClient("", impl);
  const received: ProjectionResponse[] = [];
  const loadingStates: boolean[] = [];
  const errors: (string | null)[] = [];
  const events: ControllerEvents = {
    onData: (p) => received.push(p),
    onLoading: (l) => loadingStates.push(l),
    onError: (e) => errors.push(e),
  };
  return { api, calls, received, loadingStates, errors, events };
}

describe("query controller", () => {
  it("switching dims issues exactly one new projection request", async () => {
    const h = harness();
    const ctl = new QueryController(h.api, h.events, 1);
    const base = defaultViewState();
    ctl.update(base);
    await vi.waitFor(() => expect(h.received.length).toBe(1));
    ctl.update({ ...base, dims: 3 });
    await vi.waitFor(() => expect(h.received.length).toBe(2));
    expect(ctl.fetchCount).toBe(2);
    expect(h.calls.filter((u) => u.includes("dims=3")).length).toBe(1);
  });

  it("camera-only changes never refetch", async () => {
    const h = harness();
    const ctl = new QueryController(h.api, h.events, 1);
    const base = defaultViewState();
    ctl.update(base);
    await vi.waitFor(() => expect(h.received.length).toBe(1));
    ctl.update({ ...base, camera: { yaw: 2, pitch: 1, zoom: 3 }, selected: 0 });
    await new Promise((resolve) => setTimeout(resolve, 30));
    expect(ctl.fetchCount).toBe(1);
  });

  it("debounces rapid changes into one request", async () => {
    const h = harness();
    const ctl = new QueryController(h.api, h.events, 25);
    const base = defaultViewState();
    for (let seed = 0; seed < 5; seed++) ctl.update({ ...base, seed });
    await vi.waitFor(() => expect(h.received.length).toBe(1));
    expect(ctl.fetchCount).toBe(1);
    expect(h.calls[0]).toContain("seed=4");
  });

  it("surfaces structured service errors and recovers on retry", async () => {
    const h = harness({ fail: true });
    const ctl = new QueryController(h.api, h.events, 1);
    ctl.update(defaultViewState());
    await vi.waitFor(() =>
      expect(h.errors.some((e) => e?.includes("service error 404"))).toBe(true));
    expect(h.received.length).toBe(0);
    // loading indicator was turned on then off
    expect(h.loadingStates[0]).toBe(true);
    expect(h.loadingStates[h.loadingStates.length - 1]).toBe(false);
  });

  it("previous data is retained while a new request is in flight", async () => {
    const h = harness({ delayMs: 20 });
    const ctl = new QueryController(h.api, h.events, 1);
    const base = defaultViewState();
    ctl.update(base);
    await vi.waitFor(() => expect(h.received.length).toBe(1));
    ctl.update({ ...base, dims: 3 });
    // between issue and arrival nothing clears the old payload
    await new Promise((resolve) => setTimeout(resolve, 5));
    expect(h.received.length).toBe(1);
    await vi.waitFor(() => expect(h.received.length).toBe(2));
  });

  it("all traffic targets documented endpoints only", async () => {
    const h = harness();
    const ctl = new QueryController(h.api, h.events, 1);
    const base = defaultViewState();
    ctl.update(base);
    await vi.waitFor(() => expect(h.received.length).toBe(1));
    ctl.update({ ...base, colorBy: "country" });
    await vi.waitFor(() => expect(h.received.length).toBe(2));
    await h.api.attributes();
    await h.api.metadata("merchant");
    expect(h.api.requestLog.length).toBeGreaterThanOrEqual(4);
    expect(h.api.requestLog.every(isDocumentedEndpoint)).toBe(true);
  });

  it("changing the sample seed changes points but not the legend schema", async () => {
    // deterministic fake service: group set fixed, point identity seed-keyed
    const impl = async (url: string) => {
      const seed = new URL("http://x" + url).searchParams.get("seed") ?? "0";
      const body: ProjectionResponse = {
        attribute: "merchant", method: "pca", dims: 2, color_by: "country",
        explained_variance: [0.5, 0.2], groups: ["C000", "C001"],
        points: [{ index: Number(seed), token: `M${seed}`, coords: [0, 0],
                   group: "C000" }],
      };
      return { ok: true, status: 200, json: async () => body };
    };
    const api = new ApiClient("", impl);
    const received: ProjectionResponse[] = [];
    const ctl = new QueryController(api, {
      onData: (p) => received.push(p), onLoading: () => {}, onError: () => {},
    }, 1);
    const base = { ...defaultViewState(), colorBy: "country" };
    ctl.update({ ...base, seed: 1 });
    await vi.waitFor(() => expect(received.length).toBe(1));
    ctl.update({ ...base, seed: 2 });
    await vi.waitFor(() => expect(received.length).toBe(2));
    expect(received[0].points[0].token).not.toBe(received[1].points[0].token);
    expect(received[0].groups).toEqual(received[1].groups);
  });
});

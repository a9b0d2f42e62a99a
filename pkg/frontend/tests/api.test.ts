import { describe, expect, it } from "vitest";
import { ApiClient, ServiceError, isDocumentedEndpoint } from "../src/api.js";
import { defaultViewState } from "../src/state.js";

function fakeFetch(body: unknown, ok = true, status = 200) {
  const calls: string[] = [];
  const impl = async (url: string) => {
    calls.push(url);
    return { ok, status, json: async () => body };
  };
  return { impl, calls };
}

describe("api client", () => {
  it("builds documented projection urls from view state", async () => {
    const { impl } = fakeFetch({ points: [], groups: [] });
    const api = new ApiClient("http://svc:1", impl);
    const state = { ...defaultViewState("merchant"), dims: 3 as const,
                    colorBy: "country", seed: 9 };
    await api.projection(state);
    expect(api.requestLog.length).toBe(1);
    const url = api.requestLog[0];
    expect(url).toContain("/projection/merchant?");
    expect(url).toContain("dims=3");
    expect(url).toContain("color_by=country");
    expect(url).toContain("seed=9");
    expect(isDocumentedEndpoint(url)).toBe(true);
  });

  it("logs every request it makes", async () => {
    const { impl, calls } = fakeFetch({ attributes: [], card: null, schema_hash: "x" });
    const api = new ApiClient("", impl);
    await api.attributes();
    await api.metadata("merchant");
    expect(api.requestLog).toEqual(calls);
    expect(api.requestLog.every(isDocumentedEndpoint)).toBe(true);
  });

  it("raises a structured error on non-ok responses", async () => {
    const { impl } = fakeFetch({ detail: { error: "unknown attribute" } }, false, 404);
    const api = new ApiClient("", impl);
    await expect(api.metadata("nope")).rejects.toThrowError(ServiceError);
    try {
      await api.metadata("nope");
    } catch (err) {
      expect((err as ServiceError).status).toBe(404);
      expect((err as ServiceError).detail).toEqual({ error: "unknown attribute" });
    }
  });

  it("rejects undocumented endpoints in the audit helper", () => {
    expect(isDocumentedEndpoint("http://svc/projection/merchant?dims=2")).toBe(true);
    expect(isDocumentedEndpoint("http://svc/admin/delete")).toBe(false);
    expect(isDocumentedEndpoint("/train")).toBe(false);
  });
});

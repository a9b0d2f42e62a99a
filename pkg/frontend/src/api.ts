/** Typed client for the embedding service.
 *
 * Every request goes through this module and is appended to a request log,
 * which doubles as the audit trail proving the UI only talks to the
 * documented endpoints. The fetch implementation is injectable for tests.
 */

import type { AttributesResponse, MetadataResponse, ProjectionResponse } from "./types.js";
import type { ViewState } from "./state.js";

export type FetchLike = (url: string, init?: { signal?: AbortSignal }) => Promise<{
  ok: boolean;
  status: number;
  json(): Promise<unknown>;
}>;

export class ServiceError extends Error {
  status: number;
  detail: unknown;

  constructor(status: number, detail: unknown) {
    super(`service error ${status}`);
    this.status = status;
    this.detail = detail;
  }
}

export class ApiClient {
  readonly baseUrl: string;
  readonly requestLog: string[] = [];
  private fetchImpl: FetchLike;

  constructor(baseUrl = "", fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/$/, "");
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  private async get<T>(path: string, signal?: AbortSignal): Promise<T> {
    const url = this.baseUrl + path;
    this.requestLog.push(url);
    const resp = await this.fetchImpl(url, { signal });
    const body = await resp.json();
    if (!resp.ok) {
      throw new ServiceError(resp.status, (body as { detail?: unknown }).detail ?? body);
    }
    return body as T;
  }

  attributes(signal?: AbortSignal): Promise<AttributesResponse> {
    return this.get("/attributes", signal);
  }

  projection(state: ViewState, signal?: AbortSignal): Promise<ProjectionResponse> {
    const q = new URLSearchParams();
    q.set("method", "pca");
    q.set("dims", String(state.dims));
    if (state.colorBy !== null) q.set("color_by", state.colorBy);
    q.set("sample_per_group", String(state.samplePerGroup));
    q.set("n_groups", String(state.nGroups));
    if (state.seed !== null) q.set("seed", String(state.seed));
    return this.get(`/projection/${encodeURIComponent(state.attribute)}?${q}`, signal);
  }

  metadata(attribute: string, signal?: AbortSignal): Promise<MetadataResponse> {
    return this.get(`/metadata/${encodeURIComponent(attribute)}`, signal);
  }
}

/** Documented endpoint patterns; used by tests to audit the request log. */
export const ENDPOINT_PATTERNS: RegExp[] = [
  /\/attributes$/,
  /\/embeddings\/[^/?]+(\?.*)?$/,
  /\/projection\/[^/?]+(\?.*)?$/,
  /\/metadata\/[^/?]+$/,
];

export function isDocumentedEndpoint(url: string): boolean {
  const path = url.replace(/^https?:\/\/[^/]+/, "");
  return ENDPOINT_PATTERNS.some((re) => re.test(path));
}

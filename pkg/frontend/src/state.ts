/** View state and its URL (hash fragment) serialization.
 *
 * Every rendered view is fully described by a ViewState, so a copied URL
 * reproduces it exactly.
 */

export interface ViewState {
  attribute: string;
  dims: 2 | 3;
  colorBy: string | null;
  samplePerGroup: number;
  nGroups: number;
  seed: number | null;
  camera: { yaw: number; pitch: number; zoom: number };
  selected: number | null; // point index within the payload
}

export function defaultViewState(attribute = "merchant"): ViewState {
  return {
    attribute,
    dims: 2,
    colorBy: null,
    samplePerGroup: 50,
    nGroups: 10,
    seed: null,
    camera: { yaw: 0.6, pitch: 0.4, zoom: 1 },
    selected: null,
  };
}

const NUM = (v: string | null, fallback: number): number => {
  if (v === null) return fallback;
  const parsed = Number(v);
  return Number.isFinite(parsed) ? parsed : fallback;
};

export function stateToUrl(state: ViewState): string {
  const q = new URLSearchParams();
  q.set("attr", state.attribute);
  q.set("dims", String(state.dims));
  if (state.colorBy !== null) q.set("color", state.colorBy);
  q.set("spg", String(state.samplePerGroup));
  q.set("ng", String(state.nGroups));
  if (state.seed !== null) q.set("seed", String(state.seed));
  q.set("yaw", state.camera.yaw.toFixed(4));
  q.set("pitch", state.camera.pitch.toFixed(4));
  q.set("zoom", state.camera.zoom.toFixed(4));
  if (state.selected !== null) q.set("sel", String(state.selected));
  return "#" + q.toString();
}

export function stateFromUrl(hash: string, fallbackAttribute = "merchant"): ViewState {
  const base = defaultViewState(fallbackAttribute);
  const raw = hash.startsWith("#") ? hash.slice(1) : hash;
  if (!raw) return base;
  const q = new URLSearchParams(raw);
  const dims = NUM(q.get("dims"), base.dims);
  return {
    attribute: q.get("attr") ?? base.attribute,
    dims: dims === 3 ? 3 : 2,
    colorBy: q.get("color"),
    samplePerGroup: NUM(q.get("spg"), base.samplePerGroup),
    nGroups: NUM(q.get("ng"), base.nGroups),
    seed: q.has("seed") ? NUM(q.get("seed"), 0) : null,
    camera: {
      yaw: NUM(q.get("yaw"), base.camera.yaw),
      pitch: NUM(q.get("pitch"), base.camera.pitch),
      zoom: NUM(q.get("zoom"), base.camera.zoom),
    },
    selected: q.has("sel") ? NUM(q.get("sel"), 0) : null,
  };
}

/** The request identity of a view: states that differ only in camera or
 * selection must not refetch. */
export function queryKey(state: ViewState): string {
  return JSON.stringify([state.attribute, state.dims, state.colorBy,
                         state.samplePerGroup, state.nGroups, state.seed]);
}

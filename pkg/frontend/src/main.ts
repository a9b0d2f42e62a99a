/** DOM wiring: controls, canvas, legend, metadata panel, URL sync. */

import { ApiClient } from "./api.js";
import { hitTest } from "./camera.js";
import { buildLegend } from "./color.js";
import { QueryController } from "./controls.js";
import { ScatterRenderer } from "./scatter.js";
import { defaultViewState, stateFromUrl, stateToUrl, type ViewState } from "./state.js";
import type { MetadataResponse, ProjectionResponse } from "./types.js";

const $ = <T extends HTMLElement>(id: string): T => {
  const el = document.getElementById(id);
  if (el === null) throw new Error(`missing element #${id}`);
  return el as T;
};

const api = new ApiClient("");
let state: ViewState = stateFromUrl(location.hash);
let payload: ProjectionResponse | null = null;
let metadata: MetadataResponse | null = null;
let urlUpdateTimer: ReturnType<typeof setTimeout> | null = null;

const canvas = $("scatter") as unknown as HTMLCanvasElement;
const renderer = new ScatterRenderer(canvas);
const attrSelect = $("attr") as unknown as HTMLSelectElement;
const dimsSelect = $("dims") as unknown as HTMLSelectElement;
const colorSelect = $("color-by") as unknown as HTMLSelectElement;
const seedInput = $("seed") as unknown as HTMLInputElement;
const banner = $("banner");
const loading = $("loading");
const legendEl = $("legend");
const panel = $("panel");
const tooltip = $("tooltip");

function syncUrl(): void {
  if (urlUpdateTimer !== null) clearTimeout(urlUpdateTimer);
  urlUpdateTimer = setTimeout(() => {
    history.replaceState(null, "", stateToUrl(state));
  }, 120);
}

function renderLegend(): void {
  legendEl.replaceChildren();
  if (payload === null) return;
  for (const entry of buildLegend(payload)) {
    const li = document.createElement("li");
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = entry.color;
    li.append(swatch, `${entry.group} (${entry.count})`);
    legendEl.append(li);
  }
}

function renderPanel(): void {
  panel.replaceChildren();
  if (payload === null || state.selected === null) {
    panel.textContent = "click a point to inspect it";
    return;
  }
  const point = payload.points[state.selected];
  if (point === undefined) return;
  const rows: [string, string][] = [
    ["token", point.token],
    ["index", String(point.index)],
    ["group", point.group],
    ["coords", point.coords.map((c) => c.toFixed(3)).join(", ")],
  ];
  const groups = metadata?.groups ?? {};
  for (const key of Object.keys(groups).sort()) {
    const value = groups[key][String(point.index)];
    if (value !== undefined) rows.push([key, value]);
  }
  const dl = document.createElement("dl");
  for (const [k, v] of rows) {
    const dt = document.createElement("dt");
    dt.textContent = k;
    const dd = document.createElement("dd");
    dd.textContent = v;
    dl.append(dt, dd);
  }
  panel.replaceChildren(dl);
}

function redraw(): void {
  renderer.render(payload, state);
  renderLegend();
  renderPanel();
  $("variance").textContent = payload === null ? "" :
    "explained variance: " +
    payload.explained_variance.map((v) => (100 * v).toFixed(1) + "%").join(" / ");
}

const controller = new QueryController(api, {
  onData(p) {
    payload = p;
    state.selected = null;
    redraw();
  },
  onLoading(l) {
    loading.style.display = l ? "inline" : "none";
  },
  onError(message) {
    if (message === null) {
      banner.style.display = "none";
      return;
    }
    banner.replaceChildren();
    banner.style.display = "block";
    banner.append(message + " ");
    const retry = document.createElement("button");
    retry.textContent = "retry";
    retry.addEventListener("click", () => controller.retry(state));
    banner.append(retry);
  },
});

function setState(update: Partial<ViewState>, refetch: boolean): void {
  state = { ...state, ...update };
  syncUrl();
  if (refetch) {
    controller.update(state);
    void refreshMetadata();
  } else {
    redraw();
  }
}

async function refreshMetadata(): Promise<void> {
  try {
    metadata = await api.metadata(state.attribute);
  } catch {
    metadata = null;
  }
}

function bindControls(): void {
  attrSelect.addEventListener("change", () =>
    setState({ attribute: attrSelect.value, colorBy: null, selected: null }, true));
  dimsSelect.addEventListener("change", () =>
    setState({ dims: dimsSelect.value === "3" ? 3 : 2, selected: null }, true));
  colorSelect.addEventListener("change", () =>
    setState({ colorBy: colorSelect.value || null, selected: null }, true));
  seedInput.addEventListener("change", () => {
    const v = seedInput.value.trim();
    setState({ seed: v === "" ? null : Number(v), selected: null }, true);
  });

  let dragging = false;
  let last: [number, number] = [0, 0];
  canvas.addEventListener("mousedown", (e) => {
    dragging = true;
    last = [e.offsetX, e.offsetY];
  });
  window.addEventListener("mouseup", () => {
    dragging = false;
  });
  canvas.addEventListener("mousemove", (e) => {
    if (dragging && state.dims === 3) {
      const dx = e.offsetX - last[0];
      const dy = e.offsetY - last[1];
      last = [e.offsetX, e.offsetY];
      setState({
        camera: {
          ...state.camera,
          yaw: state.camera.yaw + dx * 0.01,
          pitch: Math.max(-1.5, Math.min(1.5, state.camera.pitch + dy * 0.01)),
        },
      }, false);
      return;
    }
    const hit = hitTest(renderer.screen, e.offsetX, e.offsetY);
    if (hit !== null && payload !== null) {
      const p = payload.points[hit.index];
      tooltip.textContent = `${p.token} — ${p.group}`;
      tooltip.style.display = "block";
      tooltip.style.left = `${e.offsetX + 14}px`;
      tooltip.style.top = `${e.offsetY + 14}px`;
    } else {
      tooltip.style.display = "none";
    }
  });
  canvas.addEventListener("click", (e) => {
    const hit = hitTest(renderer.screen, e.offsetX, e.offsetY);
    setState({ selected: hit === null ? null : hit.index }, false);
  });
  canvas.addEventListener("wheel", (e) => {
    e.preventDefault();
    const factor = e.deltaY < 0 ? 1.1 : 1 / 1.1;
    setState({
      camera: { ...state.camera, zoom: Math.max(0.1, Math.min(20, state.camera.zoom * factor)) },
    }, false);
  });
  // keyboard navigation: arrows orbit, +/- zoom
  canvas.addEventListener("keydown", (e) => {
    const cam = { ...state.camera };
    if (e.key === "ArrowLeft") cam.yaw -= 0.1;
    else if (e.key === "ArrowRight") cam.yaw += 0.1;
    else if (e.key === "ArrowUp") cam.pitch = Math.min(1.5, cam.pitch + 0.1);
    else if (e.key === "ArrowDown") cam.pitch = Math.max(-1.5, cam.pitch - 0.1);
    else if (e.key === "+" || e.key === "=") cam.zoom = Math.min(20, cam.zoom * 1.1);
    else if (e.key === "-") cam.zoom = Math.max(0.1, cam.zoom / 1.1);
    else return;
    e.preventDefault();
    setState({ camera: cam }, false);
  });

  window.addEventListener("hashchange", () => {
    state = stateFromUrl(location.hash, state.attribute);
    applyStateToControls();
    controller.update(state);
    redraw();
  });
}

function applyStateToControls(): void {
  attrSelect.value = state.attribute;
  dimsSelect.value = String(state.dims);
  colorSelect.value = state.colorBy ?? "";
  seedInput.value = state.seed === null ? "" : String(state.seed);
}

async function start(): Promise<void> {
  bindControls();
  try {
    const info = await api.attributes();
    attrSelect.replaceChildren();
    for (const attr of info.attributes) {
      const opt = document.createElement("option");
      opt.value = attr.name;
      opt.textContent = `${attr.name} (${attr.cardinality})`;
      attrSelect.append(opt);
    }
    if (!info.attributes.some((a) => a.name === state.attribute)) {
      state = { ...defaultViewState(info.attributes[0]?.name ?? "merchant"),
                ...{ camera: state.camera } };
    }
    const selected = info.attributes.find((a) => a.name === state.attribute);
    colorSelect.replaceChildren(new Option("(none)", ""));
    for (const key of selected?.metadata_keys ?? []) {
      colorSelect.append(new Option(key, key));
    }
    applyStateToControls();
    await refreshMetadata();
    controller.update(state);
    await controller.fire();
  } catch (err) {
    banner.style.display = "block";
    banner.textContent = `could not reach the embedding service: ${(err as Error).message}`;
  }
}

void start();

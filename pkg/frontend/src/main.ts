import { GatewayApi, ApiError } from "./api.js";
import { RowStore } from "./store.js";
import { StreamClient } from "./sse.js";
import {
  renderStatusBarsSvg,
  renderTimeseriesSvg,
  statusCounts,
  timeseriesData,
} from "./charts.js";
import {
  FilterState,
  applyFilters,
  clearRange,
  emptyFilter,
  setRange,
} from "./filters.js";
import type { GatewayConfig, RowViewModel } from "./types.js";

const TABLE_ROWS = 200;

const api = new GatewayApi();
const store = new RowStore();
let config: GatewayConfig | null = null;
let filter: FilterState = emptyFilter();
let renderQueued = false;

function el<T extends HTMLElement>(id: string): T {
  return document.getElementById(id) as T;
}

function toast(text: string, isError = true): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = text;
  box.className = isError ? "toast error" : "toast";
  box.style.display = "block";
  setTimeout(() => { box.style.display = "none"; }, 4000);
}

// -- table ----------------------------------------------------------

function featureNames(): string[] {
  return config ? config.features.map((f) => f.name) : [];
}

function badge(status: string): string {
  const cls = status === "NonOK" ? "badge nonok" : "badge ok";
  return `<span class="${cls}">${status}</span>`;
}

function targetCell(vm: RowViewModel): string {
  const target = vm.row.observation.target;
  const shown = typeof target === "number" ? String(target) : "";
  if (vm.editing) {
    return `<input class="target-input" data-row="${vm.row.row_id}" value="${shown}">`;
  }
  const dirtyMark = vm.dirty ? " *" : "";
  return `<span class="target" data-row="${vm.row.row_id}">${shown}${dirtyMark}</span>`;
}

function renderTable(): void {
  const names = featureNames();
  const head = ["row", ...names, "target", "predicted", "conf", "status",
                "provenance", "explanation"]
    .map((h) => `<th>${h}</th>`).join("");
  const body = store.latest(TABLE_ROWS).reverse().map((vm) => {
    const r = vm.row;
    const features = names
      .map((n) => `<td>${formatNum(r.observation.features[n])}</td>`).join("");
    const explanation = r.explanation
      ? `<td class="explanation" title="${escapeHtml(r.explanation.text)}">${escapeHtml(truncate(r.explanation.text, 60))}</td>`
      : "<td></td>";
    return `<tr>` +
      `<td>${r.row_id}</td>${features}` +
      `<td class="editable">${targetCell(vm)}</td>` +
      `<td>${formatNum(r.prediction.predicted)}</td>` +
      `<td>${r.prediction.confidence.toFixed(2)}</td>` +
      `<td>${badge(r.status)}</td>` +
      `<td>${r.target_provenance}</td>` +
      explanation + `</tr>`;
  }).join("");
  el<HTMLTableElement>("rows-table").innerHTML =
    `<thead><tr>${head}</tr></thead><tbody>${body}</tbody>`;
}

function formatNum(v: number | undefined): string {
  if (v === undefined) return "";
  return Math.abs(v) >= 1000 ? v.toFixed(0) : v.toPrecision(4);
}

function truncate(s: string, n: number): string {
  return s.length > n ? s.slice(0, n - 1) + "…" : s;
}

function escapeHtml(s: string): string {
  return s.replace(/[&<>"]/g, (c) =>
    ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" }[c] as string));
}

// -- charts ---------------------------------------------------------

function renderCharts(): void {
  const rows = applyFilters(store.all().map((vm) => vm.row), filter);
  el<HTMLDivElement>("timeseries").innerHTML =
    renderTimeseriesSvg(timeseriesData(rows));
  el<HTMLDivElement>("status-bars").innerHTML =
    renderStatusBarsSvg(statusCounts(rows));
  el<HTMLSpanElement>("filtered-count").textContent =
    `${rows.length} / ${store.size()} rows`;
}

function renderAll(): void {
  renderTable();
  renderCharts();
}

function queueRender(): void {
  if (renderQueued) return;
  renderQueued = true;
  requestAnimationFrame(() => {
    renderQueued = false;
    renderAll();
  });
}

// -- edit handling --------------------------------------------------

function wireTableEvents(): void {
  const table = el<HTMLTableElement>("rows-table");
  table.addEventListener("click", (ev) => {
    const span = (ev.target as HTMLElement).closest(".target");
    if (!span) return;
    store.beginEdit(Number((span as HTMLElement).dataset.row));
    const input = table.querySelector<HTMLInputElement>(".target-input");
    input?.focus();
    input?.select();
  });
  table.addEventListener("keydown", async (ev) => {
    const input = ev.target as HTMLInputElement;
    if (!input.classList.contains("target-input")) return;
    const rowId = Number(input.dataset.row);
    if (ev.key === "Escape") {
      store.revertEdit(rowId);
      return;
    }
    if (ev.key !== "Enter") {
      store.markDirty(rowId);
      return;
    }
    const value = Number(input.value);
    if (!Number.isFinite(value)) {
      toast("target must be a finite number");
      return;
    }
    try {
      const serverRow = await api.editTarget(rowId, value);
      store.reconcileEdit(serverRow); // badge shows the server's verdict
    } catch (err) {
      store.revertEdit(rowId);
      toast(err instanceof ApiError ? err.message : String(err));
    }
  });
  table.addEventListener("focusout", (ev) => {
    const input = ev.target as HTMLInputElement;
    if (input.classList?.contains("target-input")) {
      store.revertEdit(Number(input.dataset.row));
    }
  });
}

// -- recalibration panel --------------------------------------------

function wireRecalPanel(): void {
  el<HTMLButtonElement>("recalibrate-btn").addEventListener("click", async () => {
    try {
      const receipt = await api.recalibrate();
      el<HTMLSpanElement>("model-version").textContent =
        `v${receipt.model_version}`;
      toast(`recalibrated to model v${receipt.model_version}`, false);
    } catch (err) {
      toast(err instanceof ApiError ? err.message : String(err));
    }
  });
  el<HTMLAnchorElement>("export-link").href = api.exportNonOkUrl();
  const poll = async () => {
    try {
      const m = await api.recalibrationMetrics();
      el<HTMLSpanElement>("nonok-fraction").textContent =
        (m.nonok_window_fraction * 100).toFixed(0) + "%";
      el<HTMLSpanElement>("auto-fires").textContent = String(m.auto_fires);
      el<HTMLSpanElement>("corrections-pending").textContent =
        String(m.corrections_pending);
    } catch {
      // gateway momentarily unreachable; next poll will catch up
    }
  };
  poll();
  setInterval(poll, 2000);
}

// -- filter panel ---------------------------------------------------

function wireFilters(): void {
  if (!config) return;
  const host = el<HTMLDivElement>("filters");
  const statusSelect = document.createElement("select");
  statusSelect.innerHTML =
    `<option value="">all statuses</option>` +
    `<option value="OK">OK</option><option value="NonOK">NonOK</option>`;
  statusSelect.addEventListener("change", () => {
    filter = { ...filter, status: statusSelect.value || null };
    renderCharts();
  });
  host.appendChild(statusSelect);

  for (const feature of config.features) {
    const wrap = document.createElement("label");
    wrap.className = "filter-range";
    wrap.textContent = feature.name;
    const lo = document.createElement("input");
    const hi = document.createElement("input");
    for (const input of [lo, hi]) {
      input.type = "number";
      input.className = "range-input";
    }
    lo.placeholder = "min";
    hi.placeholder = "max";
    const update = () => {
      const min = lo.value === "" ? -Infinity : Number(lo.value);
      const max = hi.value === "" ? Infinity : Number(hi.value);
      filter = (lo.value === "" && hi.value === "")
        ? clearRange(filter, feature.name)
        : setRange(filter, feature.name, min, max);
      renderCharts();
    };
    lo.addEventListener("change", update);
    hi.addEventListener("change", update);
    wrap.append(lo, hi);
    host.appendChild(wrap);
  }
  el<HTMLButtonElement>("clear-filters").addEventListener("click", () => {
    filter = emptyFilter();
    statusSelect.value = "";
    host.querySelectorAll<HTMLInputElement>(".range-input")
      .forEach((i) => { i.value = ""; });
    renderCharts();
  });
}

// -- boot -----------------------------------------------------------

async function boot(): Promise<void> {
  try {
    config = await api.config();
    el<HTMLSpanElement>("policy-label").textContent =
      `${config.deviation_policy.mode} ${config.deviation_policy.threshold}`;
  } catch (err) {
    toast(`cannot load gateway config: ${err}`);
  }
  store.onChange(queueRender);
  wireTableEvents();
  wireRecalPanel();
  wireFilters();

  const stream = new StreamClient({
    url: api.streamUrl(),
    onEvent: (doc) => store.apply(doc),
    onStateChange: (connected) => {
      const dot = el<HTMLSpanElement>("conn-dot");
      dot.className = connected ? "dot live" : "dot down";
    },
  });
  stream.connect();
}

boot();

// Browser entry point: wires the controller to the static page.

import { ApiClient } from "./api.js";
import { Dashboard, POLL_INTERVAL_MS, type DashboardState } from "./app.js";
import {
  accountingPanel,
  deriveFromOptions,
  jobDetail,
  jobTable,
  offlineBanner,
  submitErrorNote,
  vmTable,
} from "./render.js";

declare global {
  interface Window {
    BURSTQ_API_URL?: string;
  }
}

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

function renderAll(state: DashboardState): void {
  el("banner").innerHTML = offlineBanner(state.offline);
  el("job-table").innerHTML = jobTable(state.jobs);
  el("vm-table").innerHTML = vmTable(state.vms);
  el("accounting").innerHTML = state.accounting ? accountingPanel(state.accounting) : "";
  el("submit-error").innerHTML = submitErrorNote(state.submitError);
  el("detail").innerHTML = jobDetail(state.detail);
  el<HTMLSelectElement>("derive-from").innerHTML = deriveFromOptions(state.jobs);
  el("last-submitted").textContent = state.lastSubmittedId
    ? `submitted ${state.lastSubmittedId}`
    : "";
  const note = el("action-error");
  note.textContent = state.actionError ?? "";
}

function collectParams(raw: string): Record<string, string> {
  const params: Record<string, string> = {};
  for (const line of raw.split("\n")) {
    const trimmed = line.trim();
    if (!trimmed) continue;
    const eq = trimmed.indexOf("=");
    if (eq > 0) params[trimmed.slice(0, eq).trim()] = trimmed.slice(eq + 1).trim();
  }
  return params;
}

async function readFiles(input: HTMLInputElement): Promise<{ name: string; content: Uint8Array }[]> {
  const out = [];
  for (const file of Array.from(input.files ?? [])) {
    out.push({ name: file.name, content: new Uint8Array(await file.arrayBuffer()) });
  }
  return out;
}

export function boot(): void {
  const base = window.BURSTQ_API_URL ?? "";
  const dashboard = new Dashboard(new ApiClient(base), renderAll);

  el("job-table").addEventListener("click", (ev) => {
    const target = ev.target as HTMLElement;
    const id = target.dataset.id;
    if (!id) return;
    if (target.classList.contains("act-cancel")) {
      void dashboard.cancel(id).then(() => dashboard.poll());
    } else if (target.classList.contains("act-detail")) {
      void dashboard.showDetail(id);
    } else if (target.classList.contains("act-results")) {
      ev.preventDefault();
      window.open(dashboard.resultsUrl(id), "_blank");
    }
  });

  el("detail").addEventListener("click", (ev) => {
    if ((ev.target as HTMLElement).classList.contains("detail")) dashboard.closeDetail();
  });

  el<HTMLFormElement>("submit-form").addEventListener("submit", (ev) => {
    ev.preventDefault();
    void (async () => {
      const files = await readFiles(el<HTMLInputElement>("file-input"));
      const id = await dashboard.submit({
        type: el<HTMLSelectElement>("kind").value,
        params: collectParams(el<HTMLTextAreaElement>("params").value),
        backend: el<HTMLSelectElement>("backend").value || undefined,
        deriveFrom: el<HTMLSelectElement>("derive-from").value || undefined,
        owner: el<HTMLInputElement>("owner").value || undefined,
        files,
      });
      if (id) void dashboard.poll();
    })();
  });

  void dashboard.poll();
  setInterval(() => void dashboard.poll(), POLL_INTERVAL_MS);
}

boot();

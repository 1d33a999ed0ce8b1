// Pure HTML renderers. Every fact shown comes straight from a service
// response; the only logic here is formatting.

import type { AccountingDoc, JobDoc, VmDoc } from "./types.js";
import { TERMINAL_STATES } from "./types.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

export function formatDuration(seconds: number | null): string {
  if (seconds === null || Number.isNaN(seconds)) return "—";
  if (seconds < 60) return `${seconds.toFixed(1)}s`;
  const mins = Math.floor(seconds / 60);
  if (mins < 60) return `${mins}m ${Math.round(seconds % 60)}s`;
  return `${Math.floor(mins / 60)}h ${mins % 60}m`;
}

export function formatTimestamp(epoch: number | null): string {
  if (epoch === null) return "—";
  return new Date(epoch * 1000).toISOString().replace("T", " ").slice(0, 19);
}

export function stateChip(job: Pick<JobDoc, "state" | "color">): string {
  const animate = TERMINAL_STATES.has(job.state) ? "" : " chip-live";
  return (
    `<span class="chip${animate}" data-color="${escapeHtml(job.color)}" ` +
    `style="background:${escapeHtml(job.color)}">${escapeHtml(job.state)}</span>`
  );
}

export function jobRow(job: JobDoc): string {
  const cancellable = !TERMINAL_STATES.has(job.state);
  const actions = [
    `<button class="act-detail" data-id="${job.id}">detail</button>`,
    cancellable ? `<button class="act-cancel" data-id="${job.id}">cancel</button>` : "",
    job.state === "Completed"
      ? `<a class="act-results" data-id="${job.id}" href="jobs/${job.id}/results">results</a>`
      : "",
  ]
    .filter(Boolean)
    .join(" ");
  return (
    `<tr data-id="${job.id}" data-state="${escapeHtml(job.state)}">` +
    `<td>${job.id}</td>` +
    `<td>${escapeHtml(job.kind)}</td>` +
    `<td>${escapeHtml(job.backend)}</td>` +
    `<td>${stateChip(job)}</td>` +
    `<td>${formatTimestamp(job.submitted_at)}</td>` +
    `<td>${formatDuration(job.runtime_seconds)}</td>` +
    `<td class="error-cell">${job.error ? escapeHtml(job.error) : ""}</td>` +
    `<td>${actions}</td>` +
    `</tr>`
  );
}

export function jobTable(jobs: JobDoc[]): string {
  if (jobs.length === 0) {
    return `<p class="empty">No jobs yet - submit one above.</p>`;
  }
  const rows = jobs.map(jobRow).join("");
  return (
    `<table class="jobs"><thead><tr>` +
    `<th>id</th><th>kind</th><th>backend</th><th>state</th>` +
    `<th>submitted</th><th>runtime</th><th>error</th><th></th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function offlineBanner(visible: boolean): string {
  if (!visible) return "";
  return `<div class="banner">Service unreachable - showing last known data.</div>`;
}

export function submitErrorNote(message: string | null): string {
  if (!message) return "";
  return `<p class="submit-error">${escapeHtml(message)}</p>`;
}

export function deriveFromOptions(jobs: JobDoc[]): string {
  const completed = jobs.filter((j) => j.state === "Completed");
  const options = completed
    .map((j) => `<option value="${j.id}">${j.id} (${escapeHtml(j.kind)})</option>`)
    .join("");
  return `<option value="">none</option>${options}`;
}

export function jobDetail(job: JobDoc | null): string {
  if (!job) return "";
  const fields: [string, string][] = [
    ["state", `${job.state} (${job.color})`],
    ["backend", job.backend],
    ["owner", job.owner],
    ["submitted", formatTimestamp(job.submitted_at)],
    ["started", formatTimestamp(job.started_at)],
    ["finished", formatTimestamp(job.finished_at)],
    ["runtime", formatDuration(job.runtime_seconds)],
    ["attempts", String(job.attempt_count)],
    ["vm", job.assigned_vm ?? "—"],
    ["est. memory", `${job.est_memory_gb.toFixed(2)} GB`],
    ["core group", String(job.core_group)],
    ["derived from", job.derive_from ?? "—"],
    ["error", job.error ?? "—"],
  ];
  const rows = fields
    .map(([k, v]) => `<tr><th>${k}</th><td>${escapeHtml(v)}</td></tr>`)
    .join("");
  return (
    `<div class="detail" data-id="${job.id}"><h3>${job.id}</h3>` +
    `<table>${rows}</table></div>`
  );
}

export function vmTable(vms: VmDoc[]): string {
  if (vms.length === 0) return `<p class="empty">No VMs in the pool.</p>`;
  const rows = vms
    .map(
      (vm) =>
        `<tr data-id="${vm.id}"><td>${vm.id}</td>` +
        `<td>${escapeHtml(vm.state)}</td>` +
        `<td>${escapeHtml(vm.endpoint)}</td>` +
        `<td>${formatDuration(vm.uptime_seconds)}</td>` +
        `<td>${vm.jobs_executed}</td></tr>`,
    )
    .join("");
  return (
    `<table class="vms"><thead><tr>` +
    `<th>id</th><th>state</th><th>endpoint</th><th>uptime</th><th>jobs</th>` +
    `</tr></thead><tbody>${rows}</tbody></table>`
  );
}

export function accountingPanel(doc: AccountingDoc): string {
  const vmRows = doc.vms
    .map(
      (row) =>
        `<tr><td>${row.vm_id}</td><td>${formatDuration(row.uptime_seconds)}</td>` +
        `<td>${row.periods_billed}</td><td>${row.cost.toFixed(2)}</td>` +
        `<td>${row.jobs_executed}</td></tr>`,
    )
    .join("");
  const jobRows = doc.jobs
    .map(
      (row) =>
        `<tr><td>${row.job_id}</td><td>${escapeHtml(row.owner)}</td>` +
        `<td>${row.vm_id}</td><td>${formatDuration(row.runtime_seconds)}</td></tr>`,
    )
    .join("");
  return (
    `<div class="accounting">` +
    `<p class="totals">Billed periods: <b data-field="total_periods">${doc.total_periods}</b> · ` +
    `Total cost: <b data-field="total_cost">${doc.total_cost.toFixed(2)}</b></p>` +
    `<table class="acct-vms"><thead><tr><th>vm</th><th>uptime</th><th>periods</th>` +
    `<th>cost</th><th>jobs</th></tr></thead><tbody>${vmRows}</tbody></table>` +
    `<table class="acct-jobs"><thead><tr><th>job</th><th>owner</th><th>vm</th>` +
    `<th>runtime</th></tr></thead><tbody>${jobRows}</tbody></table>` +
    `</div>`
  );
}

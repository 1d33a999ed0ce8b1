// Wire shapes as served by the job service. The dashboard displays these
// verbatim; in particular `color` is never recomputed client-side.

export interface JobDoc {
  id: string;
  kind: string;
  state: string;
  backend: string;
  color: string;
  owner: string;
  submitted_at: number;
  started_at: number | null;
  finished_at: number | null;
  runtime_seconds: number | null;
  error: string | null;
  attempt_count: number;
  assigned_vm: string | null;
  est_memory_gb: number;
  core_group: number;
  derive_from: string | null;
}

export interface VmDoc {
  id: string;
  state: string;
  endpoint: string;
  launched_at: number;
  uptime_seconds: number;
  jobs_executed: number;
  idle_since: number | null;
}

export interface AccountingVmRow {
  vm_id: string;
  launched_at: number;
  terminated_at: number | null;
  uptime_seconds: number;
  periods_billed: number;
  unit_price: number;
  cost: number;
  jobs_executed: number;
  busy_seconds: number;
}

export interface AccountingJobRow {
  job_id: string;
  owner: string;
  vm_id: string;
  runtime_seconds: number;
}

export interface AccountingDoc {
  vms: AccountingVmRow[];
  jobs: AccountingJobRow[];
  total_periods: number;
  total_cost: number;
}

export interface ApiError {
  error: string;
  message: string;
}

export const TERMINAL_STATES = new Set(["Completed", "Failed", "Cancelled"]);

export interface SubmitRequest {
  type: string;
  params?: Record<string, string>;
  backend?: string;
  deriveFrom?: string;
  owner?: string;
  files?: { name: string; content: Uint8Array | string }[];
}

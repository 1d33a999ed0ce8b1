// Dashboard controller: polling state machine, DOM-free.
//
// One operation is in flight at a time: polls and user actions share a
// serial queue, so a click issued mid-poll runs right after it. Poll
// failures raise the offline banner and keep the last known data.

import { ApiClient, ApiRequestError } from "./api.js";
import type { AccountingDoc, JobDoc, SubmitRequest, VmDoc } from "./types.js";

export const POLL_INTERVAL_MS = 2000;

export interface DashboardState {
  jobs: JobDoc[];
  vms: VmDoc[];
  accounting: AccountingDoc | null;
  offline: boolean;
  submitError: string | null;
  lastSubmittedId: string | null;
  detail: JobDoc | null;
  actionError: string | null;
}

export class Dashboard {
  state: DashboardState = {
    jobs: [],
    vms: [],
    accounting: null,
    offline: false,
    submitError: null,
    lastSubmittedId: null,
    detail: null,
    actionError: null,
  };

  private chain: Promise<void> = Promise.resolve();

  constructor(
    private api: ApiClient,
    private onChange: (state: DashboardState) => void = () => {},
  ) {}

  /** Serialize an operation behind whatever is currently running. */
  private enqueue<T>(op: () => Promise<T>): Promise<T> {
    const result = this.chain.then(op);
    this.chain = result.then(
      () => undefined,
      () => undefined,
    );
    return result;
  }

  private notify(): void {
    this.onChange(this.state);
  }

  /** One poll: refresh jobs, VMs and accounting. */
  poll(): Promise<void> {
    return this.enqueue(async () => {
      try {
        const [jobs, vms, accounting] = await Promise.all([
          this.api.listJobs(),
          this.api.listVms(),
          this.api.accounting(),
        ]);
        this.state.jobs = jobs;
        this.state.vms = vms;
        this.state.accounting = accounting;
        this.state.offline = false;
        if (this.state.detail) {
          const fresh = jobs.find((j) => j.id === this.state.detail?.id);
          if (fresh) this.state.detail = fresh;
        }
      } catch {
        // keep stale data; just flag the outage
        this.state.offline = true;
      }
      this.notify();
    });
  }

  submit(req: SubmitRequest): Promise<string | null> {
    return this.enqueue(async () => {
      this.state.submitError = null;
      try {
        const id = await this.api.submit(req);
        this.state.lastSubmittedId = id;
        this.notify();
        return id;
      } catch (err) {
        this.state.submitError =
          err instanceof ApiRequestError ? err.message : "submission failed";
        this.notify();
        return null;
      }
    });
  }

  cancel(id: string): Promise<void> {
    return this.enqueue(async () => {
      this.state.actionError = null;
      try {
        await this.api.cancel(id);
      } catch (err) {
        this.state.actionError =
          err instanceof ApiRequestError ? err.message : "cancel failed";
      }
      this.notify();
    });
  }

  showDetail(id: string): Promise<void> {
    return this.enqueue(async () => {
      try {
        this.state.detail = await this.api.getJob(id);
      } catch (err) {
        this.state.actionError =
          err instanceof ApiRequestError ? err.message : "detail fetch failed";
      }
      this.notify();
    });
  }

  closeDetail(): void {
    this.state.detail = null;
    this.notify();
  }

  resultsUrl(id: string): string {
    return this.api.resultsUrl(id);
  }
}

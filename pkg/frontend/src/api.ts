// Thin fetch client for the job service HTTP API.

import type { AccountingDoc, ApiError, JobDoc, SubmitRequest, VmDoc } from "./types.js";

export class ApiRequestError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function readError(resp: Response): Promise<ApiRequestError> {
  let payload: ApiError = { error: "http", message: `HTTP ${resp.status}` };
  try {
    payload = (await resp.json()) as ApiError;
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiRequestError(resp.status, payload.error, payload.message);
}

export class ApiClient {
  constructor(public baseUrl: string) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
  }

  private async getJson<T>(path: string): Promise<T> {
    const resp = await fetch(`${this.baseUrl}${path}`);
    if (!resp.ok) throw await readError(resp);
    return (await resp.json()) as T;
  }

  listJobs(): Promise<JobDoc[]> {
    return this.getJson<JobDoc[]>("/jobs");
  }

  getJob(id: string): Promise<JobDoc> {
    return this.getJson<JobDoc>(`/jobs/${encodeURIComponent(id)}`);
  }

  listVms(): Promise<VmDoc[]> {
    return this.getJson<VmDoc[]>("/vms");
  }

  accounting(): Promise<AccountingDoc> {
    return this.getJson<AccountingDoc>("/accounting");
  }

  async submit(req: SubmitRequest): Promise<string> {
    const form = new FormData();
    form.append("type", req.type);
    if (req.params && Object.keys(req.params).length > 0) {
      form.append("params", JSON.stringify(req.params));
    }
    if (req.backend) form.append("backend", req.backend);
    if (req.deriveFrom) form.append("derive_from", req.deriveFrom);
    if (req.owner) form.append("owner", req.owner);
    for (const file of req.files ?? []) {
      const blob = new Blob([
        typeof file.content === "string" ? file.content : (file.content as Uint8Array<ArrayBuffer>),
      ]);
      form.append(file.name, blob, file.name);
    }
    const resp = await fetch(`${this.baseUrl}/jobs`, { method: "POST", body: form });
    if (!resp.ok) throw await readError(resp);
    const body = (await resp.json()) as { id: string };
    return body.id;
  }

  async cancel(id: string): Promise<string> {
    const resp = await fetch(`${this.baseUrl}/jobs/${encodeURIComponent(id)}`, {
      method: "DELETE",
    });
    if (!resp.ok) throw await readError(resp);
    const body = (await resp.json()) as { state: string };
    return body.state;
  }

  resultsUrl(id: string): string {
    return `${this.baseUrl}/jobs/${encodeURIComponent(id)}/results`;
  }
}

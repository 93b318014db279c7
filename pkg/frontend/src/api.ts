/** Thin typed client over the local HTTP bridge. */

import type { JobHandle, StatusNode } from "./model.js";

export class BridgeError extends Error {
  constructor(
    public status: number,
    public code: string,
    public detail: string,
  ) {
    super(`${code}: ${detail}`);
  }
}

async function asBridgeError(resp: Response): Promise<BridgeError> {
  let code = `http-${resp.status}`;
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    code = body.error ?? code;
    detail = body.detail ?? detail;
  } catch {
    // non-JSON error body: keep the status line
  }
  return new BridgeError(resp.status, code, detail);
}

export class BridgeClient {
  constructor(public baseUrl: string = "") {}

  private async get(path: string): Promise<unknown> {
    const resp = await fetch(this.baseUrl + path);
    if (!resp.ok) {
      throw await asBridgeError(resp);
    }
    return resp.json();
  }

  private async post(path: string, body: object): Promise<unknown> {
    const resp = await fetch(this.baseUrl + path, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!resp.ok) {
      throw await asBridgeError(resp);
    }
    return resp.json();
  }

  async jobs(): Promise<JobHandle[]> {
    const body = (await this.get("/jobs")) as { jobs: JobHandle[] };
    return body.jobs;
  }

  async submit(document: object, gateway: string, vsite: string, title: string): Promise<JobHandle> {
    const body = (await this.post("/jobs", {
      workflow: document,
      gateway,
      vsite,
      title,
    })) as { job: JobHandle };
    return body.job;
  }

  async status(jobId: string): Promise<StatusNode> {
    const body = (await this.get(`/jobs/${jobId}/status`)) as { status: StatusNode };
    return body.status;
  }

  async abort(jobId: string): Promise<void> {
    await this.post(`/jobs/${jobId}/abort`, {});
  }

  async output(jobId: string, task: string, stream: "stdout" | "stderr"): Promise<string> {
    const query = new URLSearchParams({ task, stream });
    const resp = await fetch(`${this.baseUrl}/jobs/${jobId}/output?${query}`);
    if (!resp.ok) {
      throw await asBridgeError(resp);
    }
    return resp.text();
  }

  async vsites(): Promise<string[]> {
    const body = (await this.get("/vsites")) as { vsites: { vsite_name: string }[] };
    return body.vsites.map((v) => v.vsite_name);
  }
}

/** Thin HTTP client for the probing service. All model logic stays server
 *  side; this module only shapes requests and surfaces errors. */

import type {
  HealthPayload,
  ProbePayload,
  ProbeRequest,
  PropertiesPayload,
  TaxonomyDoc,
} from "./types.js";

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ProbeClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private async json<T>(path: string, init?: RequestInit): Promise<T> {
    const response = await this.fetchImpl(this.baseUrl + path, init);
    const body = await response.text();
    if (!response.ok) {
      let message = body;
      try {
        const parsed = JSON.parse(body);
        message = parsed.error ?? parsed.message ?? body;
      } catch {
        /* non-JSON error body */
      }
      throw new ServiceError(response.status, message);
    }
    return JSON.parse(body) as T;
  }

  taxonomy(): Promise<TaxonomyDoc> {
    return this.json<TaxonomyDoc>("/taxonomy");
  }

  properties(nodeId: string): Promise<PropertiesPayload> {
    return this.json<PropertiesPayload>(`/properties/${encodeURIComponent(nodeId)}`);
  }

  health(): Promise<HealthPayload> {
    return this.json<HealthPayload>("/healthz");
  }

  probe(request: ProbeRequest): Promise<ProbePayload> {
    const form = new FormData();
    form.set("x", String(request.x));
    form.set("y", String(request.y));
    if (request.threshold !== undefined) form.set("threshold", String(request.threshold));
    if (request.seed !== undefined) form.set("seed", String(request.seed));
    if (request.sampleId !== undefined) form.set("sample_id", request.sampleId);
    if (request.imageBlob !== undefined) form.set("image", request.imageBlob, "probe.png");
    return this.json<ProbePayload>("/probe", { method: "POST", body: form });
  }
}

import { describe, expect, it } from "vitest";

import { ProbeClient, ServiceError } from "../src/api.js";

import fullPath from "./fixtures/probe_full_path.json";

function fakeFetch(
  handler: (url: string, init?: RequestInit) => { status: number; body: unknown },
) {
  const calls: Array<{ url: string; init?: RequestInit }> = [];
  const impl = async (url: string, init?: RequestInit): Promise<Response> => {
    calls.push({ url, init });
    const { status, body } = handler(url, init);
    return new Response(JSON.stringify(body), { status });
  };
  return { impl, calls };
}

describe("service client", () => {
  it("posts probe requests as multipart form fields", async () => {
    const { impl, calls } = fakeFetch(() => ({ status: 200, body: fullPath }));
    const client = new ProbeClient("http://svc", impl);
    const payload = await client.probe({
      x: 12,
      y: 34,
      threshold: 0.6,
      seed: 9,
      sampleId: "sample_1",
    });
    expect(payload).toEqual(fullPath);
    expect(calls.length).toBe(1);
    expect(calls[0].url).toBe("http://svc/probe");
    const form = calls[0].init?.body as FormData;
    expect(form.get("x")).toBe("12");
    expect(form.get("y")).toBe("34");
    expect(form.get("threshold")).toBe("0.6");
    expect(form.get("seed")).toBe("9");
    expect(form.get("sample_id")).toBe("sample_1");
  });

  it("omits optional fields that were not provided", async () => {
    const { impl, calls } = fakeFetch(() => ({ status: 200, body: fullPath }));
    const client = new ProbeClient("http://svc", impl);
    await client.probe({ x: 1, y: 2 });
    const form = calls[0].init?.body as FormData;
    expect(form.get("threshold")).toBeNull();
    expect(form.get("seed")).toBeNull();
    expect(form.get("sample_id")).toBeNull();
  });

  it("raises ServiceError with the server's message on failures", async () => {
    const { impl } = fakeFetch(() => ({
      status: 422,
      body: { error: "coordinate (9,9) outside image 4x4" },
    }));
    const client = new ProbeClient("http://svc", impl);
    await expect(client.probe({ x: 9, y: 9 })).rejects.toThrowError(ServiceError);
    await expect(client.probe({ x: 9, y: 9 })).rejects.toThrow(/outside image/);
  });

  it("fetches taxonomy and healthz from their routes", async () => {
    const { impl, calls } = fakeFetch((url) =>
      url.endsWith("/healthz")
        ? { status: 200, body: { version: "0.1.0", model_hash: "m", taxonomy_hash: "t" } }
        : { status: 200, body: { level_names: [], nodes: [] } },
    );
    const client = new ProbeClient("http://svc", impl);
    await client.taxonomy();
    const health = await client.health();
    expect(health.version).toBe("0.1.0");
    expect(calls.map((c) => c.url)).toEqual(["http://svc/taxonomy", "http://svc/healthz"]);
  });
});

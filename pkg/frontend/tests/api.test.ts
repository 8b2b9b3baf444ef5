import { describe, expect, it } from "vitest";
import { ApiError, GatewayApi } from "../src/api.js";
import { makeRow } from "./helpers.js";

function fakeFetch(routes: Record<string, { status?: number; body: unknown }>) {
  const calls: Array<{ url: string; init?: RequestInit }> = [];
  const impl = async (url: string, init?: RequestInit): Promise<Response> => {
    calls.push({ url, init });
    const key = `${init?.method ?? "GET"} ${url}`;
    const route = routes[key];
    if (!route) throw new Error(`no route for ${key}`);
    return new Response(JSON.stringify(route.body), {
      status: route.status ?? 200,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { impl, calls };
}

describe("GatewayApi", () => {
  it("fetches rows", async () => {
    const { impl } = fakeFetch({
      "GET /api/rows": { body: { rows: [makeRow(1), makeRow(2)] } },
    });
    const api = new GatewayApi("", impl);
    const rows = await api.rows();
    expect(rows.map((r) => r.row_id)).toEqual([1, 2]);
  });

  it("passes the limit through as a query parameter", async () => {
    const { impl, calls } = fakeFetch({
      "GET /api/rows?limit=5": { body: { rows: [] } },
    });
    await new GatewayApi("", impl).rows(5);
    expect(calls[0].url).toBe("/api/rows?limit=5");
  });

  it("PATCHes a target edit and returns the server row", async () => {
    const serverRow = makeRow(7, { status: "OK", target_provenance: "human_edited" });
    const { impl, calls } = fakeFetch({
      "PATCH /api/rows/7/target": { body: serverRow },
    });
    const row = await new GatewayApi("", impl).editTarget(7, 10.5);
    expect(row.status).toBe("OK");
    expect(JSON.parse(calls[0].init!.body as string)).toEqual({ target: 10.5 });
  });

  it("surfaces error details as ApiError", async () => {
    const { impl } = fakeFetch({
      "POST /api/recalibrate": {
        status: 409,
        body: { detail: "NoCorrections: no human-edited rows" },
      },
    });
    const api = new GatewayApi("", impl);
    await expect(api.recalibrate()).rejects.toThrowError(ApiError);
    await expect(api.recalibrate()).rejects.toThrowError(/NoCorrections/);
  });

  it("recalibrate returns the receipt", async () => {
    const { impl } = fakeFetch({
      "POST /api/recalibrate": {
        body: { ok: true, model_version: 4, mode: "manual" },
      },
    });
    const receipt = await new GatewayApi("", impl).recalibrate();
    expect(receipt.model_version).toBe(4);
  });

  it("export url points at the gateway download endpoint", () => {
    expect(new GatewayApi().exportNonOkUrl()).toBe("/api/export/nonok");
  });
});

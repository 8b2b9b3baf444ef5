import type {
  GatewayConfig,
  RecalibrationMetrics,
  RecalibrationReceipt,
  RowRecord,
} from "./types.js";

// Thin typed wrappers over the gateway REST API. `fetchImpl` is
// injectable so tests can run without a server.

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiError extends Error {
  constructor(public status: number, detail: string) {
    super(detail);
  }
}

async function asJson<T>(response: Response): Promise<T> {
  if (!response.ok) {
    let detail = `HTTP ${response.status}`;
    try {
      const body = await response.json();
      if (body && typeof body.detail === "string") detail = body.detail;
    } catch {
      // body was not JSON; keep the status text
    }
    throw new ApiError(response.status, detail);
  }
  return response.json() as Promise<T>;
}

export class GatewayApi {
  constructor(private base = "", private fetchImpl: FetchLike = fetch) {}

  async config(): Promise<GatewayConfig> {
    return asJson(await this.fetchImpl(`${this.base}/api/config`));
  }

  async rows(limit?: number): Promise<RowRecord[]> {
    const suffix = limit ? `?limit=${limit}` : "";
    const doc = await asJson<{ rows: RowRecord[] }>(
      await this.fetchImpl(`${this.base}/api/rows${suffix}`));
    return doc.rows;
  }

  async editTarget(rowId: number, target: number): Promise<RowRecord> {
    return asJson(await this.fetchImpl(
      `${this.base}/api/rows/${rowId}/target`, {
        method: "PATCH",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ target }),
      }));
  }

  async recalibrate(): Promise<RecalibrationReceipt> {
    return asJson(await this.fetchImpl(`${this.base}/api/recalibrate`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ mode: "manual" }),
    }));
  }

  async recalibrationMetrics(): Promise<RecalibrationMetrics> {
    return asJson(await this.fetchImpl(`${this.base}/api/metrics/recalibration`));
  }

  exportNonOkUrl(): string {
    return `${this.base}/api/export/nonok`;
  }

  streamUrl(): string {
    return `${this.base}/api/stream`;
  }
}

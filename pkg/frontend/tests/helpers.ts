import type { RowRecord, StreamEventDoc } from "../src/types.js";

export function makeRow(rowId: number, overrides: Partial<RowRecord> = {}): RowRecord {
  return {
    row_id: rowId,
    observation: { ts: rowId, features: { temperature: 70 + rowId, ph: 6.5 } },
    prediction: { predicted: 10.0, confidence: 0.9, model_version: 1 },
    status: "OK",
    target_provenance: "sensor",
    explanation: null,
    ingest_time: rowId,
    publish_time: rowId + 0.001,
    display_time: rowId + 0.002,
    ...overrides,
  };
}

export function created(row: RowRecord): StreamEventDoc {
  return { event: "created", row };
}

export function snapshot(row: RowRecord): StreamEventDoc {
  return { event: "snapshot", row };
}

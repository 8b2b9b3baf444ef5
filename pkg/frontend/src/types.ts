// Mirrors of the gateway's JSON shapes. The server is authoritative for
// every field here; the UI only adds transient edit state on top.

export interface ObservationDoc {
  ts: number;
  features: Record<string, number>;
  target?: number | null;
}

export interface PredictionDoc {
  predicted: number;
  confidence: number;
  model_version: number;
}

export interface ExplanationDoc {
  text: string;
  model_name: string;
  flags_recalibration: boolean;
}

export interface RowRecord {
  row_id: number;
  observation: ObservationDoc;
  prediction: PredictionDoc;
  status: string;
  target_provenance: string;
  explanation: ExplanationDoc | null;
  ingest_time: number;
  publish_time: number;
  display_time: number;
}

// RowRecord plus client-only edit state. `dirty` is true only while an
// edit has been typed but the PATCH has not round-tripped yet.
export interface RowViewModel {
  row: RowRecord;
  editing: boolean;
  dirty: boolean;
}

export type StreamEventKind =
  | "snapshot"
  | "snapshot_end"
  | "created"
  | "target_edited"
  | "explanation_attached";

export interface StreamEventDoc {
  event: StreamEventKind;
  row?: RowRecord;
}

export interface FeatureConfig {
  name: string;
  unit: string;
  required: boolean;
  min: number | null;
  max: number | null;
}

export interface GatewayConfig {
  features: FeatureConfig[];
  target_name: string;
  deviation_policy: { mode: string; threshold: number };
}

export interface RecalibrationReceipt {
  ok: boolean;
  model_version: number;
  mode: string;
}

export interface RecalibrationMetrics {
  nonok_window_fraction: number;
  auto_fires: number;
  corrections_pending: number;
}

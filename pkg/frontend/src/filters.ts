import type { RowRecord } from "./types.js";

// Client-side filtering for the chart view. Filtering never talks to the
// server; it only narrows what the charts are computed from.

export interface RangeFilter {
  feature: string;
  min: number;
  max: number;
}

export interface FilterState {
  status: string | null; // "OK" | "NonOK" | null for all
  ranges: RangeFilter[];
}

export function emptyFilter(): FilterState {
  return { status: null, ranges: [] };
}

export function rowPasses(row: RowRecord, filter: FilterState): boolean {
  if (filter.status !== null && row.status !== filter.status) return false;
  for (const range of filter.ranges) {
    const value = row.observation.features[range.feature];
    if (value === undefined || value < range.min || value > range.max) {
      return false;
    }
  }
  return true;
}

export function applyFilters(rows: RowRecord[], filter: FilterState): RowRecord[] {
  return rows.filter((r) => rowPasses(r, filter));
}

export function setRange(filter: FilterState, feature: string,
                         min: number, max: number): FilterState {
  const ranges = filter.ranges.filter((r) => r.feature !== feature);
  ranges.push({ feature, min, max });
  return { status: filter.status, ranges };
}

export function clearRange(filter: FilterState, feature: string): FilterState {
  return {
    status: filter.status,
    ranges: filter.ranges.filter((r) => r.feature !== feature),
  };
}

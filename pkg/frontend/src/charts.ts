import type { RowRecord } from "./types.js";

// Chart data extraction plus tiny SVG renderers. Everything here is a
// pure function of the row list so it can be unit tested without a DOM.

export const SERIES_WINDOW = 500;

export interface TimeseriesPoint {
  ts: number;
  predicted: number;
  actual: number | null; // null leaves a gap, no interpolation
}

export function timeseriesData(rows: RowRecord[],
                               window: number = SERIES_WINDOW): TimeseriesPoint[] {
  return rows.slice(-window).map((r) => ({
    ts: r.observation.ts,
    predicted: r.prediction.predicted,
    actual: typeof r.observation.target === "number" ? r.observation.target : null,
  }));
}

export interface StatusCounts {
  ok: number;
  nonok: number;
}

export function statusCounts(rows: RowRecord[]): StatusCounts {
  let ok = 0;
  let nonok = 0;
  for (const r of rows) {
    if (r.status === "NonOK") nonok += 1;
    else ok += 1;
  }
  return { ok, nonok };
}

// -- SVG rendering --------------------------------------------------

function scale(domainLo: number, domainHi: number,
               rangeLo: number, rangeHi: number): (v: number) => number {
  const span = domainHi - domainLo || 1;
  return (v) => rangeLo + ((v - domainLo) / span) * (rangeHi - rangeLo);
}

function polylines(points: Array<[number, number] | null>): string[] {
  // split at nulls so gaps stay gaps
  const runs: string[] = [];
  let current: string[] = [];
  for (const p of points) {
    if (p === null) {
      if (current.length > 1) runs.push(current.join(" "));
      current = [];
    } else {
      current.push(`${p[0].toFixed(1)},${p[1].toFixed(1)}`);
    }
  }
  if (current.length > 1) runs.push(current.join(" "));
  return runs;
}

export function renderTimeseriesSvg(points: TimeseriesPoint[],
                                    width = 640, height = 220): string {
  if (points.length === 0) {
    return `<svg viewBox="0 0 ${width} ${height}"></svg>`;
  }
  const values = points.flatMap((p) =>
    p.actual === null ? [p.predicted] : [p.predicted, p.actual]);
  const lo = Math.min(...values);
  const hi = Math.max(...values);
  const x = scale(0, Math.max(points.length - 1, 1), 30, width - 8);
  const y = scale(lo, hi, height - 18, 8);
  const predicted = polylines(points.map((p, i) => [x(i), y(p.predicted)]));
  const actual = polylines(points.map((p, i) =>
    p.actual === null ? null : [x(i), y(p.actual)]));
  const lines = [
    ...predicted.map((pts) =>
      `<polyline fill="none" stroke="#2563eb" stroke-width="1.5" points="${pts}"/>`),
    ...actual.map((pts) =>
      `<polyline fill="none" stroke="#16a34a" stroke-width="1.5" points="${pts}"/>`),
  ];
  return `<svg viewBox="0 0 ${width} ${height}">` +
    `<text x="34" y="14" class="chart-label chart-predicted">predicted</text>` +
    `<text x="110" y="14" class="chart-label chart-actual">actual</text>` +
    lines.join("") + `</svg>`;
}

export function renderStatusBarsSvg(counts: StatusCounts,
                                    width = 240, height = 160): string {
  const top = Math.max(counts.ok, counts.nonok, 1);
  const barHeight = (n: number) => (n / top) * (height - 44);
  const bars = [
    { label: "OK", n: counts.ok, x: 40, color: "#16a34a" },
    { label: "NonOK", n: counts.nonok, x: 140, color: "#dc2626" },
  ].map((b) => {
    const h = barHeight(b.n);
    const y = height - 24 - h;
    return `<rect x="${b.x}" y="${y}" width="60" height="${h}" fill="${b.color}"/>` +
      `<text x="${b.x + 30}" y="${height - 8}" text-anchor="middle" class="chart-label">${b.label}</text>` +
      `<text x="${b.x + 30}" y="${Math.max(y - 4, 12)}" text-anchor="middle" class="chart-label">${b.n}</text>`;
  });
  return `<svg viewBox="0 0 ${width} ${height}">${bars.join("")}</svg>`;
}

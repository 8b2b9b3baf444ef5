import { describe, expect, it } from "vitest";
import { RowStore } from "../src/store.js";
import { created, makeRow, snapshot } from "./helpers.js";

describe("RowStore", () => {
  it("appends created rows in order", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1)));
    store.apply(created(makeRow(2)));
    store.apply(created(makeRow(3)));
    expect(store.all().map((vm) => vm.row.row_id)).toEqual([1, 2, 3]);
  });

  it("deduplicates by row_id across snapshot replays", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1)));
    store.apply(created(makeRow(2)));
    // reconnect: the server replays both rows as snapshot, then one new
    store.apply(snapshot(makeRow(1)));
    store.apply(snapshot(makeRow(2)));
    store.apply({ event: "snapshot_end" });
    store.apply(created(makeRow(3)));
    expect(store.size()).toBe(3);
    expect(store.all().map((vm) => vm.row.row_id)).toEqual([1, 2, 3]);
  });

  it("server events overwrite rows and clear pending edit state", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1)));
    store.beginEdit(1);
    store.markDirty(1);
    const edited = makeRow(1, { status: "NonOK", target_provenance: "human_edited" });
    store.apply({ event: "target_edited", row: edited });
    const vm = store.get(1)!;
    expect(vm.row.status).toBe("NonOK");
    expect(vm.dirty).toBe(false);
  });

  it("dirty is only set while editing", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1)));
    store.markDirty(1); // not editing yet, must stay clean
    expect(store.get(1)!.dirty).toBe(false);
    store.beginEdit(1);
    store.markDirty(1);
    expect(store.get(1)!.dirty).toBe(true);
  });

  it("reconcileEdit takes the server row verbatim", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1, {
      observation: { ts: 1, features: { temperature: 71, ph: 6.5 }, target: 12 },
      status: "NonOK",
    })));
    store.beginEdit(1);
    store.markDirty(1);
    // server classified the new target as OK; the UI must not second-guess
    const serverRow = makeRow(1, {
      observation: { ts: 1, features: { temperature: 71, ph: 6.5 }, target: 10.5 },
      status: "OK",
      target_provenance: "human_edited",
    });
    store.reconcileEdit(serverRow);
    const vm = store.get(1)!;
    expect(vm.row.status).toBe("OK");
    expect(vm.row.observation.target).toBe(10.5);
    expect(vm.editing).toBe(false);
    expect(vm.dirty).toBe(false);
  });

  it("revertEdit keeps the last server state", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1, {
      observation: { ts: 1, features: { temperature: 71, ph: 6.5 }, target: 12 },
    })));
    store.beginEdit(1);
    store.markDirty(1);
    store.revertEdit(1);
    const vm = store.get(1)!;
    expect(vm.row.observation.target).toBe(12);
    expect(vm.editing).toBe(false);
    expect(vm.dirty).toBe(false);
  });

  it("notifies listeners on live events but not per snapshot row", () => {
    const store = new RowStore();
    let calls = 0;
    store.onChange(() => { calls += 1; });
    store.apply(snapshot(makeRow(1)));
    store.apply(snapshot(makeRow(2)));
    expect(calls).toBe(0);
    store.apply({ event: "snapshot_end" });
    expect(calls).toBe(1);
    store.apply(created(makeRow(3)));
    expect(calls).toBe(2);
  });

  it("latest(n) returns the n most recent rows", () => {
    const store = new RowStore();
    for (let i = 1; i <= 10; i++) store.apply(created(makeRow(i)));
    expect(store.latest(3).map((vm) => vm.row.row_id)).toEqual([8, 9, 10]);
  });

  it("attaches explanations to existing rows", () => {
    const store = new RowStore();
    store.apply(created(makeRow(1)));
    const explained = makeRow(1, {
      explanation: { text: "deviation traced to temperature", model_name: "llm", flags_recalibration: true },
    });
    store.apply({ event: "explanation_attached", row: explained });
    expect(store.get(1)!.row.explanation?.flags_recalibration).toBe(true);
  });
});

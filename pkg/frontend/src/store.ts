import type { RowRecord, RowViewModel, StreamEventDoc } from "./types.js";

// Client-side row store. Keyed by row_id so snapshot replays after a
// reconnect never produce duplicates; insertion order is kept for the
// table and charts. Status is never computed here: whatever the server
// last sent is what gets displayed.

export class RowStore {
  private rows = new Map<number, RowViewModel>();
  private order: number[] = [];
  private listeners: Array<() => void> = [];

  onChange(fn: () => void): void {
    this.listeners.push(fn);
  }

  private notify(): void {
    for (const fn of this.listeners) fn();
  }

  apply(doc: StreamEventDoc): void {
    if (doc.event === "snapshot_end") {
      this.notify();
      return;
    }
    const row = doc.row;
    if (!row) return;
    const existing = this.rows.get(row.row_id);
    if (existing) {
      // server update wins; a pending local edit is abandoned because
      // the server has already spoken for this row
      existing.row = row;
      existing.dirty = false;
    } else {
      this.rows.set(row.row_id, { row, editing: false, dirty: false });
      this.order.push(row.row_id);
    }
    if (doc.event !== "snapshot") this.notify();
  }

  get(rowId: number): RowViewModel | undefined {
    return this.rows.get(rowId);
  }

  all(): RowViewModel[] {
    return this.order.map((id) => this.rows.get(id)!);
  }

  size(): number {
    return this.order.length;
  }

  latest(n: number): RowViewModel[] {
    return this.order.slice(-n).map((id) => this.rows.get(id)!);
  }

  // -- edit lifecycle -----------------------------------------------

  beginEdit(rowId: number): void {
    const vm = this.rows.get(rowId);
    if (vm) {
      vm.editing = true;
      this.notify();
    }
  }

  markDirty(rowId: number): void {
    const vm = this.rows.get(rowId);
    if (vm && vm.editing) vm.dirty = true;
  }

  // Server responded to the PATCH: take its row verbatim.
  reconcileEdit(serverRow: RowRecord): void {
    const vm = this.rows.get(serverRow.row_id);
    if (!vm) return;
    vm.row = serverRow;
    vm.editing = false;
    vm.dirty = false;
    this.notify();
  }

  // PATCH failed: drop the pending value, keep the last server state.
  revertEdit(rowId: number): void {
    const vm = this.rows.get(rowId);
    if (!vm) return;
    vm.editing = false;
    vm.dirty = false;
    this.notify();
  }
}

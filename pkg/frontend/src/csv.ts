/**
 * CSV loading with column-contract validation.  A panel declares the
 * columns it needs; a file missing any of them is rejected before any
 * drawing happens, with the offending path in the error.
 */

import * as fs from "node:fs";
import Papa from "papaparse";

export class CsvError extends Error {
  constructor(readonly path: string, message: string) {
    super(`${path}: ${message}`);
  }
}

export interface Table {
  path: string;
  columns: string[];
  rows: Record<string, number>[];
}

export function loadCsv(path: string, requiredColumns: string[]): Table {
  let text: string;
  try {
    text = fs.readFileSync(path, "utf8");
  } catch {
    throw new CsvError(path, "file not found or unreadable");
  }
  const parsed = Papa.parse<Record<string, string>>(text.trim(), {
    header: true,
    skipEmptyLines: true,
  });
  if (parsed.errors.length > 0) {
    throw new CsvError(path, `parse error: ${parsed.errors[0].message}`);
  }
  const columns = parsed.meta.fields ?? [];
  for (const col of requiredColumns) {
    if (!columns.includes(col)) {
      throw new CsvError(path, `missing required column ${JSON.stringify(col)}`);
    }
  }
  const rows = parsed.data.map((raw) => {
    const row: Record<string, number> = {};
    for (const col of columns) {
      row[col] = Number(raw[col]);
    }
    return row;
  });
  return { path, columns, rows };
}

export function column(table: Table, name: string): number[] {
  return table.rows.map((r) => r[name]);
}

/**
 * Panel rendering.  Ground-truth samples draw faded blue, generated
 * samples opaque orange; heatmaps use the shared colormap; line panels
 * draw one polyline per group with a framed axes box.
 */

import { column, loadCsv, Table } from "./csv.js";
import { FigureSpec, PanelSpec } from "./figspec.js";
import {
  AXIS_GRAY, Canvas, colormap, SAMPLE_ORANGE, SERIES_COLORS, TRUTH_BLUE,
} from "./raster.js";

const MARGIN = 26;

interface View {
  x0: number;
  y0: number;
  w: number;
  h: number;
  xMin: number;
  xMax: number;
  yMin: number;
  yMax: number;
}

function toPx(view: View, x: number, y: number): [number, number] {
  const fx = (x - view.xMin) / (view.xMax - view.xMin || 1);
  const fy = (y - view.yMin) / (view.yMax - view.yMin || 1);
  return [view.x0 + fx * (view.w - 1), view.y0 + (1 - fy) * (view.h - 1)];
}

function normalizeValues(values: number[], logValues: boolean): number[] {
  const finite = values.filter(Number.isFinite);
  if (finite.length === 0) return values.map(() => 0);
  if (logValues) {
    const max = Math.max(...finite);
    return values.map((v) => (Number.isFinite(v) ? Math.exp(v - max) : 0));
  }
  const lo = Math.min(...finite);
  const hi = Math.max(...finite);
  return values.map((v) => (Number.isFinite(v) ? (v - lo) / (hi - lo || 1) : 0));
}

function drawHeatmap(canvas: Canvas, view: View, table: Table, logValues: boolean): void {
  const xs = [...new Set(column(table, "x1"))].sort((a, b) => a - b);
  const ys = [...new Set(column(table, "x2"))].sort((a, b) => a - b);
  const vals = normalizeValues(column(table, "value"), logValues);
  const xi = new Map(xs.map((v, i) => [v, i]));
  const yi = new Map(ys.map((v, i) => [v, i]));
  const grid = new Float64Array(xs.length * ys.length);
  table.rows.forEach((row, i) => {
    grid[yi.get(row.x2)! * xs.length + xi.get(row.x1)!] = vals[i];
  });
  for (let py = 0; py < view.h; py++) {
    for (let px = 0; px < view.w; px++) {
      const gx = Math.min(Math.floor((px / view.w) * xs.length), xs.length - 1);
      const gy = Math.min(Math.floor((1 - py / view.h) * ys.length), ys.length - 1);
      canvas.set(view.x0 + px, view.y0 + py, colormap(grid[gy * xs.length + gx]));
    }
  }
}

function drawScatter(canvas: Canvas, view: View, table: Table,
                     color: [number, number, number], alpha: number): void {
  for (const row of table.rows) {
    const [px, py] = toPx(view, row.x1, row.x2);
    canvas.dot(px, py, 1, color, alpha);
  }
}

function dataExtent(tables: Table[]): [number, number, number, number] {
  let xMin = Infinity, xMax = -Infinity, yMin = Infinity, yMax = -Infinity;
  for (const t of tables) {
    for (const row of t.rows) {
      if (Number.isFinite(row.x1) && Number.isFinite(row.x2)) {
        xMin = Math.min(xMin, row.x1);
        xMax = Math.max(xMax, row.x1);
        yMin = Math.min(yMin, row.x2);
        yMax = Math.max(yMax, row.x2);
      }
    }
  }
  if (!Number.isFinite(xMin)) return [-1, 1, -1, 1];
  const padX = 0.05 * (xMax - xMin || 1);
  const padY = 0.05 * (yMax - yMin || 1);
  return [xMin - padX, xMax + padX, yMin - padY, yMax + padY];
}

function groupRows(table: Table, groupBy?: string): Map<string, Record<string, number>[]> {
  const groups = new Map<string, Record<string, number>[]>();
  for (const row of table.rows) {
    const key = groupBy === undefined ? "" : String(row[groupBy]);
    if (!groups.has(key)) groups.set(key, []);
    groups.get(key)!.push(row);
  }
  return groups;
}

function drawLines(canvas: Canvas, view: View, table: Table, xCol: string,
                   yCol: string, groupBy: string | undefined,
                   logY: boolean, logX: boolean): void {
  const tx = (v: number) => (logX ? Math.log10(v) : v);
  const ty = (v: number) => (logY ? Math.log10(v) : v);
  const pts = table.rows
    .map((r) => [tx(r[xCol]), ty(r[yCol])] as [number, number])
    .filter(([a, b]) => Number.isFinite(a) && Number.isFinite(b));
  if (pts.length === 0) return;
  view.xMin = Math.min(...pts.map((p) => p[0]));
  view.xMax = Math.max(...pts.map((p) => p[0]));
  view.yMin = Math.min(...pts.map((p) => p[1]));
  view.yMax = Math.max(...pts.map((p) => p[1]));
  let series = 0;
  for (const [, rows] of [...groupRows(table, groupBy).entries()].sort()) {
    const color = SERIES_COLORS[series % SERIES_COLORS.length];
    series += 1;
    let prev: [number, number] | null = null;
    for (const row of rows) {
      const x = tx(row[xCol]);
      const y = ty(row[yCol]);
      if (!Number.isFinite(x) || !Number.isFinite(y)) {
        prev = null;
        continue;
      }
      const [px, py] = toPx(view, x, y);
      if (prev) canvas.line(prev[0], prev[1], px, py, color);
      prev = [px, py];
    }
  }
}

const PANEL_COLUMNS: Record<string, string[]> = {
  heatmap: ["x1", "x2", "value"],
  samples: ["x1", "x2"],
};

function renderPanel(canvas: Canvas, spec: PanelSpec, x0: number, y0: number,
                     w: number, h: number): void {
  const view: View = {
    x0: x0 + MARGIN, y0: y0 + MARGIN,
    w: w - 2 * MARGIN, h: h - 2 * MARGIN,
    xMin: -1, xMax: 1, yMin: -1, yMax: 1,
  };
  if (spec.kind === "heatmap") {
    const table = loadCsv(spec.csv, PANEL_COLUMNS.heatmap);
    drawHeatmap(canvas, view, table, spec.log_values);
  } else if (spec.kind === "scatter_overlay") {
    const heat = spec.heatmap_csv !== undefined
      ? loadCsv(spec.heatmap_csv, PANEL_COLUMNS.heatmap) : undefined;
    const truth = spec.truth_csv !== undefined
      ? loadCsv(spec.truth_csv, PANEL_COLUMNS.samples) : undefined;
    const samples = spec.samples_csv !== undefined
      ? loadCsv(spec.samples_csv, PANEL_COLUMNS.samples) : undefined;
    if (heat) drawHeatmap(canvas, view, heat, spec.log_values);
    const ext = spec.extent ?? (heat
      ? [Math.min(...column(heat, "x1")), Math.max(...column(heat, "x1")),
         Math.min(...column(heat, "x2")), Math.max(...column(heat, "x2"))]
      : dataExtent([truth, samples].filter((t): t is Table => t !== undefined)));
    [view.xMin, view.xMax, view.yMin, view.yMax] = ext;
    if (truth) drawScatter(canvas, view, truth, TRUTH_BLUE, 0.25);
    if (samples) drawScatter(canvas, view, samples, SAMPLE_ORANGE, 0.9);
  } else {
    const table = loadCsv(spec.csv, [spec.x, spec.y]);
    drawLines(canvas, view, table, spec.x, spec.y, spec.group_by,
              spec.kind === "log_line", spec.kind === "log_line" && spec.log_x);
  }
  canvas.frame(view.x0 - 1, view.y0 - 1, view.w + 2, view.h + 2, AXIS_GRAY);
  if (spec.title) {
    canvas.text(x0 + MARGIN, y0 + 8, spec.title.slice(0, Math.floor((w - 2 * MARGIN) / 6)),
                AXIS_GRAY);
  }
}

export function renderFigure(spec: FigureSpec): Canvas {
  const canvas = new Canvas(spec.cols * spec.panel_width,
                            spec.rows * spec.panel_height);
  spec.panels.forEach((panel, i) => {
    const row = Math.floor(i / spec.cols);
    const col = i % spec.cols;
    renderPanel(canvas, panel, col * spec.panel_width, row * spec.panel_height,
                spec.panel_width, spec.panel_height);
  });
  return canvas;
}
